#pragma once

#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wmlab/gateway.hpp"
#include "wmlab/image.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/victim.hpp"

// Attacker-side code only sees images and a GatewayClient. The functions
// that take a VictimBundle (verify_*, evaluate_removal, probe-based
// curation) belong to the white-box evaluation harness.

namespace wmlab {

enum class Provenance { bypass, ablation };
std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

/// Query/response pairs harvested from the gateway.
class AttackDataset {
 public:
  AttackDataset(Provenance provenance, std::vector<ImageTensor> inputs,
                std::vector<ImageTensor> responses, std::vector<std::string> query_ids);

  Provenance provenance() const { return provenance_; }
  const std::vector<ImageTensor>& inputs() const { return inputs_; }
  const std::vector<ImageTensor>& responses() const { return responses_; }
  const std::vector<std::string>& query_ids() const { return query_ids_; }
  std::size_t size() const { return inputs_.size(); }

  long queries_issued = 0;
  nlohmann::json exclusions = nlohmann::json::array();  // {index, query_id, reason}
  nlohmann::json bypass_psnr_stats;                   // from curation, if any

  /// `dir/pairs/NNNNNN_{in,out}.png` plus `dir/index.json`.
  void save(const std::filesystem::path& dir) const;
  static AttackDataset load(const std::filesystem::path& dir);

 private:
  Provenance provenance_;
  std::vector<ImageTensor> inputs_, responses_;
  std::vector<std::string> query_ids_;
};

/// Collection ended before a usable dataset existed; the defense held.
class AttackAborted : public std::runtime_error {
 public:
  AttackAborted(const std::string& what, nlohmann::json report)
      : std::runtime_error(what), report(std::move(report)) {}
  nlohmann::json report;
};

struct CurationResult {
  std::vector<ImageTensor> images;
  int examined = 0;
  int discarded = 0;
  double discard_rate = 0.0;
  nlohmann::json stats;  // probe psnr summary when a probe was used
};

class PoolExhausted : public std::runtime_error {
 public:
  PoolExhausted(const std::string& what, CurationResult partial)
      : std::runtime_error(what), partial(std::move(partial)) {}
  CurationResult partial;
};

/// Picks `n` images expected to be GNet fixed points. With a probe network
/// (harness only), images with psnr(x, probe(x)) < tau_db are discarded.
CurationResult curate_bypass_set(const std::vector<ImageTensor>& clean_pool,
                                 const nn::Network* gnet_probe, int n,
                                 double tau_db = 28.0);

struct CollectOptions {
  int parallelism = 1;
  /// Fewer usable pairs than this aborts the attack.
  std::size_t min_pairs = 1;
};

/// One query per image, responses kept in query order. Warned responses are
/// logged in `exclusions` and left out of the pairs.
AttackDataset collect_pairs(GatewayClient& client, const std::vector<ImageTensor>& bypass_set,
                            const CollectOptions& opts = {});
/// Same, with noisy Domain-A queries and provenance = ablation.
AttackDataset ablation_collect(GatewayClient& client, const std::vector<ImageTensor>& domain_a,
                               const CollectOptions& opts = {});

/// Fits HNet^-1: response -> input. Requires bypass provenance.
FitResult train_inverse(const AttackDataset& ds, const nn::NetworkSpec& spec,
                        const TrainingConfig& config, const EpochLog& log = {});
/// Fits SNet: input -> response. Requires bypass provenance.
FitResult train_surrogate(const AttackDataset& ds, const nn::NetworkSpec& spec,
                          const TrainingConfig& config, const EpochLog& log = {});

struct AblationModels {
  FitResult inverse, surrogate;
};
/// The only path that trains attack models on ablation pairs.
AblationModels ablation_train(const AttackDataset& ds, const nn::NetworkSpec& inverse_spec,
                              const nn::NetworkSpec& surrogate_spec,
                              const TrainingConfig& config, const EpochLog& log = {});

enum class RemovalMethod { inversion, forward, jpeg, awgn, none };
std::string_view to_string(RemovalMethod m);

struct RemovalResult {
  ImageTensor b_hat;
  RemovalMethod method = RemovalMethod::none;
  // Filled by evaluate_removal.
  std::optional<ImageTensor> extracted;
  std::optional<double> correlation_with_delta;
  std::optional<double> psnr_vs_unmarked;
  std::optional<double> ms_ssim_vs_unmarked;
};

RemovalResult apply_inverse(const nn::Network& inverse, const ImageTensor& b_prime);
std::vector<RemovalResult> apply_inverse_all(const nn::Network& inverse,
                                             const std::vector<ImageTensor>& b_prime);

/// Raw (unclamped) surrogate output as interleaved HWC samples.
using Surrogate = std::function<std::vector<double>(const ImageTensor&)>;
Surrogate as_surrogate(const nn::Network& snet);

/// a - (SNet(a) - b') before clamping.
std::vector<double> forward_remove_raw(const Surrogate& snet, const ImageTensor& a,
                                       const ImageTensor& b_prime);
/// clamp01(a - (SNet(a) - b')). `a` must be the query that produced b'.
RemovalResult forward_remove(const Surrogate& snet, const ImageTensor& a,
                             const ImageTensor& b_prime);
/// SNet(a) - b', signed.
Residual estimate_noise(const Surrogate& snet, const ImageTensor& a,
                        const ImageTensor& b_prime);

RemovalResult baseline_jpeg(const ImageTensor& b_prime, int quality);
/// White Gaussian noise with power mean(b'^2) / 10^(snr/10), then clamped.
RemovalResult baseline_awgn(const ImageTensor& b_prime, double snr_db, std::uint64_t seed);

// ---- white-box evaluation harness ----

/// Fills extraction and, when `b` is given, quality fields.
void evaluate_removal(const VictimBundle& bundle, RemovalResult& r,
                      const ImageTensor* b = nullptr);
/// Mean quality and SR_Remove over evaluated results.
MetricsReport summarize(const std::vector<RemovalResult>& results);

struct AdditiveCheck {
  ImageTensor extracted;
  double correlation = 0.0;
  bool degenerate = false;
  Residual residual;
};
/// ENet(0.5 + (b' - b) / 2) against delta.
AdditiveCheck verify_additive(const VictimBundle& bundle, const ImageTensor& b,
                              const ImageTensor& b_prime);

/// Compares delta'_a = embed(a) - a with delta'_b = embed(b) - b: psnr and
/// MS-SSIM on the remapped residuals, Pearson on the raw ones. sr_remove is
/// not meaningful here and stays 0.
MetricsReport verify_delta_approx(const VictimBundle& bundle, const ImageTensor& a,
                                  const ImageTensor& b);

}  // namespace wmlab
