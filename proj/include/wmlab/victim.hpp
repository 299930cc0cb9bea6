#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "wmlab/image.hpp"
#include "wmlab/nn/networks.hpp"
#include "wmlab/synth.hpp"

namespace wmlab {

namespace nn {
void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);
}  // namespace nn

/// Optimiser and loss settings for one training run.
struct TrainingConfig {
  double beta1 = 10.0;  // fidelity
  double beta2 = 1.0;   // mark
  double beta3 = 0.01;  // adversarial; 0 disables the discriminator
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double disc_learning_rate = 2e-4;
  /// "constant" or "cosine" (decay to zero over the run); plain fits only.
  std::string lr_schedule = "constant";
  std::string null_sample_source = "victim/b+textures";
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

/// Raised when a loss turns non-finite. `manifest` holds the hyperparameters.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json manifest)
      : std::runtime_error(what), manifest(std::move(manifest)) {}
  nlohmann::json manifest;
};

/// Per-epoch progress callback: (stage, epoch, losses).
using EpochLog = std::function<void(const std::string&, int, const nlohmann::json&)>;

/// Result of a plain supervised image-to-image fit.
struct FitResult {
  std::unique_ptr<nn::Network> net;
  nlohmann::json manifest;  // spec, config, loss curve
};

/// Minimises mean MSE(net(inputs[i]), targets[i]). Shared by GNet pretraining
/// and the attacker's surrogate models.
FitResult fit_image_map(const std::vector<ImageTensor>& inputs,
                        const std::vector<ImageTensor>& targets,
                        const nn::NetworkSpec& spec, const TrainingConfig& config,
                        const EpochLog& log = {});

/// Pretrains the task network on (noisy a, clean b) pairs.
/// Rejects datasets whose targets are all constant images.
FitResult train_gnet(const PairSet& data, const nn::NetworkSpec& spec,
                     const TrainingConfig& config, const EpochLog& log = {});

/// b' = HNet(concat(b, delta)), clamped. A grayscale delta is replicated to
/// the carrier channel count when HNet expects that.
ImageTensor embed(const nn::Network& hnet, const ImageTensor& b,
                  const Watermark& delta);
std::vector<ImageTensor> embed_all(const nn::Network& hnet,
                                   const std::vector<ImageTensor>& b,
                                   const Watermark& delta);

/// Watermark-shaped ENet output.
ImageTensor extract(const nn::Network& enet, const ImageTensor& img);
std::vector<ImageTensor> extract_all(const nn::Network& enet,
                                     const std::vector<ImageTensor>& imgs);

/// Frozen GNet plus trained hiding, extraction and discriminator networks.
struct VictimBundle {
  std::unique_ptr<nn::Network> gnet, hnet, enet, disc;
  Watermark delta = Watermark::null_mark({1, 1, 1});
  TrainingConfig config;
  nlohmann::json manifest;

  Shape carrier_shape() const;
  /// Writes weights, watermark.png and manifest.json into `dir`.
  void save(const std::filesystem::path& dir) const;
  static VictimBundle load(const std::filesystem::path& dir);
  /// SHA-256 of manifest.json as written by save().
  std::string manifest_hash() const;
};

/// Trains HNet, ENet and D around a frozen GNet. `train` supplies the
/// clean-side images b = GNet(a); `textures` form the out-of-domain half of
/// the null set.
VictimBundle joint_train(std::unique_ptr<nn::Network> gnet,
                         const std::vector<ImageTensor>& processed,
                         const std::vector<ImageTensor>& textures,
                         const Watermark& delta, const TrainingConfig& config,
                         const nn::NetworkSpec& hnet_spec,
                         const nn::NetworkSpec& enet_spec,
                         const nn::NetworkSpec& disc_spec,
                         const EpochLog& log = {});

}  // namespace wmlab
