#include "wmlab/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <thread>

#include "wmlab/imageio.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;

std::string_view to_string(Provenance p) {
  return p == Provenance::bypass ? "bypass" : "ablation";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "bypass") return Provenance::bypass;
  if (s == "ablation") return Provenance::ablation;
  throw std::invalid_argument("unknown provenance: " + std::string(s));
}

std::string_view to_string(RemovalMethod m) {
  switch (m) {
    case RemovalMethod::inversion: return "inversion";
    case RemovalMethod::forward: return "forward";
    case RemovalMethod::jpeg: return "jpeg";
    case RemovalMethod::awgn: return "awgn";
    case RemovalMethod::none: return "none";
  }
  return "none";
}

AttackDataset::AttackDataset(Provenance provenance, std::vector<ImageTensor> inputs,
                             std::vector<ImageTensor> responses,
                             std::vector<std::string> query_ids)
    : provenance_(provenance),
      inputs_(std::move(inputs)),
      responses_(std::move(responses)),
      query_ids_(std::move(query_ids)) {
  if (inputs_.empty()) throw std::invalid_argument("AttackDataset: no pairs");
  if (inputs_.size() != responses_.size() || inputs_.size() != query_ids_.size()) {
    throw std::invalid_argument("AttackDataset: inputs, responses and ids differ in count");
  }
  for (std::size_t i = 0; i < inputs_.size(); ++i) {
    require_same_shape(inputs_[i].shape(), inputs_[0].shape(), "AttackDataset input");
    require_same_shape(responses_[i].shape(), inputs_[0].shape(), "AttackDataset response");
  }
}

namespace {

std::string pair_name(std::size_t i, const char* side) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu_%s.png", i, side);
  return buf;
}

}  // namespace

void AttackDataset::save(const std::filesystem::path& dir) const {
  json pairs = json::array();
  for (std::size_t i = 0; i < size(); ++i) {
    write_png(dir / "pairs" / pair_name(i, "in"), inputs_[i]);
    write_png(dir / "pairs" / pair_name(i, "out"), responses_[i]);
    pairs.push_back({{"index", i},
                     {"query_id", query_ids_[i]},
                     {"input", "pairs/" + pair_name(i, "in")},
                     {"response", "pairs/" + pair_name(i, "out")}});
  }
  json index = {{"provenance", std::string(to_string(provenance_))},
                {"pairs", pairs},
                {"queries_issued", queries_issued},
                {"exclusions", exclusions},
                {"bypass_psnr_stats", bypass_psnr_stats}};
  write_file(dir / "index.json", index.dump(2) + "\n");
}

AttackDataset AttackDataset::load(const std::filesystem::path& dir) {
  const json index = json::parse(read_file(dir / "index.json"));
  std::vector<ImageTensor> in, out;
  std::vector<std::string> ids;
  for (const auto& p : index.at("pairs")) {
    in.push_back(read_png(dir / p.at("input").get<std::string>(), 3));
    out.push_back(read_png(dir / p.at("response").get<std::string>(), 3));
    ids.push_back(p.at("query_id"));
  }
  AttackDataset ds(provenance_from_string(index.at("provenance").get<std::string>()),
                   std::move(in), std::move(out), std::move(ids));
  ds.queries_issued = index.value("queries_issued", 0L);
  ds.exclusions = index.value("exclusions", json::array());
  ds.bypass_psnr_stats = index.value("bypass_psnr_stats", json());
  return ds;
}

CurationResult curate_bypass_set(const std::vector<ImageTensor>& clean_pool,
                                 const nn::Network* gnet_probe, int n, double tau_db) {
  if (n < 1) throw std::invalid_argument("curate_bypass_set: n must be >= 1");
  CurationResult r;
  std::vector<double> accepted_psnr;
  for (const auto& img : clean_pool) {
    if (static_cast<int>(r.images.size()) == n) break;
    ++r.examined;
    if (gnet_probe) {
      const double p = psnr(img, nn::to_image(gnet_probe->forward(nn::to_tensor(img)), 0));
      if (p < tau_db) {
        ++r.discarded;
        continue;
      }
      accepted_psnr.push_back(p);
    }
    r.images.push_back(img);
  }
  r.discard_rate = r.examined ? double(r.discarded) / r.examined : 0.0;
  r.stats = {{"examined", r.examined},
             {"discarded", r.discarded},
             {"discard_rate", r.discard_rate},
             {"tau_db", tau_db},
             {"probe", gnet_probe != nullptr}};
  if (!accepted_psnr.empty()) {
    r.stats["mean_probe_psnr"] =
        std::accumulate(accepted_psnr.begin(), accepted_psnr.end(), 0.0) / accepted_psnr.size();
    r.stats["min_probe_psnr"] = *std::min_element(accepted_psnr.begin(), accepted_psnr.end());
  }
  if (static_cast<int>(r.images.size()) < n) {
    throw PoolExhausted("curate_bypass_set: pool exhausted after accepting " +
                            std::to_string(r.images.size()) + " of " + std::to_string(n),
                        std::move(r));
  }
  return r;
}

namespace {

AttackDataset collect(GatewayClient& client, const std::vector<ImageTensor>& queries,
                      const CollectOptions& opts, Provenance provenance) {
  if (queries.empty()) throw std::invalid_argument("collect_pairs: no queries");
  const std::size_t n = queries.size();
  std::vector<std::optional<QueryResponse>> responses(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        responses[i] = client.query(queries[i]);
      } catch (const QuotaExceeded& e) {
        errors[i] = std::string("quota: ") + e.what();
      }
    }
  };
  const int threads = std::max(1, opts.parallelism);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<ImageTensor> in, out;
  std::vector<std::string> ids;
  json exclusions = json::array();
  long flagged = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!responses[i]) {
      exclusions.push_back({{"index", i}, {"query_id", nullptr}, {"reason", errors[i]}});
      continue;
    }
    if (responses[i]->warning) {
      ++flagged;
      exclusions.push_back(
          {{"index", i}, {"query_id", responses[i]->query_id}, {"reason", "warning"}});
      continue;
    }
    in.push_back(queries[i]);
    out.push_back(responses[i]->image);
    ids.push_back(responses[i]->query_id);
  }
  const json report = {{"queries_issued", n},
                       {"flagged", flagged},
                       {"excluded", exclusions.size()},
                       {"usable_pairs", in.size()},
                       {"min_pairs", opts.min_pairs}};
  if (in.empty() || in.size() < opts.min_pairs) {
    throw AttackAborted("attack aborted: " + std::to_string(in.size()) + " usable pairs from " +
                            std::to_string(n) + " queries (" + std::to_string(flagged) +
                            " flagged)",
                        report);
  }
  AttackDataset ds(provenance, std::move(in), std::move(out), std::move(ids));
  ds.queries_issued = static_cast<long>(n);
  ds.exclusions = std::move(exclusions);
  return ds;
}

}  // namespace

AttackDataset collect_pairs(GatewayClient& client, const std::vector<ImageTensor>& bypass_set,
                            const CollectOptions& opts) {
  return collect(client, bypass_set, opts, Provenance::bypass);
}

AttackDataset ablation_collect(GatewayClient& client, const std::vector<ImageTensor>& domain_a,
                               const CollectOptions& opts) {
  return collect(client, domain_a, opts, Provenance::ablation);
}

namespace {

void require_bypass(const AttackDataset& ds, const char* who) {
  if (ds.provenance() != Provenance::bypass) {
    throw std::invalid_argument(std::string(who) +
                                ": needs bypass pairs; use ablation_train for ablation data");
  }
}

}  // namespace

FitResult train_inverse(const AttackDataset& ds, const nn::NetworkSpec& spec,
                        const TrainingConfig& config, const EpochLog& log) {
  require_bypass(ds, "train_inverse");
  if (spec.kind != nn::NetKind::hnet_inverse) {
    throw std::invalid_argument("train_inverse: spec kind must be hnet_inverse");
  }
  return fit_image_map(ds.responses(), ds.inputs(), spec, config, log);
}

FitResult train_surrogate(const AttackDataset& ds, const nn::NetworkSpec& spec,
                          const TrainingConfig& config, const EpochLog& log) {
  require_bypass(ds, "train_surrogate");
  if (spec.kind != nn::NetKind::snet) {
    throw std::invalid_argument("train_surrogate: spec kind must be snet");
  }
  return fit_image_map(ds.inputs(), ds.responses(), spec, config, log);
}

AblationModels ablation_train(const AttackDataset& ds, const nn::NetworkSpec& inverse_spec,
                              const nn::NetworkSpec& surrogate_spec,
                              const TrainingConfig& config, const EpochLog& log) {
  if (ds.provenance() != Provenance::ablation) {
    throw std::invalid_argument("ablation_train: needs ablation pairs");
  }
  return {fit_image_map(ds.responses(), ds.inputs(), inverse_spec, config, log),
          fit_image_map(ds.inputs(), ds.responses(), surrogate_spec, config, log)};
}

RemovalResult apply_inverse(const nn::Network& inverse, const ImageTensor& b_prime) {
  return apply_inverse_all(inverse, {b_prime}).front();
}

std::vector<RemovalResult> apply_inverse_all(const nn::Network& inverse,
                                             const std::vector<ImageTensor>& b_prime) {
  for (const auto& b : b_prime) {
    if (b.channels() != inverse.spec().in_channels) {
      throw ShapeError("apply_inverse: input " + b.shape().str() + " has wrong channel count");
    }
  }
  std::vector<RemovalResult> out;
  for (auto& img : nn::map_images(inverse, b_prime)) {
    out.push_back({std::move(img), RemovalMethod::inversion, {}, {}, {}, {}});
  }
  return out;
}

Surrogate as_surrogate(const nn::Network& snet) {
  return [&snet](const ImageTensor& a) {
    const nn::Tensor y = snet.forward(nn::to_tensor(a));
    std::vector<double> out(y.sample());
    const std::size_t plane = y.plane();
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < y.c; ++c) out[p * y.c + c] = y.v[c * plane + p];
    return out;
  };
}

std::vector<double> forward_remove_raw(const Surrogate& snet, const ImageTensor& a,
                                       const ImageTensor& b_prime) {
  require_same_shape(a.shape(), b_prime.shape(), "forward_remove");
  const std::vector<double> s = snet(a);
  if (s.size() != a.size()) throw ShapeError("forward_remove: surrogate output size differs");
  const auto av = a.data(), bv = b_prime.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - (s[i] - bv[i]);
  return out;
}

RemovalResult forward_remove(const Surrogate& snet, const ImageTensor& a,
                             const ImageTensor& b_prime) {
  return {ImageTensor::from_unclamped(a.shape(), forward_remove_raw(snet, a, b_prime)),
          RemovalMethod::forward, {}, {}, {}, {}};
}

Residual estimate_noise(const Surrogate& snet, const ImageTensor& a,
                        const ImageTensor& b_prime) {
  require_same_shape(a.shape(), b_prime.shape(), "estimate_noise");
  std::vector<double> s = snet(a);
  if (s.size() != a.size()) throw ShapeError("estimate_noise: surrogate output size differs");
  const auto bv = b_prime.data();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] -= bv[i];
  return {a.shape(), std::move(s), ResidualRole::noise_est};
}

RemovalResult baseline_jpeg(const ImageTensor& b_prime, int quality) {
  return {jpeg_roundtrip(b_prime, quality), RemovalMethod::jpeg, {}, {}, {}, {}};
}

RemovalResult baseline_awgn(const ImageTensor& b_prime, double snr_db, std::uint64_t seed) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("baseline_awgn: snr must be finite");
  const auto d = b_prime.data();
  double power = 0.0;
  for (double v : d) power += v * v;
  power /= d.size();
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> out(d.begin(), d.end());
  for (double& v : out) v += noise(rng);
  return {ImageTensor::from_unclamped(b_prime.shape(), std::move(out)), RemovalMethod::awgn,
          {}, {}, {}, {}};
}

void evaluate_removal(const VictimBundle& bundle, RemovalResult& r, const ImageTensor* b) {
  r.extracted = extract(*bundle.enet, r.b_hat);
  r.correlation_with_delta = normalized_correlation(*r.extracted, bundle.delta.image());
  if (b) {
    r.psnr_vs_unmarked = psnr(r.b_hat, *b);
    r.ms_ssim_vs_unmarked = ms_ssim(r.b_hat, *b);
  }
}

MetricsReport summarize(const std::vector<RemovalResult>& results) {
  if (results.empty()) throw std::invalid_argument("summarize: no results");
  MetricsReport m;
  std::vector<bool> ok;
  double p = 0, s = 0, c = 0;
  for (const auto& r : results) {
    if (!r.correlation_with_delta || !r.psnr_vs_unmarked || !r.ms_ssim_vs_unmarked) {
      throw std::invalid_argument("summarize: result not evaluated");
    }
    ok.push_back(exceeds_extraction_threshold(*r.correlation_with_delta));
    c += *r.correlation_with_delta;
    p += *r.psnr_vs_unmarked;
    s += *r.ms_ssim_vs_unmarked;
  }
  const double n = static_cast<double>(results.size());
  m.psnr_db = p / n;
  m.ms_ssim = s / n;
  m.correlation = c / n;
  m.sr_remove = removal_success_rate(ok);
  m.sample_count = static_cast<int>(results.size());
  m.validate();
  return m;
}

AdditiveCheck verify_additive(const VictimBundle& bundle, const ImageTensor& b,
                              const ImageTensor& b_prime) {
  require_same_shape(b.shape(), b_prime.shape(), "verify_additive");
  AdditiveCheck r;
  r.residual = Residual::difference(b_prime, b, ResidualRole::delta_prime_b);
  r.extracted = extract(*bundle.enet, r.residual.remapped());
  // Nothing was embedded, so there is nothing to correlate.
  if (std::all_of(r.residual.data.begin(), r.residual.data.end(),
                  [](double v) { return v == 0.0; })) {
    r.degenerate = true;
    return r;
  }
  const Correlation c = pearson(r.extracted.data(), bundle.delta.image().data());
  r.correlation = c.value;
  r.degenerate = c.degenerate;
  return r;
}

MetricsReport verify_delta_approx(const VictimBundle& bundle, const ImageTensor& a,
                                  const ImageTensor& b) {
  require_same_shape(a.shape(), b.shape(), "verify_delta_approx");
  const auto marked = embed_all(*bundle.hnet, {a, b}, bundle.delta);
  const Residual da = Residual::difference(marked[0], a, ResidualRole::delta_prime_a);
  const Residual db = Residual::difference(marked[1], b, ResidualRole::delta_prime_b);
  MetricsReport m;
  const ImageTensor ra = da.remapped(), rb = db.remapped();
  m.psnr_db = psnr(ra, rb);
  m.ms_ssim = std::clamp(ms_ssim(ra, rb), 0.0, 1.0);
  if (da.data == db.data) {
    m.correlation = 1.0;
  } else {
    m.correlation = pearson(da.data, db.data).value;
  }
  m.sr_remove = 0.0;
  m.sample_count = 1;
  return m;
}

}  // namespace wmlab
