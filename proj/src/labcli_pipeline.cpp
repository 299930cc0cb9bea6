#include <chrono>
#include <cstdio>
#include <numeric>

#include "wmlab/attacks.hpp"
#include "wmlab/imageio.hpp"
#include "wmlab/labcli.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string png_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", i);
  return buf;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

void write_images(const fs::path& dir, const std::vector<ImageTensor>& imgs) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < imgs.size(); ++i) write_png(dir / png_name(i), imgs[i]);
}

std::vector<ImageTensor> read_images(const fs::path& dir, std::size_t n) {
  std::vector<ImageTensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(read_png(dir / png_name(i)));
  return out;
}

std::vector<ImageTensor> head(const std::vector<ImageTensor>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

void require(const Run& run, const std::string& rel, const std::string& verb) {
  if (!fs::exists(run.path(rel))) {
    throw std::runtime_error("missing " + run.path(rel).string() + "; run `wmlab " + verb +
                             "` first");
  }
}

Dataset dataset_of(const Run& run) {
  require(run, "dataset/dataset.json", "synth");
  return load_dataset(run.path("dataset"));
}

VictimBundle bundle_of(const Run& run) {
  require(run, "victim/manifest.json", "train-victim");
  return VictimBundle::load(run.path("victim"));
}

EpochLog epoch_logger(Run& run, const std::string& stage) {
  return [&run, stage](const std::string& what, int epoch, const json& row) {
    json d = row;
    d["net"] = what;
    d["epoch"] = epoch;
    run.log(stage, "epoch", d);
    std::fprintf(stderr, "[%s] %s epoch %d %s\n", stage.c_str(), what.c_str(), epoch,
                 row.dump().c_str());
  };
}

// Checkpoint layout shared with the victim bundle: weights + manifest.json.
void save_model(const fs::path& dir, const FitResult& fit, const json& extra) {
  fs::create_directories(dir);
  fit.net->save(dir / "model.bin");
  json m = fit.manifest;
  m["file"] = "model.bin";
  m["kind"] = std::string(nn::to_string(fit.net->spec().kind));
  m["parameter_count"] = fit.net->parameter_count();
  m["parameter_hash"] = fit.net->parameter_hash();
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

std::unique_ptr<nn::Network> load_model(const fs::path& dir) {
  const json m = json::parse(read_file(dir / "manifest.json"));
  auto net = nn::Network::create(m.at("spec").get<nn::NetworkSpec>());
  net->load(dir / m.at("file").get<std::string>());
  if (net->parameter_hash() != m.at("parameter_hash").get<std::string>()) {
    throw std::runtime_error("checkpoint " + dir.string() + ": parameter hash mismatch");
  }
  return net;
}

double final_loss(const json& manifest) {
  const json& c = manifest.at("loss_curve");
  return c.empty() ? 0.0 : c.back().at("mse").get<double>();
}

/// In-process ONet, or a remote one when attack.gateway_url is set.
struct Gateway {
  std::unique_ptr<VictimBundle> bundle;
  std::unique_ptr<ONet> onet;
  std::string url;

  Gateway(const Run& run, GatewayConfig cfg, const std::string& log_name) {
    url = run.config().attack.gateway_url;
    if (!url.empty()) return;
    bundle = std::make_unique<VictimBundle>(bundle_of(run));
    if (cfg.query_log.empty()) cfg.query_log = run.path("logs/" + log_name);
    onet = std::make_unique<ONet>(*bundle, cfg);
  }

  std::unique_ptr<GatewayClient> client(const std::string& id) {
    if (onet) return std::make_unique<InProcessClient>(*onet, id);
    GatewayConfig parsed;
    parsed.bind_address = url;
    return std::make_unique<HttpClient>(parsed.host(), parsed.port(), id);
  }
};

struct EvalSet {
  std::vector<ImageTensor> a, b, bp;
};

EvalSet eval_of(const Run& run) {
  require(run, "eval/index.json", "serve");
  const json idx = json::parse(read_file(run.path("eval/index.json")));
  const std::size_t n = idx.at("count");
  return {read_images(run.path("eval/a"), n), read_images(run.path("eval/b"), n),
          read_images(run.path("eval/bprime"), n)};
}

json metrics_json(const MetricsReport& r) { return json(r); }

/// Scores removal outputs and writes them under removal/<name>/.
json score_removal(Run& run, const VictimBundle& bundle, const EvalSet& ev,
                   std::vector<RemovalResult>& results, const std::string& name) {
  std::vector<double> to_bprime, ref_gap;
  std::vector<ImageTensor> outs;
  for (std::size_t i = 0; i < results.size(); ++i) {
    evaluate_removal(bundle, results[i], &ev.b[i]);
    to_bprime.push_back(psnr(results[i].b_hat, ev.bp[i]));
    ref_gap.push_back(psnr(ev.b[i], ev.bp[i]));
    outs.push_back(results[i].b_hat);
  }
  write_images(run.path("removal/" + name), outs);
  const MetricsReport m = summarize(results);
  m.validate();
  const double gap = std::abs(mean(to_bprime) - mean(ref_gap));
  return {{"metrics", metrics_json(m)},
          {"sanity",
           {{"psnr_bhat_vs_bprime_db", mean(to_bprime)},
            {"psnr_b_vs_bprime_db", mean(ref_gap)},
            {"gap_db", gap},
            {"within_bound", gap <= run.config().eval.sanity_gap_db}}}};
}

std::vector<RemovalResult> forward_all(const nn::Network& snet, const EvalSet& ev) {
  const Surrogate s = as_surrogate(snet);
  std::vector<RemovalResult> out;
  for (std::size_t i = 0; i < ev.a.size(); ++i) out.push_back(forward_remove(s, ev.a[i], ev.bp[i]));
  return out;
}

/// Config sections a stage's result depends on. Resume compares these, so
/// changing attack settings does not retrain the victim.
std::vector<std::string> stage_inputs(const std::string& name) {
  if (name == "synth") return {"task", "dataset"};
  if (name == "train_victim") return {"task", "dataset", "victim", "eval"};
  if (name == "serve" || name == "baseline_jpeg" || name == "baseline_awgn" ||
      name == "verify_additive" || name == "verify_delta_approx") {
    return {"task", "dataset", "victim", "gateway", "eval"};
  }
  return {"task", "dataset", "victim", "gateway", "eval", "attack", "defense"};
}

std::string stage_key(const ExperimentConfig& cfg, const std::string& name) {
  json all = cfg;
  all["gateway"].erase("query_log");
  all["attack"].erase("gateway_url");
  all["attack"].erase("parallelism");
  if (cfg.victim.watermark.empty()) all["victim"].erase("watermark");
  json subset = json::object();
  for (const auto& k : stage_inputs(name)) subset[k] = all.at(k);
  return sha256_hex(subset.dump());
}

}  // namespace

// ---- Run ----

Run::Run(ExperimentConfig config, bool resume)
    : config_(std::move(config)),
      hash_(config_.hash()),
      resume_(resume),
      lock_(config_.output_dir) {
  for (const char* d : {"logs", "stages"}) fs::create_directories(path(d));
  write_file(path("config.json"), json(config_).dump(2) + "\n");
  log_ = std::fopen(path("logs/stages.jsonl").c_str(), "a");
  if (!log_) throw std::runtime_error("cannot open " + path("logs/stages.jsonl").string());
}

Run::~Run() {
  if (log_) std::fclose(log_);
}

void Run::log(const std::string& stage, const std::string& event, const json& data) {
  const json line = {{"time", utc_timestamp()}, {"stage", stage}, {"event", event},
                     {"config_hash", hash_},   {"data", data}};
  std::fprintf(log_, "%s\n", line.dump().c_str());
  std::fflush(log_);
}

std::optional<json> Run::stage_result(const std::string& name) const {
  const fs::path f = path("stages/" + name + ".json");
  if (!fs::exists(f)) return std::nullopt;
  return json::parse(read_file(f));
}

json Run::stage(const std::string& name, const std::function<json()>& body) {
  const std::string key = stage_key(config_, name);
  if (resume_) {
    if (auto prev = stage_result(name);
        prev && prev->value("status", "") == "ok" && prev->value("stage_key", "") == key) {
      // Still valid for this config, so it now belongs to it.
      (*prev)["config_hash"] = hash_;
      write_file(path("stages/" + name + ".json"), prev->dump(2) + "\n");
      log(name, "resumed");
      std::fprintf(stderr, "[%s] reusing finished stage\n", name.c_str());
      return prev->at("result");
    }
  }
  log(name, "start");
  std::fprintf(stderr, "[%s] start\n", name.c_str());
  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  json record = {{"stage", name},
                 {"config_hash", hash_},
                 {"stage_key", key},
                 {"started", utc_timestamp()}};
  try {
    json result = body();
    record["status"] = "ok";
    record["seconds"] = seconds();
    record["result"] = result;
    write_file(path("stages/" + name + ".json"), record.dump(2) + "\n");
    log(name, "done", {{"seconds", record["seconds"]}, {"result", result}});
    std::fprintf(stderr, "[%s] done in %.1f s\n", name.c_str(), record["seconds"].get<double>());
    return result;
  } catch (const std::exception& e) {
    record["status"] = "failed";
    record["seconds"] = seconds();
    record["error"] = e.what();
    if (const auto* ab = dynamic_cast<const AttackAborted*>(&e)) record["report"] = ab->report;
    if (const auto* dv = dynamic_cast<const TrainingDiverged*>(&e)) record["manifest"] = dv->manifest;
    write_file(path("stages/" + name + ".json"), record.dump(2) + "\n");
    log(name, "failed", {{"error", e.what()}});
    throw;
  }
}

// ---- stages ----

json stage_synth(Run& run) {
  return run.stage("synth", [&] {
    synth_dataset(run.config().dataset, run.path("dataset"));
    const json meta = json::parse(read_file(run.path("dataset/dataset.json")));
    const Dataset ds = load_dataset(run.path("dataset"));
    const auto hv = image_hashes(ds.victim.b), ha = image_hashes(ds.attacker.b);
    std::vector<std::string> common;
    std::vector<std::string> sv(hv.begin(), hv.end()), sa(ha.begin(), ha.end());
    std::sort(sv.begin(), sv.end());
    std::sort(sa.begin(), sa.end());
    std::set_intersection(sv.begin(), sv.end(), sa.begin(), sa.end(), std::back_inserter(common));
    json r = meta;
    r["victim_attacker_overlap"] = common.size();
    return r;
  });
}

json stage_train_victim(Run& run) {
  return run.stage("train_victim", [&] {
    const auto& cfg = run.config();
    const Dataset ds = dataset_of(run);
    const auto log = epoch_logger(run, "train_victim");
    FitResult g = train_gnet(ds.victim, cfg.victim.gnet, cfg.victim.gnet_training, log);
    const auto processed = nn::map_images(*g.net, ds.victim.a);
    const Watermark delta = load_watermark(cfg.victim.watermark, cfg.dataset.image_size);
    VictimBundle bundle = joint_train(std::move(g.net), processed, ds.textures, delta,
                                      cfg.victim.training, cfg.victim.hnet, cfg.victim.enet,
                                      cfg.victim.disc, log);
    bundle.manifest["gnet_training"] = g.manifest;
    bundle.save(run.path("victim"));

    // Held-out contract on the evaluation split.
    const auto eval_a = head(ds.eval.a, cfg.eval.count);
    const auto eval_gt = head(ds.eval.b, cfg.eval.count);
    const auto b = nn::map_images(*bundle.gnet, eval_a);
    const auto bp = embed_all(*bundle.hnet, b, bundle.delta);
    const auto e_bp = extract_all(*bundle.enet, bp);
    const auto e_b = extract_all(*bundle.enet, b);
    const auto e_a = extract_all(*bundle.enet, eval_a);
    std::vector<double> fid, corr, null_b, null_a, gnet_in, gnet_out;
    int ok = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      fid.push_back(psnr(bp[i], b[i]));
      const double c = normalized_correlation(e_bp[i], bundle.delta.image());
      corr.push_back(c);
      ok += exceeds_extraction_threshold(c);
      null_b.push_back(mean({e_b[i].data().begin(), e_b[i].data().end()}));
      null_a.push_back(mean({e_a[i].data().begin(), e_a[i].data().end()}));
      gnet_in.push_back(psnr(eval_a[i], eval_gt[i]));
      gnet_out.push_back(psnr(b[i], eval_gt[i]));
    }
    return json{{"samples", b.size()},
                {"fidelity_psnr_db", mean(fid)},
                {"extraction_rate", double(ok) / double(b.size())},
                {"extraction_correlation", mean(corr)},
                {"null_mean", mean(null_b)},
                {"null_mean_noisy_inputs", mean(null_a)},
                {"gnet_input_psnr_db", mean(gnet_in)},
                {"gnet_output_psnr_db", mean(gnet_out)},
                {"gnet_improvement_db", mean(gnet_out) - mean(gnet_in)},
                {"bundle_hash", bundle.manifest_hash()},
                {"gnet_final_mse", final_loss(bundle.manifest.at("gnet_training"))},
                {"warnings", bundle.manifest.value("warnings", json::array())}};
  });
}

json stage_serve(Run& run) {
  return run.stage("serve", [&] {
    const auto& cfg = run.config();
    const Dataset ds = dataset_of(run);
    GatewayConfig gc = cfg.gateway;
    gc.screener_enabled = false;
    Gateway gw(run, gc, "queries.jsonl");
    auto client = gw.client("evaluator");
    const auto a = head(ds.eval.a, cfg.eval.count);
    std::vector<ImageTensor> bp;
    json ids = json::array();
    for (const auto& img : a) {
      QueryResponse r = client->query(img);
      if (r.warning) throw std::runtime_error("evaluation query " + r.query_id + " was flagged");
      ids.push_back(r.query_id);
      bp.push_back(std::move(r.image));
    }
    // The reference output b = GNet(a) is white-box knowledge of the harness.
    const VictimBundle bundle = bundle_of(run);
    std::vector<ImageTensor> b;
    for (auto& img : nn::map_images(*bundle.gnet, a)) b.push_back(quantize8(img));
    write_images(run.path("eval/a"), a);
    write_images(run.path("eval/b"), b);
    write_images(run.path("eval/bprime"), bp);
    std::vector<double> fid;
    for (std::size_t i = 0; i < b.size(); ++i) fid.push_back(psnr(bp[i], b[i]));
    json index = {{"count", a.size()}, {"source", "dataset eval split"}, {"query_ids", ids}};
    write_file(run.path("eval/index.json"), index.dump(2) + "\n");
    json r = {{"queries", a.size()}, {"fidelity_psnr_db", mean(fid)}};
    if (gw.onet) r["health"] = gw.onet->health();
    return r;
  });
}

json stage_collect(Run& run) {
  return run.stage("collect", [&] {
    const auto& cfg = run.config();
    const Dataset ds = dataset_of(run);
    // Curation is attacker-side selection of likely fixed points; the probe
    // is the harness's stand-in for the attacker's prior on GNet.
    const VictimBundle probe = bundle_of(run);
    CurationResult cur;
    bool short_pool = false;
    try {
      cur = curate_bypass_set(ds.attacker.b, probe.gnet.get(), cfg.attack.budget,
                              cfg.attack.tau_bypass_db);
    } catch (const PoolExhausted& e) {
      cur = e.partial;
      short_pool = true;
    }
    Gateway gw(run, cfg.gateway, "queries.jsonl");
    auto client = gw.client(cfg.attack.client_id);
    CollectOptions opts{cfg.attack.parallelism, static_cast<std::size_t>(cfg.attack.min_pairs)};
    AttackDataset pairs = collect_pairs(*client, cur.images, opts);
    pairs.bypass_psnr_stats = cur.stats;
    pairs.save(run.path("attack/pairs"));
    return json{{"curation",
                 {{"examined", cur.examined},
                  {"discarded", cur.discarded},
                  {"discard_rate", cur.discard_rate},
                  {"pool_short", short_pool},
                  {"stats", cur.stats}}},
                {"queries_issued", pairs.queries_issued},
                {"pairs", pairs.size()},
                {"excluded", pairs.exclusions.size()}};
  });
}

json stage_attack(Run& run, const std::string& method) {
  if (method != "inversion" && method != "forward") {
    throw std::invalid_argument("attack method must be inversion or forward");
  }
  return run.stage("attack_" + method, [&] {
    const auto& cfg = run.config();
    if (!fs::exists(run.path("eval/index.json"))) stage_serve(run);
    if (!fs::exists(run.path("attack/pairs/index.json"))) stage_collect(run);
    const AttackDataset pairs = AttackDataset::load(run.path("attack/pairs"));
    const VictimBundle bundle = bundle_of(run);
    const EvalSet ev = eval_of(run);
    const auto log = epoch_logger(run, "attack_" + method);
    const json provenance = {{"provenance", std::string(to_string(pairs.provenance()))},
                             {"pairs", pairs.size()},
                             {"queries_issued", pairs.queries_issued}};
    std::vector<RemovalResult> results;
    FitResult fit;
    if (method == "inversion") {
      fit = train_inverse(pairs, cfg.attack.inverse, cfg.attack.training, log);
      save_model(run.path("attack/inversion"), fit, {{"dataset", provenance}});
      results = apply_inverse_all(*fit.net, ev.bp);
    } else {
      fit = train_surrogate(pairs, cfg.attack.surrogate, cfg.attack.training, log);
      save_model(run.path("attack/forward"), fit, {{"dataset", provenance}});
      results = forward_all(*fit.net, ev);
    }
    json r = score_removal(run, bundle, ev, results, method);
    r["training_final_mse"] = final_loss(fit.manifest);
    r["pairs"] = pairs.size();
    r["queries_issued"] = pairs.queries_issued;
    return r;
  });
}

json stage_baseline(Run& run, const std::string& method) {
  if (method != "jpeg" && method != "awgn") {
    throw std::invalid_argument("baseline method must be jpeg or awgn");
  }
  return run.stage("baseline_" + method, [&] {
    const auto& cfg = run.config();
    const VictimBundle bundle = bundle_of(run);
    const EvalSet ev = eval_of(run);
    json out = json::object();
    auto run_one = [&](const std::string& name, auto&& fn) {
      std::vector<RemovalResult> results;
      for (std::size_t i = 0; i < ev.bp.size(); ++i) results.push_back(fn(i));
      out[name] = score_removal(run, bundle, ev, results, name);
    };
    if (method == "jpeg") {
      for (int q : cfg.eval.jpeg_qualities) {
        run_one("jpeg-" + std::to_string(q), [&](std::size_t i) { return baseline_jpeg(ev.bp[i], q); });
      }
    } else {
      for (double snr : cfg.eval.awgn_snr_db) {
        char name[32];
        std::snprintf(name, sizeof name, "awgn-%g", snr);
        run_one(name, [&](std::size_t i) {
          return baseline_awgn(ev.bp[i], snr, cfg.eval.awgn_seed * 1000003ULL + i);
        });
      }
    }
    return out;
  });
}

json stage_verify(Run& run, const std::string& check) {
  if (check == "additive") {
    return run.stage("verify_additive", [&] {
      const VictimBundle bundle = bundle_of(run);
      const EvalSet ev = eval_of(run);
      std::vector<double> corr;
      int above = 0, degenerate = 0;
      for (std::size_t i = 0; i < ev.b.size(); ++i) {
        const AdditiveCheck c = verify_additive(bundle, ev.b[i], ev.bp[i]);
        corr.push_back(c.correlation);
        above += c.correlation > 0.9;
        degenerate += c.degenerate;
      }
      return json{{"samples", corr.size()},
                  {"correlation", mean(corr)},
                  {"rate_above_0_9", double(above) / double(corr.size())},
                  {"degenerate", degenerate}};
    });
  }
  if (check == "delta-approx") {
    return run.stage("verify_delta_approx", [&] {
      const auto& cfg = run.config();
      const VictimBundle bundle = bundle_of(run);
      const EvalSet ev = eval_of(run);
      auto measure = [&](const std::vector<ImageTensor>& a, const std::vector<ImageTensor>& b) {
        std::vector<double> p, m, c;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const MetricsReport r = verify_delta_approx(bundle, a[i], b[i]);
          p.push_back(r.psnr_db);
          m.push_back(r.ms_ssim);
          c.push_back(r.correlation);
        }
        return json{{"samples", a.size()},
                    {"psnr_db", mean(p)},
                    {"ms_ssim", mean(m)},
                    {"correlation", mean(c)}};
      };
      json r = measure(ev.a, ev.b);
      // Noise-level sweep on fresh images; reported without a verdict.
      json sweep = json::array();
      for (std::size_t k = 0; k < cfg.eval.noise_sweep.size(); ++k) {
        std::mt19937_64 rng(cfg.dataset.seed * 7919ULL + 101 + k);
        std::vector<ImageTensor> a;
        for (int i = 0; i < cfg.eval.noise_sweep_count; ++i) {
          a.push_back(quantize8(synth_rain(rng, synth_clean(rng, cfg.dataset.image_size),
                                           cfg.eval.noise_sweep[k])));
        }
        const auto b = nn::map_images(*bundle.gnet, a);
        json row = measure(a, b);
        row["noise_level"] = cfg.eval.noise_sweep[k];
        sweep.push_back(row);
      }
      r["noise_sweep"] = sweep;
      // HNet(b, 0) against b: how far the hiding network is from identity
      // when the mark input is zero.
      {
        nn::Tensor bt = nn::to_tensor(ev.b);
        nn::Tensor zero(bt.n, bundle.hnet->spec().in_channels - bt.c, bt.h, bt.w, 0.0f);
        const nn::Tensor y = bundle.hnet->forward(nn::concat_channels(bt, zero));
        std::vector<double> p;
        for (int i = 0; i < y.n; ++i) p.push_back(psnr(nn::to_image(y, i), ev.b[i]));
        r["hnet_zero_mark_psnr_db"] = mean(p);
      }
      return r;
    });
  }
  if (check == "noise") {
    return run.stage("verify_noise", [&] {
      require(run, "attack/forward/manifest.json", "attack --method forward");
      const auto snet = load_model(run.path("attack/forward"));
      const Surrogate s = as_surrogate(*snet);
      const EvalSet ev = eval_of(run);
      std::vector<double> corr;
      int degenerate = 0;
      for (std::size_t i = 0; i < ev.a.size(); ++i) {
        const Residual est = estimate_noise(s, ev.a[i], ev.bp[i]);
        const Residual truth = Residual::difference(ev.a[i], ev.b[i], ResidualRole::noise_gt);
        const Correlation c = pearson(est.data, truth.data);
        corr.push_back(c.value);
        degenerate += c.degenerate;
      }
      return json{{"samples", corr.size()}, {"correlation", mean(corr)}, {"degenerate", degenerate}};
    });
  }
  throw std::invalid_argument("verify check must be additive, delta-approx or noise");
}

json stage_ablate(Run& run) {
  return run.stage("ablate", [&] {
    const auto& cfg = run.config();
    const Dataset ds = dataset_of(run);
    const VictimBundle bundle = bundle_of(run);
    const EvalSet ev = eval_of(run);
    // Noisy images are not fixed points, so curation should reject most.
    json noisy_curation;
    try {
      const auto c = curate_bypass_set(ds.attacker.a, bundle.gnet.get(),
                                       static_cast<int>(ds.attacker.a.size()),
                                       cfg.attack.tau_bypass_db);
      noisy_curation = {{"examined", c.examined}, {"discard_rate", c.discard_rate}};
    } catch (const PoolExhausted& e) {
      noisy_curation = {{"examined", e.partial.examined}, {"discard_rate", e.partial.discard_rate}};
    }
    Gateway gw(run, cfg.gateway, "queries.jsonl");
    auto client = gw.client(cfg.attack.client_id + "-ablation");
    CollectOptions opts{cfg.attack.parallelism, static_cast<std::size_t>(cfg.attack.min_pairs)};
    AttackDataset pairs =
        ablation_collect(*client, head(ds.attacker.a, cfg.attack.budget), opts);
    pairs.save(run.path("ablation/pairs"));
    const auto log = epoch_logger(run, "ablate");
    nn::NetworkSpec inv = cfg.attack.inverse, sur = cfg.attack.surrogate;
    AblationModels models = ablation_train(pairs, inv, sur, cfg.attack.training, log);
    const json provenance = {{"provenance", "ablation"}, {"pairs", pairs.size()}};
    save_model(run.path("ablation/inversion"), models.inverse, {{"dataset", provenance}});
    save_model(run.path("ablation/forward"), models.surrogate, {{"dataset", provenance}});
    auto inv_results = apply_inverse_all(*models.inverse.net, ev.bp);
    auto fwd_results = forward_all(*models.surrogate.net, ev);
    json r = {{"inversion", score_removal(run, bundle, ev, inv_results, "ablation-inversion")},
              {"forward", score_removal(run, bundle, ev, fwd_results, "ablation-forward")},
              {"noisy_pool_curation", noisy_curation},
              {"queries_issued", pairs.queries_issued}};
    if (auto base = run.stage_result("attack_inversion"); base && base->value("status", "") == "ok") {
      const double bypass = base->at("result").at("metrics").at("psnr_db");
      r["inversion_psnr_loss_db"] = bypass - r["inversion"]["metrics"]["psnr_db"].get<double>();
    }
    return r;
  });
}

json stage_defend(Run& run) {
  return run.stage("defend", [&] {
    const auto& cfg = run.config();
    const Dataset ds = dataset_of(run);
    const VictimBundle bundle = bundle_of(run);
    GatewayConfig gc = cfg.gateway;
    gc.screener_enabled = true;
    gc.screener_threshold = cfg.defense.threshold ? *cfg.defense.threshold
                                                  : calibrate_threshold(bundle, ds.val.a);
    gc.query_log = run.path("logs/queries_defense.jsonl");
    ONet onet(bundle, gc);

    // Bypass set: the same curated queries the undefended attack used.
    std::vector<ImageTensor> bypass;
    if (fs::exists(run.path("attack/pairs/index.json"))) {
      bypass = AttackDataset::load(run.path("attack/pairs")).inputs();
    } else {
      try {
        bypass = curate_bypass_set(ds.attacker.b, bundle.gnet.get(), cfg.attack.budget,
                                   cfg.attack.tau_bypass_db)
                     .images;
      } catch (const PoolExhausted& e) {
        bypass = e.partial.images;
      }
    }
    InProcessClient attacker(onet, cfg.attack.client_id);
    CollectOptions opts{cfg.attack.parallelism, static_cast<std::size_t>(cfg.attack.min_pairs)};
    json r = {{"threshold", gc.screener_threshold},
              {"threshold_source", cfg.defense.threshold ? "config" : "calibrated on val split"}};
    bool aborted = false;
    json collection;
    try {
      AttackDataset pairs = collect_pairs(attacker, bypass, opts);
      collection = {{"queries_issued", pairs.queries_issued},
                    {"usable_pairs", pairs.size()},
                    {"flagged", pairs.exclusions.size()}};
    } catch (const AttackAborted& e) {
      aborted = true;
      collection = e.report;
    }
    const double issued = collection.at("queries_issued").get<double>();
    const double flagged = collection.contains("flagged") ? collection["flagged"].get<double>() : 0.0;
    r["attack_aborted"] = aborted;
    r["collection"] = collection;
    r["bypass_flagged_rate"] = issued > 0 ? flagged / issued : 0.0;

    InProcessClient genuine(onet, "genuine");
    const auto held_out = head(ds.eval.a, cfg.eval.count);
    int g_flagged = 0;
    for (const auto& a : held_out) g_flagged += genuine.query(a).warning;
    r["genuine_queries"] = held_out.size();
    r["genuine_flagged_rate"] = double(g_flagged) / double(held_out.size());
    return r;
  });
}

json stage_budget_sweep(Run& run) {
  return run.stage("budget_sweep", [&] {
    const auto& cfg = run.config();
    json rows = json::array();
    if (cfg.attack.budget_sweep.empty()) return rows;
    require(run, "attack/pairs/index.json", "attack");
    const AttackDataset all = AttackDataset::load(run.path("attack/pairs"));
    const VictimBundle bundle = bundle_of(run);
    const EvalSet ev = eval_of(run);
    const auto log = epoch_logger(run, "budget_sweep");
    for (int n : cfg.attack.budget_sweep) {
      const std::size_t k = std::min<std::size_t>(n, all.size());
      AttackDataset sub(Provenance::bypass, head(all.inputs(), k), head(all.responses(), k),
                        {all.query_ids().begin(), all.query_ids().begin() + std::ptrdiff_t(k)});
      FitResult fit = train_inverse(sub, cfg.attack.inverse, cfg.attack.training, log);
      auto results = apply_inverse_all(*fit.net, ev.bp);
      json row = score_removal(run, bundle, ev, results, "sweep-inversion-" + std::to_string(n));
      row["budget"] = n;
      rows.push_back(row);
    }
    return rows;
  });
}

// ---- report ----

RunReport assemble_report(const Run& run) {
  RunReport rep;
  rep.task = run.config().task;
  rep.config_hash = run.config().hash();

  std::map<std::string, json> results;
  for (const auto& name : pipeline_stages()) {
    auto rec = run.stage_result(name);
    if (!rec) {
      rep.stages[name] = {"skipped", 0.0, ""};
      continue;
    }
    const std::string status = rec->value("status", "failed");
    rep.stages[name] = {status, rec->value("seconds", 0.0), rec->value("error", "")};
    if (rec->value("config_hash", "") != rep.config_hash) {
      rep.stages[name].status = "stale";
      continue;
    }
    if (status == "ok") results[name] = rec->at("result");
  }
  auto metrics_at = [&](const std::string& stage,
                        const std::string& key) -> std::optional<MetricsReport> {
    if (!results.count(stage)) return std::nullopt;
    const json& r = results[stage];
    const json& node = key.empty() ? r : (r.contains(key) ? r[key] : json());
    if (!node.is_object() || !node.contains("metrics")) return std::nullopt;
    return node["metrics"].get<MetricsReport>();
  };
  rep.methods["inversion"] = metrics_at("attack_inversion", "");
  rep.methods["forward"] = metrics_at("attack_forward", "");
  for (const auto& m : report_methods()) {
    if (m.rfind("jpeg", 0) == 0) rep.methods[m] = metrics_at("baseline_jpeg", m);
    if (m.rfind("awgn", 0) == 0) rep.methods[m] = metrics_at("baseline_awgn", m);
  }
  auto get = [&](const std::string& k) { return results.count(k) ? results[k] : json(); };
  rep.victim = get("train_victim");
  rep.verification = {{"additive", get("verify_additive")},
                      {"delta_approx", get("verify_delta_approx")},
                      {"noise", get("verify_noise")}};
  for (const char* k : {"attack_inversion", "attack_forward"}) {
    if (results.count(k)) rep.verification[std::string("sanity_") + k] = results[k]["sanity"];
  }
  rep.ablation = get("ablate");
  rep.defense = get("defend");
  rep.budget_sweep = get("budget_sweep");
  json q = json::object();
  if (results.count("serve")) q["evaluation"] = results["serve"]["queries"];
  if (results.count("collect")) q["bypass"] = results["collect"]["queries_issued"];
  if (results.count("ablate")) q["ablation"] = results["ablate"]["queries_issued"];
  if (results.count("defend")) q["defense_bypass"] = results["defend"]["collection"]["queries_issued"];
  rep.queries = q;
  json art = json::object();
  for (const char* p : {"dataset", "victim", "eval", "attack/pairs", "attack/inversion",
                        "attack/forward", "ablation", "removal", "figures", "logs/stages.jsonl",
                        "logs/queries.jsonl", "logs/queries_defense.jsonl"}) {
    if (fs::exists(run.path(p))) art[p] = run.path(p).string();
  }
  rep.artifacts = art;
  return rep;
}

RunReport finish_report(Run& run) {
  const auto figures = render_figures(run.root(), run.config().eval);
  RunReport rep = assemble_report(run);
  json figs = json::array();
  for (const auto& f : figures) figs.push_back(f.string());
  rep.artifacts["figure_files"] = figs;
  emit_report(rep, run.root());
  run.log("report", "written", {{"figures", figs}});
  return rep;
}

RunReport run_pipeline(const ExperimentConfig& config, bool resume) {
  Run run(config, resume);
  try {
    stage_synth(run);
    stage_train_victim(run);
    stage_serve(run);
    stage_collect(run);
    stage_attack(run, "inversion");
    stage_attack(run, "forward");
    stage_baseline(run, "jpeg");
    stage_baseline(run, "awgn");
    stage_verify(run, "additive");
    stage_verify(run, "delta-approx");
    stage_verify(run, "noise");
    stage_ablate(run);
    if (config.defense.enabled) stage_defend(run);
    if (!config.attack.budget_sweep.empty()) stage_budget_sweep(run);
  } catch (...) {
    try {
      finish_report(run);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "partial report failed: %s\n", e.what());
    }
    throw;
  }
  return finish_report(run);
}

}  // namespace wmlab
