// Command-line front end. Every flag is shorthand for a config path.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "wmlab/gateway.hpp"
#include "wmlab/labcli.hpp"
#include "wmlab/synth.hpp"

using namespace wmlab;
using nlohmann::json;

namespace {

struct FlagMap {
  std::vector<std::pair<std::string, std::string>> pending;  // path, raw value

  template <typename T>
  void bind(CLI::App* app, const std::string& flag, const std::string& path,
            const std::string& help) {
    app->add_option_function<T>(
        flag, [this, path](const T& v) { pending.emplace_back(path, json(v).dump()); },
        help + " [" + path + "]");
  }
  void flag(CLI::App* app, const std::string& name, const std::string& path,
            const std::string& help) {
    app->add_flag_callback(
        name, [this, path] { pending.emplace_back(path, "true"); }, help + " [" + path + "]");
  }
};

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wmlab: box-free watermark removal lab"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_file;
  std::vector<std::string> sets;
  bool resume = false;
  bool print_config = false;
  FlagMap flags;

  app.add_option("-c,--config", config_file, "JSON config file (see schemas/)");
  app.add_option("--set", sets, "override any config path, e.g. --set attack.budget=500");
  app.add_flag("--resume", resume, "reuse finished stages recorded for the same config hash");
  app.add_flag("--print-config", print_config, "print the resolved config and exit");
  flags.bind<std::string>(&app, "-o,--output-dir", "output_dir", "run directory");
  flags.bind<long>(&app, "--seed", "dataset.seed", "dataset seed");

  auto* synth = app.add_subcommand("synth", "generate the synthetic rain dataset");
  flags.bind<int>(synth, "--image-size", "dataset.image_size", "square image side");
  flags.bind<int>(synth, "--victim-pairs", "dataset.victim_pairs", "victim half size");
  flags.bind<int>(synth, "--attacker-pairs", "dataset.attacker_pairs", "attacker half size");
  flags.bind<double>(synth, "--noise-level", "dataset.noise_level", "rain strength, 0 = none");

  auto* train = app.add_subcommand("train-victim", "train GNet, then HNet/ENet/D");
  flags.bind<int>(train, "--epochs", "victim.training.epochs", "joint training epochs");
  flags.bind<int>(train, "--gnet-epochs", "victim.gnet_training.epochs", "GNet epochs");
  flags.bind<std::string>(train, "--watermark", "victim.watermark", "grayscale watermark PNG");

  auto* serve = app.add_subcommand("serve", "serve the trained victim over HTTP");
  flags.bind<std::string>(serve, "--bind", "gateway.bind_address", "host:port");
  flags.flag(serve, "--screener", "gateway.screener_enabled", "enable query screening");
  flags.bind<double>(serve, "--threshold", "gateway.screener_threshold",
                     "screener threshold (0 = calibrate)");
  flags.bind<long>(serve, "--max-queries", "gateway.max_queries_per_client", "per-client budget");
  flags.bind<std::string>(serve, "--query-log", "gateway.query_log", "JSON-lines query log");

  auto* attack = app.add_subcommand("attack", "collect pairs and run one removal attack");
  std::string attack_method;
  attack->add_option("--method", attack_method, "inversion or forward")
      ->required()
      ->check(CLI::IsMember({"inversion", "forward"}));
  flags.bind<int>(attack, "--budget", "attack.budget", "bypass queries");
  flags.bind<int>(attack, "--parallelism", "attack.parallelism", "concurrent queries");
  flags.bind<std::string>(attack, "--gateway-url", "attack.gateway_url",
                          "host:port of a running serve");
  flags.bind<int>(attack, "--epochs", "attack.training.epochs", "attacker epochs");

  auto* baseline = app.add_subcommand("baseline", "JPEG or AWGN removal baselines");
  std::string baseline_method;
  baseline->add_option("--method", baseline_method, "jpeg or awgn")
      ->required()
      ->check(CLI::IsMember({"jpeg", "awgn"}));

  auto* verify = app.add_subcommand("verify", "white-box verification checks");
  std::string verify_check;
  verify->add_option("--check", verify_check, "additive, delta-approx or noise")
      ->required()
      ->check(CLI::IsMember({"additive", "delta-approx", "noise"}));

  auto* ablate = app.add_subcommand("ablate", "attacks trained on noisy (non-bypass) queries");
  auto* defend = app.add_subcommand("defend", "rerun collection against the screener");
  flags.bind<double>(defend, "--threshold", "defense.threshold", "fixed screener threshold");
  auto* report = app.add_subcommand("report", "write report.json, report.txt and figures");
  auto* pipeline = app.add_subcommand("pipeline", "every stage in order");
  (void)ablate;
  (void)report;
  (void)pipeline;

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> overrides;
    for (const auto& [path, value] : flags.pending) overrides.push_back(path + "=" + value);
    overrides.insert(overrides.end(), sets.begin(), sets.end());
    const std::optional<std::filesystem::path> file =
        config_file ? std::optional<std::filesystem::path>(*config_file) : std::nullopt;
    ExperimentConfig cfg = load_config(file, overrides);
    if (print_config) {
      print(json(cfg));
      return 0;
    }

    if (serve->parsed()) {
      // Read-only on the run directory, so no lock.
      VictimBundle bundle = VictimBundle::load(cfg.output_dir / "victim");
      GatewayConfig gc = cfg.gateway;
      if (gc.screener_enabled && gc.screener_threshold <= 0.0) {
        const Dataset ds = load_dataset(cfg.output_dir / "dataset");
        gc.screener_threshold = calibrate_threshold(bundle, ds.val.a);
      }
      if (gc.query_log.empty()) gc.query_log = cfg.output_dir / "logs" / "queries_http.jsonl";
      std::filesystem::create_directories(gc.query_log.parent_path());
      ONet onet(bundle, gc);
      HttpServer server(onet);
      std::fprintf(stderr, "serving %s (screener %s, threshold %.4f)\n", gc.bind_address.c_str(),
                   gc.screener_enabled ? "on" : "off", gc.screener_threshold);
      server.run();
      return 0;
    }

    if (pipeline->parsed()) {
      const RunReport r = run_pipeline(cfg, resume);
      std::cout << render_table(r);
      return 0;
    }

    Run run(cfg, resume);
    json out;
    if (synth->parsed()) out = stage_synth(run);
    if (train->parsed()) out = stage_train_victim(run);
    if (attack->parsed()) out = stage_attack(run, attack_method);
    if (baseline->parsed()) out = stage_baseline(run, baseline_method);
    if (verify->parsed()) out = stage_verify(run, verify_check);
    if (ablate->parsed()) out = stage_ablate(run);
    if (defend->parsed()) out = stage_defend(run);
    if (report->parsed()) {
      std::cout << render_table(finish_report(run));
      return 0;
    }
    print(out);
    return 0;
  } catch (const LockHeld& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
