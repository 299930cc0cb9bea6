#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/gateway.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/synth.hpp"
#include "wmlab/victim.hpp"

namespace wmlab {

inline TrainingConfig fit_config(int epochs, std::uint64_t seed,
                                 const char* schedule = "constant") {
  TrainingConfig c;
  c.epochs = epochs;
  c.seed = seed;
  c.lr_schedule = schedule;
  c.null_sample_source = "";
  return c;
}

struct VictimSettings {
  nn::NetworkSpec gnet{nn::NetKind::gnet, 3, 3, 16, 3, 11};
  nn::NetworkSpec hnet{nn::NetKind::hnet, 6, 3, 16, 3, 12};
  nn::NetworkSpec enet{nn::NetKind::enet, 3, 1, 16, 5, 13};
  nn::NetworkSpec disc{nn::NetKind::disc, 3, 1, 16, 4, 14};
  TrainingConfig gnet_training = fit_config(8, 21);
  TrainingConfig training;  // joint HNet/ENet/D run
  /// Grayscale PNG at dataset.image_size. Empty uses the built-in glyph.
  std::filesystem::path watermark;
};

struct AttackSettings {
  int budget = 2000;
  int parallelism = 2;
  double tau_bypass_db = 28.0;
  int min_pairs = 500;
  std::string client_id = "attacker";
  /// "host:port" of a running `serve`; empty uses an in-process gateway.
  std::string gateway_url;
  nn::NetworkSpec inverse{nn::NetKind::hnet_inverse, 3, 3, 16, 4, 31};
  nn::NetworkSpec surrogate{nn::NetKind::snet, 3, 3, 16, 4, 32};
  TrainingConfig training = fit_config(10, 33, "cosine");
  /// Extra inversion runs at smaller budgets; empty skips the sweep.
  std::vector<int> budget_sweep;
};

struct EvalSettings {
  int count = 300;
  /// Removal should stay within this many dB of psnr(b, b').
  double sanity_gap_db = 10.0;
  std::vector<int> jpeg_qualities{20, 50};
  std::vector<double> awgn_snr_db{20.0, 30.0};
  std::uint64_t awgn_seed = 41;
  double residual_gain = 50.0;
  int figure_rows = 4;
  /// Noise levels for the delta-approx sweep; no pass/fail attached.
  std::vector<double> noise_sweep{0.5, 1.0, 1.5, 2.0};
  int noise_sweep_count = 50;
};

struct DefenseSettings {
  bool enabled = true;
  /// Unset means calibrate on the validation split.
  std::optional<double> threshold;
};

struct ExperimentConfig {
  std::string task = "deraining";
  SynthParams dataset;
  VictimSettings victim;
  GatewayConfig gateway;
  AttackSettings attack;
  EvalSettings eval;
  DefenseSettings defense;
  std::filesystem::path output_dir = "runs/default";

  /// Cross-field checks on top of the schema. Throws std::invalid_argument.
  void validate() const;
  /// SHA-256 of the canonical JSON without output_dir and log paths.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// The published JSON schema for config files.
const nlohmann::json& config_schema();

/// Small JSON Schema subset: type, properties, required,
/// additionalProperties (bool), items, enum, minimum, maximum, minItems.
/// Returns one message per violation; empty means valid.
std::vector<std::string> schema_errors(const nlohmann::json& doc,
                                       const nlohmann::json& schema);

/// Applies "a.b.c=value" to `doc`. The value parses as JSON when it can,
/// otherwise it is taken as a string. Unknown paths are rejected.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Defaults, then the file (merge patch), then overrides; schema-checked.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides = {});

/// Single-instance guard for an output directory. A lock left by a dead
/// process is taken over.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path file_;
};

class LockHeld : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- reports ----

inline const std::vector<std::string>& report_methods() {
  static const std::vector<std::string> m{"inversion", "forward", "jpeg-20",
                                          "jpeg-50",   "awgn-20", "awgn-30"};
  return m;
}

/// Stage names in pipeline order.
inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s{
      "synth",           "train_victim",        "serve",          "collect",
      "attack_inversion", "attack_forward",     "baseline_jpeg",  "baseline_awgn",
      "verify_additive", "verify_delta_approx", "verify_noise",   "ablate",
      "defend",          "budget_sweep"};
  return s;
}

struct StageSummary {
  std::string status;  // ok | failed | skipped
  double seconds = 0.0;
  std::string error;
  bool operator==(const StageSummary&) const = default;
};

struct RunReport {
  std::string task;
  std::string config_hash;
  std::map<std::string, StageSummary> stages;
  /// One entry per report_methods(); nullopt renders as "stage skipped".
  std::map<std::string, std::optional<MetricsReport>> methods;
  nlohmann::json victim, verification, ablation, defense, budget_sweep, queries,
      artifacts;

  bool operator==(const RunReport& o) const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);
void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);

/// The Correlation / PSNR / MS-SSIM / SR_Remove table plus summary lines.
std::string render_table(const RunReport& r);
enum class ReportFormat { json, table };
/// Writes report.json and/or report.txt into `dir`.
void emit_report(const RunReport& r, const std::filesystem::path& dir,
                 const std::vector<ReportFormat>& formats = {ReportFormat::json,
                                                             ReportFormat::table});

// ---- pipeline ----

/// Directory layout of a run and the stage bookkeeping around it.
class Run {
 public:
  /// Takes the lock, creates the layout and opens logs/stages.jsonl.
  explicit Run(ExperimentConfig config, bool resume = false);
  ~Run();
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return config_.output_dir; }
  std::filesystem::path path(const std::string& rel) const { return root() / rel; }

  /// Appends one JSON line to logs/stages.jsonl.
  void log(const std::string& stage, const std::string& event,
           const nlohmann::json& data = {});
  /// Runs `body`, timing it and persisting stages/<name>.json. With resume
  /// on, a stage whose record matches this config hash is not rerun.
  nlohmann::json stage(const std::string& name,
                       const std::function<nlohmann::json()>& body);
  /// Stored result of a finished stage, if any.
  std::optional<nlohmann::json> stage_result(const std::string& name) const;

 private:
  ExperimentConfig config_;
  std::string hash_;
  bool resume_;
  DirLock lock_;
  std::FILE* log_ = nullptr;
};

nlohmann::json stage_synth(Run& run);
nlohmann::json stage_train_victim(Run& run);
/// Queries the held-out evaluation set through the gateway.
nlohmann::json stage_serve(Run& run);
nlohmann::json stage_collect(Run& run);
nlohmann::json stage_attack(Run& run, const std::string& method);
nlohmann::json stage_baseline(Run& run, const std::string& method);
nlohmann::json stage_verify(Run& run, const std::string& check);
nlohmann::json stage_ablate(Run& run);
nlohmann::json stage_defend(Run& run);
nlohmann::json stage_budget_sweep(Run& run);

/// Builds the report from persisted stage records.
RunReport assemble_report(const Run& run);
/// Rebuilds every figure from PNGs and checkpoints on disk.
std::vector<std::filesystem::path> render_figures(const std::filesystem::path& output_dir,
                                                  const EvalSettings& eval);

/// Every stage in order; a failure still writes a partial report and
/// rethrows.
RunReport run_pipeline(const ExperimentConfig& config, bool resume = false);

/// Writes report.json, report.txt and figures for whatever exists.
RunReport finish_report(Run& run);

}  // namespace wmlab
