#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include "wmlab/labcli.hpp"
#include "wmlab/util.hpp"
#include "test_support.hpp"

using namespace wmlab;
using namespace wmlab::fixtures;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunReport sample_report() {
  RunReport r;
  r.task = "deraining";
  r.config_hash = "abc";
  r.stages["synth"] = {"ok", 1.5, ""};
  r.stages["attack_forward"] = {"failed", 2.0, "boom"};
  for (const auto& m : report_methods()) r.methods[m] = std::nullopt;
  r.methods["inversion"] = MetricsReport{31.25, 0.97, 0.12, 1.0, 300};
  r.methods["jpeg-20"] = MetricsReport{27.5, 0.9, 0.5, 0.8, 300};
  r.victim = {{"fidelity_psnr_db", 33.0}};
  r.verification = json::object();
  r.ablation = json::object();
  r.defense = json::object();
  r.budget_sweep = json::array();
  r.queries = {{"total", 10}};
  r.artifacts = json::array();
  return r;
}

}  // namespace

// ---- config ----

TEST(Config, DefaultsSatisfyPublishedSchema) {
  const json doc = ExperimentConfig{};
  const auto errs = schema_errors(doc, config_schema());
  EXPECT_TRUE(errs.empty()) << (errs.empty() ? "" : errs.front());
  EXPECT_NO_THROW(ExperimentConfig{}.validate());
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.attack.budget = 1234;
  c.attack.budget_sweep = {100, 200};
  c.defense.threshold = 0.03;
  c.gateway.max_queries_per_client = 5000;
  c.output_dir = "/tmp/x";
  const ExperimentConfig back = json(c).get<ExperimentConfig>();
  EXPECT_EQ(json(back), json(c));
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(Config, SchemaReportsTypeEnumRangeAndUnknownKeys) {
  json doc = ExperimentConfig{};
  doc["task"] = "denoising";
  doc["attack"]["budget"] = "lots";
  doc["eval"]["count"] = 0;
  doc["bogus"] = 1;
  const auto errs = schema_errors(doc, config_schema());
  auto mentions = [&](const std::string& s) {
    return std::any_of(errs.begin(), errs.end(),
                       [&](const std::string& e) { return e.find(s) != std::string::npos; });
  };
  EXPECT_TRUE(mentions("task"));
  EXPECT_TRUE(mentions("attack.budget") || mentions("budget"));
  EXPECT_TRUE(mentions("count"));
  EXPECT_TRUE(mentions("bogus"));
}

TEST(Config, OverrideParsesJsonOrString) {
  json doc = ExperimentConfig{};
  apply_override(doc, "attack.budget=777");
  apply_override(doc, "gateway.bind_address=0.0.0.0:9");
  apply_override(doc, "eval.jpeg_qualities=[10,90]");
  EXPECT_EQ(doc["attack"]["budget"], 777);
  EXPECT_EQ(doc["gateway"]["bind_address"], "0.0.0.0:9");
  EXPECT_EQ(doc["eval"]["jpeg_qualities"], json({10, 90}));
  EXPECT_THROW(apply_override(doc, "attack.nonsense=1"), std::invalid_argument);
  EXPECT_THROW(apply_override(doc, "no_equals_sign"), std::invalid_argument);
}

TEST(Config, FileThenOverridesTakePrecedence) {
  auto dir = scratch_dir("config_file");
  write_file(dir / "c.json", R"({"attack": {"budget": 600, "min_pairs": 100},
                                 "output_dir": "from_file"})");
  auto c = load_config(dir / "c.json", {"attack.budget=700"});
  EXPECT_EQ(c.attack.budget, 700);
  EXPECT_EQ(c.attack.min_pairs, 100);
  EXPECT_EQ(c.output_dir, fs::path("from_file"));
  EXPECT_EQ(c.dataset.image_size, 64);  // untouched default
}

TEST(Config, InvalidValuesRejectedAtLoad) {
  EXPECT_THROW(load_config(std::nullopt, {"gateway.screener_enabled=true",
                                          "gateway.screener_threshold=0"}),
               std::invalid_argument);
  EXPECT_THROW(load_config(std::nullopt, {"eval.count=100000"}), std::invalid_argument);
  EXPECT_THROW(load_config(std::nullopt, {"attack.min_pairs=3000"}), std::invalid_argument);
  EXPECT_THROW(load_config(std::nullopt, {"victim.training.beta1=0"}), std::invalid_argument);
  auto dir = scratch_dir("config_bad");
  write_file(dir / "c.json", R"({"attack": {"budgett": 5}})");
  EXPECT_THROW(load_config(dir / "c.json"), std::invalid_argument);
  write_file(dir / "d.json", "{not json");
  EXPECT_ANY_THROW(load_config(dir / "d.json"));
}

TEST(Config, HashIgnoresPlumbingOnly) {
  ExperimentConfig a, b;
  b.output_dir = "elsewhere";
  b.gateway.query_log = "q.jsonl";
  b.attack.parallelism = 7;
  EXPECT_EQ(a.hash(), b.hash());
  b.dataset.seed = 99;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, WatermarkPathChecked) {
  ExperimentConfig a, b;
  b.victim.watermark = "";
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_THROW(load_config(std::nullopt, {"victim.watermark=/no/such/mark.png"}),
               std::invalid_argument);
  auto dir = scratch_dir("config_mark");
  write_file(dir / "m.png", "x");
  auto c = load_config(std::nullopt, {"victim.watermark=" + (dir / "m.png").string()});
  EXPECT_EQ(c.victim.watermark, dir / "m.png");
  EXPECT_NE(c.hash(), a.hash());
}

// ---- lockfile ----

TEST(DirLock, SecondHolderRejectedUntilRelease) {
  auto dir = scratch_dir("lock");
  {
    DirLock first(dir);
    EXPECT_TRUE(fs::exists(dir / ".lock"));
    EXPECT_THROW(DirLock second(dir), LockHeld);
  }
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_NO_THROW(DirLock again(dir));
}

TEST(DirLock, StaleLockFromDeadProcessTakenOver) {
  auto dir = scratch_dir("lock_stale");
  const pid_t child = fork();
  if (child == 0) _exit(0);
  waitpid(child, nullptr, 0);
  write_file(dir / ".lock", std::to_string(child) + "\n");
  EXPECT_NO_THROW(DirLock taken(dir));
}

// ---- reports ----

TEST(Report, JsonRoundTripIsExact) {
  const RunReport r = sample_report();
  auto dir = scratch_dir("report_rt");
  emit_report(r, dir);
  const RunReport back = json::parse(read_file(dir / "report.json")).get<RunReport>();
  EXPECT_TRUE(back == r);
}

TEST(Report, TableHasColumnsAndSkippedRows) {
  const std::string t = render_table(sample_report());
  for (const char* col : {"Method", "Correlation", "PSNR", "MS-SSIM", "SR_Remove"}) {
    EXPECT_NE(t.find(col), std::string::npos) << col;
  }
  for (const auto& m : report_methods()) EXPECT_NE(t.find(m), std::string::npos) << m;
  EXPECT_NE(t.find("31.25"), std::string::npos);
  // forward, jpeg-50, awgn-20 and awgn-30 have no numbers.
  std::size_t skipped = 0;
  for (auto p = t.find("stage skipped"); p != std::string::npos;
       p = t.find("stage skipped", p + 1)) {
    ++skipped;
  }
  EXPECT_GE(skipped, 4u);
}

TEST(Report, EmptyReportStillRenders) {
  RunReport r;
  for (const auto& m : report_methods()) r.methods[m] = std::nullopt;
  const std::string t = render_table(r);
  EXPECT_NE(t.find("stage skipped"), std::string::npos);
}

// ---- stage bookkeeping ----

TEST(Run, StageRecordsResultAndResumeSkipsBody) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_resume");
  int calls = 0;
  {
    wmlab::Run run(c);
    EXPECT_EQ(run.stage("synth", [&] { ++calls; return json{{"x", 1}}; })["x"], 1);
  }
  {
    wmlab::Run run(c, /*resume=*/true);
    EXPECT_EQ(run.stage("synth", [&] { ++calls; return json{{"x", 2}}; })["x"], 1);
  }
  EXPECT_EQ(calls, 1);
  {
    // A change to an input of the stage invalidates it.
    ExperimentConfig d = c;
    d.dataset.seed = 1234;
    wmlab::Run run(d, true);
    EXPECT_EQ(run.stage("synth", [&] { ++calls; return json{{"x", 3}}; })["x"], 3);
  }
  EXPECT_EQ(calls, 2);
  {
    wmlab::Run run(c);  // no resume: always reruns
    run.stage("synth", [&] { ++calls; return json{{"x", 4}}; });
  }
  EXPECT_EQ(calls, 3);
}

TEST(Run, AttackStagesIgnoreUnrelatedConfigOnResume) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_keys");
  int calls = 0;
  {
    wmlab::Run run(c);
    run.stage("baseline_jpeg", [&] { ++calls; return json::object(); });
  }
  ExperimentConfig d = c;
  d.attack.budget = 1000;  // baselines do not depend on the attack section
  {
    wmlab::Run run(d, true);
    run.stage("baseline_jpeg", [&] { ++calls; return json::object(); });
  }
  EXPECT_EQ(calls, 1);
}

TEST(Run, FailedStageRecordedAndRethrown) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_fail");
  wmlab::Run run(c);
  EXPECT_THROW(run.stage("defend", [&]() -> json { throw std::runtime_error("nope"); }),
               std::runtime_error);
  auto rec = run.stage_result("defend");
  ASSERT_TRUE(rec);
  EXPECT_EQ((*rec)["status"], "failed");
  EXPECT_EQ((*rec)["error"], "nope");
  // JSON-lines log: one parseable object per line.
  std::istringstream lines(read_file(run.path("logs/stages.jsonl")));
  int n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    auto j = json::parse(line);
    EXPECT_TRUE(j.contains("stage"));
    EXPECT_TRUE(j.contains("event"));
  }
  EXPECT_GE(n, 2);
}

TEST(Run, OutputDirectoryIsExclusive) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_lock");
  wmlab::Run first(c);
  EXPECT_THROW(wmlab::Run second(c), LockHeld);
}

TEST(Run, ReportOfEmptyRunIsPartial) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_empty");
  wmlab::Run run(c);
  const RunReport r = finish_report(run);
  ASSERT_EQ(r.methods.size(), report_methods().size());
  for (const auto& [name, m] : r.methods) EXPECT_FALSE(m.has_value()) << name;
  EXPECT_TRUE(fs::exists(c.output_dir / "report.json"));
  EXPECT_NE(read_file(c.output_dir / "report.txt").find("stage skipped"), std::string::npos);
}

TEST(Run, StagesNeedTheirInputs) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("run_missing");
  wmlab::Run run(c);
  EXPECT_ANY_THROW(stage_train_victim(run));
}
