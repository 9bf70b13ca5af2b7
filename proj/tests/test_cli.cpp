#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdd/cli.hpp"

using namespace cdd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(CDD_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cdd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> small_run(const fs::path& dir, std::vector<std::string> extra = {}) {
  std::vector<std::string> a{"run",   "--scenario", "hard",         "--epochs",  "2",
                             "--out", dir.string(), "--set",        "dim=8",     "--set",
                             "train_count=60", "--set", "test_count=40", "--set", "hidden=12",
                             "--set", "feature_width=6"};
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

}  // namespace

TEST(Cli, RunWritesArtifactsAndEvalReproducesMetrics) {
  const fs::path dir = scratch("run_mc");
  const Result r = cli(small_run(dir, {"--seed", "4", "--memory", "30"}));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"accuracy_matrix.csv", "predictions.csv", "pr_curves.csv", "config.json", "metrics.json",
                        "timing.csv", "checkpoint.txt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const Result e = cli({"eval", dir.string(), "--json"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out, read_text(dir / "metrics.json"));
  const Result t = cli({"eval", (dir / "accuracy_matrix.csv").string()});
  EXPECT_EQ(t.code, 0);
  EXPECT_NE(t.out.find("AA "), std::string::npos);
}

TEST(Cli, CheckpointRestoresTheTrainedModel) {
  const fs::path dir = scratch("run_ckpt");
  ASSERT_EQ(cli(small_run(dir, {"--seed", "2", "--profile", "rebalance", "--memory", "20"})).code, 0);
  std::ifstream in(dir / "checkpoint.txt");
  const Learner l = load_checkpoint(in);
  EXPECT_EQ(l.model.trained_tasks().size(), 6u);  // warm-up plus five tasks
  EXPECT_LE(l.memory->total(), 20u);
  std::stringstream again;
  save_checkpoint(again, l);
  EXPECT_EQ(again.str(), read_text(dir / "checkpoint.txt"));
}

TEST(Cli, SameSeedSameMetrics) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(cli(small_run(a, {"--seed", "9", "--system", "mt", "--aggregation", "sumlog"})).code, 0);
  ASSERT_EQ(cli(small_run(b, {"--seed", "9", "--system", "mt", "--aggregation", "sumlog"})).code, 0);
  EXPECT_EQ(read_text(a / "metrics.json"), read_text(b / "metrics.json"));
  EXPECT_EQ(read_text(a / "accuracy_matrix.csv"), read_text(b / "accuracy_matrix.csv"));
}

TEST(Cli, SeedListWithJobsWritesOneDirectoryPerSeed) {
  const fs::path dir = scratch("multi");
  const Result r = cli(small_run(dir, {"--seed", "1", "--seed", "2", "--jobs", "2", "--profile", "finetune"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "seed_1" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir / "seed_2" / "metrics.json"));
}

TEST(Cli, BinarySystemReportsNAForClassAccuracy) {
  const fs::path dir = scratch("run_bc");
  ASSERT_EQ(cli(small_run(dir, {"--system", "bc", "--profile", "finetune"})).code, 0);
  const auto j = nlohmann::json::parse(read_text(dir / "metrics.json"));
  EXPECT_EQ(j["AA_M"], "NA");
  EXPECT_EQ(j["config"]["system"], "bc");
}

TEST(Cli, UsageErrorsExitTwo) {
  const fs::path dir = scratch("bad");
  EXPECT_EQ(cli({"run", "--scenario", "easy", "--system", "bc", "--aggregation", "max", "--out", dir.string()}).code, 2);
  EXPECT_EQ(cli({"run", "--scenario", "easy", "--system", "mt", "--out", dir.string()}).code, 2);
  EXPECT_EQ(cli({"run", "--scenario", "easy", "--profile", "nope", "--out", dir.string()}).code, 2);
  EXPECT_EQ(cli({"run", "--out", dir.string()}).code, 2);
  EXPECT_EQ(cli({"run", "--scenario", "easy", "--set", "bogus=1"}).code, 2);
  EXPECT_EQ(cli({"run", "--scenario", "easy", "--memory", "-5"}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Cli, OutOfRangeMatrixEntryExitsTwo) {
  const fs::path dir = scratch("matrix");
  fs::create_directories(dir);
  write_text(dir / "m.csv", "task_id,session_1,session_2\n1,0.9,1.2\n2,,0.8\n");
  const Result r = cli({"eval", (dir / "m.csv").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos);
  write_text(dir / "n.csv", "task_id,session_1\n1,zz\n");
  EXPECT_EQ(cli({"eval", (dir / "n.csv").string()}).code, 2);
  EXPECT_EQ(cli({"eval", (dir / "missing.csv").string()}).code, 2);
}

TEST(Cli, DatasetFilesRunAndReportLineOfParseErrors) {
  const fs::path dir = scratch("data");
  fs::create_directories(dir);
  SynthOptions opt;
  opt.dim = 8;
  opt.counts = {60, 10, 40};
  opt.warmup = false;
  const Scenario sc = build_scenario(ScenarioKind::Easy, 1, opt);
  for (int i = 0; i < 2; ++i) write_dataset((dir / ("t" + std::to_string(i) + ".csv")).string(), synth_generate(sc.tasks[i], 1));
  const Result ok = cli({"run", "--data", (dir / "t0.csv").string(), (dir / "t1.csv").string(), "--epochs", "2",
                         "--out", (dir / "out").string(), "--set", "hidden=8"});
  ASSERT_EQ(ok.code, 0) << ok.err;
  write_text(dir / "broken.csv", "task_id,split,label,f0\n1,train,0,1\n1,train,1\n");
  const Result bad = cli({"run", "--data", (dir / "broken.csv").string(), "--out", (dir / "never").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("line 3"), std::string::npos) << bad.err;
}

TEST(Cli, ConfigFileThenFlagOverrides) {
  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  write_text(dir / "exp.cfg",
             "# experiment\nscenario = hard\nprofile = replay+kd\nsystem = mt\naggregation = max\n"
             "epochs = 2\ndim = 8\ntrain_count = 60\ntest_count = 40\nhidden = 10\nfeature_width = 6\n");
  const Result r = cli({"run", "--config", (dir / "exp.cfg").string(), "--profile", "replay", "--out",
                        (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_text(dir / "out" / "config.json"));
  EXPECT_EQ(j["profile"], "replay");
  EXPECT_EQ(j["aggregation"], "max");
  EXPECT_EQ(j["epochs"], "2");
  write_text(dir / "bad.cfg", "scenario = hard\nthis line has no equals\n");
  EXPECT_EQ(cli({"run", "--config", (dir / "bad.cfg").string()}).code, 2);
}

TEST(Config, SettingsAndValidation) {
  ExperimentConfig c;
  apply_setting(c, "seed", "3,5,8");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 5, 8}));
  apply_setting(c, "milestones", "4,8");
  EXPECT_EQ(c.train.milestones, (std::vector<std::size_t>{4, 8}));
  EXPECT_THROW(apply_setting(c, "memory", "lots"), ValidationError);
  EXPECT_THROW(apply_setting(c, "system", "xc"), ValidationError);
  EXPECT_THROW(c.validate(), ValidationError);  // neither scenario nor data
  apply_setting(c, "scenario", "long");
  c.validate();
  c.aggregation = AggregationRule::Max;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Config, SeedFallsBackToEnvironment) {
  ExperimentConfig c;
  ::setenv("CDD_SEED", "77", 1);
  EXPECT_EQ(c.resolved_seeds(), std::vector<std::uint64_t>{77});
  ::setenv("CDD_SEED", "x", 1);
  EXPECT_THROW(c.resolved_seeds(), ValidationError);
  ::unsetenv("CDD_SEED");
  EXPECT_EQ(c.resolved_seeds(), std::vector<std::uint64_t>{0});
}

TEST(Checkpoint, MalformedInputNamesTheLine) {
  std::istringstream in("cdd-checkpoint 1\nsystem mc\nhead banana\n");
  try {
    load_checkpoint(in);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::istringstream wrong("not a checkpoint\n");
  EXPECT_THROW(load_checkpoint(wrong), ParseError);
}

TEST(Verify, AllChecksPass) {
  for (const auto& r : run_verification(5)) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
  EXPECT_EQ(cli({"verify"}).code, 0);
}
