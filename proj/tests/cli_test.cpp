#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "loki/cli/app.hpp"

using namespace loki;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "loki");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return model::io::read_file(p); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("loki_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    model::io::write_file(cfg(),
                          "name = tiny\n"
                          "model.layers = 2\nmodel.d_model = 16\nmodel.d_ff = 32\nmodel.vocab_size = 24\n"
                          "model.max_seq_len = 8\n"
                          "tasks.content_size = 4\ntasks.general_train = 40\ntasks.general_eval = 20\n"
                          "tasks.lookup_train = 40\ntasks.lookup_eval = 20\n"
                          "pretrain.epochs = 2\npretrain.min_accuracy = 0\ntrain.max_steps = 5\n"
                          "attribution.samples_per_subtask = 2\nseed = 5\n");
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string cfg() const { return (root_ / "tiny.cfg").string(); }
  std::string dir(const std::string& name) const { return (root_ / name).string(); }

  fs::path root_;
};

}  // namespace

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(invoke({"select", "--q", "ten"}).code, 1);
  EXPECT_EQ(invoke({"--help"}).code, 0);
  const auto missing = invoke({"pretrain", "--config", dir("nope.cfg"), "--out", dir("x")});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("nope.cfg"), std::string::npos);
  const auto unknown = invoke({"run", "-c", cfg(), "--set", "train.lrr=1", "-o", dir("x")});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("train.lrr"), std::string::npos);
}

TEST_F(CliTest, PretrainDeterministic) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("b")}).code, 0);
  EXPECT_EQ(slurp(dir("a") + "/checkpoint"), slurp(dir("b") + "/checkpoint"));
  EXPECT_TRUE(fs::exists(dir("a") + "/pretrain.json"));
  EXPECT_TRUE(fs::exists(dir("a") + "/base_scores.json"));
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "--seed", "6", "-o", dir("c")}).code, 0);
  EXPECT_NE(slurp(dir("a") + "/checkpoint"), slurp(dir("c") + "/checkpoint"));
}

TEST_F(CliTest, FlagOverridesFile) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "--set", "pretrain.epochs=1", "-o", dir("a")}).code, 0);
  harness::ExperimentConfig c;
  harness::apply_config_file(c, dir("a") + "/config.cfg");
  EXPECT_EQ(c.pretrain.epochs, 1u);
  EXPECT_EQ(c.model.d_model, 16u);
}

TEST_F(CliTest, AnalyzeRecordsStepsAndCsv) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"analyze", "-o", dir("a")}).code, 0);
  EXPECT_EQ(kva::load_log(dir("a") + "/attribution.bin").config.steps, 7u);
  EXPECT_FALSE(fs::exists(dir("a") + "/attribution.csv"));
  const auto r = invoke({"analyze", "-o", dir("a"), "--m", "1", "--csv"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("m=1"), std::string::npos);
  const auto header = slurp(dir("a") + "/attribution.bin");
  EXPECT_EQ(nlohmann::json::parse(header.substr(0, header.find('\n')))["m"], 1);
  EXPECT_TRUE(fs::exists(dir("a") + "/attribution.csv"));
}

TEST_F(CliTest, SelectMethods) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"analyze", "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"select", "-o", dir("a"), "--method", "layer-balanced", "--q", "25"}).code, 0);
  const auto first = slurp(dir("a") + "/selection.json");
  const auto lb = selector::load_selection(dir("a") + "/selection.json");
  EXPECT_EQ(lb.layers[0].size(), lb.layers[1].size());
  EXPECT_EQ(lb.layers[0].size(), 4u);
  ASSERT_EQ(invoke({"select", "-o", dir("a"), "--method", "layer-balanced", "--q", "25"}).code, 0);
  EXPECT_EQ(slurp(dir("a") + "/selection.json"), first);
  ASSERT_EQ(invoke({"select", "-o", dir("a"), "--method", "global-high", "--q", "4"}).code, 0);
  const auto gh = selector::load_selection(dir("a") + "/selection.json");
  EXPECT_EQ(gh.method, selector::Method::global_high);
  EXPECT_EQ(gh.total(), 1u);
  EXPECT_EQ(invoke({"select", "-o", dir("a"), "--method", "sideways"}).code, 1);
  EXPECT_EQ(invoke({"select", "-o", dir("a"), "--method", "layer-balanced", "--q", "1"}).code, 1);
}

TEST_F(CliTest, ImplantRefusesForeignSelection) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "--seed", "9", "-o", dir("b")}).code, 0);
  ASSERT_EQ(invoke({"analyze", "-o", dir("b")}).code, 0);
  ASSERT_EQ(invoke({"select", "-o", dir("b")}).code, 0);
  const auto r = invoke({"implant", "-o", dir("a"), "--selection", dir("b") + "/selection.json"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("selection was computed for model"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir("a") + "/final.ckpt"));
}

TEST_F(CliTest, RunEqualsManualStages) {
  ASSERT_EQ(invoke({"run", "-c", cfg(), "-o", dir("auto")}).code, 0);
  for (const char* stage : {"pretrain", "analyze", "select", "implant", "report"})
    ASSERT_EQ(invoke({stage, "-c", cfg(), "-o", dir("manual")}).code, 0) << stage;
  for (const char* f : {"report.json", "checkpoint", "final.ckpt", "selection.json", "attribution.bin", "config.cfg"})
    EXPECT_EQ(slurp(dir("auto") + "/" + f), slurp(dir("manual") + "/" + f)) << f;
}

TEST_F(CliTest, SuppressAndEvaluate) {
  ASSERT_EQ(invoke({"pretrain", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"analyze", "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"select", "-o", dir("a")}).code, 0);
  EXPECT_EQ(invoke({"suppress", "-o", dir("a")}).code, 1);  // layer-balanced sets are for implanting
  ASSERT_EQ(invoke({"select", "-o", dir("a"), "--method", "global-high", "--q", "10"}).code, 0);
  ASSERT_EQ(invoke({"suppress", "-o", dir("a")}).code, 0);
  const auto r = invoke({"evaluate", "-o", dir("a"), "--split", "taskG"});
  ASSERT_EQ(r.code, 0);
  for (const char* s : {"copy", "reverse", "mod-add", "sort", "successor", "avg_degradation"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  EXPECT_EQ(r.out.find("task_d"), std::string::npos);
  const auto j = invoke({"evaluate", "-o", dir("a"), "--json"});
  ASSERT_EQ(j.code, 0);
  EXPECT_TRUE(nlohmann::json::parse(j.out).contains("task_d"));
  EXPECT_EQ(invoke({"evaluate", "-o", dir("a"), "--split", "taskX"}).code, 1);
  ASSERT_EQ(invoke({"report", "-o", dir("a")}).code, 0);
  const auto report = nlohmann::json::parse(slurp(dir("a") + "/report.json"));
  EXPECT_EQ(report["method"], "suppress-high");
  EXPECT_TRUE(report["training"].is_null());
}

TEST_F(CliTest, FullFinetuneRunAndHeatmapAndSimilarity) {
  const auto r = invoke({"run", "-c", cfg(), "--set", "method=full-ft", "-o", dir("ft")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(fs::exists(dir("ft") + "/attribution.bin"));
  ASSERT_EQ(invoke({"run", "-c", cfg(), "-o", dir("a")}).code, 0);
  ASSERT_EQ(invoke({"heatmap", "-o", dir("a"), "--p", "10", "--bins", "4"}).code, 0);
  EXPECT_EQ(slurp(dir("a") + "/heatmap.csv").substr(0, 16), "layer,bin,count\n");
  const auto s = invoke({"similarity", dir("a") + "/selection.json", dir("a") + "/selection.json"});
  ASSERT_EQ(s.code, 0);
  EXPECT_NE(s.out.find("overall 100.00"), std::string::npos);
  EXPECT_EQ(invoke({"similarity", dir("a") + "/selection.json", dir("missing.json")}).code, 2);
}

TEST_F(CliTest, StageFailureExitsTwo) {
  const auto r = invoke({"run", "-c", cfg(), "--set", "pretrain.min_accuracy=100", "--set", "pretrain.epochs=1", "-o", dir("a")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("stage 'pretrain'"), std::string::npos);
}
