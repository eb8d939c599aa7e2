#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "loki/harness/experiment.hpp"

using namespace loki;
using harness::ExperimentConfig;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.model.num_layers = 2;
  c.model.d_model = 16;
  c.model.d_ff = 32;
  c.model.vocab_size = 24;
  c.model.max_seq_len = 8;
  c.tasks.content_size = 4;
  c.tasks.general_train = 40;
  c.tasks.general_eval = 20;
  c.tasks.lookup_train = 40;
  c.tasks.lookup_eval = 20;
  c.pretrain.epochs = 2;
  c.pretrain_min_accuracy = 0.0;
  c.train.max_steps = 5;
  c.samples_per_subtask = 2;
  c.set_seed(5);
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("loki_harness_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Tasks, Deterministic) {
  harness::TaskConfig c;
  c.seed = 11;
  const auto a = harness::generate_tasks(c, 64), b = harness::generate_tasks(c, 64);
  EXPECT_EQ(harness::to_jsonl(a.all_general_train()), harness::to_jsonl(b.all_general_train()));
  EXPECT_EQ(harness::to_jsonl(a.lookup_eval), harness::to_jsonl(b.lookup_eval));
  c.seed = 12;
  EXPECT_NE(harness::to_jsonl(harness::generate_tasks(c, 64).lookup_train), harness::to_jsonl(a.lookup_train));
}

TEST(Tasks, CopyRule) {
  const auto s = harness::generate_tasks({}, 64);
  for (const auto& t : s.general_train[0]) {
    ASSERT_EQ(t.tokens.size(), 5u);
    EXPECT_EQ(t.tokens.back(), harness::kSep);
    EXPECT_EQ(t.answer_position, 4u);
    EXPECT_EQ(t.gold, t.tokens[1]);
  }
}

TEST(Tasks, ModAddRecomputed) {
  const auto s = harness::generate_tasks({}, 64);
  const std::size_t C = s.config.content_size;
  for (const auto* split : {&s.general_train[2], &s.general_eval[2]})
    for (const auto& t : *split) {
      const std::size_t a = t.tokens[1] - harness::kFirstContent, b = t.tokens[2] - harness::kFirstContent;
      EXPECT_EQ(t.gold - harness::kFirstContent, (a + b) % C);
    }
}

TEST(Tasks, SplitsDisjoint) {
  const auto s = harness::generate_tasks({}, 64);
  auto key = [](const model::TargetSpec& t) { return t.tokens; };
  for (std::size_t k = 0; k < s.general_train.size(); ++k) {
    std::set<std::vector<model::Token>> train;
    for (const auto& t : s.general_train[k]) train.insert(key(t));
    for (const auto& t : s.general_eval[k]) EXPECT_FALSE(train.count(key(t)));
  }
  std::set<std::vector<model::Token>> train;
  for (const auto& t : s.lookup_train) train.insert(key(t));
  for (const auto& t : s.lookup_eval) EXPECT_FALSE(train.count(key(t)));
}

TEST(Tasks, LookupIsolatedFromGeneral) {
  const auto s = harness::generate_tasks({}, 64);
  const std::size_t C = s.config.content_size;
  for (std::size_t k = 0; k < C; ++k) {
    EXPECT_NE(s.key_map[k], k);
    EXPECT_NE(s.key_map[k], (k + 1) % C);
  }
  // Key tokens never occur in Task-G prompts.
  for (const auto& t : s.all_general_train())
    for (auto tok : t.tokens) EXPECT_LT(tok, harness::kFirstContent + C);
  for (const auto& t : s.lookup_train) {
    EXPECT_EQ(t.tokens[0], harness::kKvMarker);
    EXPECT_EQ(t.answer_position, 3u);
    EXPECT_EQ(t.gold, harness::content_token(s.key_map[t.tokens[3] - harness::kFirstContent - C]));
  }
}

TEST(Tasks, VocabularyTooSmall) {
  harness::TaskConfig c;
  EXPECT_THROW(harness::generate_tasks(c, 26), ConfigError);
  EXPECT_NO_THROW(harness::generate_tasks(c, 27));
  c.lookup_eval = 0;
  EXPECT_THROW(harness::generate_tasks(c, 64), ConfigError);
}

TEST(Tasks, JsonlRoundTripAndErrors) {
  const auto s = harness::generate_tasks({}, 64);
  const auto text = harness::to_jsonl(s.lookup_eval);
  const auto back = harness::from_jsonl(text);
  ASSERT_EQ(back.size(), s.lookup_eval.size());
  EXPECT_EQ(harness::to_jsonl(back), text);
  try {
    harness::from_jsonl(text + "{\"tokens\": [1]}\n");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("line 101"), std::string::npos);
  }
}

TEST(Evaluate, ZeroOutputProjectionPredictsTokenZero) {
  auto cfg = tiny_config().model;
  auto m = model::ToyTransformer::initialize(cfg);
  for (auto& p : m.parameters())
    if (p.name == "w_out") std::fill(p.tensor->data().begin(), p.tensor->data().end(), 0.0);
  std::vector<model::TargetSpec> split;
  for (model::Token g : {0u, 3u, 0u, 9u, 0u, 1u, 2u, 4u}) split.push_back({{1, 2, 3}, 2, g});
  EXPECT_DOUBLE_EQ(harness::evaluate(m, split), 37.5);
}

TEST(Evaluate, PermutationInvariantAndEmptyRejected) {
  const auto cfg = tiny_config();
  const auto m = model::ToyTransformer::initialize(cfg.model);
  auto split = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size).lookup_train;
  const double a = harness::evaluate(m, split);
  std::reverse(split.begin(), split.end());
  EXPECT_EQ(harness::evaluate(m, split), a);
  EXPECT_EQ(harness::evaluate(m, split, 3), a);
  EXPECT_THROW(harness::evaluate(m, std::vector<model::TargetSpec>{}), ContractError);
}

TEST(AvgDegradation, ReferenceRows) {
  EXPECT_NEAR(harness::avg_degradation({65.77, 84.46, 73.85, 62.98, 68.29, 79.76},
                                       {62.32, 15.16, 23.54, 60.93, 43.29, 59.73}),
              36.73, 0.01);
  EXPECT_NEAR(harness::avg_degradation({24.37, 39.65, 30.98, 44.20, 26.83, 33.39}, {4.65, 2.65, 0.00, 0.00, 0.00, 23.20}),
              84.13, 0.01);
  EXPECT_NEAR(harness::avg_degradation({65.77, 84.46, 73.85, 62.98, 68.29, 79.76},
                                       {62.05, 57.85, 73.84, 60.3, 54.88, 74.15}),
              11.35, 0.01);
}

TEST(AvgDegradation, Properties) {
  EXPECT_EQ(harness::avg_degradation({50, 60, 70}, {50, 60, 70}), 0.0);
  EXPECT_GT(harness::avg_degradation({50, 60}, {49, 59}), 0.0);
  // (50-25)/50 = 50%, (40-60)/40 = -50% -> kept signed
  EXPECT_DOUBLE_EQ(harness::avg_degradation({50, 40}, {25, 60}), 0.0);
  EXPECT_DOUBLE_EQ(harness::avg_degradation({80}, {100}), -25.0);
  EXPECT_THROW(harness::avg_degradation({0, 50}, {0, 50}), ContractError);
  EXPECT_THROW(harness::avg_degradation({50}, {101}), ContractError);
  EXPECT_THROW(harness::avg_degradation({}, {}), ContractError);
  EXPECT_THROW(harness::avg_degradation({50}, {40, 30}), DimensionError);
}

TEST(Config, ParsesAndRejectsUnknownKeys) {
  ExperimentConfig c;
  harness::apply_config_text(c, "# comment\nmethod = global-low\nq=5  # inline\n\ntrain.lr = 0.5\nmodel.ffn_bias = true\n");
  EXPECT_EQ(c.variant, harness::Variant::global_low);
  EXPECT_EQ(c.q, 5.0);
  EXPECT_EQ(c.train.learning_rate, 0.5);
  EXPECT_TRUE(c.model.ffn_bias);
  try {
    harness::apply_config_text(c, "q = 5\ntrain.lrr = 1\n", "exp.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exp.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("train.lrr"), std::string::npos);
  }
  EXPECT_THROW(harness::apply_config_text(c, "q = ten\n"), ConfigError);
  EXPECT_THROW(harness::apply_config_text(c, "model.layers = -1\n"), ConfigError);
  EXPECT_THROW(harness::apply_config_text(c, "model.final_norm = maybe\n"), ConfigError);
  EXPECT_THROW(harness::apply_config_text(c, "just words\n"), ConfigError);
  EXPECT_THROW(harness::apply_config_file(c, "/nonexistent/exp.cfg"), ConfigError);
}

TEST(Config, SeedDrivesEverySeedAndTextRoundTrips) {
  ExperimentConfig c;
  harness::apply_setting(c, "seed", "42");
  EXPECT_EQ(c.model.seed, 42u);
  EXPECT_EQ(c.tasks.seed, 42u);
  EXPECT_EQ(c.pretrain.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  c.variant = harness::Variant::suppress_high;
  c.q = 1;
  c.train.learning_rate = 0.1 + 0.2;
  ExperimentConfig d;
  harness::apply_config_text(d, harness::to_config_text(c));
  EXPECT_EQ(harness::to_config_text(d), harness::to_config_text(c));
  EXPECT_EQ(d.train.learning_rate, c.train.learning_rate);
}

TEST(Experiment, ByteIdenticalReports) {
  const auto cfg = tiny_config();
  const auto a = harness::run_experiment(cfg), b = harness::run_experiment(cfg);
  EXPECT_EQ(harness::report_text(a), harness::report_text(b));
  EXPECT_EQ(a.stages.at("analyze"), "done");
  ASSERT_TRUE(a.selected_per_layer);
  EXPECT_EQ((*a.selected_per_layer)[0], (*a.selected_per_layer)[1]);
  EXPECT_EQ(a.trainable_parameters, a.selected_per_layer->at(0) * 2 * cfg.model.d_ff);
  EXPECT_FALSE(to_json(a).contains("timing"));
}

TEST(Experiment, FullFinetuneSkipsSelection) {
  auto cfg = tiny_config();
  cfg.variant = harness::Variant::full_ft;
  const auto r = harness::run_experiment(cfg);
  EXPECT_EQ(r.stages.at("analyze"), "skipped");
  EXPECT_EQ(r.stages.at("select"), "skipped");
  EXPECT_FALSE(r.selected_per_layer);
  const auto j = to_json(r);
  EXPECT_TRUE(j["configs"]["attribution"].is_null());
  EXPECT_FALSE(j["digests"].contains("attribution_log"));
  EXPECT_EQ(r.trainable_parameters, model::ToyTransformer::initialize(cfg.model).parameter_count());
}

TEST(Experiment, SuppressionTrainsNothing) {
  auto cfg = tiny_config();
  cfg.variant = harness::Variant::suppress_low;
  cfg.q = 10;
  const auto r = harness::run_experiment(cfg);
  EXPECT_TRUE(r.training.is_null());
  EXPECT_EQ(r.trainable_parameters, 0u);
  EXPECT_EQ(r.stages.at("suppress"), "done");
}

TEST(Experiment, DegenerateQuotaNamesSelectStage) {
  auto cfg = tiny_config();
  cfg.q = 1;  // T = 0.32 -> k_l = 0
  const auto dir = scratch("degenerate");
  try {
    harness::run_experiment(cfg, dir);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "select");
    EXPECT_NE(std::string(e.what()).find("degenerate"), std::string::npos);
  }
  // Artifacts of earlier stages stay for inspection.
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint"));
  EXPECT_TRUE(std::filesystem::exists(dir / "attribution.bin"));
  EXPECT_FALSE(std::filesystem::exists(dir / "report.json"));
  std::filesystem::remove_all(dir);
}

TEST(Experiment, PretrainTargetEnforced) {
  auto cfg = tiny_config();
  cfg.pretrain_min_accuracy = 100.0;
  cfg.pretrain.epochs = 1;
  try {
    harness::run_experiment(cfg);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "pretrain");
  }
}

TEST(Experiment, RunDirectoryLayout) {
  const auto cfg = tiny_config();
  const auto dir = scratch("layout");
  const auto r = harness::run_experiment(cfg, dir);
  for (const char* f : {"config.cfg", "checkpoint", "base_scores.json", "attribution.bin", "selection.json", "heatmap.csv",
                        "final.ckpt", "train.json", "report.json", "timing.json", "data/lookup_eval.jsonl",
                        "data/general_copy_train.jsonl"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(model::io::read_file(dir / "report.json"), harness::report_text(r));
  // The recorded config reproduces the report, loading the stored base model.
  ExperimentConfig again;
  harness::apply_config_file(again, dir / "config.cfg");
  EXPECT_EQ(harness::report_text(harness::run_experiment(again)), harness::report_text(r));
  again.checkpoint = (dir / "checkpoint").string();
  auto from_ckpt = harness::run_experiment(again);
  EXPECT_EQ(to_json(from_ckpt)["digests"], to_json(r)["digests"]);
  EXPECT_EQ(to_json(from_ckpt)["task_g"], to_json(r)["task_g"]);
  std::filesystem::remove_all(dir);
}

TEST(Experiment, SharedLogMustMatchBase) {
  const auto cfg = tiny_config();
  harness::StageRunner stage;
  const auto base = harness::prepare_base(cfg, stage);
  const auto log = harness::analyze_base(cfg, base.model, base.suite);
  const auto shared = harness::run_on_base(cfg, base, &log, stage);
  EXPECT_EQ(harness::report_text(shared), harness::report_text(harness::run_experiment(cfg)));
  harness::PreparedBase other{base.suite, model::ToyTransformer::initialize(cfg.model)};
  other.model.parameters()[0].tensor->data()[0] += 1.0;
  EXPECT_THROW(harness::run_on_base(cfg, other, &log, stage), StageError);
}
