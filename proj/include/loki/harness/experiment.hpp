#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loki/errors.hpp"
#include "loki/harness/config.hpp"
#include "loki/harness/tasks.hpp"
#include "loki/kva/attribution.hpp"
#include "loki/kva/log_io.hpp"
#include "loki/model/checkpoint.hpp"
#include "loki/model/scoring.hpp"
#include "loki/selector/selection.hpp"
#include "loki/selector/selection_io.hpp"
#include "loki/trainer/train.hpp"

namespace loki::harness {

using model::ToyTransformer;

struct BenchmarkEntry {
  std::string name;
  double base = 0.0;
  double post = 0.0;
};

struct BenchmarkVector {
  std::vector<BenchmarkEntry> entries;

  void validate() const {
    for (const auto& e : entries)
      if (!(e.base >= 0.0 && e.base <= 100.0 && e.post >= 0.0 && e.post <= 100.0))
        throw ContractError("benchmark '" + e.name + "' has a score outside [0, 100]");
  }
};

inline BenchmarkVector make_benchmarks(const std::vector<std::string>& names, const std::vector<double>& base,
                                       const std::vector<double>& post) {
  if (names.size() != base.size() || base.size() != post.size())
    throw DimensionError("benchmark names, base and post scores differ in length");
  BenchmarkVector v;
  for (std::size_t i = 0; i < names.size(); ++i) v.entries.push_back({names[i], base[i], post[i]});
  return v;
}

/// Mean over metrics of (base - post) / base * 100. Improvements count
/// negative; they are not clipped.
inline double avg_degradation(const BenchmarkVector& v) {
  v.validate();
  if (v.entries.empty()) throw ContractError("average degradation of an empty benchmark vector is undefined");
  double sum = 0.0;
  for (const auto& e : v.entries) {
    if (e.base == 0.0) throw ContractError("degradation undefined: base score of '" + e.name + "' is 0");
    sum += (e.base - e.post) / e.base * 100.0;
  }
  return sum / static_cast<double>(v.entries.size());
}

inline double avg_degradation(const std::vector<double>& base, const std::vector<double>& post) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < base.size(); ++i) names.push_back("metric" + std::to_string(i));
  return avg_degradation(make_benchmarks(names, base, post));
}

inline nlohmann::json to_json(const BenchmarkVector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : v.entries) out.push_back({{"name", e.name}, {"base", e.base}, {"post", e.post}});
  return out;
}

/// Accuracy percentage on a split (argmax at the answer position).
inline double evaluate(const ToyTransformer& m, std::span<const TargetSpec> split, std::size_t threads = 1) {
  return model::accuracy(m, split, threads);
}

inline std::vector<std::string> subtask_names() {
  std::vector<std::string> out;
  for (Subtask s : kSubtasks) out.emplace_back(subtask_name(s));
  return out;
}

/// Per-subtask Task-G eval accuracy in kSubtasks order.
inline std::vector<double> evaluate_general(const ToyTransformer& m, const SyntheticTaskSuite& suite,
                                            std::size_t threads = 1) {
  std::vector<double> out;
  for (const auto& split : suite.general_eval) out.push_back(evaluate(m, split, threads));
  return out;
}

/// Attribution prompts: the first `per_subtask` eval prompts of every subtask.
inline std::vector<TargetSpec> attribution_samples(const SyntheticTaskSuite& suite, std::size_t per_subtask) {
  std::vector<TargetSpec> out;
  for (const auto& split : suite.general_eval) {
    if (per_subtask > split.size()) throw ConfigError("samples_per_subtask exceeds the eval split");
    out.insert(out.end(), split.begin(), split.begin() + static_cast<std::ptrdiff_t>(per_subtask));
  }
  return out;
}

struct ExperimentReport {
  std::string name;
  Variant variant = Variant::loki;
  nlohmann::json configs;
  std::map<std::string, std::string> stages;  // stage -> "done" | "skipped"
  BenchmarkVector task_g;
  double avg_degradation = 0.0;
  double task_d_base = 0.0, task_d_post = 0.0;
  std::size_t trainable_parameters = 0;
  std::optional<std::vector<std::size_t>> selected_per_layer;
  nlohmann::json training;  // null when nothing was trained
  std::map<std::string, std::string> digests;
  std::map<std::string, double> timing;  // seconds per stage, kept out of the report file
};

inline nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["format"] = 1;
  j["name"] = r.name;
  j["method"] = std::string(variant_name(r.variant));
  j["configs"] = r.configs;
  j["stages"] = r.stages;
  j["task_g"] = to_json(r.task_g);
  j["avg_degradation"] = r.avg_degradation;
  j["task_d"] = {{"base", r.task_d_base}, {"post", r.task_d_post}};
  j["trainable_parameters"] = r.trainable_parameters;
  j["selected_per_layer"] = r.selected_per_layer ? nlohmann::json(*r.selected_per_layer) : nlohmann::json(nullptr);
  j["training"] = r.training;
  j["digests"] = r.digests;
  return j;
}

inline std::string report_text(const ExperimentReport& r) { return to_json(r).dump(2) + "\n"; }

/// Runs named stages, timing them and rewrapping failures as StageError.
class StageRunner {
 public:
  template <class F>
  auto operator()(const std::string& stage, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        record(stage, t0);
      } else {
        auto out = fn();
        record(stage, t0);
        return out;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  }

  const std::map<std::string, double>& timing() const { return timing_; }

 private:
  void record(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    timing_[stage] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  std::map<std::string, double> timing_;
};

/// Trains a fresh model on all Task-G training data.
inline trainer::TrainResult pretrain_base(const ExperimentConfig& cfg, const SyntheticTaskSuite& suite) {
  auto pc = cfg.pretrain;
  pc.mode = trainer::TrainMode::full_ft;
  pc.threads = cfg.threads;
  return trainer::full_finetune(ToyTransformer::initialize(cfg.model), suite.all_general_train(), pc);
}

/// Throws unless every subtask reaches the configured pretraining accuracy.
inline void check_pretrained(const ExperimentConfig& cfg, const std::vector<double>& general) {
  const auto names = subtask_names();
  for (std::size_t i = 0; i < general.size(); ++i)
    if (general[i] < cfg.pretrain_min_accuracy)
      throw ContractError("pretrained model reaches only " + std::to_string(general[i]) + "% on " + names[i] +
                          " (needs " + std::to_string(cfg.pretrain_min_accuracy) + "%)");
}

inline selector::SelectionSet select_nodes(Variant v, const kva::AttributionLog& log, double q) {
  switch (selection_method(v)) {
    case selector::Method::global_high: return selector::global_select(log, q, selector::Polarity::high);
    case selector::Method::global_low: return selector::global_select(log, q, selector::Polarity::low);
    default: return selector::layer_balanced_select(log, q);
  }
}

inline kva::AttributionLog analyze_base(const ExperimentConfig& cfg, const ToyTransformer& base,
                                        const SyntheticTaskSuite& suite) {
  return kva::attribute_all(base, attribution_samples(suite, cfg.samples_per_subtask), cfg.attribution, cfg.threads);
}

inline selector::Heatmap heatmap_for(const ExperimentConfig& cfg, const kva::AttributionLog& log) {
  return selector::heatmap_density(log, cfg.heatmap.top_percent, cfg.heatmap.polarity,
                                   cfg.heatmap.bins ? cfg.heatmap.bins : log.nodes);
}

struct VariantOutcome {
  ToyTransformer model;
  std::optional<trainer::TrainReport> training;
};

/// Applies the configured method to the base model.
inline VariantOutcome apply_variant(const ExperimentConfig& cfg, const ToyTransformer& base,
                                    const SyntheticTaskSuite& suite, const selector::SelectionSet* selection) {
  if (is_suppression(cfg.variant)) {
    if (!selection) throw ContractError("suppression needs a selection");
    return {trainer::suppress(base, *selection), std::nullopt};
  }
  auto tc = cfg.train;
  tc.mode = train_mode(cfg.variant);
  tc.threads = cfg.threads;
  if (cfg.variant == Variant::full_ft) {
    auto r = trainer::full_finetune(base, suite.lookup_train, tc);
    return {std::move(r.model), std::move(r.report)};
  }
  if (!selection) throw ContractError("implanting needs a selection");
  auto r = trainer::implant(base, *selection, suite.lookup_train, tc);
  return {std::move(r.model), std::move(r.report)};
}

inline std::string stage_of(Variant v) {
  if (is_suppression(v)) return "suppress";
  return v == Variant::full_ft ? "finetune" : "implant";
}

/// Configs block of the report; sections that did not run are null.
inline nlohmann::json report_configs(const ExperimentConfig& cfg) {
  const bool sel = needs_selection(cfg.variant);
  nlohmann::json j;
  j["model"] = model::to_json(cfg.model);
  j["tasks"] = to_json(cfg.tasks);
  j["pretrain"] = trainer::to_json(cfg.pretrain);
  j["pretrain_min_accuracy"] = cfg.pretrain_min_accuracy;
  j["checkpoint"] = cfg.checkpoint.empty() ? nlohmann::json(nullptr) : nlohmann::json(cfg.checkpoint);
  if (sel) {
    j["attribution"] = to_json(cfg.attribution);
    j["attribution"]["samples_per_subtask"] = cfg.samples_per_subtask;
    j["selection"] = {{"method", std::string(selector::method_name(selection_method(cfg.variant)))}, {"q", cfg.q}};
  } else {
    j["attribution"] = nullptr;
    j["selection"] = nullptr;
  }
  if (is_suppression(cfg.variant)) {
    j["training"] = nullptr;
  } else {
    auto tc = cfg.train;
    tc.mode = train_mode(cfg.variant);
    j["training"] = trainer::to_json(tc);
  }
  return j;
}

/// Builds the report from the artifacts of one run. Used both by the
/// in-process pipeline and when reassembling a run directory.
inline ExperimentReport assemble_report(const ExperimentConfig& cfg, const SyntheticTaskSuite& suite,
                                        const ToyTransformer& base, const ToyTransformer& final_model,
                                        const kva::AttributionLog* log, const selector::SelectionSet* selection,
                                        const nlohmann::json& training) {
  ExperimentReport r;
  r.name = cfg.name;
  r.variant = cfg.variant;
  r.configs = report_configs(cfg);
  const bool sel = needs_selection(cfg.variant);
  r.stages = {{"analyze", sel ? "done" : "skipped"},
              {"select", sel ? "done" : "skipped"},
              {stage_of(cfg.variant), "done"}};
  r.task_g = make_benchmarks(subtask_names(), evaluate_general(base, suite, cfg.threads),
                             evaluate_general(final_model, suite, cfg.threads));
  r.avg_degradation = avg_degradation(r.task_g);
  r.task_d_base = evaluate(base, suite.lookup_eval, cfg.threads);
  r.task_d_post = evaluate(final_model, suite.lookup_eval, cfg.threads);
  r.training = training;
  if (training.is_object()) r.trainable_parameters = training.at("trainable_parameters").get<std::size_t>();
  if (selection) {
    std::vector<std::size_t> counts;
    for (const auto& l : selection->layers) counts.push_back(l.size());
    r.selected_per_layer = counts;
  }
  r.digests["base_model"] = model::model_digest(base);
  r.digests["final_model"] = model::model_digest(final_model);
  r.digests["general_train"] = dataset_digest(suite.all_general_train());
  r.digests["general_eval"] = dataset_digest(suite.all_general_eval());
  r.digests["lookup_train"] = dataset_digest(suite.lookup_train);
  r.digests["lookup_eval"] = dataset_digest(suite.lookup_eval);
  if (log) r.digests["attribution_log"] = log->digest();
  if (selection) {
    Digest d;
    d.update(selector::to_json(*selection).dump());
    r.digests["selection"] = d.hex();
  }
  return r;
}

// Run directory layout (all optional except config.cfg and report.json):
//   config.cfg          resolved configuration
//   data/*.jsonl        generated datasets
//   checkpoint          base model
//   base_scores.json    base Task-G / Task-D accuracies
//   attribution.bin     attribution log
//   selection.json      selected nodes
//   heatmap.csv         attribution density
//   final.ckpt          model after the method
//   train.json          training report
//   report.json         experiment report
//   timing.json         wall seconds per stage
namespace run_files {
inline constexpr const char* kConfig = "config.cfg";
inline constexpr const char* kCheckpoint = "checkpoint";
inline constexpr const char* kBaseScores = "base_scores.json";
inline constexpr const char* kLog = "attribution.bin";
inline constexpr const char* kSelection = "selection.json";
inline constexpr const char* kHeatmap = "heatmap.csv";
inline constexpr const char* kFinal = "final.ckpt";
inline constexpr const char* kTrain = "train.json";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kTiming = "timing.json";
}  // namespace run_files

inline void write_datasets(const std::filesystem::path& dir, const SyntheticTaskSuite& suite) {
  const auto data = dir / "data";
  std::filesystem::create_directories(data);
  const auto names = subtask_names();
  for (std::size_t s = 0; s < names.size(); ++s) {
    save_dataset(data / ("general_" + names[s] + "_train.jsonl"), suite.general_train[s]);
    save_dataset(data / ("general_" + names[s] + "_eval.jsonl"), suite.general_eval[s]);
  }
  save_dataset(data / "lookup_train.jsonl", suite.lookup_train);
  save_dataset(data / "lookup_eval.jsonl", suite.lookup_eval);
}

inline nlohmann::json base_scores_json(const ToyTransformer& base, const SyntheticTaskSuite& suite, std::size_t threads) {
  nlohmann::json g;
  const auto names = subtask_names();
  const auto scores = evaluate_general(base, suite, threads);
  for (std::size_t i = 0; i < names.size(); ++i) g[names[i]] = scores[i];
  return {{"model_digest", model::model_digest(base)}, {"task_g", g}, {"task_d", evaluate(base, suite.lookup_eval, threads)}};
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  model::io::write_file(p, j.dump(2) + "\n");
}

/// Base model state shared by every method of one seed.
struct PreparedBase {
  SyntheticTaskSuite suite;
  ToyTransformer model;
};

/// Generates tasks and pretrains (or loads) the base model.
inline PreparedBase prepare_base(const ExperimentConfig& cfg, StageRunner& stage,
                                 const std::optional<std::filesystem::path>& dir = std::nullopt) {
  auto suite = stage("generate-tasks", [&] { return generate_tasks(cfg.tasks, cfg.model.vocab_size); });
  if (dir) stage("generate-tasks", [&] { write_datasets(*dir, suite); });
  auto base = stage("pretrain", [&] {
    ToyTransformer m = cfg.checkpoint.empty() ? pretrain_base(cfg, suite).model : model::load_checkpoint(cfg.checkpoint).model;
    auto shape = m.config();
    shape.seed = cfg.model.seed;
    if (!(shape == cfg.model))
      throw ConfigError("checkpoint " + cfg.checkpoint + " does not match the configured model shape");
    check_pretrained(cfg, evaluate_general(m, suite, cfg.threads));
    if (dir) {
      model::save_checkpoint(*dir / run_files::kCheckpoint, m);
      write_json(*dir / run_files::kBaseScores, base_scores_json(m, suite, cfg.threads));
    }
    return m;
  });
  return {std::move(suite), std::move(base)};
}

/// Runs attribution, selection and the method on a prepared base. `log`
/// may carry a precomputed attribution of the same base; it is computed
/// when null and needed.
inline ExperimentReport run_on_base(const ExperimentConfig& cfg, const PreparedBase& prepared,
                                    const kva::AttributionLog* log, StageRunner& stage,
                                    const std::optional<std::filesystem::path>& dir = std::nullopt) {
  std::optional<kva::AttributionLog> own_log;
  std::optional<selector::SelectionSet> selection;
  if (needs_selection(cfg.variant)) {
    if (!log) {
      own_log = stage("analyze", [&] { return analyze_base(cfg, prepared.model, prepared.suite); });
      log = &*own_log;
    } else if (log->model_digest != model::model_digest(prepared.model)) {
      throw StageError("analyze", "attribution log belongs to a different model");
    }
    if (dir) stage("analyze", [&] { kva::save_log(*dir / run_files::kLog, *log); });
    selection = stage("select", [&] { return select_nodes(cfg.variant, *log, cfg.q); });
    if (dir) {
      stage("select", [&] { selector::save_selection(*dir / run_files::kSelection, *selection); });
      stage("heatmap", [&] { model::io::write_file(*dir / run_files::kHeatmap, selector::heatmap_to_csv(heatmap_for(cfg, *log))); });
    }
  }
  auto outcome = stage(stage_of(cfg.variant), [&] {
    return apply_variant(cfg, prepared.model, prepared.suite, selection ? &*selection : nullptr);
  });
  const nlohmann::json training = outcome.training ? trainer::to_json(*outcome.training) : nlohmann::json(nullptr);
  if (dir)
    stage(stage_of(cfg.variant), [&] {
      model::save_checkpoint(*dir / run_files::kFinal, outcome.model);
      if (outcome.training) write_json(*dir / run_files::kTrain, training);
    });
  auto report = stage("evaluate", [&] {
    return assemble_report(cfg, prepared.suite, prepared.model, outcome.model, log, selection ? &*selection : nullptr,
                           training);
  });
  report.timing = stage.timing();
  if (dir)
    stage("report", [&] {
      model::io::write_file(*dir / run_files::kReport, report_text(report));
      write_json(*dir / run_files::kTiming, report.timing);
    });
  return report;
}

/// The whole pipeline. With `dir`, every intermediate artifact is written
/// there as soon as it exists, so a failed stage leaves the earlier ones.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                       const std::optional<std::filesystem::path>& dir = std::nullopt) {
  cfg.validate();
  StageRunner stage;
  if (dir)
    stage("setup", [&] {
      std::filesystem::create_directories(*dir);
      model::io::write_file(*dir / run_files::kConfig, to_config_text(cfg));
    });
  const PreparedBase prepared = prepare_base(cfg, stage, dir);
  return run_on_base(cfg, prepared, nullptr, stage, dir);
}

}  // namespace loki::harness
