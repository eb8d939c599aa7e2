#pragma once

#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "loki/errors.hpp"
#include "loki/harness/config.hpp"
#include "loki/harness/experiment.hpp"
#include "loki/kva/log_io.hpp"
#include "loki/selector/selection_io.hpp"

namespace loki::cli {

namespace fs = std::filesystem;
namespace files = harness::run_files;
using harness::ExperimentConfig;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Options shared by every subcommand.
struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out;
  bool verbose = false;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
  bool verbose = false;
  void log(const std::string& s) const {
    if (verbose) err << s << '\n';
  }
};

/// Config precedence: flag > file > default. Without --config, a run
/// directory's config.cfg is inherited so stages can be chained.
inline ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig cfg;
  if (!o.config.empty())
    harness::apply_config_file(cfg, o.config);
  else if (!o.out.empty() && fs::exists(fs::path(o.out) / files::kConfig))
    harness::apply_config_file(cfg, fs::path(o.out) / files::kConfig);
  for (const auto& s : o.sets) {
    auto [k, v] = harness::split_assignment(s);
    harness::apply_setting(cfg, k, v);
  }
  if (o.seed) cfg.set_seed(*o.seed);
  if (o.threads) cfg.threads = *o.threads;
  return cfg;
}

inline fs::path run_dir(const CommonOptions& o, const ExperimentConfig& cfg) {
  return o.out.empty() ? fs::path("runs") / cfg.name : fs::path(o.out);
}

inline fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

inline void save_config(const fs::path& dir, const ExperimentConfig& cfg) {
  model::io::write_file(dir / files::kConfig, harness::to_config_text(cfg));
}

/// Loads a checkpoint whose shape must match the configured model.
inline model::ToyTransformer load_model(const fs::path& p, const ExperimentConfig& cfg) {
  auto m = model::load_checkpoint(p).model;
  auto shape = m.config();
  shape.seed = cfg.model.seed;
  if (!(shape == cfg.model)) throw ConfigError("checkpoint " + p.string() + " does not match the configured model shape");
  return m;
}

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

/// Variant implied by a selection method and what is done with it.
inline harness::Variant variant_for(selector::Method m, bool suppress, bool low_rank) {
  using harness::Variant;
  if (suppress) {
    if (m == selector::Method::layer_balanced)
      throw ConfigError("suppression expects a global-high or global-low selection");
    return m == selector::Method::global_high ? Variant::suppress_high : Variant::suppress_low;
  }
  switch (m) {
    case selector::Method::global_high: return Variant::global_high;
    case selector::Method::global_low: return Variant::global_low;
    default: return low_rank ? Variant::loki_low_rank : Variant::loki;
  }
}

// Subcommand bodies. Each returns after writing its declared outputs.

inline void cmd_pretrain(const CommonOptions& o, const Streams& io) {
  auto cfg = resolve_config(o);
  cfg.checkpoint.clear();
  cfg.validate();
  const auto dir = run_dir(o, cfg);
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  io.log("pretraining on " + std::to_string(suite.all_general_train().size()) + " Task-G examples");
  const auto result = harness::pretrain_base(cfg, suite);
  fs::create_directories(dir);
  save_config(dir, cfg);
  harness::write_datasets(dir, suite);
  model::save_checkpoint(dir / files::kCheckpoint, result.model);
  harness::write_json(dir / "pretrain.json", trainer::to_json(result.report));
  const auto scores = harness::base_scores_json(result.model, suite, cfg.threads);
  harness::write_json(dir / files::kBaseScores, scores);
  for (const auto& name : harness::subtask_names())
    io.out << name << ' ' << fixed2(scores["task_g"][name].get<double>()) << '\n';
  io.out << "checkpoint " << (dir / files::kCheckpoint).string() << '\n';
  harness::check_pretrained(cfg, harness::evaluate_general(result.model, suite, cfg.threads));
}

struct AnalyzeOptions {
  std::string checkpoint;
  std::optional<std::size_t> m;
  std::optional<std::size_t> samples;
  std::string path_mode, positions;
  bool activation = false;
  bool csv = false;
};

inline void cmd_analyze(const CommonOptions& o, const AnalyzeOptions& a, const Streams& io) {
  auto cfg = resolve_config(o);
  if (a.m) cfg.attribution.steps = *a.m;
  if (a.samples) cfg.samples_per_subtask = *a.samples;
  if (!a.path_mode.empty()) cfg.attribution.path = kva::parse_path_mode(a.path_mode);
  if (!a.positions.empty()) cfg.attribution.positions = kva::parse_position_mode(a.positions);
  if (a.activation) cfg.attribution.multiply_by_activation = true;
  cfg.validate();
  const auto dir = run_dir(o, cfg);
  const auto m = load_model(or_default(a.checkpoint, dir / files::kCheckpoint), cfg);
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  io.log("attributing " + std::to_string(cfg.samples_per_subtask * harness::kSubtasks.size()) + " prompts");
  const auto log = harness::analyze_base(cfg, m, suite);
  fs::create_directories(dir);
  save_config(dir, cfg);
  kva::save_log(dir / files::kLog, log);
  if (a.csv) model::io::write_file(dir / "attribution.csv", kva::log_to_csv(log));
  io.out << "attribution " << log.samples << 'x' << log.layers << 'x' << log.nodes << " m=" << log.config.steps << ' '
         << (dir / files::kLog).string() << '\n';
}

struct SelectOptions {
  std::string log;
  std::optional<double> q;
  std::string method;
};

inline void cmd_select(const CommonOptions& o, const SelectOptions& s, const Streams& io) {
  auto cfg = resolve_config(o);
  if (s.q) cfg.q = *s.q;
  if (!s.method.empty())
    cfg.variant = variant_for(selector::parse_method(s.method), harness::is_suppression(cfg.variant),
                              cfg.variant == harness::Variant::loki_low_rank);
  if (!harness::needs_selection(cfg.variant)) cfg.variant = harness::Variant::loki;
  cfg.validate();
  const auto dir = run_dir(o, cfg);
  const auto log = kva::load_log(or_default(s.log, dir / files::kLog));
  const auto sel = harness::select_nodes(cfg.variant, log, cfg.q);
  fs::create_directories(dir);
  save_config(dir, cfg);
  selector::save_selection(dir / files::kSelection, sel);
  io.out << selector::method_name(sel.method) << " q=" << cfg.q << " per-layer";
  for (const auto& l : sel.layers) io.out << ' ' << l.size();
  io.out << " total " << sel.total() << '\n';
}

struct ModelOptions {
  std::string checkpoint;
  std::string selection;
  std::string mode;
};

inline void write_outcome(const fs::path& dir, const harness::VariantOutcome& r) {
  model::save_checkpoint(dir / files::kFinal, r.model);
  if (r.training) harness::write_json(dir / files::kTrain, trainer::to_json(*r.training));
}

inline void cmd_implant(const CommonOptions& o, const ModelOptions& mo, const Streams& io) {
  auto cfg = resolve_config(o);
  const auto mode = mo.mode.empty() ? harness::train_mode(cfg.variant) : trainer::parse_train_mode(mo.mode);
  if (harness::is_suppression(cfg.variant)) cfg.variant = harness::Variant::loki;
  const auto dir = run_dir(o, cfg);
  std::optional<selector::SelectionSet> sel;
  if (mode == trainer::TrainMode::full_ft) {
    cfg.variant = harness::Variant::full_ft;
  } else {
    sel = selector::load_selection(or_default(mo.selection, dir / files::kSelection));
    cfg.variant = variant_for(sel->method, false, mode == trainer::TrainMode::loki_low_rank);
  }
  cfg.validate();
  const auto base = load_model(or_default(mo.checkpoint, dir / files::kCheckpoint), cfg);
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  io.log("training " + std::string(trainer::train_mode_name(mode)) + " on " + std::to_string(suite.lookup_train.size()) +
         " Task-D examples");
  const auto r = harness::apply_variant(cfg, base, suite, sel ? &*sel : nullptr);
  fs::create_directories(dir);
  save_config(dir, cfg);
  write_outcome(dir, r);
  io.out << "mode " << trainer::train_mode_name(mode) << " steps " << r.training->steps << " trainable "
         << r.training->trainable_parameters << " final_loss " << r.training->final_loss << '\n';
}

inline void cmd_suppress(const CommonOptions& o, const ModelOptions& mo, const Streams& io) {
  auto cfg = resolve_config(o);
  const auto dir = run_dir(o, cfg);
  const auto sel = selector::load_selection(or_default(mo.selection, dir / files::kSelection));
  cfg.variant = variant_for(sel.method, true, false);
  cfg.validate();
  const auto base = load_model(or_default(mo.checkpoint, dir / files::kCheckpoint), cfg);
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  const auto r = harness::apply_variant(cfg, base, suite, &sel);
  fs::create_directories(dir);
  save_config(dir, cfg);
  write_outcome(dir, r);
  io.out << "suppressed " << sel.total() << " nodes -> " << (dir / files::kFinal).string() << '\n';
}

struct EvaluateOptions {
  std::string checkpoint;
  std::string split = "all";
  std::string base;
  bool json = false;
};

inline void cmd_evaluate(const CommonOptions& o, const EvaluateOptions& e, const Streams& io) {
  auto cfg = resolve_config(o);
  cfg.validate();
  if (e.split != "taskG" && e.split != "taskD" && e.split != "all")
    throw ConfigError("unknown split '" + e.split + "' (expected taskG, taskD or all)");
  const auto dir = run_dir(o, cfg);
  const auto m = load_model(or_default(e.checkpoint, dir / files::kFinal), cfg);
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  const fs::path base_path = or_default(e.base, dir / files::kBaseScores);
  std::optional<nlohmann::json> base;
  if (!e.base.empty() || fs::exists(base_path)) base = nlohmann::json::parse(model::io::read_file(base_path));

  nlohmann::json out;
  if (e.split != "taskD") {
    const auto names = harness::subtask_names();
    const auto scores = harness::evaluate_general(m, suite, cfg.threads);
    std::vector<double> base_scores;
    for (std::size_t i = 0; i < names.size(); ++i) {
      out["task_g"][names[i]] = scores[i];
      if (base) base_scores.push_back(base->at("task_g").at(names[i]).get<double>());
    }
    if (base) out["avg_degradation"] = harness::avg_degradation(harness::make_benchmarks(names, base_scores, scores));
  }
  if (e.split != "taskG") out["task_d"] = harness::evaluate(m, suite.lookup_eval, cfg.threads);
  if (e.json) {
    io.out << out.dump(2) << '\n';
    return;
  }
  if (out.contains("task_g"))
    for (const auto& name : harness::subtask_names()) io.out << name << ' ' << fixed2(out["task_g"][name].get<double>()) << '\n';
  if (out.contains("avg_degradation")) io.out << "avg_degradation " << fixed2(out["avg_degradation"].get<double>()) << '\n';
  if (out.contains("task_d")) io.out << "task_d " << fixed2(out["task_d"].get<double>()) << '\n';
}

struct HeatmapOptions {
  std::string log;
  std::optional<double> p;
  std::string polarity;
  std::optional<std::size_t> bins;
};

inline void cmd_heatmap(const CommonOptions& o, const HeatmapOptions& h, const Streams& io) {
  auto cfg = resolve_config(o);
  if (h.p) cfg.heatmap.top_percent = *h.p;
  if (!h.polarity.empty()) cfg.heatmap.polarity = selector::parse_polarity(h.polarity);
  if (h.bins) cfg.heatmap.bins = *h.bins;
  const auto dir = run_dir(o, cfg);
  const auto log = kva::load_log(or_default(h.log, dir / files::kLog));
  const auto map = harness::heatmap_for(cfg, log);
  fs::create_directories(dir);
  model::io::write_file(dir / files::kHeatmap, selector::heatmap_to_csv(map));
  io.out << "heatmap " << map.layers << 'x' << map.bins << ' ' << (dir / files::kHeatmap).string() << '\n';
}

struct SimilarityOptions {
  std::string a, b;
  bool json = false;
};

inline void cmd_similarity(const SimilarityOptions& s, const Streams& io) {
  const auto sim = selector::similarity(selector::load_selection(s.a), selector::load_selection(s.b));
  if (s.json) {
    io.out << nlohmann::json{{"per_layer", sim.per_layer}, {"overall", sim.overall}}.dump(2) << '\n';
    return;
  }
  for (std::size_t l = 0; l < sim.per_layer.size(); ++l) io.out << "layer " << l << ' ' << fixed2(100 * sim.per_layer[l]) << '\n';
  io.out << "overall " << fixed2(100 * sim.overall) << '\n';
}

inline void print_summary(const harness::ExperimentReport& r, const Streams& io) {
  for (const auto& e : r.task_g.entries) io.out << e.name << ' ' << fixed2(e.base) << " -> " << fixed2(e.post) << '\n';
  io.out << "avg_degradation " << fixed2(r.avg_degradation) << '\n';
  io.out << "task_d " << fixed2(r.task_d_base) << " -> " << fixed2(r.task_d_post) << '\n';
  io.out << "trainable_parameters " << r.trainable_parameters << '\n';
}

inline void cmd_run(const CommonOptions& o, const Streams& io) {
  const auto cfg = resolve_config(o);
  cfg.validate();
  const auto dir = run_dir(o, cfg);
  io.log("running " + std::string(harness::variant_name(cfg.variant)) + " into " + dir.string());
  const auto r = harness::run_experiment(cfg, dir);
  print_summary(r, io);
}

/// Rebuilds report.json from the artifacts in a run directory.
inline void cmd_report(const CommonOptions& o, const Streams& io) {
  if (o.out.empty()) throw ConfigError("report needs --out pointing at a run directory");
  const fs::path dir = o.out;
  if (!fs::exists(dir / files::kConfig)) throw InputError("no " + std::string(files::kConfig) + " in " + dir.string());
  auto cfg = resolve_config(o);
  cfg.validate();
  const auto suite = harness::generate_tasks(cfg.tasks, cfg.model.vocab_size);
  const auto base = load_model(dir / files::kCheckpoint, cfg);
  const auto final_model = load_model(dir / files::kFinal, cfg);
  std::optional<kva::AttributionLog> log;
  std::optional<selector::SelectionSet> sel;
  if (harness::needs_selection(cfg.variant)) {
    log = kva::load_log(dir / files::kLog);
    sel = selector::load_selection(dir / files::kSelection);
  }
  nlohmann::json training = nullptr;
  if (!harness::is_suppression(cfg.variant)) training = nlohmann::json::parse(model::io::read_file(dir / files::kTrain));
  const auto r = harness::assemble_report(cfg, suite, base, final_model, log ? &*log : nullptr, sel ? &*sel : nullptr,
                                          training);
  model::io::write_file(dir / files::kReport, harness::report_text(r));
  print_summary(r, io);
}

inline void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("-c,--config", o.config, "Flat key = value config file");
  sub->add_option("--set", o.sets, "Override a config key (key=value), repeatable");
  sub->add_option("--seed", o.seed, "Seed for model init, tasks and training");
  sub->add_option("--threads", o.threads, "Worker threads");
  sub->add_option("-o,--out", o.out, "Run directory (default runs/<name>)");
  sub->add_flag("-v,--verbose", o.verbose, "Progress messages on stderr");
}

/// Entry point. Exit codes: 0 success, 1 usage or config error, 2 runtime
/// or stage error.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Locate low-contribution knowledge vectors and implant new tasks into them", "loki"};
  app.require_subcommand(1);
  CommonOptions common;
  AnalyzeOptions analyze;
  SelectOptions select;
  ModelOptions model_opts;
  EvaluateOptions eval;
  HeatmapOptions heat;
  SimilarityOptions sim;

  auto* pretrain = app.add_subcommand("pretrain", "Train the toy model on Task-G");
  auto* an = app.add_subcommand("analyze", "Attribute knowledge vectors on Task-G prompts");
  an->add_option("--checkpoint", analyze.checkpoint, "Model checkpoint (default <out>/checkpoint)");
  an->add_option("--m", analyze.m, "Riemann steps (default 7)");
  an->add_option("--samples", analyze.samples, "Prompts per subtask");
  an->add_option("--path", analyze.path_mode, "joint-layer | per-node-exact");
  an->add_option("--positions", analyze.positions, "final | all");
  an->add_flag("--activation", analyze.activation, "Multiply path gradients by node activations");
  an->add_flag("--csv", analyze.csv, "Also write attribution.csv");
  auto* se = app.add_subcommand("select", "Select trainable nodes from an attribution log");
  se->add_option("--log", select.log, "Attribution log (default <out>/attribution.bin)");
  se->add_option("--q", select.q, "Percentage of nodes to select");
  se->add_option("--method", select.method, "layer-balanced | global-high | global-low");
  auto* im = app.add_subcommand("implant", "Train selected down-projection rows on Task-D");
  im->add_option("--checkpoint", model_opts.checkpoint, "Base checkpoint (default <out>/checkpoint)");
  im->add_option("--selection", model_opts.selection, "Selection file (default <out>/selection.json)");
  im->add_option("--mode", model_opts.mode, "loki | loki-low-rank | full-ft");
  auto* su = app.add_subcommand("suppress", "Zero the selected down-projection rows");
  su->add_option("--checkpoint", model_opts.checkpoint, "Base checkpoint (default <out>/checkpoint)");
  su->add_option("--selection", model_opts.selection, "Selection file (default <out>/selection.json)");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on Task-G and Task-D");
  ev->add_option("--checkpoint", eval.checkpoint, "Checkpoint (default <out>/final.ckpt)");
  ev->add_option("--split", eval.split, "taskG | taskD | all");
  ev->add_option("--base", eval.base, "Base scores (default <out>/base_scores.json)");
  ev->add_flag("--json", eval.json, "Print JSON");
  auto* hm = app.add_subcommand("heatmap", "Export attribution density as CSV");
  hm->add_option("--log", heat.log, "Attribution log (default <out>/attribution.bin)");
  hm->add_option("--p", heat.p, "Top percentage marked per sample (default 5)");
  hm->add_option("--polarity", heat.polarity, "high | low");
  hm->add_option("--bins", heat.bins, "Node-position bins (default D)");
  auto* si = app.add_subcommand("similarity", "Overlap between two selection files");
  si->add_option("a", sim.a, "First selection")->required();
  si->add_option("b", sim.b, "Second selection")->required();
  si->add_flag("--json", sim.json, "Print JSON");
  auto* ru = app.add_subcommand("run", "Full pipeline from a config");
  auto* re = app.add_subcommand("report", "Rebuild report.json from a run directory");
  for (auto* s : {pretrain, an, se, im, su, ev, hm, si, ru, re}) add_common(s, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const Streams io{out, err, common.verbose};
  try {
    if (*pretrain) cmd_pretrain(common, io);
    else if (*an) cmd_analyze(common, analyze, io);
    else if (*se) cmd_select(common, select, io);
    else if (*im) cmd_implant(common, model_opts, io);
    else if (*su) cmd_suppress(common, model_opts, io);
    else if (*ev) cmd_evaluate(common, eval, io);
    else if (*hm) cmd_heatmap(common, heat, io);
    else if (*si) cmd_similarity(sim, io);
    else if (*ru) cmd_run(common, io);
    else if (*re) cmd_report(common, io);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace loki::cli
