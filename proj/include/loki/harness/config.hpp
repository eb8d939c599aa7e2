#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "loki/errors.hpp"
#include "loki/harness/tasks.hpp"
#include "loki/kva/attribution.hpp"
#include "loki/model/config.hpp"
#include "loki/selector/selection.hpp"
#include "loki/trainer/train.hpp"

namespace loki::harness {

/// What the experiment does to the pretrained model.
enum class Variant { loki, loki_low_rank, global_high, global_low, full_ft, suppress_high, suppress_low };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::loki: return "loki";
    case Variant::loki_low_rank: return "loki-low-rank";
    case Variant::global_high: return "global-high";
    case Variant::global_low: return "global-low";
    case Variant::full_ft: return "full-ft";
    case Variant::suppress_high: return "suppress-high";
    case Variant::suppress_low: return "suppress-low";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::loki, Variant::loki_low_rank, Variant::global_high, Variant::global_low, Variant::full_ft,
                    Variant::suppress_high, Variant::suppress_low})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown method '" + std::string(s) +
                    "' (expected loki|loki-low-rank|global-high|global-low|full-ft|suppress-high|suppress-low)");
}

inline bool needs_selection(Variant v) { return v != Variant::full_ft; }
inline bool is_suppression(Variant v) { return v == Variant::suppress_high || v == Variant::suppress_low; }

inline selector::Method selection_method(Variant v) {
  switch (v) {
    case Variant::global_high:
    case Variant::suppress_high: return selector::Method::global_high;
    case Variant::global_low:
    case Variant::suppress_low: return selector::Method::global_low;
    default: return selector::Method::layer_balanced;
  }
}

inline trainer::TrainMode train_mode(Variant v) {
  if (v == Variant::full_ft) return trainer::TrainMode::full_ft;
  if (v == Variant::loki_low_rank) return trainer::TrainMode::loki_low_rank;
  return trainer::TrainMode::loki;
}

struct HeatmapConfig {
  double top_percent = 5.0;
  selector::Polarity polarity = selector::Polarity::high;
  std::size_t bins = 0;  // 0 means one bin per node
};

struct ExperimentConfig {
  std::string name = "experiment";
  Variant variant = Variant::loki;
  double q = 10.0;
  model::ModelConfig model;
  TaskConfig tasks;
  trainer::TrainConfig pretrain = default_pretrain();
  /// Every Task-G subtask must reach this eval accuracy after pretraining; 0 disables the check.
  double pretrain_min_accuracy = 95.0;
  /// Load the base model from here instead of pretraining.
  std::string checkpoint;
  kva::AttributionConfig attribution;
  std::size_t samples_per_subtask = 10;
  trainer::TrainConfig train = default_train();
  HeatmapConfig heatmap;
  std::size_t threads = 1;

  static trainer::TrainConfig default_pretrain() {
    trainer::TrainConfig c;
    c.mode = trainer::TrainMode::full_ft;
    c.batch_size = 32;
    c.epochs = 40;
    return c;
  }
  static trainer::TrainConfig default_train() {
    trainer::TrainConfig c;
    c.learning_rate = 1e-2;
    c.epochs = 1000;
    c.max_steps = 600;
    return c;
  }

  /// One seed drives model init, task generation, and both training runs.
  void set_seed(std::uint64_t s) { model.seed = tasks.seed = pretrain.seed = train.seed = s; }

  void validate() const {
    model.validate();
    tasks.validate(model.vocab_size);
    pretrain.validate();
    train.validate();
    attribution.validate();
    if (!(q > 0.0 && q < 100.0)) throw ConfigError("q must lie in the open interval (0, 100)");
    if (samples_per_subtask == 0) throw ConfigError("samples_per_subtask must be at least 1");
    if (samples_per_subtask > tasks.general_eval)
      throw ConfigError("samples_per_subtask exceeds the Task-G eval split size");
    if (!(pretrain_min_accuracy >= 0.0 && pretrain_min_accuracy <= 100.0))
      throw ConfigError("pretrain.min_accuracy must lie in [0, 100]");
    if (!(heatmap.top_percent > 0.0 && heatmap.top_percent < 100.0))
      throw ConfigError("heatmap.top_percent must lie in (0, 100)");
    if (heatmap.bins > model.d_model) throw ConfigError("heatmap.bins must not exceed d_model");
    if (threads == 0) throw ConfigError("threads must be at least 1");
  }
};

// Flat key = value config files. '#' starts a comment; unknown keys are
// rejected so typos fail loudly.

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
Field uint_field(T ExperimentConfig::*top) {
  return {[top](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*top = static_cast<T>(parse_uint(k, v));
          },
          [top](const ExperimentConfig& c) { return std::to_string(c.*top); }};
}

template <class Sub, class T>
Field uint_field(Sub ExperimentConfig::*sub, T Sub::*f) {
  return {[sub, f](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*sub.*f = static_cast<T>(parse_uint(k, v));
          },
          [sub, f](const ExperimentConfig& c) { return std::to_string(c.*sub.*f); }};
}

template <class Sub>
Field real_field(Sub ExperimentConfig::*sub, double Sub::*f) {
  return {[sub, f](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*sub.*f = parse_real(k, v); },
          [sub, f](const ExperimentConfig& c) { return fmt_real(c.*sub.*f); }};
}

template <class Sub>
Field bool_field(Sub ExperimentConfig::*sub, bool Sub::*f) {
  return {[sub, f](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*sub.*f = parse_bool(k, v); },
          [sub, f](const ExperimentConfig& c) { return std::string(c.*sub.*f ? "true" : "false"); }};
}

inline void add_train_fields(std::map<std::string, Field>& m, const std::string& prefix,
                             trainer::TrainConfig ExperimentConfig::*t) {
  using trainer::TrainConfig;
  m[prefix + ".lr"] = real_field(t, &TrainConfig::learning_rate);
  m[prefix + ".batch_size"] = uint_field(t, &TrainConfig::batch_size);
  m[prefix + ".epochs"] = uint_field(t, &TrainConfig::epochs);
  m[prefix + ".max_steps"] = uint_field(t, &TrainConfig::max_steps);
  m[prefix + ".warmup_ratio"] = real_field(t, &TrainConfig::warmup_ratio);
  m[prefix + ".seed"] = uint_field(t, &TrainConfig::seed);
  m[prefix + ".optimizer"] = {
      [t](ExperimentConfig& c, const std::string&, const std::string& v) { (c.*t).optimizer = trainer::parse_optimizer(v); },
      [t](const ExperimentConfig& c) { return std::string(trainer::optimizer_name((c.*t).optimizer)); }};
  m[prefix + ".schedule"] = {
      [t](ExperimentConfig& c, const std::string&, const std::string& v) { (c.*t).schedule = trainer::parse_schedule(v); },
      [t](const ExperimentConfig& c) { return std::string(trainer::schedule_name((c.*t).schedule)); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    using model::ModelConfig;
    std::map<std::string, Field> m;
    m["name"] = {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.name = v; },
                 [](const ExperimentConfig& c) { return c.name; }};
    m["seed"] = {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.set_seed(parse_uint(k, v)); },
                 [](const ExperimentConfig& c) { return std::to_string(c.model.seed); }};
    m["threads"] = uint_field(&ExperimentConfig::threads);
    m["method"] = {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.variant = parse_variant(v); },
                   [](const ExperimentConfig& c) { return std::string(variant_name(c.variant)); }};
    m["q"] = {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.q = parse_real(k, v); },
              [](const ExperimentConfig& c) { return fmt_real(c.q); }};
    m["checkpoint"] = {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.checkpoint = v; },
                       [](const ExperimentConfig& c) { return c.checkpoint; }};

    m["model.layers"] = uint_field(&ExperimentConfig::model, &ModelConfig::num_layers);
    m["model.d_model"] = uint_field(&ExperimentConfig::model, &ModelConfig::d_model);
    m["model.d_ff"] = uint_field(&ExperimentConfig::model, &ModelConfig::d_ff);
    m["model.vocab_size"] = uint_field(&ExperimentConfig::model, &ModelConfig::vocab_size);
    m["model.heads"] = uint_field(&ExperimentConfig::model, &ModelConfig::num_heads);
    m["model.max_seq_len"] = uint_field(&ExperimentConfig::model, &ModelConfig::max_seq_len);
    m["model.final_norm"] = bool_field(&ExperimentConfig::model, &ModelConfig::final_norm_enabled);
    m["model.ffn_bias"] = bool_field(&ExperimentConfig::model, &ModelConfig::ffn_bias);
    m["model.seed"] = uint_field(&ExperimentConfig::model, &ModelConfig::seed);
    m["model.nonlinearity"] = {
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.model.nonlinearity = num::parse_activation(v); },
        [](const ExperimentConfig& c) { return std::string(num::activation_name(c.model.nonlinearity)); }};

    m["tasks.content_size"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::content_size);
    m["tasks.general_train"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::general_train);
    m["tasks.general_eval"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::general_eval);
    m["tasks.lookup_train"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::lookup_train);
    m["tasks.lookup_eval"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::lookup_eval);
    m["tasks.seed"] = uint_field(&ExperimentConfig::tasks, &TaskConfig::seed);

    add_train_fields(m, "pretrain", &ExperimentConfig::pretrain);
    m["pretrain.min_accuracy"] = {
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.pretrain_min_accuracy = parse_real(k, v); },
        [](const ExperimentConfig& c) { return fmt_real(c.pretrain_min_accuracy); }};

    m["attribution.steps"] = uint_field(&ExperimentConfig::attribution, &kva::AttributionConfig::steps);
    m["attribution.multiply_by_activation"] =
        bool_field(&ExperimentConfig::attribution, &kva::AttributionConfig::multiply_by_activation);
    m["attribution.path"] = {
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.attribution.path = kva::parse_path_mode(v); },
        [](const ExperimentConfig& c) { return std::string(kva::path_mode_name(c.attribution.path)); }};
    m["attribution.positions"] = {
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.attribution.positions = kva::parse_position_mode(v);
        },
        [](const ExperimentConfig& c) { return std::string(kva::position_mode_name(c.attribution.positions)); }};
    m["attribution.samples_per_subtask"] = uint_field(&ExperimentConfig::samples_per_subtask);

    add_train_fields(m, "train", &ExperimentConfig::train);
    m["train.low_rank_rank"] = uint_field(&ExperimentConfig::train, &trainer::TrainConfig::low_rank_rank);
    m["train.low_rank_alpha_ratio"] = real_field(&ExperimentConfig::train, &trainer::TrainConfig::low_rank_alpha_ratio);

    m["heatmap.top_percent"] = real_field(&ExperimentConfig::heatmap, &HeatmapConfig::top_percent);
    m["heatmap.bins"] = uint_field(&ExperimentConfig::heatmap, &HeatmapConfig::bins);
    m["heatmap.polarity"] = {
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.heatmap.polarity = selector::parse_polarity(v); },
        [](const ExperimentConfig& c) {
          return std::string(c.heatmap.polarity == selector::Polarity::high ? "high" : "low");
        }};
    return m;
  }();
  return table;
}

}  // namespace detail

/// Applies one setting; unknown keys and malformed values throw ConfigError.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(c, key, value);
}

/// Parses "key=value" (as given on a command line).
inline std::pair<std::string, std::string> split_assignment(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(s) + "'");
  return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

/// Applies every line of a config text on top of `c`. `origin` names the
/// source in error messages.
inline void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    try {
      auto [k, v] = split_assignment(line);
      apply_setting(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& c, const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw ConfigError("config file not found: " + p.string());
  apply_config_text(c, model::io::read_file(p), p.string());
}

/// Every key with its current value, sorted; parses back to the same config.
inline std::string to_config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields())
    if (k != "seed") out += k + " = " + f.get(c) + "\n";
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::fields()) out.push_back(k);
  return out;
}

inline nlohmann::json to_json(const kva::AttributionConfig& a) {
  return {{"steps", a.steps},
          {"path", std::string(kva::path_mode_name(a.path))},
          {"positions", std::string(kva::position_mode_name(a.positions))},
          {"multiply_by_activation", a.multiply_by_activation}};
}

}  // namespace loki::harness
