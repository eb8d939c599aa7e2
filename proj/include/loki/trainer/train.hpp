#pragma once

#include <chrono>
#include <cstring>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loki/layer/partitioned.hpp"
#include "loki/model/checkpoint.hpp"
#include "loki/model/scoring.hpp"
#include "loki/model/transformer.hpp"
#include "loki/parallel.hpp"
#include "loki/selector/selection.hpp"

namespace loki::trainer {

using model::TargetSpec;
using model::ToyTransformer;
using num::Tensor;
using num::Var;

enum class OptimizerKind { adam, sgd };
enum class ScheduleKind { cosine, constant };
enum class TrainMode { loki, loki_low_rank, full_ft };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam or sgd)");
}
inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline ScheduleKind parse_schedule(std::string_view s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown schedule '" + std::string(s) + "' (expected cosine or constant)");
}
inline std::string_view schedule_name(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "constant"; }

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "loki") return TrainMode::loki;
  if (s == "loki-low-rank") return TrainMode::loki_low_rank;
  if (s == "full-ft") return TrainMode::full_ft;
  throw ConfigError("unknown training mode '" + std::string(s) + "' (expected loki, loki-low-rank or full-ft)");
}
inline std::string_view train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::loki: return "loki";
    case TrainMode::loki_low_rank: return "loki-low-rank";
    case TrainMode::full_ft: return "full-ft";
  }
  return "?";
}

struct TrainConfig {
  double learning_rate = 3e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  /// Caps the number of optimizer steps; 0 means epochs decide alone.
  std::size_t max_steps = 0;
  ScheduleKind schedule = ScheduleKind::cosine;
  double warmup_ratio = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::loki;
  /// Low-rank mode: rank is min(low_rank_rank, |S_l|) and alpha = alpha_ratio·r,
  /// so the effective scaling alpha/r equals alpha_ratio.
  std::size_t low_rank_rank = 8;
  double low_rank_alpha_ratio = 2.0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t threads = 1;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning rate must be finite and non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("warmup ratio must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (low_rank_rank == 0) throw ConfigError("low-rank rank must be at least 1");
    if (!(low_rank_alpha_ratio > 0.0)) throw ConfigError("low-rank alpha ratio must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
      throw ConfigError("adam moments must lie in [0, 1) and eps must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"optimizer", std::string(optimizer_name(c.optimizer))},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"schedule", std::string(schedule_name(c.schedule))},
          {"warmup_ratio", c.warmup_ratio},
          {"seed", c.seed},
          {"mode", std::string(train_mode_name(c.mode))},
          {"low_rank_rank", c.low_rank_rank},
          {"low_rank_alpha_ratio", c.low_rank_alpha_ratio}};
}

struct TrainReport {
  TrainMode mode = TrainMode::loki;
  std::vector<double> loss_trace;  // mean batch loss per step
  double final_loss = 0.0;         // mean loss over the whole training set after training
  double final_accuracy = 0.0;     // accuracy on the training set after training
  std::vector<std::size_t> changed_rows;  // per layer, rows of W_down that differ from the input model
  std::size_t changed_outside_down = 0;   // changed scalars in any other parameter
  std::size_t trainable_parameters = 0;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const TrainReport& r, bool include_timing = false) {
  nlohmann::json j{{"mode", std::string(train_mode_name(r.mode))},
                   {"steps", r.steps},
                   {"loss_trace", r.loss_trace},
                   {"final_loss", r.final_loss},
                   {"final_accuracy", r.final_accuracy},
                   {"changed_rows", r.changed_rows},
                   {"changed_outside_down", r.changed_outside_down},
                   {"trainable_parameters", r.trainable_parameters}};
  if (include_timing) j["wall_seconds"] = r.wall_seconds;
  return j;
}

/// Learning rate at 0-based step t of `total`: linear warmup then cosine
/// decay to zero, or flat after warmup for the constant schedule.
inline double scheduled_lr(const TrainConfig& c, std::size_t t, std::size_t total) {
  const auto warm = static_cast<std::size_t>(std::floor(c.warmup_ratio * static_cast<double>(total)));
  if (t < warm) return c.learning_rate * static_cast<double>(t + 1) / static_cast<double>(warm);
  if (c.schedule == ScheduleKind::constant) return c.learning_rate;
  const double progress = static_cast<double>(t - warm) / static_cast<double>(std::max<std::size_t>(1, total - warm));
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline std::size_t planned_steps(const TrainConfig& c, std::size_t examples) {
  const std::size_t per_epoch = (examples + c.batch_size - 1) / c.batch_size;
  std::size_t total = per_epoch * c.epochs;
  if (c.max_steps) total = std::min(total, c.max_steps);
  return total;
}

/// Adam or SGD over a fixed list of tensors. Moments exist only for the
/// tensors handed in, so nothing else can ever be written.
class Optimizer {
 public:
  Optimizer(const TrainConfig& c, std::vector<Tensor*> params) : cfg_(c), params_(std::move(params)) {
    if (cfg_.optimizer == OptimizerKind::adam)
      for (Tensor* p : params_) {
        m_.emplace_back(p->shape(), 0.0);
        v_.emplace_back(p->shape(), 0.0);
      }
  }

  void step(const std::vector<Tensor>& grads, double lr) {
    ++t_;
    if (lr == 0.0) return;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i]->data();
      const auto g = grads[i].data();
      if (cfg_.optimizer == OptimizerKind::sgd) {
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
        continue;
      }
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.adam_eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// What one per-example graph needs: bound model parameters, an optional
/// down-projection override and the trainable leaves (matching the
/// optimizer's tensor list).
struct Binding {
  model::BoundParams params;
  model::DownProjectionFn down;
  std::vector<Var> trainable;
};
using BindFn = std::function<Binding(num::Graph&)>;

namespace detail {

/// Mini-batch loop shared by every regime. Per-example gradients are summed
/// in example order, so the result does not depend on the thread count.
inline std::vector<double> run_loop(const ToyTransformer& m, std::span<const TargetSpec> data,
                                    const TrainConfig& cfg, const BindFn& bind, std::vector<Tensor*> params) {
  std::vector<double> trace;
  const std::size_t total = planned_steps(cfg, data.size());
  if (total == 0) return trace;
  Optimizer opt(cfg, params);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size, ++step) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<std::vector<Tensor>> grads(n);
      std::vector<double> losses(n, 0.0);
      parallel_for(n, cfg.threads, [&](std::size_t b) {
        const TargetSpec& ex = data[order[start + b]];
        num::Graph g;
        Binding bd = bind(g);
        model::ForwardHooks hooks;
        hooks.down_projection = bd.down;
        Var logits = m.forward_graph(g, bd.params, ex.tokens, hooks);
        Var loss = num::cross_entropy(logits, ex.answer_position, ex.gold);
        g.backward(loss);
        losses[b] = loss.value()[0];
        for (const Var& v : bd.trainable) grads[b].push_back(g.grad(v));
      });
      std::vector<Tensor> sum;
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        batch_loss += losses[b];
        if (b == 0) {
          sum = std::move(grads[0]);
          continue;
        }
        for (std::size_t i = 0; i < sum.size(); ++i)
          for (std::size_t k = 0; k < sum[i].size(); ++k) sum[i][k] += grads[b][i][k];
      }
      const double inv = 1.0 / static_cast<double>(n);
      for (Tensor& t : sum)
        for (double& v : t.data()) v *= inv;
      opt.step(sum, scheduled_lr(cfg, step, total));
      trace.push_back(batch_loss * inv);
    }
  }
  return trace;
}

inline void summarize(const ToyTransformer& before, const ToyTransformer& after, TrainReport& r) {
  const auto pa = before.parameters();
  const auto pb = after.parameters();
  r.changed_rows.assign(before.num_layers(), 0);
  r.changed_outside_down = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const Tensor& a = *pa[i].tensor;
    const Tensor& b = *pb[i].tensor;
    if (pa[i].role == model::ParamRole::ffn_down) {
      for (std::size_t row = 0; row < a.rows(); ++row)
        if (std::memcmp(a.row(row).data(), b.row(row).data(), a.cols() * sizeof(double)) != 0)
          ++r.changed_rows[static_cast<std::size_t>(pa[i].layer)];
      continue;
    }
    for (std::size_t k = 0; k < a.size(); ++k)
      if (std::memcmp(a.data().data() + k, b.data().data() + k, sizeof(double)) != 0) ++r.changed_outside_down;
  }
}

inline void finish(const ToyTransformer& before, const ToyTransformer& after, std::span<const TargetSpec> data,
                   const TrainConfig& cfg, TrainReport& r, std::chrono::steady_clock::time_point t0) {
  summarize(before, after, r);
  r.steps = r.loss_trace.size();
  r.final_loss = model::mean_loss(after, data, cfg.threads);
  r.final_accuracy = model::accuracy(after, data, cfg.threads);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct TrainResult {
  ToyTransformer model;
  TrainReport report;
};

/// Trains only the selected W_down rows of every layer; everything else is
/// bound as constants and never handed to the optimizer.
inline TrainResult implant(const ToyTransformer& base, const selector::SelectionSet& selection,
                           std::span<const TargetSpec> data, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode == TrainMode::full_ft) throw ConfigError("implant requires mode loki or loki-low-rank");
  if (data.empty()) throw InputError("training dataset is empty");
  const auto t0 = std::chrono::steady_clock::now();
  if (selection.model_digest != model::model_digest(base))
    throw ProvenanceError("selection was computed for model " + selection.model_digest + ", not " +
                          model::model_digest(base));
  if (selection.layers.size() != base.num_layers())
    throw DimensionError("selection covers " + std::to_string(selection.layers.size()) + " layers, model has " +
                         std::to_string(base.num_layers()));
  if (selection.nodes != base.config().d_model)
    throw DimensionError("selection node count does not match d_model");
  if (selection.total() == 0) throw ConfigError("selection is empty; nothing to implant");
  for (const auto& d : data) base.check_target(d);

  const std::size_t L = base.num_layers();
  std::vector<layer::PartitionedDownProjection> parts;
  Rng init_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  for (std::size_t l = 0; l < L; ++l) {
    const model::FFNLayer& ffn = base.block(l).ffn;
    parts.push_back(layer::PartitionedDownProjection::from_linear(ffn.w_down, ffn.bias, selection.layers[l]));
    if (cfg.mode == TrainMode::loki_low_rank && !selection.layers[l].empty()) {
      const std::size_t r = std::min(cfg.low_rank_rank, selection.layers[l].size());
      parts.back().attach_low_rank(r, cfg.low_rank_alpha_ratio, init_rng);
    }
  }
  std::vector<Tensor*> params;
  for (auto& p : parts)
    for (Tensor* t : p.trainable_parameters()) params.push_back(t);

  TrainResult res{base, {}};
  res.report.mode = cfg.mode;
  res.report.trainable_parameters = 0;
  for (auto& p : parts) res.report.trainable_parameters += p.trainable_count();

  BindFn bind = [&](num::Graph& g) {
    Binding b;
    b.params = base.bind_constant(g);
    auto bound = std::make_shared<std::vector<layer::BoundPartition>>();
    for (const auto& p : parts) {
      bound->push_back(p.bind(g));
      for (const Var& v : bound->back().trainable) b.trainable.push_back(v);
    }
    b.down = [&parts, bound](num::Graph&, std::size_t l, const Var& act) {
      return parts[l].forward_graph((*bound)[l], act);
    };
    return b;
  };
  res.report.loss_trace = detail::run_loop(base, data, cfg, bind, params);

  auto refs = res.model.parameters();
  for (std::size_t l = 0; l < L; ++l) {
    auto [w, bias] = parts[l].merge_to_linear();
    for (auto& r : refs) {
      if (r.layer != static_cast<std::ptrdiff_t>(l)) continue;
      if (r.role == model::ParamRole::ffn_down) *r.tensor = w;
      if (r.role == model::ParamRole::ffn_bias && bias) *r.tensor = *bias;
    }
  }
  detail::finish(base, res.model, data, cfg, res.report, t0);
  return res;
}

/// Every parameter trainable. Also used to pretrain from initialization.
inline TrainResult full_finetune(const ToyTransformer& base, std::span<const TargetSpec> data,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode != TrainMode::full_ft) throw ConfigError("full fine-tuning requires mode full-ft");
  if (data.empty()) throw InputError("training dataset is empty");
  for (const auto& d : data) base.check_target(d);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res{base, {}};
  res.report.mode = cfg.mode;
  res.report.trainable_parameters = base.parameter_count();
  // The working model is read by the loop while the optimizer writes to it;
  // each step finishes all reads before the update.
  std::vector<Tensor*> params;
  for (auto& r : res.model.parameters()) params.push_back(r.tensor);
  const ToyTransformer& live = res.model;
  BindFn bind = [&](num::Graph& g) {
    Binding b;
    b.params = live.bind(g, [](const model::ConstParamRef&) { return true; });
    b.trainable = b.params.vars;
    return b;
  };
  res.report.loss_trace = detail::run_loop(live, data, cfg, bind, params);
  detail::finish(base, res.model, data, cfg, res.report, t0);
  return res;
}

/// Copy of the model with the selected W_down rows zeroed.
inline ToyTransformer suppress(const ToyTransformer& base, const selector::SelectionSet& selection) {
  ToyTransformer out = base;
  out.zero_rows(selection.layers);
  return out;
}

}  // namespace loki::trainer
