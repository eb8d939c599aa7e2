#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "loki/digest.hpp"
#include "loki/errors.hpp"
#include "loki/model/checkpoint.hpp"
#include "loki/model/transformer.hpp"
#include "loki/parallel.hpp"

// Knowledge vector attribution: path-integrated gradients of a target logit
// with respect to FFN knowledge output nodes, integrated along the straight
// path from a zero baseline to the node's reference value with an m-step
// right Riemann sum.

namespace loki::kva {

using model::PositionMode;
using model::TargetSpec;
using model::ToyTransformer;

enum class PathMode { joint_layer, per_node_exact };

inline std::string_view path_mode_name(PathMode m) { return m == PathMode::joint_layer ? "joint-layer" : "per-node-exact"; }
inline std::string_view position_mode_name(PositionMode m) { return m == PositionMode::final ? "final" : "all"; }

inline PathMode parse_path_mode(std::string_view s) {
  if (s == "joint-layer" || s == "joint") return PathMode::joint_layer;
  if (s == "per-node-exact" || s == "exact") return PathMode::per_node_exact;
  throw ConfigError("unknown path mode '" + std::string(s) + "' (expected joint-layer|per-node-exact)");
}

inline PositionMode parse_position_mode(std::string_view s) {
  if (s == "final") return PositionMode::final;
  if (s == "all") return PositionMode::all;
  throw ConfigError("unknown position mode '" + std::string(s) + "' (expected final|all)");
}

struct AttributionConfig {
  std::size_t steps = 7;
  PathMode path = PathMode::joint_layer;
  PositionMode positions = PositionMode::final;
  bool multiply_by_activation = false;
  // The baseline is always the zero vector.

  void validate() const {
    if (steps < 1) throw ConfigError("attribution steps m must be >= 1");
  }
};

/// Scores tensor (N samples × L layers × D nodes) plus provenance.
struct AttributionLog {
  std::size_t samples = 0, layers = 0, nodes = 0;
  std::vector<double> scores;
  AttributionConfig config;
  std::string model_digest;
  std::vector<std::string> sample_digests;

  double at(std::size_t n, std::size_t l, std::size_t j) const { return scores[(n * layers + l) * nodes + j]; }
  double& at(std::size_t n, std::size_t l, std::size_t j) { return scores[(n * layers + l) * nodes + j]; }

  std::span<const double> row(std::size_t n, std::size_t l) const {
    return std::span<const double>(scores).subspan((n * layers + l) * nodes, nodes);
  }

  /// Digest over the ordered sample digests.
  std::string samples_digest() const {
    Digest d;
    for (const auto& s : sample_digests) d.update(s);
    return d.hex();
  }

  /// Digest binding the log's content and provenance (used by selections).
  std::string digest() const {
    Digest d;
    d.update_u64(samples);
    d.update_u64(layers);
    d.update_u64(nodes);
    d.update(std::span<const double>(scores));
    d.update(model_digest);
    d.update(samples_digest());
    return d.hex();
  }

  void validate() const {
    if (scores.size() != samples * layers * nodes)
      throw InputError("attribution log has " + std::to_string(scores.size()) + " scores, expected N·L·D = " +
                       std::to_string(samples * layers * nodes));
    for (double v : scores)
      if (!std::isfinite(v)) throw NumericError("attribution log contains a non-finite score");
  }
};

inline std::string sample_digest(const TargetSpec& t) {
  Digest d;
  for (auto tok : t.tokens) d.update_u64(tok);
  d.update_u64(t.answer_position);
  d.update_u64(t.gold);
  return d.hex();
}

namespace detail {

/// Gradient of L w.r.t. node j, restricted to the configured positions.
inline double node_gradient(const model::ScaledResult& r, const TargetSpec& t, std::size_t j, PositionMode mode) {
  if (mode == PositionMode::final) return r.gradient.at(t.answer_position, j);
  double s = 0.0;
  for (std::size_t p = 0; p < r.gradient.rows(); ++p) s += r.gradient.at(p, j);
  return s;
}

/// Σ_p y_p · ḡ_p over the configured positions (the activation factor).
inline double weighted_by_activation(const std::vector<double>& mean_grad, const model::Tensor& values,
                                     const TargetSpec& t, std::size_t j, PositionMode mode) {
  if (mode == PositionMode::final) return mean_grad[t.answer_position] * values.at(t.answer_position, j);
  double s = 0.0;
  for (std::size_t p = 0; p < values.rows(); ++p) s += mean_grad[p] * values.at(p, j);
  return s;
}

}  // namespace detail

/// A_{l,j} with only node (l, j) moving along the path; every other node
/// keeps its reference value.
inline double attribute_node_exact(const ToyTransformer& m, const TargetSpec& target, std::size_t layer,
                                   std::size_t node, const AttributionConfig& cfg) {
  cfg.validate();
  m.check_target(target);
  m.check_scaling(model::NodeScaling{layer, 1.0, cfg.positions, node});
  const std::size_t n = target.tokens.size();
  std::vector<double> mean_grad(n, 0.0);  // per position
  model::Tensor values;
  double mean_total = 0.0;
  for (std::size_t k = 1; k <= cfg.steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(cfg.steps);
    auto r = m.forward_scaled(target, model::NodeScaling{layer, alpha, cfg.positions, node});
    mean_total += detail::node_gradient(r, target, node, cfg.positions);
    for (std::size_t p = 0; p < n; ++p) mean_grad[p] += r.gradient.at(p, node);
    if (k == 1) values = std::move(r.node_values);
  }
  const double inv_m = 1.0 / static_cast<double>(cfg.steps);
  if (!cfg.multiply_by_activation) return mean_total * inv_m;
  for (double& g : mean_grad) g *= inv_m;
  return detail::weighted_by_activation(mean_grad, values, target, node, cfg.positions);
}

/// Scores for all D nodes of one layer, interpolating the whole layer
/// vector at once: one backward pass per step yields every ∂L/∂y_{l,j}.
inline std::vector<double> attribute_layer_joint(const ToyTransformer& m, const TargetSpec& target, std::size_t layer,
                                                 const AttributionConfig& cfg) {
  cfg.validate();
  m.check_target(target);
  m.check_scaling(model::NodeScaling{layer, 1.0, cfg.positions, std::nullopt});
  const std::size_t n = target.tokens.size(), D = m.config().d_model;
  model::Tensor grad_sum({n, D}, 0.0);
  model::Tensor values;
  for (std::size_t k = 1; k <= cfg.steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(cfg.steps);
    auto r = m.forward_scaled(target, model::NodeScaling{layer, alpha, cfg.positions, std::nullopt});
    for (std::size_t i = 0; i < grad_sum.size(); ++i) grad_sum[i] += r.gradient[i];
    if (k == 1) values = std::move(r.node_values);
  }
  const double inv_m = 1.0 / static_cast<double>(cfg.steps);
  std::vector<double> scores(D, 0.0);
  for (std::size_t j = 0; j < D; ++j) {
    for (std::size_t p = 0; p < n; ++p) {
      if (cfg.positions == PositionMode::final && p != target.answer_position) continue;
      const double g = grad_sum.at(p, j) * inv_m;
      scores[j] += cfg.multiply_by_activation ? g * values.at(p, j) : g;
    }
  }
  return scores;
}

/// Fills the (N, L, D) log. Each sample is independent; workers write
/// disjoint rows so the result is identical for any thread count.
inline AttributionLog attribute_all(const ToyTransformer& m, const std::vector<TargetSpec>& samples,
                                    const AttributionConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  if (samples.empty()) throw ContractError("attribute_all needs at least one sample");
  AttributionLog log;
  log.samples = samples.size();
  log.layers = m.num_layers();
  log.nodes = m.config().d_model;
  log.config = cfg;
  log.scores.assign(log.samples * log.layers * log.nodes, 0.0);
  log.model_digest = model::model_digest(m);
  for (const auto& s : samples) log.sample_digests.push_back(sample_digest(s));

  parallel_for(samples.size(), threads, [&](std::size_t i) {
    try {
      for (std::size_t l = 0; l < log.layers; ++l) {
        std::vector<double> row;
        if (cfg.path == PathMode::joint_layer) {
          row = attribute_layer_joint(m, samples[i], l, cfg);
        } else {
          row.resize(log.nodes);
          for (std::size_t j = 0; j < log.nodes; ++j) row[j] = attribute_node_exact(m, samples[i], l, j, cfg);
        }
        std::copy(row.begin(), row.end(), log.scores.begin() + static_cast<std::ptrdiff_t>((i * log.layers + l) * log.nodes));
      }
    } catch (const Error& e) {
      throw InputError("attribution failed for sample " + std::to_string(i) + ": " + e.what());
    }
  });
  return log;
}

}  // namespace loki::kva
