#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loki/errors.hpp"
#include "loki/kva/attribution.hpp"

namespace loki::selector {

using kva::AttributionLog;

/// Trainable-slot budget: T = q/100 · L · D, k_l = floor(T / L) per layer.
struct QuotaPlan {
  double q = 0.0;
  double total = 0.0;
  std::size_t per_layer = 0;
  std::size_t layers = 0;
};

inline QuotaPlan allocate_quota(double q, std::size_t layers, std::size_t nodes) {
  if (!(q > 0.0 && q < 100.0)) throw ConfigError("q must lie in the open interval (0, 100), got " + std::to_string(q));
  if (layers < 1 || nodes < 1) throw ConfigError("quota needs L >= 1 and D >= 1");
  QuotaPlan plan;
  plan.q = q;
  plan.layers = layers;
  plan.total = q / 100.0 * static_cast<double>(layers) * static_cast<double>(nodes);
  plan.per_layer = static_cast<std::size_t>(std::floor(plan.total / static_cast<double>(layers)));
  if (plan.per_layer == 0)
    throw ConfigError("degenerate quota: q=" + std::to_string(q) + " gives k_l = 0 for L=" + std::to_string(layers) +
                      ", D=" + std::to_string(nodes));
  return plan;
}

/// Min-max normalization to [0, 1]; a constant vector maps to all zeros.
inline std::vector<double> normalize_per_sample_layer(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("cannot normalize an empty score vector");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double min = *lo, range = *hi - *lo;
  std::vector<double> out(scores.size(), 0.0);
  if (range == 0.0) return out;
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - min) / range;
  return out;
}

namespace detail {

/// Indices ordered by value (ascending or descending), ties by ascending index.
inline std::vector<std::size_t> rank(std::span<const double> values, bool descending) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? values[a] > values[b] : values[a] < values[b];
  });
  return idx;
}

inline std::vector<std::size_t> rank_counts_desc(std::span<const std::size_t> counts) {
  std::vector<std::size_t> idx(counts.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return idx;
}

}  // namespace detail

/// The k nodes with the smallest normalized values, returned ascending.
inline std::vector<std::size_t> local_select(std::span<const double> normalized, std::size_t k) {
  if (k < 1 || k > normalized.size())
    throw ContractError("local_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(normalized.size()) + "]");
  auto order = detail::rank(normalized, false);
  std::vector<std::size_t> out(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

enum class Method { layer_balanced, global_high, global_low };
enum class Polarity { high, low };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::layer_balanced: return "layer-balanced";
    case Method::global_high: return "global-high";
    case Method::global_low: return "global-low";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "layer-balanced") return Method::layer_balanced;
  if (s == "global-high") return Method::global_high;
  if (s == "global-low") return Method::global_low;
  throw ConfigError("unknown selection method '" + std::string(s) + "' (expected layer-balanced|global-high|global-low)");
}

inline Polarity parse_polarity(std::string_view s) {
  if (s == "high" || s == "highest") return Polarity::high;
  if (s == "low" || s == "lowest") return Polarity::low;
  throw ConfigError("unknown polarity '" + std::string(s) + "' (expected high|low)");
}

/// Per-layer ascending node indices that are trainable (or suppressed).
struct SelectionSet {
  Method method = Method::layer_balanced;
  double q = 0.0;
  std::size_t nodes = 0;  // D
  std::vector<std::vector<std::size_t>> layers;
  std::string log_digest;
  std::string model_digest;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  bool contains(std::size_t layer, std::size_t node) const {
    return layer < layers.size() && std::binary_search(layers[layer].begin(), layers[layer].end(), node);
  }

  void validate() const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& s = layers[l];
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] >= nodes)
          throw IndexError("selection index " + std::to_string(s[i]) + " out of range in layer " + std::to_string(l));
        if (i && s[i] <= s[i - 1]) throw InputError("selection indices in layer " + std::to_string(l) + " not strictly ascending");
      }
    }
  }
};

/// c_{l,i}: how many samples picked node i of layer l.
struct FrequencyTally {
  std::size_t layers = 0, nodes = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t l, std::size_t i) const { return counts[l * nodes + i]; }
  std::span<const std::size_t> layer(std::size_t l) const {
    return std::span<const std::size_t>(counts).subspan(l * nodes, nodes);
  }
};

inline FrequencyTally tally_layer_balanced(const AttributionLog& log, std::size_t k) {
  FrequencyTally tally{log.layers, log.nodes, std::vector<std::size_t>(log.layers * log.nodes, 0)};
  for (std::size_t t = 0; t < log.samples; ++t)
    for (std::size_t l = 0; l < log.layers; ++l)
      for (std::size_t i : local_select(normalize_per_sample_layer(log.row(t, l)), k)) ++tally.counts[l * log.nodes + i];
  return tally;
}

/// Layer-balanced strategy: equal quota per layer, per-sample selection of
/// the lowest-attribution nodes, then the most frequently selected nodes.
inline SelectionSet layer_balanced_select(const AttributionLog& log, double q) {
  log.validate();
  if (log.samples == 0) throw ContractError("attribution log has no samples");
  const QuotaPlan plan = allocate_quota(q, log.layers, log.nodes);
  const std::size_t k = plan.per_layer;
  const FrequencyTally tally = tally_layer_balanced(log, k);
  SelectionSet out{Method::layer_balanced, q, log.nodes, {}, log.digest(), log.model_digest};
  for (std::size_t l = 0; l < log.layers; ++l) {
    auto order = detail::rank_counts_desc(tally.layer(l));
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    out.layers.push_back(std::move(chosen));
  }
  return out;
}

/// Number of nodes a global (unbalanced) selection takes: floor(T).
inline std::size_t global_count(double q, std::size_t layers, std::size_t nodes) {
  if (!(q > 0.0 && q < 100.0)) throw ConfigError("q must lie in the open interval (0, 100), got " + std::to_string(q));
  const double total = q / 100.0 * static_cast<double>(layers) * static_cast<double>(nodes);
  const auto n = static_cast<std::size_t>(std::floor(total));
  if (n == 0) throw ConfigError("degenerate quota: q=" + std::to_string(q) + " selects no nodes");
  return n;
}

namespace detail {

/// Per-sample normalized scores flattened over (layer, node).
inline std::vector<double> normalized_flat(const AttributionLog& log, std::size_t sample) {
  std::vector<double> flat;
  flat.reserve(log.layers * log.nodes);
  for (std::size_t l = 0; l < log.layers; ++l) {
    auto norm = normalize_per_sample_layer(log.row(sample, l));
    flat.insert(flat.end(), norm.begin(), norm.end());
  }
  return flat;
}

}  // namespace detail

/// Global baseline (G-H / G-L): rank all L·D normalized scores per sample,
/// take the top or bottom T, tally, keep the T most frequent nodes.
inline SelectionSet global_select(const AttributionLog& log, double q, Polarity polarity) {
  log.validate();
  if (log.samples == 0) throw ContractError("attribution log has no samples");
  const std::size_t n = global_count(q, log.layers, log.nodes);
  std::vector<std::size_t> counts(log.layers * log.nodes, 0);
  for (std::size_t t = 0; t < log.samples; ++t) {
    auto order = detail::rank(detail::normalized_flat(log, t), polarity == Polarity::high);
    for (std::size_t r = 0; r < n; ++r) ++counts[order[r]];
  }
  auto order = detail::rank_counts_desc(counts);
  SelectionSet out{polarity == Polarity::high ? Method::global_high : Method::global_low, q, log.nodes,
                   std::vector<std::vector<std::size_t>>(log.layers), log.digest(), log.model_digest};
  for (std::size_t r = 0; r < n; ++r) out.layers[order[r] / log.nodes].push_back(order[r] % log.nodes);
  for (auto& l : out.layers) std::sort(l.begin(), l.end());
  return out;
}

struct Similarity {
  std::vector<double> per_layer;
  double overall = 0.0;
};

/// Sim(A_l, B_l) = |A_l ∩ B_l| / |A_l|, overall = mean over layers.
inline Similarity similarity(const SelectionSet& a, const SelectionSet& b) {
  if (a.layers.size() != b.layers.size() || a.nodes != b.nodes)
    throw DimensionError("similarity needs selections over the same L and D");
  Similarity s;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& al = a.layers[l];
    const auto& bl = b.layers[l];
    if (al.empty()) throw ContractError("similarity undefined: layer " + std::to_string(l) + " of the first set is empty");
    std::vector<std::size_t> common;
    std::set_intersection(al.begin(), al.end(), bl.begin(), bl.end(), std::back_inserter(common));
    s.per_layer.push_back(static_cast<double>(common.size()) / static_cast<double>(al.size()));
  }
  double sum = 0.0;
  for (double v : s.per_layer) sum += v;
  s.overall = a.layers.empty() ? 0.0 : sum / static_cast<double>(a.layers.size());
  return s;
}

/// Raw (layer × bin) counts of nodes falling in each sample's top / bottom p%.
struct Heatmap {
  std::size_t layers = 0, bins = 0;
  std::vector<std::size_t> counts;
  std::size_t at(std::size_t l, std::size_t b) const { return counts[l * bins + b]; }
};

inline Heatmap heatmap_density(const AttributionLog& log, double top_percent, Polarity polarity, std::size_t bins) {
  log.validate();
  if (!(top_percent > 0.0 && top_percent < 100.0))
    throw ConfigError("heatmap percentage must lie in (0, 100), got " + std::to_string(top_percent));
  if (bins < 1 || bins > log.nodes) throw ConfigError("heatmap bins must lie in [1, D]");
  const std::size_t total = log.layers * log.nodes;
  const auto marked = static_cast<std::size_t>(std::llround(top_percent / 100.0 * static_cast<double>(total)));
  Heatmap h{log.layers, bins, std::vector<std::size_t>(log.layers * bins, 0)};
  for (std::size_t t = 0; t < log.samples; ++t) {
    auto order = detail::rank(detail::normalized_flat(log, t), polarity == Polarity::high);
    for (std::size_t r = 0; r < marked; ++r) {
      const std::size_t l = order[r] / log.nodes, j = order[r] % log.nodes;
      ++h.counts[l * bins + j * bins / log.nodes];
    }
  }
  return h;
}

inline std::string heatmap_to_csv(const Heatmap& h) {
  std::string out = "layer,bin,count\n";
  for (std::size_t l = 0; l < h.layers; ++l)
    for (std::size_t b = 0; b < h.bins; ++b)
      out += std::to_string(l) + ',' + std::to_string(b) + ',' + std::to_string(h.at(l, b)) + '\n';
  return out;
}

}  // namespace loki::selector
