#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loki/errors.hpp"
#include "loki/numerics/graph.hpp"
#include "loki/random.hpp"

namespace loki::layer {

using num::Tensor;
using num::Var;

/// Reparametrizes the active rows as base + scaling·B·A. Only B and A train.
struct LowRankActiveBlock {
  Tensor base;  // |S| × d_ff, frozen copy of the active rows
  Tensor b;     // |S| × r, zero at attach time
  Tensor a;     // r × d_ff
  std::size_t rank = 0;
  double scaling = 1.0;
};

/// Leaves bound into a graph for one partitioned layer. Trainable leaves
/// are listed in `trainable`, in the same order as trainable_parameters().
struct BoundPartition {
  std::optional<Var> active, frozen, active_bias, frozen_bias;
  std::optional<Var> lr_base, lr_b, lr_a;
  std::vector<Var> trainable;
};

/// W_down split into trainable active rows and frozen complement. Output is
/// concat(active·x, frozen·x) (+ bias slices), gathered through index_map so
/// the original row order is restored.
class PartitionedDownProjection {
 public:
  static PartitionedDownProjection from_linear(const Tensor& w, const std::optional<Tensor>& bias,
                                               std::span<const std::size_t> target_pos) {
    if (w.rank() != 2) throw DimensionError("down-projection weight must be a matrix, got " + num::shape_str(w.shape()));
    const std::size_t out = w.rows(), in = w.cols();
    if (bias && bias->size() != out)
      throw DimensionError("bias of size " + std::to_string(bias->size()) + " does not match " + std::to_string(out) +
                           " output features");
    for (std::size_t p : target_pos)
      if (p >= out) throw IndexError("Activation indices must be within [0, " + std::to_string(out - 1) + "]");
    std::vector<std::size_t> sorted(target_pos.begin(), target_pos.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("Activation indices contain duplicate values");

    PartitionedDownProjection p;
    p.in_ = in;
    p.out_ = out;
    p.active_pos_ = std::move(sorted);
    std::vector<bool> is_active(out, false);
    for (std::size_t j : p.active_pos_) is_active[j] = true;
    for (std::size_t j = 0; j < out; ++j)
      if (!is_active[j]) p.frozen_pos_.push_back(j);

    p.active_ = take_rows(w, p.active_pos_);
    p.frozen_ = take_rows(w, p.frozen_pos_);
    if (bias) {
      p.active_bias_ = take_entries(*bias, p.active_pos_);
      p.frozen_bias_ = take_entries(*bias, p.frozen_pos_);
    }
    p.index_map_.assign(out, 0);
    for (std::size_t i = 0; i < p.active_pos_.size(); ++i) p.index_map_[p.active_pos_[i]] = i;
    for (std::size_t i = 0; i < p.frozen_pos_.size(); ++i) p.index_map_[p.frozen_pos_[i]] = p.active_pos_.size() + i;
    return p;
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const std::vector<std::size_t>& active_pos() const { return active_pos_; }
  const std::vector<std::size_t>& frozen_pos() const { return frozen_pos_; }
  const std::vector<std::size_t>& index_map() const { return index_map_; }
  const Tensor& active_weight() const { return active_; }
  const Tensor& frozen_weight() const { return frozen_; }
  const std::optional<Tensor>& active_bias() const { return active_bias_; }
  const std::optional<Tensor>& frozen_bias() const { return frozen_bias_; }
  bool has_bias() const { return active_bias_.has_value(); }
  const std::optional<LowRankActiveBlock>& low_rank() const { return low_rank_; }

  /// Replaces the active block by base + scaling·B·A with B = 0 and A drawn
  /// uniformly from ±init_range.
  void attach_low_rank(std::size_t rank, double scaling, Rng& rng, double init_range = 0.01) {
    const std::size_t limit = std::min(active_pos_.size(), in_);
    if (rank < 1 || rank > limit)
      throw ConfigError("low-rank rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) + "]");
    if (!std::isfinite(scaling)) throw ConfigError("low-rank scaling must be finite");
    if (low_rank_) throw ContractError("low-rank block already attached");
    LowRankActiveBlock lr;
    lr.base = active_;
    lr.b = Tensor({active_pos_.size(), rank}, 0.0);
    lr.a = Tensor({rank, in_}, 0.0);
    for (double& v : lr.a.data()) v = rng.uniform(-init_range, init_range);
    lr.rank = rank;
    lr.scaling = scaling;
    low_rank_ = std::move(lr);
  }

  /// Parameters that an optimizer may update, matching BoundPartition::trainable.
  std::vector<Tensor*> trainable_parameters() {
    if (low_rank_) return {&low_rank_->b, &low_rank_->a};
    std::vector<Tensor*> out;
    if (!active_pos_.empty()) out.push_back(&active_);
    if (active_bias_ && !active_pos_.empty()) out.push_back(&*active_bias_);
    return out;
  }

  std::size_t trainable_count() {
    std::size_t n = 0;
    for (const Tensor* t : trainable_parameters()) n += t->size();
    return n;
  }

  BoundPartition bind(num::Graph& g) const {
    BoundPartition bp;
    const bool any_active = !active_pos_.empty();
    if (low_rank_) {
      bp.lr_base = g.constant(low_rank_->base);
      bp.lr_b = g.leaf(low_rank_->b, true);
      bp.lr_a = g.leaf(low_rank_->a, true);
      bp.trainable = {*bp.lr_b, *bp.lr_a};
    } else if (any_active) {
      bp.active = g.leaf(active_, true);
      bp.trainable.push_back(*bp.active);
    }
    if (!frozen_pos_.empty()) bp.frozen = g.constant(frozen_);
    if (active_bias_) {
      if (any_active) {
        bp.active_bias = g.leaf(*active_bias_, !low_rank_);
        if (!low_rank_) bp.trainable.push_back(*bp.active_bias);
      }
      if (!frozen_pos_.empty()) bp.frozen_bias = g.constant(*frozen_bias_);
    }
    return bp;
  }

  /// x: batch × d_ff → batch × d_model.
  Var forward_graph(const BoundPartition& bp, const Var& x) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.cols() != in_)
      throw DimensionError("partitioned layer expects input width " + std::to_string(in_) + ", got shape " +
                           num::shape_str(xv.shape()));
    std::optional<Var> active_out, frozen_out;
    if (!active_pos_.empty()) {
      Var w = low_rank_ ? num::add(*bp.lr_base, num::scale(num::matmul(*bp.lr_b, *bp.lr_a), low_rank_->scaling))
                        : *bp.active;
      active_out = num::linear(x, w);
      if (bp.active_bias) active_out = num::add_row_bias(*active_out, *bp.active_bias);
    }
    if (!frozen_pos_.empty()) {
      frozen_out = num::linear(x, *bp.frozen);
      if (bp.frozen_bias) frozen_out = num::add_row_bias(*frozen_out, *bp.frozen_bias);
    }
    // Reorder output using pre-generated indices
    if (!active_out) return num::gather_cols(*frozen_out, index_map_);
    if (!frozen_out) return num::gather_cols(*active_out, index_map_);
    return num::gather_cols(num::concat_cols(*active_out, *frozen_out), index_map_);
  }

  Tensor forward(const Tensor& x) const {
    num::Graph g;
    return forward_graph(bind(g), g.constant(x)).value();
  }

  /// Dense weight (and bias) with rows back in their original positions.
  std::pair<Tensor, std::optional<Tensor>> merge_to_linear() const {
    Tensor w({out_, in_}, 0.0);
    const Tensor active = effective_active();
    for (std::size_t i = 0; i < active_pos_.size(); ++i) std::ranges::copy(active.row(i), w.row(active_pos_[i]).begin());
    for (std::size_t i = 0; i < frozen_pos_.size(); ++i) std::ranges::copy(frozen_.row(i), w.row(frozen_pos_[i]).begin());
    std::optional<Tensor> bias;
    if (active_bias_) {
      bias = Tensor({out_}, 0.0);
      for (std::size_t i = 0; i < active_pos_.size(); ++i) (*bias)[active_pos_[i]] = (*active_bias_)[i];
      for (std::size_t i = 0; i < frozen_pos_.size(); ++i) (*bias)[frozen_pos_[i]] = (*frozen_bias_)[i];
    }
    return {std::move(w), std::move(bias)};
  }

  /// Active rows as used by forward: base + scaling·B·A in low-rank mode.
  Tensor effective_active() const {
    if (!low_rank_) return active_;
    const std::size_t s = active_pos_.size(), r = low_rank_->rank;
    Tensor w = low_rank_->base;
    Tensor ba({s, in_}, 0.0);
    num::detail::gemm_nn(low_rank_->b.data().data(), low_rank_->a.data().data(), ba.data().data(), s, r, in_);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += low_rank_->scaling * ba[i];
    return w;
  }

 private:
  static Tensor take_rows(const Tensor& w, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), w.cols()}, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) std::ranges::copy(w.row(rows[i]), out.row(i).begin());
    return out;
  }

  static Tensor take_entries(const Tensor& v, const std::vector<std::size_t>& idx) {
    Tensor out({idx.size()}, 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
    return out;
  }

  std::size_t in_ = 0, out_ = 0;
  std::vector<std::size_t> active_pos_, frozen_pos_, index_map_;
  Tensor active_, frozen_;
  std::optional<Tensor> active_bias_, frozen_bias_;
  std::optional<LowRankActiveBlock> low_rank_;
};

}  // namespace loki::layer
