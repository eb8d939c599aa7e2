#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loki/errors.hpp"
#include "loki/model/config.hpp"
#include "loki/numerics/graph.hpp"
#include "loki/numerics/tensor.hpp"
#include "loki/random.hpp"

namespace loki::model {

using num::Tensor;
using num::Var;
using TokenSeq = std::vector<Token>;

/// Identifies the target logit L = logits[answer_position][gold].
struct TargetSpec {
  TokenSeq tokens;
  std::size_t answer_position = 0;
  Token gold = 0;
};

/// Which positions a node scaling applies to.
enum class PositionMode { final, all };

/// Scales knowledge output node(s) of one layer by alpha before the
/// residual addition. `node` absent means the whole layer vector.
struct NodeScaling {
  std::size_t layer = 0;
  double alpha = 1.0;
  PositionMode positions = PositionMode::final;
  std::optional<std::size_t> node;
};

/// Position-wise FFN: y = W_down · σ(W_up · x) (+ bias). Row j of W_down is
/// knowledge vector v_j; output coordinate y_j = v_j · a is knowledge
/// output node j.
struct FFNLayer {
  Tensor w_up;    // d_ff × d_model
  Tensor w_down;  // d_model × d_ff
  std::optional<Tensor> bias;
};

struct Block {
  Tensor attn_norm;  // d_model gain
  Tensor wq, wk, wv, wo;
  Tensor ffn_norm;
  FFNLayer ffn;
};

enum class ParamRole { embedding, attention, norm, ffn_up, ffn_down, ffn_bias, output };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  std::ptrdiff_t layer;  // -1 for non-layer parameters
  ParamRole role;
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  std::ptrdiff_t layer;
  ParamRole role;
};

/// Parameters bound into a Graph, in declaration order.
struct BoundParams {
  std::vector<Var> vars;
};

/// Optional per-layer override for the down-projection (used by the
/// partitioned layer during implanting). Must include any bias.
using DownProjectionFn = std::function<Var(num::Graph&, std::size_t layer, const Var& activations)>;

struct ForwardHooks {
  DownProjectionFn down_projection;
  /// Node scalings applied before the residual addition (any layers).
  std::span<const NodeScaling> scalings;
  /// Position that PositionMode::final refers to.
  std::size_t final_position = 0;
  /// Layer at which an additive perturbation leaf is inserted.
  std::optional<std::size_t> probe_layer;
  /// Filled with the perturbation leaf at probe_layer.
  Var* perturbation = nullptr;
  /// Filled with the unscaled node values y at probe_layer (positions × d_model, bias excluded).
  Tensor* node_values = nullptr;
};

struct ScaledResult {
  double target = 0.0;
  /// ∂L/∂y at the scaled operating point, positions × d_model.
  Tensor gradient;
  /// Reference (unscaled) node values at the scaled layer, positions × d_model.
  Tensor node_values;
};

class ToyTransformer {
 public:
  ToyTransformer() = default;

  /// Random initialization from config.seed.
  static ToyTransformer initialize(const ModelConfig& config) {
    config.validate();
    ToyTransformer m;
    m.config_ = config;
    Rng rng(config.seed);
    const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
    auto normal = [&rng](num::Shape shape, double stddev) {
      Tensor t(std::move(shape), 0.0);
      for (double& x : t.data()) x = stddev * rng.normal();
      return t;
    };
    const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
    m.tok_emb_ = normal({v, d}, 1.0);
    m.pos_emb_ = normal({config.max_seq_len, d}, 0.5);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      Block b;
      b.attn_norm = Tensor({d}, 1.0);
      b.wq = normal({d, d}, 1.0 / std::sqrt(double(d)));
      b.wk = normal({d, d}, 1.0 / std::sqrt(double(d)));
      b.wv = normal({d, d}, 1.0 / std::sqrt(double(d)));
      b.wo = normal({d, d}, depth_scale / std::sqrt(double(d)));
      b.ffn_norm = Tensor({d}, 1.0);
      b.ffn.w_up = normal({f, d}, 1.0 / std::sqrt(double(d)));
      b.ffn.w_down = normal({d, f}, depth_scale / std::sqrt(double(f)));
      if (config.ffn_bias) b.ffn.bias = Tensor({d}, 0.0);
      m.blocks_.push_back(std::move(b));
    }
    m.final_norm_ = Tensor({d}, 1.0);
    m.w_out_ = normal({v, d}, 1.0 / std::sqrt(double(d)));
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return blocks_.size(); }
  Block& block(std::size_t l) { return blocks_.at(l); }
  const Block& block(std::size_t l) const { return blocks_.at(l); }
  Tensor& output_projection() noexcept { return w_out_; }
  const Tensor& output_projection() const noexcept { return w_out_; }
  Tensor& token_embedding() noexcept { return tok_emb_; }
  Tensor& position_embedding() noexcept { return pos_emb_; }

  /// All parameters in declaration order.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    out.push_back({"tok_emb", &tok_emb_, -1, ParamRole::embedding});
    out.push_back({"pos_emb", &pos_emb_, -1, ParamRole::embedding});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      Block& b = blocks_[l];
      const auto L = static_cast<std::ptrdiff_t>(l);
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "attn_norm", &b.attn_norm, L, ParamRole::norm});
      out.push_back({p + "wq", &b.wq, L, ParamRole::attention});
      out.push_back({p + "wk", &b.wk, L, ParamRole::attention});
      out.push_back({p + "wv", &b.wv, L, ParamRole::attention});
      out.push_back({p + "wo", &b.wo, L, ParamRole::attention});
      out.push_back({p + "ffn_norm", &b.ffn_norm, L, ParamRole::norm});
      out.push_back({p + "w_up", &b.ffn.w_up, L, ParamRole::ffn_up});
      out.push_back({p + "w_down", &b.ffn.w_down, L, ParamRole::ffn_down});
      if (b.ffn.bias) out.push_back({p + "ffn_bias", &*b.ffn.bias, L, ParamRole::ffn_bias});
    }
    out.push_back({"final_norm", &final_norm_, -1, ParamRole::norm});
    out.push_back({"w_out", &w_out_, -1, ParamRole::output});
    return out;
  }

  std::vector<ConstParamRef> parameters() const {
    std::vector<ConstParamRef> out;
    for (auto& p : const_cast<ToyTransformer*>(this)->parameters())
      out.push_back({p.name, p.tensor, p.layer, p.role});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  /// Copies of every parameter tensor in declaration order.
  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    for (const auto& p : parameters()) out.push_back(*p.tensor);
    return out;
  }

  void restore(const std::vector<Tensor>& snap) {
    auto params = parameters();
    if (snap.size() != params.size()) throw ContractError("snapshot does not match model parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (snap[i].shape() != params[i].tensor->shape())
        throw DimensionError("snapshot shape mismatch for " + params[i].name);
      *params[i].tensor = snap[i];
    }
  }

  /// Binds all parameters into `graph`; `trainable(ref)` decides which are
  /// gradient leaves and which are constants.
  template <class Pred>
  BoundParams bind(num::Graph& graph, Pred&& trainable) const {
    BoundParams bp;
    for (const auto& p : parameters()) bp.vars.push_back(graph.leaf(*p.tensor, trainable(p)));
    return bp;
  }

  BoundParams bind_constant(num::Graph& graph) const {
    return bind(graph, [](const ConstParamRef&) { return false; });
  }

  void check_tokens(std::span<const Token> tokens) const {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > config_.max_seq_len)
      throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] >= config_.vocab_size)
        throw InputError("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                         " out of range for vocab_size " + std::to_string(config_.vocab_size));
  }

  void check_target(const TargetSpec& t) const {
    check_tokens(t.tokens);
    if (t.answer_position >= t.tokens.size())
      throw IndexError("answer position " + std::to_string(t.answer_position) + " outside sequence of length " +
                       std::to_string(t.tokens.size()));
    if (t.gold >= config_.vocab_size) throw InputError("gold token " + std::to_string(t.gold) + " out of range");
  }

  /// Records the full forward pass into `graph`; returns positions × V logits.
  Var forward_graph(num::Graph& graph, const BoundParams& bp, std::span<const Token> tokens,
                    const ForwardHooks& hooks = {}) const {
    check_tokens(tokens);
    if (hooks.down_projection && (!hooks.scalings.empty() || hooks.probe_layer))
      throw ContractError("node scaling and a down-projection override cannot be combined");
    const std::size_t n = tokens.size();
    std::size_t k = 0;
    auto next = [&]() -> const Var& { return bp.vars.at(k++); };

    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i;
    const Var& tok = next();
    const Var& pe = next();
    Var x = num::add(num::embedding(tok, std::move(ids)), num::embedding(pe, std::move(pos)));

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Var& attn_norm = next();
      const Var& wq = next();
      const Var& wk = next();
      const Var& wv = next();
      const Var& wo = next();
      const Var& ffn_norm = next();
      const Var& w_up = next();
      const Var& w_down = next();
      const Var* bias = blocks_[l].ffn.bias ? &next() : nullptr;

      Var a = num::rms_norm(x, attn_norm);
      Var att = num::causal_attention(num::linear(a, wq), num::linear(a, wk), num::linear(a, wv), config_.num_heads);
      x = num::add(x, num::linear(att, wo));

      Var f = num::rms_norm(x, ffn_norm);
      Var act = num::nonlinearity(num::linear(f, w_up), config_.nonlinearity);
      Var y;
      if (hooks.down_projection) {
        y = hooks.down_projection(graph, l, act);
      } else {
        y = num::linear(act, w_down);
        y = apply_scaling(graph, l, y, hooks);
        if (bias) y = num::add_row_bias(y, *bias);
      }
      x = num::add(x, y);
    }
    const Var& final_norm = next();
    const Var& w_out = next();
    if (config_.final_norm_enabled) x = num::rms_norm(x, final_norm);
    return num::linear(x, w_out);
  }

  /// Plain forward without gradient recording.
  Tensor logits(std::span<const Token> tokens) const {
    num::Graph g;
    return forward_graph(g, bind_constant(g), tokens).value();
  }

  double target_logit(const TargetSpec& t) const {
    check_target(t);
    return logits(t.tokens).at(t.answer_position, t.gold);
  }

  /// Evaluates L with the designated node(s) scaled to alpha times their
  /// reference value, and ∂L/∂y at that operating point (gradient of an
  /// additive perturbation of the node values).
  ScaledResult forward_scaled(const TargetSpec& target, const NodeScaling& scaling) const {
    check_target(target);
    check_scaling(scaling);
    num::Graph g;
    BoundParams bp = bind_constant(g);
    Var perturbation;
    ScaledResult res;
    ForwardHooks hooks;
    hooks.scalings = std::span<const NodeScaling>(&scaling, 1);
    hooks.final_position = target.answer_position;
    hooks.probe_layer = scaling.layer;
    hooks.perturbation = &perturbation;
    hooks.node_values = &res.node_values;
    Var logits = forward_graph(g, bp, target.tokens, hooks);
    Var L = num::element(logits, target.answer_position, target.gold);
    g.backward(L);
    res.target = L.value()[0];
    res.gradient = g.grad(perturbation);
    return res;
  }

  /// Logits with several node scalings applied at once (no gradients).
  Tensor logits_scaled(std::span<const Token> tokens, std::size_t final_position,
                       std::span<const NodeScaling> scalings) const {
    for (const auto& s : scalings) check_scaling(s);
    num::Graph g;
    ForwardHooks hooks;
    hooks.scalings = scalings;
    hooks.final_position = final_position;
    return forward_graph(g, bind_constant(g), tokens, hooks).value();
  }

  void check_scaling(const NodeScaling& s) const {
    if (s.layer >= blocks_.size())
      throw IndexError("layer " + std::to_string(s.layer) + " out of range for " + std::to_string(blocks_.size()) +
                       " layers");
    if (s.node && *s.node >= config_.d_model)
      throw IndexError("node " + std::to_string(*s.node) + " out of range for " + std::to_string(config_.d_model) +
                       " nodes");
    if (!std::isfinite(s.alpha)) throw ConfigError("scaling factor must be finite");
  }

  /// Sets row j of layer l's W_down to zero for every (l, j) listed.
  void zero_rows(std::span<const std::vector<std::size_t>> rows_per_layer) {
    if (rows_per_layer.size() > blocks_.size())
      throw IndexError("selection has " + std::to_string(rows_per_layer.size()) + " layers, model has " +
                       std::to_string(blocks_.size()));
    for (std::size_t l = 0; l < rows_per_layer.size(); ++l)
      for (std::size_t j : rows_per_layer[l])
        if (j >= config_.d_model)
          throw IndexError("node " + std::to_string(j) + " out of range in layer " + std::to_string(l));
    for (std::size_t l = 0; l < rows_per_layer.size(); ++l) {
      Tensor& w = blocks_[l].ffn.w_down;
      for (std::size_t j : rows_per_layer[l])
        for (double& v : w.row(j)) v = 0.0;
    }
  }

 private:
  Var apply_scaling(num::Graph& graph, std::size_t layer, const Var& y, const ForwardHooks& hooks) const {
    const bool probe = hooks.probe_layer && *hooks.probe_layer == layer;
    bool scaled = false;
    for (const auto& s : hooks.scalings) scaled = scaled || s.layer == layer;
    if (!scaled && !probe) return y;
    const std::size_t n = y.shape()[0], d = y.shape()[1];
    Var out = y;
    if (scaled) {
      Tensor mask({n, d}, 1.0);
      for (const auto& s : hooks.scalings) {
        if (s.layer != layer) continue;
        if (s.positions == PositionMode::final && hooks.final_position >= n)
          throw IndexError("scaling position outside sequence");
        for (std::size_t p = 0; p < n; ++p) {
          if (s.positions == PositionMode::final && p != hooks.final_position) continue;
          for (std::size_t j = 0; j < d; ++j)
            if (!s.node || *s.node == j) mask.at(p, j) *= s.alpha;
        }
      }
      out = num::mul(out, graph.constant(std::move(mask)));
    }
    if (probe) {
      if (hooks.node_values) *hooks.node_values = y.value();
      Var delta = graph.leaf(Tensor({n, d}, 0.0), true);
      if (hooks.perturbation) *hooks.perturbation = delta;
      out = num::add(out, delta);
    }
    return out;
  }

  ModelConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor final_norm_, w_out_;

  friend class CheckpointAccess;
};

}  // namespace loki::model
