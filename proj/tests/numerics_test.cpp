#include <gtest/gtest.h>

#include <functional>
#include <string>

#include "loki/numerics/graph.hpp"
#include "test_util.hpp"

using namespace loki;
using namespace loki::num;
using loki::testing::random_tensor;
using loki::testing::relative_error;

namespace {

Tensor eval_matmul(const Tensor& a, const Tensor& b) {
  Graph g;
  return matmul(g.constant(a), g.constant(b)).value();
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.at(i, j) = s;
    }
  return out;
}

// Builds a scalar loss from one input leaf; the input tensor is the only
// thing finite differences perturb.
using ScalarFn = std::function<Var(Graph&, const Var&)>;

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Graph g;
  return f(g, g.constant(x)).value()[0];
}

/// Max relative error between reverse-mode and central differences over
/// every coordinate of x.
double gradient_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  Graph g;
  Var in = g.leaf(x);
  g.backward(f(g, in));
  const Tensor analytic = g.grad(in);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (eval_scalar(f, xp) - eval_scalar(f, xm)) / (2.0 * h);
    worst = std::max(worst, relative_error(analytic[i], fd, 1e-4));
  }
  return worst;
}

/// Random linear read-out so every output element contributes to the loss.
Var project(Graph& g, const Var& y, const Tensor& weights) {
  return sum(mul(y, g.constant(weights)));
}

}  // namespace

TEST(Matmul, IdentityCase) {
  Tensor out = eval_matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(out, Tensor::matrix({{3}, {4}}));
}

TEST(Matmul, DirectArithmetic) {
  Tensor out = eval_matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
  EXPECT_EQ(out, Tensor::matrix({{17}, {39}}));
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(rng, {8, 8});
    Tensor b = random_tensor(rng, {8, 8});
    EXPECT_LE(max_abs_diff(eval_matmul(a, b), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
    EXPECT_NE(msg.find("and (2, 3)"), std::string::npos);
  }
}

TEST(Nonlinearity, ReluSignCases) {
  Graph g;
  Var y = nonlinearity(g.constant(Tensor::vector({-1, 0, 2})), Activation::relu);
  EXPECT_EQ(y.value(), Tensor::vector({0, 0, 2}));
}

TEST(Nonlinearity, SiluZeroFixedPoint) { EXPECT_EQ(activate(Activation::silu, 0.0), 0.0); }

TEST(Nonlinearity, GeluGradientMatchesFiniteDifference) {
  const double h = 1e-6;
  const double fd = (activate(Activation::gelu, 0.5 + h) - activate(Activation::gelu, 0.5 - h)) / (2 * h);
  Graph g;
  Var x = g.leaf(Tensor::scalar(0.5));
  g.backward(sum(nonlinearity(x, Activation::gelu)));
  EXPECT_NEAR(g.grad(x)[0], fd, 1e-7);
}

TEST(Nonlinearity, UnknownKindIsConfigError) { EXPECT_THROW(parse_activation("tanh"), ConfigError); }

TEST(Backward, LinearFunction) {
  Graph g;
  Var w = g.constant(Tensor::matrix({{2, 3}}));
  Var x = g.leaf(Tensor::matrix({{1}, {1}}));
  g.backward(matmul(w, x));
  EXPECT_EQ(g.grad(x), Tensor::matrix({{2}, {3}}));
}

TEST(Backward, Quadratic) {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  g.backward(sum(mul(x, x)));
  EXPECT_EQ(g.grad(x), Tensor::vector({2, 4}));
}

TEST(Backward, NonScalarTargetIsContractError) {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(mul(x, x)), ContractError);
}

TEST(Backward, EveryLeafGetsGradientOfItsShape) {
  Graph g;
  Rng rng(3);
  Var a = g.leaf(random_tensor(rng, {3, 4}));
  Var b = g.leaf(random_tensor(rng, {4, 2}));
  Var unused = g.leaf(random_tensor(rng, {5}));
  g.backward(sum(matmul(a, b)));
  EXPECT_EQ(g.grad(a).shape(), a.shape());
  EXPECT_EQ(g.grad(b).shape(), b.shape());
  EXPECT_EQ(g.grad(unused).shape(), unused.shape());
}

TEST(Backward, RepeatedPassesAreBitwiseIdentical) {
  Graph g;
  Rng rng(11);
  Var a = g.leaf(random_tensor(rng, {4, 6}));
  Var w = g.leaf(random_tensor(rng, {5, 6}));
  Var loss = sum(nonlinearity(linear(a, w), Activation::gelu));
  g.backward(loss);
  Tensor ga = g.grad(a), gw = g.grad(w);
  g.backward(loss);
  EXPECT_TRUE(bitwise_equal(ga, g.grad(a)));
  EXPECT_TRUE(bitwise_equal(gw, g.grad(w)));
}

TEST(Graph, NonFiniteValueIsSurfaced) {
  Graph g;
  EXPECT_THROW(g.leaf(Tensor::scalar(std::numeric_limits<double>::infinity())), NumericError);
  Var x = g.leaf(Tensor::scalar(1e300));
  EXPECT_THROW(mul(x, x), NumericError);
}

// Reverse mode vs central differences (h = 1e-5) on 100 random instances of
// every differentiable operation.
class OperationGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(OperationGradients, MatchCentralDifferences) {
  const std::string op = GetParam();
  Rng rng(std::hash<std::string>{}(op) & 0xffff);
  double worst = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    const std::size_t n = 1 + rng.below(4), k = 1 + rng.below(5), m = 1 + rng.below(4);
    Tensor other = random_tensor(rng, {k, m});
    Tensor weight_nk = random_tensor(rng, {m, k});
    Tensor readout_nm = random_tensor(rng, {n, m});
    Tensor readout_nk = random_tensor(rng, {n, k});
    Tensor bias = random_tensor(rng, {k});
    Tensor gain = random_tensor(rng, {k}, 0.5, 1.5);
    Tensor x = random_tensor(rng, {n, k});
    ScalarFn f;
    if (op == "matmul_left") {
      f = [&](Graph& g, const Var& v) { return project(g, matmul(v, g.constant(other)), readout_nm); };
    } else if (op == "matmul_right") {
      x = random_tensor(rng, {k, m});
      Tensor left = random_tensor(rng, {n, k});
      f = [&, left](Graph& g, const Var& v) { return project(g, matmul(g.constant(left), v), readout_nm); };
    } else if (op == "linear_input") {
      f = [&](Graph& g, const Var& v) { return project(g, linear(v, g.constant(weight_nk)), readout_nm); };
    } else if (op == "linear_weight") {
      Tensor input = random_tensor(rng, {n, k});
      x = weight_nk;
      f = [&, input](Graph& g, const Var& v) { return project(g, linear(g.constant(input), v), readout_nm); };
    } else if (op == "add_row_bias") {
      x = bias;
      Tensor base = random_tensor(rng, {n, k});
      f = [&, base](Graph& g, const Var& v) { return project(g, add_row_bias(g.constant(base), v), readout_nk); };
    } else if (op == "mul") {
      Tensor other_same = random_tensor(rng, {n, k});
      f = [&, other_same](Graph& g, const Var& v) { return project(g, mul(v, g.constant(other_same)), readout_nk); };
    } else if (op == "scale") {
      f = [&](Graph& g, const Var& v) { return project(g, scale(v, -1.7), readout_nk); };
    } else if (op == "relu" || op == "gelu" || op == "silu") {
      const Activation kind = parse_activation(op);
      if (kind == Activation::relu)  // keep away from the kink
        for (double& v : x.data()) v = (v >= 0 ? 0.05 : -0.05) + v;
      f = [&, kind](Graph& g, const Var& v) { return project(g, nonlinearity(v, kind), readout_nk); };
    } else if (op == "rms_norm_input") {
      f = [&](Graph& g, const Var& v) { return project(g, rms_norm(v, g.constant(gain)), readout_nk); };
    } else if (op == "rms_norm_gain") {
      Tensor input = x;
      x = gain;
      f = [&, input](Graph& g, const Var& v) { return project(g, rms_norm(g.constant(input), v), readout_nk); };
    } else if (op == "attention") {
      const std::size_t heads = 1 + rng.below(2);
      const std::size_t d = heads * (1 + rng.below(3));
      x = random_tensor(rng, {n, 3 * d});
      Tensor read = random_tensor(rng, {n, d});
      f = [&, heads, d, read, n](Graph& g, const Var& v) {
        std::vector<std::size_t> qi, ki, vi;
        for (std::size_t c = 0; c < d; ++c) {
          qi.push_back(c);
          ki.push_back(d + c);
          vi.push_back(2 * d + c);
        }
        (void)n;
        return project(g, causal_attention(gather_cols(v, qi), gather_cols(v, ki), gather_cols(v, vi), heads), read);
      };
    } else if (op == "embedding") {
      x = random_tensor(rng, {5, k});
      std::vector<std::size_t> ids(n);
      for (auto& id : ids) id = rng.below(5);
      f = [&, ids](Graph& g, const Var& v) { return project(g, embedding(v, ids), readout_nk); };
    } else if (op == "concat_gather") {
      Tensor right = random_tensor(rng, {n, m});
      std::vector<std::size_t> idx(k + m);
      for (auto& i : idx) i = rng.below(k + m);
      Tensor read = random_tensor(rng, {n, k + m});
      f = [&, right, idx, read](Graph& g, const Var& v) {
        return project(g, gather_cols(concat_cols(v, g.constant(right)), idx), read);
      };
    } else if (op == "cross_entropy") {
      const std::size_t row = rng.below(n), gold = rng.below(k);
      f = [row, gold](Graph&, const Var& v) { return cross_entropy(v, row, gold); };
    } else if (op == "element") {
      const std::size_t r = rng.below(n), c = rng.below(k);
      f = [r, c](Graph&, const Var& v) { return element(mul(v, v), r, c); };
    } else {
      FAIL() << "unknown op " << op;
    }
    worst = std::max(worst, gradient_check(f, x));
  }
  EXPECT_LE(worst, 1e-5) << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OperationGradients,
                         ::testing::Values("matmul_left", "matmul_right", "linear_input", "linear_weight",
                                           "add_row_bias", "mul", "scale", "relu", "gelu", "silu",
                                           "rms_norm_input", "rms_norm_gain", "attention", "embedding",
                                           "concat_gather", "cross_entropy", "element"));

TEST(Purity, IdenticalInputsGiveBitwiseIdenticalOutputs) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {6, 8});
  Tensor w = random_tensor(rng, {8, 8});
  auto run = [&] {
    Graph g;
    Var q = linear(g.constant(x), g.constant(w));
    return causal_attention(q, q, q, 2).value();
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}
