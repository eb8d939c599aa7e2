#pragma once

#include <span>
#include <vector>

#include "loki/model/transformer.hpp"
#include "loki/parallel.hpp"

namespace loki::model {

/// Argmax of the answer-position logits; ties go to the lowest token id.
inline Token predict(const ToyTransformer& m, const TargetSpec& t) {
  m.check_target(t);
  const Tensor logits = m.logits(t.tokens);
  const auto row = logits.row(t.answer_position);
  std::size_t best = 0;
  for (std::size_t v = 1; v < row.size(); ++v)
    if (row[v] > row[best]) best = v;
  return static_cast<Token>(best);
}

/// Percentage of examples whose prediction equals the gold token.
inline double accuracy(const ToyTransformer& m, std::span<const TargetSpec> data, std::size_t threads = 1) {
  if (data.empty()) throw ContractError("accuracy of an empty split is undefined");
  std::vector<char> hit(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) { hit[i] = predict(m, data[i]) == data[i].gold; });
  std::size_t correct = 0;
  for (char h : hit) correct += h != 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Cross-entropy of the gold token at the answer position.
inline double example_loss(const ToyTransformer& m, const TargetSpec& t) {
  m.check_target(t);
  num::Graph g;
  Var logits = m.forward_graph(g, m.bind_constant(g), t.tokens);
  return num::cross_entropy(logits, t.answer_position, t.gold).value()[0];
}

/// Mean example_loss, summed in example order.
inline double mean_loss(const ToyTransformer& m, std::span<const TargetSpec> data, std::size_t threads = 1) {
  if (data.empty()) throw ContractError("loss of an empty split is undefined");
  std::vector<double> loss(data.size(), 0.0);
  parallel_for(data.size(), threads, [&](std::size_t i) { loss[i] = example_loss(m, data[i]); });
  double s = 0.0;
  for (double v : loss) s += v;
  return s / static_cast<double>(data.size());
}

}  // namespace loki::model
