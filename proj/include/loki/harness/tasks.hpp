#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loki/digest.hpp"
#include "loki/errors.hpp"
#include "loki/model/checkpoint.hpp"
#include "loki/model/transformer.hpp"
#include "loki/random.hpp"

namespace loki::harness {

using model::TargetSpec;
using model::Token;

// Vocabulary layout: one marker per general subtask, one marker for the
// lookup task, a separator, `content_size` content tokens, then
// `content_size` key tokens used only by lookup prompts.
//
// General prompts are [marker, t1, t2, t3, SEP] with the answer read at
// SEP. Rules over content values:
//   copy       -> t1
//   reverse    -> t3 (the last element of the sequence)
//   mod-add    -> (t1 + t2) mod C, t3 is a distractor
//   sort       -> min(t1, t2), the first element of the sorted pair
//   successor  -> (t2 + 1) mod C
// Lookup prompts are [KV, d1, d2, key] with answer pi(key) read at the key
// position, where pi is a seeded permutation with no fixed points and no
// successor pairs, so it shares no rule with the general suite.

enum class Subtask { copy, reverse, mod_add, sort, successor };
inline constexpr std::array<Subtask, 5> kSubtasks{Subtask::copy, Subtask::reverse, Subtask::mod_add, Subtask::sort,
                                                  Subtask::successor};
inline constexpr std::size_t kMarkers = 6;
inline constexpr Token kKvMarker = 5;
inline constexpr Token kSep = 6;
inline constexpr Token kFirstContent = 7;
inline constexpr std::size_t kPromptLength = 5;

inline std::string_view subtask_name(Subtask s) {
  switch (s) {
    case Subtask::copy: return "copy";
    case Subtask::reverse: return "reverse";
    case Subtask::mod_add: return "mod-add";
    case Subtask::sort: return "sort";
    case Subtask::successor: return "successor";
  }
  return "?";
}

struct TaskConfig {
  std::size_t content_size = 10;
  std::size_t general_train = 500;  // per subtask
  std::size_t general_eval = 100;   // per subtask
  std::size_t lookup_train = 400;
  std::size_t lookup_eval = 100;
  std::uint64_t seed = 0;

  std::size_t vocab_needed() const { return kFirstContent + 2 * content_size; }

  void validate(std::size_t vocab_size) const {
    if (content_size < 3) throw ConfigError("content_size must be at least 3");
    if (vocab_needed() > vocab_size)
      throw ConfigError("vocabulary of " + std::to_string(vocab_size) + " tokens is too small for " +
                        std::to_string(content_size) + " content values (needs " + std::to_string(vocab_needed()) +
                        ")");
    if (!general_train || !general_eval || !lookup_train || !lookup_eval)
      throw ConfigError("every split size must be at least 1");
    const std::size_t prompts = content_size * content_size * content_size;
    if (general_train + general_eval > prompts || lookup_train + lookup_eval > prompts)
      throw ConfigError("split sizes exceed the " + std::to_string(prompts) + " distinct prompts per task");
  }
};

inline nlohmann::json to_json(const TaskConfig& c) {
  return {{"content_size", c.content_size}, {"general_train", c.general_train}, {"general_eval", c.general_eval},
          {"lookup_train", c.lookup_train}, {"lookup_eval", c.lookup_eval},     {"seed", c.seed}};
}

struct SyntheticTaskSuite {
  TaskConfig config;
  std::vector<std::vector<TargetSpec>> general_train;  // indexed like kSubtasks
  std::vector<std::vector<TargetSpec>> general_eval;
  std::vector<TargetSpec> lookup_train, lookup_eval;
  std::vector<std::size_t> key_map;  // pi over content values

  std::vector<TargetSpec> all_general_train() const {
    std::vector<TargetSpec> out;
    for (const auto& s : general_train) out.insert(out.end(), s.begin(), s.end());
    return out;
  }
  std::vector<TargetSpec> all_general_eval() const {
    std::vector<TargetSpec> out;
    for (const auto& s : general_eval) out.insert(out.end(), s.begin(), s.end());
    return out;
  }
};

inline Token content_token(std::size_t v) { return static_cast<Token>(kFirstContent + v); }
inline std::size_t content_value(Token t) { return t - kFirstContent; }
/// Lookup keys have their own ids after the content block.
inline Token key_token(std::size_t k, std::size_t C) { return static_cast<Token>(kFirstContent + C + k); }

/// Gold content value for a general subtask.
inline std::size_t general_rule(Subtask s, std::size_t t1, std::size_t t2, std::size_t t3, std::size_t C) {
  switch (s) {
    case Subtask::copy: return t1;
    case Subtask::reverse: return t3;
    case Subtask::mod_add: return (t1 + t2) % C;
    case Subtask::sort: return std::min(t1, t2);
    case Subtask::successor: return (t2 + 1) % C;
  }
  return 0;
}

namespace detail {

/// All C^3 triples in a seeded order.
inline std::vector<std::array<std::size_t, 3>> shuffled_triples(std::size_t C, Rng& rng) {
  std::vector<std::array<std::size_t, 3>> t;
  t.reserve(C * C * C);
  for (std::size_t a = 0; a < C; ++a)
    for (std::size_t b = 0; b < C; ++b)
      for (std::size_t c = 0; c < C; ++c) t.push_back({a, b, c});
  rng.shuffle(t);
  return t;
}

}  // namespace detail

inline SyntheticTaskSuite generate_tasks(const TaskConfig& cfg, std::size_t vocab_size) {
  cfg.validate(vocab_size);
  const std::size_t C = cfg.content_size;
  Rng rng(cfg.seed);
  SyntheticTaskSuite suite;
  suite.config = cfg;
  for (std::size_t s = 0; s < kSubtasks.size(); ++s) {
    auto triples = detail::shuffled_triples(C, rng);
    std::vector<TargetSpec> train, eval;
    for (std::size_t i = 0; i < cfg.general_train + cfg.general_eval; ++i) {
      const auto [a, b, c] = triples[i];
      TargetSpec t{{static_cast<Token>(s), content_token(a), content_token(b), content_token(c), kSep},
                   kPromptLength - 1,
                   content_token(general_rule(kSubtasks[s], a, b, c, C))};
      (i < cfg.general_train ? train : eval).push_back(std::move(t));
    }
    suite.general_train.push_back(std::move(train));
    suite.general_eval.push_back(std::move(eval));
  }

  std::vector<std::size_t> pi(C);
  for (;;) {
    for (std::size_t i = 0; i < C; ++i) pi[i] = i;
    rng.shuffle(pi);
    bool ok = true;
    for (std::size_t i = 0; i < C; ++i) ok = ok && pi[i] != i && pi[i] != (i + 1) % C;
    if (ok) break;
  }
  suite.key_map = pi;
  auto triples = detail::shuffled_triples(C, rng);
  for (std::size_t i = 0; i < cfg.lookup_train + cfg.lookup_eval; ++i) {
    const auto [d1, d2, k] = triples[i];
    TargetSpec t{{kKvMarker, content_token(d1), content_token(d2), key_token(k, C)}, 3, content_token(pi[k])};
    (i < cfg.lookup_train ? suite.lookup_train : suite.lookup_eval).push_back(std::move(t));
  }
  return suite;
}

// Line-delimited records {tokens, answer_position, gold_token}.

inline std::string to_jsonl(std::span<const TargetSpec> data) {
  std::string out;
  for (const auto& t : data)
    out += nlohmann::json{{"tokens", t.tokens}, {"answer_position", t.answer_position}, {"gold_token", t.gold}}.dump() +
           "\n";
  return out;
}

inline std::vector<TargetSpec> from_jsonl(const std::string& text) {
  std::vector<TargetSpec> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("tokens").get<std::vector<Token>>(), j.at("answer_position").get<std::size_t>(),
                     j.at("gold_token").get<Token>()});
    } catch (const nlohmann::json::exception& e) {
      throw InputError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& p, std::span<const TargetSpec> data) {
  model::io::write_file(p, to_jsonl(data));
}

inline std::vector<TargetSpec> load_dataset(const std::filesystem::path& p) {
  return from_jsonl(model::io::read_file(p));
}

/// Content hash of a dataset, used to bind artifacts.
inline std::string dataset_digest(std::span<const TargetSpec> data) {
  Digest d;
  d.update(to_jsonl(data));
  return d.hex();
}

}  // namespace loki::harness
