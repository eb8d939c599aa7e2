#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "loki/errors.hpp"
#include "loki/numerics/graph.hpp"

namespace loki::model {

using Token = std::uint32_t;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  std::size_t num_heads = 2;
  std::size_t max_seq_len = 32;
  num::Activation nonlinearity = num::Activation::silu;
  bool final_norm_enabled = true;
  bool ffn_bias = false;
  std::uint64_t seed = 0;

  /// Knowledge output nodes per layer (rows of the down-projection).
  std::size_t nodes_per_layer() const noexcept { return d_model; }

  void validate() const {
    if (num_layers < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || num_heads < 1 || max_seq_len < 1)
      throw ConfigError("model sizes must all be >= 1");
    if (d_model % num_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                        std::to_string(num_heads));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"num_layers", c.num_layers},
                        {"d_model", c.d_model},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"num_heads", c.num_heads},
                        {"max_seq_len", c.max_seq_len},
                        {"nonlinearity", std::string(num::activation_name(c.nonlinearity))},
                        {"final_norm_enabled", c.final_norm_enabled},
                        {"ffn_bias", c.ffn_bias},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.nonlinearity = num::parse_activation(j.at("nonlinearity").get<std::string>());
    c.final_norm_enabled = j.at("final_norm_enabled").get<bool>();
    c.ffn_bias = j.at("ffn_bias").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace loki::model
