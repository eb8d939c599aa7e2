#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "loki/model/checkpoint.hpp"
#include "loki/selector/selection.hpp"

namespace loki::selector {

inline constexpr int kSelectionFormat = 1;

inline nlohmann::json to_json(const SelectionSet& s) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t l = 0; l < s.layers.size(); ++l) layers[std::to_string(l)] = s.layers[l];
  nlohmann::json q = s.q;
  if (std::floor(s.q) == s.q && std::abs(s.q) < 1e15) q = static_cast<long long>(s.q);
  return nlohmann::json{{"format", kSelectionFormat},
                        {"method", std::string(method_name(s.method))},
                        {"q", q},
                        {"D", s.nodes},
                        {"model_digest", s.model_digest},
                        {"log_digest", s.log_digest},
                        {"layers", layers}};
}

inline SelectionSet selection_from_json(const nlohmann::json& j) {
  SelectionSet s;
  try {
    if (j.at("format").get<int>() != kSelectionFormat) throw InputError("unsupported selection format");
    s.method = parse_method(j.at("method").get<std::string>());
    s.q = j.at("q").get<double>();
    s.nodes = j.at("D").get<std::size_t>();
    s.model_digest = j.at("model_digest").get<std::string>();
    s.log_digest = j.value("log_digest", std::string{});
    const auto& layers = j.at("layers");
    s.layers.resize(layers.size());
    for (auto it = layers.begin(); it != layers.end(); ++it) {
      std::size_t l = 0;
      try {
        l = std::stoul(it.key());
      } catch (const std::exception&) {
        throw InputError("selection layer key '" + it.key() + "' is not an integer");
      }
      if (l >= s.layers.size()) throw InputError("selection layer keys are not contiguous from 0");
      s.layers[l] = it.value().get<std::vector<std::size_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed selection file: ") + e.what());
  }
  s.validate();
  return s;
}

inline void save_selection(const std::filesystem::path& path, const SelectionSet& s) {
  model::io::write_file(path, to_json(s).dump(2) + "\n");
}

inline SelectionSet load_selection(const std::filesystem::path& path) {
  try {
    return selection_from_json(nlohmann::json::parse(model::io::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("selection file '" + path.string() + "' is not JSON: " + e.what());
  }
}

}  // namespace loki::selector
