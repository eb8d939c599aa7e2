#pragma once

#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>

#include <json.hpp>

#include "loki/kva/attribution.hpp"
#include "loki/model/checkpoint.hpp"

namespace loki::kva {

inline constexpr int kLogFormat = 1;

/// Binary log: one JSON header line followed by N·L·D little-endian float64
/// in (sample, layer, node) row-major order.
inline std::string serialize_log(const AttributionLog& log) {
  log.validate();
  nlohmann::json header{{"format", kLogFormat},
                        {"N", log.samples},
                        {"L", log.layers},
                        {"D", log.nodes},
                        {"m", log.config.steps},
                        {"path_mode", std::string(path_mode_name(log.config.path))},
                        {"position_mode", std::string(position_mode_name(log.config.positions))},
                        {"multiply_by_activation", log.config.multiply_by_activation},
                        {"model_digest", log.model_digest},
                        {"sample_digests", log.sample_digests}};
  std::ostringstream os(std::ios::binary);
  os << header.dump() << '\n';
  model::io::write_f64_le(os, log.scores);
  return os.str();
}

inline AttributionLog deserialize_log(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw InputError("attribution log header missing");
  AttributionLog log;
  try {
    auto h = nlohmann::json::parse(bytes.substr(0, nl));
    if (h.at("format").get<int>() != kLogFormat) throw InputError("unsupported attribution log format");
    log.samples = h.at("N").get<std::size_t>();
    log.layers = h.at("L").get<std::size_t>();
    log.nodes = h.at("D").get<std::size_t>();
    log.config.steps = h.at("m").get<std::size_t>();
    log.config.path = parse_path_mode(h.at("path_mode").get<std::string>());
    log.config.positions = parse_position_mode(h.at("position_mode").get<std::string>());
    log.config.multiply_by_activation = h.at("multiply_by_activation").get<bool>();
    log.model_digest = h.at("model_digest").get<std::string>();
    log.sample_digests = h.value("sample_digests", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed attribution log header: ") + e.what());
  }
  const std::size_t count = log.samples * log.layers * log.nodes;
  if (bytes.size() - nl - 1 != count * 8)
    throw InputError("attribution log payload has " + std::to_string(bytes.size() - nl - 1) + " bytes, expected " +
                     std::to_string(count * 8));
  log.scores.resize(count);
  std::istringstream is(bytes.substr(nl + 1), std::ios::binary);
  model::io::read_f64_le(is, log.scores);
  log.validate();
  return log;
}

inline void save_log(const std::filesystem::path& path, const AttributionLog& log) {
  model::io::write_file(path, serialize_log(log));
}

inline AttributionLog load_log(const std::filesystem::path& path) { return deserialize_log(model::io::read_file(path)); }

/// One row per (sample, layer), D comma-separated values.
inline std::string log_to_csv(const AttributionLog& log) {
  std::string out;
  char buf[32];
  for (std::size_t n = 0; n < log.samples; ++n)
    for (std::size_t l = 0; l < log.layers; ++l) {
      auto row = log.row(n, l);
      for (std::size_t j = 0; j < row.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", row[j]);
        if (j) out += ',';
        out += buf;
      }
      out += '\n';
    }
  return out;
}

}  // namespace loki::kva
