#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loki/digest.hpp"
#include "loki/errors.hpp"
#include "loki/model/config.hpp"
#include "loki/model/transformer.hpp"

namespace loki::model {

inline constexpr int kCheckpointFormat = 1;

namespace io {

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  std::vector<char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void read_f64_le(std::istream& is, std::span<double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw InputError("truncated float payload");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{buf[i * 8 + b]} << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace io

/// Content hash over the config and every parameter value.
inline std::string model_digest(const ToyTransformer& m) {
  Digest d;
  d.update(to_json(m.config()).dump());
  for (const auto& p : m.parameters()) {
    d.update(p.name);
    d.update(p.tensor->data());
  }
  return d.hex();
}

/// Serializes a checkpoint: one JSON header line, then every parameter in
/// declaration order as little-endian float64. `extra` is merged into the
/// header (e.g. partition target positions).
inline std::string serialize_checkpoint(const ToyTransformer& m, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header = extra;
  header["format"] = kCheckpointFormat;
  header["config"] = to_json(m.config());
  header["parameter_count"] = m.parameter_count();
  std::ostringstream os(std::ios::binary);
  os << header.dump() << '\n';
  for (const auto& p : m.parameters()) io::write_f64_le(os, p.tensor->data());
  return os.str();
}

struct LoadedCheckpoint {
  ToyTransformer model;
  nlohmann::json header;
};

inline LoadedCheckpoint deserialize_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw InputError("checkpoint header missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (header.value("format", 0) != kCheckpointFormat)
    throw InputError("unsupported checkpoint format " + header.value("format", nlohmann::json()).dump());
  ModelConfig cfg = model_config_from_json(header.at("config"));
  LoadedCheckpoint out{ToyTransformer::initialize(cfg), header};
  std::istringstream is(bytes.substr(nl + 1), std::ios::binary);
  for (auto& p : out.model.parameters()) io::read_f64_le(is, p.tensor->data());
  if (is.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes after checkpoint payload");
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const ToyTransformer& m,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  io::write_file(path, serialize_checkpoint(m, extra));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace loki::model
