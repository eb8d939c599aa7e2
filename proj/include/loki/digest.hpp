#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace loki {

/// Streaming 64-bit FNV-1a content hash used to bind pipeline artifacts.
class Digest {
 public:
  void update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= kPrime;
    }
  }
  void update(std::string_view s) {
    update({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  }
  void update(std::span<const double> values) {
    update({reinterpret_cast<const unsigned char*>(values.data()), values.size_bytes()});
  }
  void update_u64(std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    update(std::span<const unsigned char>(buf, 8));
  }

  std::uint64_t value() const noexcept { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  static constexpr std::uint64_t kOffset = 14695981039346656037ull;
  static constexpr std::uint64_t kPrime = 1099511628211ull;
  std::uint64_t state_ = kOffset;
};

}  // namespace loki
