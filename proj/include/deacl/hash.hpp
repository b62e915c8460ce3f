#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace deacl {

/// Incremental 64-bit FNV-1a. Used for config, parameter and bank fingerprints.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Hasher& text(std::string_view s) { return bytes(s.data(), s.size()); }
  template <typename T>
  Hasher& values(std::span<const T> v) {
    return bytes(v.data(), v.size_bytes());
  }
  Hasher& u64(std::uint64_t v) { return bytes(&v, sizeof v); }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) { return Hasher{}.text(s).digest(); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace deacl
