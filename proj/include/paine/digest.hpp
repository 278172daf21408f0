#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

namespace paine {

// FNV-1a 64-bit, used for config/dataset/checkpoint provenance digests.
class Fnv1a {
 public:
  Fnv1a() : h_(0xcbf29ce484222325ULL) {}

  void update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }

  void update(const std::string& s) { update(s.data(), s.size()); }

  uint64_t value() const { return h_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
    return std::string(buf);
  }

 private:
  uint64_t h_;
};

inline std::string digest_hex(const std::string& payload) {
  Fnv1a f;
  f.update(payload);
  return f.hex();
}

}  // namespace paine
