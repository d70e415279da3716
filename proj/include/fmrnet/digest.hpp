#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace fmrnet {

// 64-bit FNV-1a; used for parameter digests and config fingerprints.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }
  template <class T>
  Fnv1a& update(std::span<const T> values) {
    return update(values.data(), values.size_bytes());
  }
  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace fmrnet
