#pragma once

// FMRX feature interchange: a flat list of named float32 tensors behind a
// small header. All integers and floats are little-endian.
//
//   "FMRX" | u16 version | u16 dtype | u64 encoder fingerprint | u32 count
//   count x ( u32 name_len | name bytes | u32 rank | rank x u32 dims )
//   payload: every tensor's elements in header order, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fmrnet/tensor.hpp"

namespace fmrnet::interchange {

inline constexpr char kMagic[4] = {'F', 'M', 'R', 'X'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint16_t kFloat32 = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  bool operator==(const NamedTensor&) const = default;
};

struct Message {
  std::uint64_t encoder_fingerprint = 0;
  std::vector<NamedTensor> tensors;

  const Tensor<float>& get(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw FormatError("interchange: missing tensor '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

template <class U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : b_(bytes) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("interchange: truncated payload");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const Message& msg) {
  std::string out(kMagic, 4);
  detail::put<std::uint16_t>(out, kVersion);
  detail::put<std::uint16_t>(out, kFloat32);
  detail::put<std::uint64_t>(out, msg.encoder_fingerprint);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(msg.tensors.size()));
  for (const auto& t : msg.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (int d : t.tensor.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& t : msg.tensors)
    for (float v : t.tensor.values()) detail::put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Message decode(std::string_view bytes) {
  detail::Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("interchange: bad magic");
  r.take(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion)
    throw FormatError("interchange: unsupported version " + std::to_string(version));
  const auto dtype = r.get<std::uint16_t>();
  if (dtype != kFloat32) throw FormatError("interchange: unsupported dtype code " + std::to_string(dtype));
  Message msg;
  msg.encoder_fingerprint = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name(r.take(len));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("interchange: implausible tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
    headers.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : headers) {
    const std::size_t n = shape_numel(shape);
    if (r.remaining() / 4 < n) throw FormatError("interchange: truncated payload");
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<float>(r.get<std::uint32_t>());
    msg.tensors.push_back({std::move(name), std::move(t)});
  }
  if (r.remaining() != 0) throw FormatError("interchange: trailing bytes after payload");
  return msg;
}

}  // namespace fmrnet::interchange
