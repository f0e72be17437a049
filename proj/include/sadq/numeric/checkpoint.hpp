// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sadq/numeric/tensor.hpp"

namespace sadq {

// Binary named-tensor container, little-endian:
//   "SADQ" | version u32 | entries until EOF
//   entry: name_len u32 | name bytes | rank u32 | dims u64 x rank | float64 x numel
inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'A', 'D', 'Q'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::map<std::string, Tensor>;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

class LeReader {
 public:
  LeReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}
  bool done() const { return pos_ == buf_.size(); }

  template <class T>
  T get() {
    if (buf_.size() - pos_ < sizeof(T)) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    if (buf_.size() - pos_ < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put_le<double>(out, v);
  }
  return out;
}

inline NamedTensors decode_checkpoint(const std::string& buf, const std::string& what = "checkpoint") {
  detail::LeReader in(buf, what);
  if (in.bytes(4) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    throw FormatError(what + ": bad magic, not a SADQ container");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  NamedTensors out;
  while (!in.done()) {
    const auto len = in.get<std::uint32_t>();
    std::string name = in.bytes(len);
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = in.get<double>();
    if (!out.emplace(name, Tensor(shape, std::move(values))).second) {
      throw FormatError(what + ": duplicate entry '" + name + "'");
    }
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

}  // namespace sadq
