// Copyright 2026 The beamsplat Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "beamsplat/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

namespace beamsplat {

// Little-endian scalar streams for the on-disk formats.

namespace detail {
template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}
}  // namespace detail

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename T>
  void scalar(T v) {
    v = detail::to_little(v);
    bytes(&v, sizeof(T));
  }
  void u32(std::uint32_t v) { scalar(v); }
  void u64(std::uint64_t v) { scalar(v); }
  void i32(std::int32_t v) { scalar(v); }
  void f32(float v) { scalar(v); }
  void f64(double v) { scalar(v); }
  void fixed_string(const std::string& s, std::size_t width) {
    std::string padded = s.substr(0, width);
    padded.resize(width, '\0');
    bytes(padded.data(), width);
  }
  template <typename Derived>
  void f64_block(const Eigen::DenseBase<Derived>& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) f64(static_cast<double>(m(r, c)));
  }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw std::runtime_error("cannot read " + path_);
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw ParseError("unexpected end of file: " + path_);
  }
  template <typename T>
  T scalar() {
    T v;
    bytes(&v, sizeof(T));
    return detail::to_little(v);
  }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }
  std::int32_t i32() { return scalar<std::int32_t>(); }
  float f32() { return scalar<float>(); }
  double f64() { return scalar<double>(); }
  std::string fixed_string(std::size_t width) {
    std::string s(width, '\0');
    bytes(s.data(), width);
    return s.substr(0, s.find('\0'));
  }
  /// Fills a pre-sized block, column-major.
  template <typename Derived>
  void f64_block(Eigen::DenseBase<Derived>& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<typename Derived::Scalar>(f64());
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace beamsplat
