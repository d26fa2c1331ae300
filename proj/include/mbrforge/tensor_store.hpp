// SPDX-License-Identifier: Apache-2.0

#pragma once

// TSF tensor container:
//
//   "TSF1\n"
//   one header line per tensor: name \t f32 \t d0,d1,...\n
//   "\n"
//   little-endian float32 payloads, concatenated in header order
//
// No padding and no trailing bytes. Dimensions are written without leading
// zeros, so parse() followed by serialize() reproduces the input exactly.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mbrforge/atomic_write.hpp"
#include "mbrforge/error.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::checkpoint {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s;
}

inline std::size_t shape_elements(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw DataError("tensor dimensions must be positive");
    if (n > SIZE_MAX / d) throw DataError("tensor shape overflows");
    n *= d;
  }
  return n;
}

struct Tensor {
  std::string name;
  Shape shape;
  std::vector<float> data;  // row-major

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
};

/// Ordered collection of uniquely named float32 tensors.
class TensorStore {
 public:
  TensorStore() = default;

  void add(Tensor t) {
    validate(t);
    if (index_.count(t.name)) throw DataError("duplicate tensor name '" + t.name + "'");
    index_.emplace(t.name, tensors_.size());
    tensors_.push_back(std::move(t));
  }

  void add(std::string name, Shape shape, std::vector<float> data) {
    add(Tensor{std::move(name), std::move(shape), std::move(data)});
  }

  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no tensor named '" + name + "'");
    return tensors_[it->second];
  }

  static void validate(const Tensor& t) {
    if (t.name.empty()) throw DataError("tensor name must not be empty");
    if (t.name.find_first_of("\t\n") != std::string::npos) {
      throw DataError("tensor name '" + t.name + "' contains TAB or LF");
    }
    if (!text::is_valid_utf8(t.name)) throw DataError("tensor name is not valid UTF-8");
    if (t.shape.empty()) throw DataError("tensor '" + t.name + "' has an empty shape");
    if (t.data.size() != shape_elements(t.shape)) {
      throw DataError("tensor '" + t.name + "' has " + std::to_string(t.data.size()) +
                      " values for shape [" + shape_to_string(t.shape) + "]");
    }
    for (float v : t.data) {
      if (!std::isfinite(v)) throw DataError("tensor '" + t.name + "' holds a non-finite value");
    }
  }

 private:
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void append_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out += static_cast<char>((bits >> (8 * i)) & 0xFF);
}

inline float read_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::size_t parse_dim(std::string_view s, std::string_view name) {
  if (s.empty() || s.size() > 19 || s[0] == '0') {
    throw DataError("TSF: bad dimension '" + std::string(s) + "' for tensor '" + std::string(name) + "'");
  }
  std::size_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') {
      throw DataError("TSF: bad dimension '" + std::string(s) + "' for tensor '" + std::string(name) + "'");
    }
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

}  // namespace detail

inline constexpr std::string_view kTsfMagic = "TSF1\n";

inline std::string serialize(const TensorStore& store) {
  std::string out(kTsfMagic);
  for (const auto& t : store.tensors()) {
    out += t.name;
    out += "\tf32\t";
    out += shape_to_string(t.shape);
    out += '\n';
  }
  out += '\n';
  for (const auto& t : store.tensors()) {
    for (float v : t.data) detail::append_le(out, v);
  }
  return out;
}

inline TensorStore parse(std::string_view bytes) {
  if (bytes.substr(0, kTsfMagic.size()) != kTsfMagic) throw DataError("TSF: bad magic");
  std::size_t pos = kTsfMagic.size();
  struct Header {
    std::string name;
    Shape shape;
  };
  std::vector<Header> headers;
  while (true) {
    auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw DataError("TSF: unterminated header");
    auto line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos || line.find('\t', t2 + 1) != std::string_view::npos) {
      throw DataError("TSF: malformed header line '" + std::string(line) + "'");
    }
    auto name = line.substr(0, t1);
    if (line.substr(t1 + 1, t2 - t1 - 1) != "f32") {
      throw DataError("TSF: unsupported dtype for tensor '" + std::string(name) + "'");
    }
    Shape shape;
    auto dims = line.substr(t2 + 1);
    std::size_t start = 0;
    while (true) {
      auto comma = dims.find(',', start);
      shape.push_back(detail::parse_dim(dims.substr(start, comma - start), name));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    headers.push_back({std::string(name), std::move(shape)});
  }
  TensorStore store;
  for (auto& h : headers) {
    auto n = shape_elements(h.shape);
    if (n > (bytes.size() - pos) / 4) {
      throw DataError("TSF: payload truncated at tensor '" + h.name + "'");
    }
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_le(bytes.data() + pos + 4 * i);
    pos += 4 * n;
    store.add(std::move(h.name), std::move(h.shape), std::move(data));
  }
  if (pos != bytes.size()) {
    throw DataError("TSF: " + std::to_string(bytes.size() - pos) + " trailing bytes");
  }
  return store;
}

inline TensorStore load(const std::filesystem::path& path) {
  try {
    return parse(text::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void save(const TensorStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(store));
}

}  // namespace mbrforge::checkpoint
