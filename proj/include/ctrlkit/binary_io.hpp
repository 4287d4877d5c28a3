#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "ctrlkit/errors.hpp"

namespace ctrlkit::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

class ByteWriter {
 public:
  template <typename V>
    requires std::is_arithmetic_v<V>
  void put(V value) {
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }

  void put_bytes(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  template <typename V>
    requires std::is_arithmetic_v<V>
  void put_array(const V* data, std::size_t count) {
    const auto* p = reinterpret_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + sizeof(V) * count);
  }

  const std::vector<char>& bytes() const noexcept { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
  }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : buf_(std::move(bytes)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes));
  }

  template <typename V>
    requires std::is_arithmetic_v<V>
  V get() {
    require(sizeof(V));
    V value;
    std::memcpy(&value, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return value;
  }

  std::string get_bytes(std::size_t n) {
    require(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <typename V>
    requires std::is_arithmetic_v<V>
  void get_array(V* out, std::size_t count) {
    if (count > remaining() / sizeof(V)) throw FormatError("unexpected end of data");
    std::memcpy(out, buf_.data() + pos_, sizeof(V) * count);
    pos_ += sizeof(V) * count;
  }

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == buf_.size(); }

 private:
  void require(std::size_t n) const {
    if (n > remaining()) throw FormatError("unexpected end of data");
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace ctrlkit::io
