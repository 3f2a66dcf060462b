#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

namespace toist::io {

// Little-endian byte sink.
class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes.insert(bytes.end(), b, b + sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }

  std::vector<std::uint8_t> bytes;
};

// Little-endian byte source; every failure throws Error naming the byte
// offset and the field being read.
template <typename Error>
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, const char* kind) : bytes_(b), kind_(kind) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  // A u32 count bounded by `limit`.
  std::uint32_t count(const char* what, std::uint32_t limit) {
    const std::size_t at = pos_;
    const auto n = get<std::uint32_t>(what);
    if (n > limit) fail(at, "implausible " + std::string(what) + " " + std::to_string(n));
    return n;
  }

  std::string str(const char* what) {
    const std::uint32_t n = count(what, 1u << 24);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) fail(pos_, std::string("truncated while reading ") + what);
  }

  [[noreturn]] void fail(std::size_t at, const std::string& msg) const {
    throw Error(std::string(kind_) + ": " + msg + " at byte " + std::to_string(at));
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const char* kind_;
  std::size_t pos_ = 0;
};

}  // namespace toist::io
