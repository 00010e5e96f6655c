#pragma once

// Little-endian byte writer/reader shared by the container and parameter
// formats. The reader reports truncation as FormatError with the offset.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>

#include "zachvit/errors.hpp"

namespace zachvit::binary {

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    out_.append(reinterpret_cast<const char*>(raw), sizeof(T));
  }
  void bytes(std::string_view b) { out_.append(b); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto v = in_.substr(pos_, n);
    pos_ += n;
    return v;
  }

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw FormatError("truncated " + std::string(what) + ": missing " + std::to_string(n - (in_.size() - pos_)) +
                            " of " + std::to_string(n) + " bytes",
                        pos_);
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace zachvit::binary
