#pragma once

// Little-endian byte buffers and write-then-rename file output.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "mmseg/error.hpp"

namespace mmseg::bin {

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) { bytes(s.data(), s.size()); }

  const std::vector<char>& buffer() const { return buf_; }
  void reserve(std::size_t n) { buf_.reserve(n); }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

  std::size_t remaining() const { return buf_.size() - pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(FormatErrc::truncated, std::string("file ends inside ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  const char* raw(std::size_t n, const char* what) {
    need(n, what);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path);

/// Writes `<path>.partial` and renames it over `path` once complete.
void write_file_atomic(const std::string& path, const std::vector<char>& bytes);
void write_file_atomic(const std::string& path, std::string_view text);

}  // namespace mmseg::bin
