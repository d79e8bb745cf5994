#pragma once

// Little-endian primitives shared by the EMBV1 / TMAP1 / IMGV1 formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "pairguard/errors.hpp"

namespace pairguard::detail {

template <class UInt>
void put_le(std::vector<unsigned char>& out, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out.push_back(static_cast<unsigned char>(value >> (8 * i)));
  }
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) { put_le(out, v); }
inline void put_f32(std::vector<unsigned char>& out, float v) {
  put_le(out, std::bit_cast<std::uint32_t>(v));
}
inline void put_f64(std::vector<unsigned char>& out, double v) {
  put_le(out, std::bit_cast<std::uint64_t>(v));
}
inline void put_magic(std::vector<unsigned char>& out, std::string_view magic) {
  out.insert(out.end(), magic.begin(), magic.end());
}

/// Bounds-checked cursor over a byte buffer.
class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  void expect_magic(std::string_view magic) {
    if (remaining() < magic.size() ||
        std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0) {
      fail(ErrorCode::BadMagic,
           source_ + ": expected magic \"" + std::string(magic) + "\"");
    }
    pos_ += magic.size();
  }

  std::uint8_t u8() {
    need(1, "header");
    return bytes_[pos_++];
  }
  std::uint32_t u32() { return get<std::uint32_t>("header"); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>("payload")); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>("payload")); }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      fail(ErrorCode::TruncatedPayload,
           source_ + ": truncated " + std::string(what) + " (need " +
               std::to_string(n) + " bytes, have " +
               std::to_string(remaining()) + ")");
    }
  }

 private:
  template <class UInt>
  UInt get(std::string_view what) {
    need(sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(UInt);
    return v;
  }

  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace pairguard::detail
