#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mprcnn {

/// Raised when a file does not match the expected binary or text layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an input file cannot be opened.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_bytes(std::ostream& os, std::string_view s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::int32_t get_i32(std::istream& is) { return static_cast<std::int32_t>(get_u32(is)); }

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline std::uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw FormatError("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}

inline std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  if (get_bytes(is, magic.size()) != magic) throw FormatError("bad magic, expected " + std::string(magic));
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::binary) {
  std::ofstream os(path, mode | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::binary) {
  std::ifstream is(path, mode);
  if (!is) throw MissingFileError("cannot open: " + path);
  return is;
}

}  // namespace io
}  // namespace mprcnn
