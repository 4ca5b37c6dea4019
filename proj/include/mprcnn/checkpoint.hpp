#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "mprcnn/binary_io.hpp"

namespace mprcnn {

/// One record of a parameter checkpoint.
struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  bool operator==(const NamedArray&) const = default;
};

// Layout (little-endian):
//   "MPT1" u32 record_count
//   per record: u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank],
//               f32 data[prod(dims)]
inline void write_checkpoint(std::ostream& os, const std::vector<NamedArray>& records) {
  io::put_bytes(os, "MPT1");
  io::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    std::size_t count = 1;
    for (auto d : r.dims) count *= d;
    if (count != r.data.size()) throw FormatError("checkpoint record '" + r.name + "' dims do not match data size");
    io::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    io::put_bytes(os, r.name);
    io::put_u32(os, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) io::put_u32(os, d);
    for (float v : r.data) io::put_f32(os, v);
  }
}

inline std::vector<NamedArray> read_checkpoint(std::istream& is) {
  io::expect_magic(is, "MPT1");
  const std::uint32_t n = io::get_u32(is);
  std::vector<NamedArray> records;
  records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedArray r;
    r.name = io::get_bytes(is, io::get_u32(is));
    const std::uint32_t rank = io::get_u32(is);
    if (rank > 8) throw FormatError("checkpoint record '" + r.name + "' has implausible rank");
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.dims.push_back(io::get_u32(is));
      count *= r.dims.back();
    }
    r.data.resize(count);
    for (auto& v : r.data) v = io::get_f32(is);
    records.push_back(std::move(r));
  }
  return records;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& records) {
  auto os = io::open_out(path);
  write_checkpoint(os, records);
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  return read_checkpoint(is);
}

}  // namespace mprcnn
