#pragma once

// Flat parameter archive: little-endian, versioned, (name, shape, f32 values)
// entries plus an opaque metadata blob (used to embed the model config).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpx/tensor.hpp"

namespace kpx {

struct CheckpointEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf[i] = static_cast<unsigned char>((std::uint64_t(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= std::uint64_t(buf[i]) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<CheckpointEntry>& entries,
                            const std::string& meta = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write("KPXC", 4);
  detail::write_le<std::uint32_t>(f, 1);  // version
  detail::write_le<std::uint32_t>(f, std::uint32_t(meta.size()));
  f.write(meta.data(), std::streamsize(meta.size()));
  detail::write_le<std::uint64_t>(f, entries.size());
  for (const auto& e : entries) {
    detail::write_le<std::uint32_t>(f, std::uint32_t(e.name.size()));
    f.write(e.name.data(), std::streamsize(e.name.size()));
    detail::write_le<std::uint32_t>(f, std::uint32_t(e.shape.size()));
    std::size_t total = 1;
    for (auto d : e.shape) {
      detail::write_le<std::uint64_t>(f, d);
      total *= d;
    }
    if (total != e.values.size())
      throw std::runtime_error("checkpoint: entry " + e.name +
                               " shape/value mismatch");
    for (float v : e.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::write_le<std::uint32_t>(f, bits);
    }
  }
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path,
                                                    std::string* meta_out =
                                                        nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "KPXC")
    throw std::runtime_error("checkpoint: bad magic in " + path);
  auto version = detail::read_le<std::uint32_t>(f);
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  auto meta_len = detail::read_le<std::uint32_t>(f);
  std::string meta(meta_len, '\0');
  f.read(meta.data(), meta_len);
  if (meta_out) *meta_out = meta;
  auto count = detail::read_le<std::uint64_t>(f);
  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    auto name_len = detail::read_le<std::uint32_t>(f);
    e.name.resize(name_len);
    f.read(e.name.data(), name_len);
    auto ndim = detail::read_le<std::uint32_t>(f);
    e.shape.resize(ndim);
    std::size_t total = 1;
    for (auto& d : e.shape) {
      d = std::size_t(detail::read_le<std::uint64_t>(f));
      total *= d;
    }
    e.values.resize(total);
    for (auto& v : e.values) {
      std::uint32_t bits = detail::read_le<std::uint32_t>(f);
      std::memcpy(&v, &bits, 4);
    }
  }
  return entries;
}

}  // namespace kpx
