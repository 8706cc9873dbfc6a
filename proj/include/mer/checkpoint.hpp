// Checkpoint serialization.
//
// Layout (all integers little-endian):
//   bytes 0-7   magic "MERCKPT1"
//   u32         entry count
//   per entry:  u32 name length, name bytes (UTF-8, no terminator),
//               u8 dtype (0 = float32, 1 = float64),
//               u32 rank, u64 dims[rank],
//               raw values, little-endian, row-major.
// Entries cover trainable parameters and normalization running statistics.
#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "mer/nn.hpp"

namespace mer {

namespace ckpt {

constexpr char kMagic[8] = {'M', 'E', 'R', 'C', 'K', 'P', 'T', '1'};

template <typename T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

struct Entry {
  std::uint8_t dtype;
  Shape shape;
  std::vector<std::uint8_t> raw;
};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint8_t b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void write_values(std::ostream& os, const T* data, std::size_t n) {
  // Hosts here are little-endian; values are written verbatim.
  os.write(reinterpret_cast<const char*>(data), n * sizeof(T));
}

}  // namespace ckpt

template <typename T>
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<T> values;
};

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<CheckpointEntry<T>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(ckpt::kMagic, 8);
  ckpt::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    ckpt::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(ckpt::dtype_tag<T>()));
    ckpt::write_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) ckpt::write_u64(os, static_cast<std::uint64_t>(d));
    ckpt::write_values(os, e.values.data(), e.values.size());
  }
  if (!os) throw IoError("short write while saving checkpoint: " + path);
}

template <typename T>
std::map<std::string, CheckpointEntry<T>> load_checkpoint(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, ckpt::kMagic, 8) != 0)
    throw VersionError("bad checkpoint magic in " + path);
  const std::uint32_t count = ckpt::read_u32(is);
  std::map<std::string, CheckpointEntry<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = ckpt::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    if (dtype != ckpt::dtype_tag<T>())
      throw VersionError("checkpoint entry '" + name +
                         "' has dtype tag " + std::to_string(dtype) +
                         ", expected " + std::to_string(ckpt::dtype_tag<T>()));
    const std::uint32_t rank = ckpt::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(ckpt::read_u64(is));
    CheckpointEntry<T> e;
    e.name = name;
    e.shape = shape;
    e.values.resize(static_cast<std::size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(e.values.size() * sizeof(T)));
    if (!is) throw VersionError("truncated checkpoint: " + path);
    out.emplace(name, std::move(e));
  }
  return out;
}

// Applies a loaded checkpoint to a model's parameters and buffers; every
// model entry must be present with a matching shape, and no extras may
// remain.
template <typename T>
void apply_checkpoint(
    const std::map<std::string, CheckpointEntry<T>>& loaded,
    ParamList<T>& params,
    std::vector<std::pair<std::string, std::vector<T>*>>& buffers) {
  std::size_t used = 0;
  for (auto& p : params) {
    auto it = loaded.find(p.name);
    if (it == loaded.end())
      throw VersionError("checkpoint missing parameter: " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw VersionError("checkpoint shape mismatch for " + p.name + ": " +
                         shape_str(it->second.shape) + " vs model " +
                         shape_str(p.tensor.shape()));
    std::copy(it->second.values.begin(), it->second.values.end(),
              p.tensor.mutable_data().begin());
    ++used;
  }
  for (auto& [name, buf] : buffers) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw VersionError("checkpoint missing buffer: " + name);
    if (it->second.values.size() != buf->size())
      throw VersionError("checkpoint buffer size mismatch for " + name);
    *buf = it->second.values;
    ++used;
  }
  if (used != loaded.size())
    throw VersionError("checkpoint holds " + std::to_string(loaded.size()) +
                       " entries but the model consumes " +
                       std::to_string(used));
}

}  // namespace mer
