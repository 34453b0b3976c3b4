#pragma once

// Checkpoint container:
//   "HCBK" | version u8 | metadata JSON (u64 length + bytes) | u64 array count
//   | per array: name (u64 length + bytes), u32 rank, u32 extents..., float32 LE values

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hcbcam/common.hpp"

namespace hcbcam::ag {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  json metadata = json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write("HCBK", 4);
  binio::write_u8(out, kCheckpointVersion);
  binio::write_string(out, ck.metadata.dump());
  binio::write_u64(out, ck.arrays.size());
  for (const auto& a : ck.arrays) {
    binio::write_string(out, a.name);
    binio::write_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    std::size_t n = 1;
    for (int d : a.shape) {
      binio::write_u32(out, static_cast<std::uint32_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    if (n != a.values.size()) throw ShapeError("checkpoint array " + a.name + " has inconsistent shape");
    binio::write_f32(out, a.values);
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "HCBK") throw DataError("not a checkpoint file");
  const auto version = binio::read_u8(in);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.metadata = json::parse(binio::read_string(in));
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const auto count = binio::read_u64(in);
  if (count > (1u << 24)) throw DataError("corrupt checkpoint: array count out of range");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = binio::read_string(in, 4096);
    const auto rank = binio::read_u32(in);
    if (rank > 8) throw DataError("corrupt checkpoint: rank out of range");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      a.shape.push_back(static_cast<int>(binio::read_u32(in)));
      n *= static_cast<std::size_t>(a.shape.back());
    }
    if (n > (std::size_t{1} << 32)) throw DataError("corrupt checkpoint: array too large");
    a.values.resize(n);
    binio::read_f32(in, a.values);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ck) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + file.string());
  write_checkpoint(out, ck);
  if (!out) throw DataError("write failed: " + file.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + file.string());
  return read_checkpoint(in);
}

}  // namespace hcbcam::ag
