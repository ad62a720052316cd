// Checkpoint format: named-parameter tree with per-entry stage tag, frozen
// flag, shape, and raw little-endian float64 values.
//
//   bytes 0..7   magic "UASRCKP1"
//   u32          format version (1)
//   u32          entry count
//   per entry:   u16 name_len, name bytes,
//                u16 stage_len, stage bytes,
//                u8 frozen, u32 rows, u32 cols, rows*cols f64 values
//
// All integers little-endian. Entries are written in the caller's order and
// loaded into a name-keyed map.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/errors.hpp"
#include "uasr/matrix.hpp"
#include "uasr/rng.hpp"

namespace uasr {

struct CheckpointEntry {
  std::string stage;
  bool frozen = false;
  Matrix value;
};

using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'U', 'A', 'S', 'R', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    if (p->name.size() > 0xffff || p->stage.size() > 0xffff)
      throw DataError("checkpoint: name/stage too long: " + p->name);
    detail::put_u16(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put_u16(os, static_cast<std::uint16_t>(p->stage.size()));
    os.write(p->stage.data(), static_cast<std::streamsize>(p->stage.size()));
    os.put(p->frozen ? '\1' : '\0');
    detail::put_u32(os, static_cast<std::uint32_t>(p->value.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(p->value.cols()));
    os.write(reinterpret_cast<const char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("bad checkpoint magic: " + path);
  std::uint32_t version = detail::get_u32(is);
  if (version != 1) throw DataError("unsupported checkpoint version in " + path);
  std::uint32_t n = detail::get_u32(is);
  Checkpoint out;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint16_t nl = detail::get_u16(is);
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    std::uint16_t sl = detail::get_u16(is);
    std::string stage(sl, '\0');
    is.read(stage.data(), sl);
    int fz = is.get();
    std::uint32_t rows = detail::get_u32(is);
    std::uint32_t cols = detail::get_u32(is);
    if (!is) throw DataError("truncated checkpoint: " + path);
    CheckpointEntry e;
    e.stage = stage;
    e.frozen = fz != 0;
    e.value = Matrix(rows, cols);
    is.read(reinterpret_cast<char*>(e.value.raw().data()),
            static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!is) throw DataError("truncated checkpoint values: " + path);
    out.emplace(std::move(name), std::move(e));
  }
  return out;
}

// Copies loaded values into matching live parameters. When `stages` is
// non-empty only entries whose stage tag is listed are applied. Returns the
// number of parameters filled. Missing or shape-mismatched entries for a
// requested stage raise DataError so silent partial loads cannot happen.
inline std::size_t apply_checkpoint(const Checkpoint& ckpt, const std::vector<Parameter*>& params,
                                    const std::vector<std::string>& stages = {}) {
  auto wanted = [&](const std::string& stage) {
    if (stages.empty()) return true;
    for (const auto& s : stages)
      if (s == stage) return true;
    return false;
  };
  std::size_t applied = 0;
  for (Parameter* p : params) {
    if (!wanted(p->stage)) continue;
    auto it = ckpt.find(p->name);
    if (it == ckpt.end()) throw DataError("checkpoint missing parameter: " + p->name);
    if (!it->second.value.same_shape(p->value))
      throw DataError("checkpoint shape mismatch for " + p->name + ": file " +
                      it->second.value.shape_str() + " vs model " + p->value.shape_str());
    p->value = it->second.value;
    ++applied;
  }
  return applied;
}

// Order-independent byte hash of all parameters carrying a stage tag;
// parameters are visited in name order so the hash is layout-stable.
inline std::uint64_t stage_hash(const std::vector<Parameter*>& params, const std::string& stage) {
  std::map<std::string, const Parameter*> sorted;
  for (const Parameter* p : params)
    if (p->stage == stage) sorted.emplace(p->name, p);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : sorted) {
    h = fnv1a(name.data(), name.size(), h);
    std::uint64_t dims[2] = {p->value.rows(), p->value.cols()};
    h = fnv1a(dims, sizeof(dims), h);
    h = fnv1a(p->value.data(), p->value.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace uasr
