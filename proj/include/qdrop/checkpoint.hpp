#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "QDCK"                      4 bytes magic
//   version                     u16 (currently 1)
//   repeated until end of file:
//     name_len                  u16
//     name                      name_len bytes, UTF-8
//     rank                      u8
//     dims                      u32 x rank
//     payload                   f32 x prod(dims), IEEE-754 binary32
//
// Entries are written in model layer order: <layer>.weight, <layer>.bias,
// <layer>.running_mean, <layer>.running_var, <layer>.gamma, <layer>.beta for
// whichever are present. Quantized checkpoints store the hard-rounded weights
// of the folded model and add wq.<layer>.step/.bits and
// act.<layer>.step/.bits/.signed entries (see quantized_model.hpp).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qdrop/model.hpp"

namespace qdrop {

inline constexpr char kCheckpointMagic[4] = {'Q', 'D', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace io {

static_assert(std::endian::native == std::endian::little, "binary IO assumes a little-endian host");

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }

template <class U>
U get(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw IoError(std::string("truncated file while reading ") + what);
  return v;
}

}  // namespace io

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  io::put_u16(os, kCheckpointVersion);
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw IoError("checkpoint entry name too long");
    if (e.shape.size() > 0xff) throw IoError("checkpoint entry rank too large");
    io::put_u16(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::put_u8(os, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) io::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : e.values) io::put_f32(os, v);
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError(path + " is not a QDCK checkpoint");
  const auto version = io::get<std::uint16_t>(is, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  std::vector<CheckpointEntry> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointEntry e;
    const auto len = io::get<std::uint16_t>(is, "name length");
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw IoError("truncated entry name");
    const auto rank = io::get<std::uint8_t>(is, "rank");
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(io::get<std::uint32_t>(is, "dims"));
    e.values.resize(shape_numel(e.shape));
    if (!e.values.empty() && !is.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * 4)))
      throw IoError("truncated payload for " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

template <class T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e{name, t.shape(), {}};
  e.values.reserve(t.numel());
  for (T v : t.data()) e.values.push_back(static_cast<float>(v));
  return e;
}

template <class T>
Tensor<T> from_entry(const CheckpointEntry& e) {
  std::vector<T> v(e.values.begin(), e.values.end());
  return Tensor<T>(e.shape, std::move(v));
}

template <class T>
std::vector<CheckpointEntry> model_entries(const ModelGraph<T>& m) {
  std::vector<CheckpointEntry> out;
  for (const auto& l : m.layers) {
    const std::pair<const char*, const Tensor<T>*> slots[] = {
        {"weight", &l.weight}, {"bias", &l.bias}, {"running_mean", &l.running_mean},
        {"running_var", &l.running_var}, {"gamma", &l.gamma}, {"beta", &l.beta}};
    for (auto [suffix, t] : slots)
      if (t->defined()) out.push_back(to_entry(l.name + "." + suffix, *t));
  }
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelGraph<T>& m) {
  write_checkpoint(path, model_entries(m));
}

// Loads parameters into a model with the same architecture. Every parameter of
// the model must be present with a matching shape; unknown entries are ignored
// so quantized checkpoints can carry extra tensors.
template <class T>
void load_parameters(ModelGraph<T>& m, const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& l : m.layers) {
    const std::pair<const char*, Tensor<T>*> slots[] = {
        {"weight", &l.weight}, {"bias", &l.bias}, {"running_mean", &l.running_mean},
        {"running_var", &l.running_var}, {"gamma", &l.gamma}, {"beta", &l.beta}};
    for (auto [suffix, t] : slots) {
      const std::string key = l.name + "." + suffix;
      auto it = by_name.find(key);
      if (it == by_name.end()) {
        if (t->defined()) throw IoError("checkpoint is missing " + key);
        continue;
      }
      if (t->defined() && t->shape() != it->second->shape)
        throw IoError("shape mismatch for " + key + ": " + shape_str(it->second->shape) + " vs " + shape_str(t->shape()));
      *t = from_entry<T>(*it->second);
    }
  }
}

}  // namespace qdrop
