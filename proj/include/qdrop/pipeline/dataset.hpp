#pragma once

// Synthetic image-classification data and the QDDS file format.
//
// Each class has a prototype: a coloured Gaussian blob at a class-specific
// position plus an oriented sinusoidal texture with a class-specific colour,
// orientation and frequency. Samples jitter the blob, randomise the texture
// phase and amplitudes and add pixel noise. `shift` moves the generative
// parameters to give a second, related distribution.
//
// QDDS layout (little-endian):
//   "QDDS" | u32 version | u32 count | u16 classes | u16 H | u16 W | u16 C
//   then per sample: C*H*W f32 pixels (CHW order), u16 label

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <unordered_set>
#include <vector>

#include "qdrop/errors.hpp"
#include "qdrop/rng.hpp"
#include "qdrop/tensor.hpp"

namespace qdrop::pipeline {

inline constexpr char kDatasetMagic[4] = {'Q', 'D', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  std::uint16_t classes = 0, height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // size() * sample_numel(), CHW per sample
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return std::size_t{channels} * height * width; }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.classes = classes;
    d.height = height;
    d.width = width;
    d.channels = channels;
    const std::size_t n = sample_numel();
    d.pixels.reserve(idx.size() * n);
    for (std::size_t i : idx) {
      if (i >= size()) throw ConfigError("dataset index out of range");
      d.pixels.insert(d.pixels.end(), pixels.begin() + static_cast<long>(i * n),
                      pixels.begin() + static_cast<long>((i + 1) * n));
      d.labels.push_back(labels[i]);
    }
    return d;
  }
};

struct Normalization {
  double mean = 0.5, stddev = 0.25;
};

// Images [n, C, H, W] for samples [begin, end), normalised.
template <class T = float>
Tensor<T> images(const Dataset& d, std::size_t begin, std::size_t end, Normalization norm = {}) {
  const std::size_t n = d.sample_numel();
  Tensor<T> t(Shape{end - begin, d.channels, d.height, d.width});
  for (std::size_t i = 0; i < (end - begin) * n; ++i)
    t[i] = static_cast<T>((static_cast<double>(d.pixels[begin * n + i]) - norm.mean) / norm.stddev);
  return t;
}

template <class T = float>
Tensor<T> images(const Dataset& d, Normalization norm = {}) {
  return images<T>(d, 0, d.size(), norm);
}

inline std::vector<int> labels_of(const Dataset& d, std::size_t begin, std::size_t end) {
  return {d.labels.begin() + static_cast<long>(begin), d.labels.begin() + static_cast<long>(end)};
}

inline std::uint64_t sample_hash(const float* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto* b = reinterpret_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n * sizeof(float); ++i) {
    h ^= b[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// True when no sample of `a` appears (bit-identically) in `b`.
inline bool disjoint(const Dataset& a, const Dataset& b) {
  const std::size_t n = a.sample_numel();
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < b.size(); ++i) seen.insert(sample_hash(b.pixels.data() + i * n, n));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float* p = a.pixels.data() + i * n;
    if (!seen.count(sample_hash(p, n))) continue;
    for (std::size_t j = 0; j < b.size(); ++j)
      if (std::memcmp(p, b.pixels.data() + j * n, n * sizeof(float)) == 0) return false;
  }
  return true;
}

struct SyntheticSpec {
  int classes = 10, size = 16, channels = 3;
  std::size_t train = 5000, test = 2000;
  std::uint64_t seed = 1;
  double noise = 1.0;   // pixel noise stddev (signal units)
  double jitter = 1.0;  // blob position jitter stddev (pixels)
  double shift = 0.0;   // domain shift of the generative parameters
  Normalization norm{};

  std::string str() const {
    return "synthetic(classes=" + std::to_string(classes) + ",size=" + std::to_string(size) +
           ",channels=" + std::to_string(channels) + ",seed=" + std::to_string(seed) +
           ",noise=" + std::to_string(noise) + ",jitter=" + std::to_string(jitter) + ",shift=" + std::to_string(shift) + ")";
  }

  void validate() const {
    if (classes < 2 || classes > 65535) throw ConfigError("synthetic dataset: classes must be in [2, 65535]");
    if (size < 4 || size > 1024) throw ConfigError("synthetic dataset: size must be in [4, 1024]");
    if (channels < 1 || channels > 16) throw ConfigError("synthetic dataset: channels must be in [1, 16]");
    if (train == 0 || test == 0) throw ConfigError("synthetic dataset: split sizes must be positive");
    if (!(noise >= 0) || !(jitter >= 0) || !(shift >= 0)) throw ConfigError("synthetic dataset: noise/jitter/shift must be >= 0");
  }
};

namespace detail {

struct ClassPrototype {
  double cx, cy, radius;
  std::vector<double> blob_color, tex_color;
  double theta, freq;
};

inline std::vector<ClassPrototype> prototypes(const SyntheticSpec& s) {
  Rng rng = Rng::substream(s.seed, 0xc1a55);
  std::vector<ClassPrototype> ps;
  const double S = s.size;
  for (int k = 0; k < s.classes; ++k) {
    ClassPrototype p;
    p.cx = rng.uniform(0.25 * S, 0.75 * S);
    p.cy = rng.uniform(0.25 * S, 0.75 * S);
    p.radius = rng.uniform(0.12 * S, 0.22 * S) * (1.0 + 0.3 * s.shift);
    for (int c = 0; c < s.channels; ++c) p.blob_color.push_back(rng.uniform(-1.0, 1.0));
    for (int c = 0; c < s.channels; ++c) p.tex_color.push_back(rng.uniform(-0.6, 0.6));
    p.theta = std::numbers::pi * k / s.classes + rng.uniform(-0.1, 0.1) + 0.2 * s.shift;
    p.freq = rng.uniform(0.12, 0.35) * (1.0 + 0.25 * s.shift);
    ps.push_back(std::move(p));
  }
  return ps;
}

inline Dataset generate_split(const SyntheticSpec& s, const std::vector<ClassPrototype>& ps, std::size_t count,
                              std::uint64_t stream) {
  Rng rng = Rng::substream(s.seed, stream);
  Dataset d;
  d.classes = static_cast<std::uint16_t>(s.classes);
  d.height = d.width = static_cast<std::uint16_t>(s.size);
  d.channels = static_cast<std::uint16_t>(s.channels);
  const std::size_t n = d.sample_numel(), C = d.channels, S = d.height;
  d.pixels.resize(count * n);
  d.labels.resize(count);
  const double noise = s.noise * (1.0 + s.shift);
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(s.classes)));
    const auto& p = ps[label];
    const double cx = p.cx + s.jitter * rng.normal(), cy = p.cy + s.jitter * rng.normal();
    const double amp = rng.uniform(0.7, 1.3), tex = rng.uniform(0.5, 1.0), phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double th = p.theta + 0.05 * rng.normal();
    const double ux = std::cos(th), uy = std::sin(th);
    float* px = d.pixels.data() + i * n;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double blob = amp * std::exp(-(dx * dx + dy * dy) / (2 * p.radius * p.radius));
        const double wave = tex * std::sin(2 * std::numbers::pi * p.freq * (ux * static_cast<double>(x) + uy * static_cast<double>(y)) + phase);
        for (std::size_t c = 0; c < C; ++c) {
          // Shifted domains mix colour channels.
          const std::size_t cc = s.shift > 0 ? (c + 1) % C : c;
          const double bc = (1 - std::min(s.shift, 1.0) * 0.5) * p.blob_color[c] + std::min(s.shift, 1.0) * 0.5 * p.blob_color[cc];
          const double v = bc * blob + p.tex_color[c] * wave + noise * rng.normal();
          px[(c * S + y) * S + x] = static_cast<float>(s.norm.mean + s.norm.stddev * v);
        }
      }
    d.labels[i] = label;
  }
  return d;
}

}  // namespace detail

struct DatasetSplits {
  Dataset train, test;
  SyntheticSpec spec;
};

inline DatasetSplits generate_dataset(const SyntheticSpec& s) {
  s.validate();
  const auto ps = detail::prototypes(s);
  DatasetSplits r{detail::generate_split(s, ps, s.train, 0x7a1), detail::generate_split(s, ps, s.test, 0x7e57), s};
  if (!disjoint(r.train, r.test)) throw NumericalError("generated train and test splits overlap");
  return r;
}

// ---- QDDS I/O ------------------------------------------------------------------

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(std::string("truncated dataset file reading ") + what);
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}
inline std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError(std::string("truncated dataset file reading ") + what);
  return static_cast<std::uint16_t>(b[0] | b[1] << 8);
}

}  // namespace detail

inline void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kDatasetMagic, 4);
  detail::put_u32(os, kDatasetVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(d.size()));
  detail::put_u16(os, d.classes);
  detail::put_u16(os, d.height);
  detail::put_u16(os, d.width);
  detail::put_u16(os, d.channels);
  const std::size_t n = d.sample_numel();
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) detail::put_u32(os, std::bit_cast<std::uint32_t>(d.pixels[i * n + k]));
    detail::put_u16(os, d.labels[i]);
  }
  if (!os) throw IoError("write failed for " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0) throw IoError(path + " is not a QDDS dataset");
  const auto version = detail::get_u32(is, "version");
  if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
  Dataset d;
  const auto count = detail::get_u32(is, "count");
  d.classes = detail::get_u16(is, "classes");
  d.height = detail::get_u16(is, "height");
  d.width = detail::get_u16(is, "width");
  d.channels = detail::get_u16(is, "channels");
  const std::size_t n = d.sample_numel();
  d.pixels.resize(std::size_t{count} * n);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < n; ++k) d.pixels[i * n + k] = std::bit_cast<float>(detail::get_u32(is, "pixels"));
    d.labels[i] = detail::get_u16(is, "label");
    if (d.labels[i] >= d.classes) throw IoError("label out of range in " + path);
  }
  return d;
}

}  // namespace qdrop::pipeline
