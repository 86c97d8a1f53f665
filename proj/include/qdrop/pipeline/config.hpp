#pragma once

// Experiment configuration.
//
// File grammar (one setting per line):
//   line    := blank | comment | setting
//   comment := '#' any*
//   setting := key ws* '=' ws* value ws* [comment]
//   key     := [a-z_][a-z0-9_]*
// Values are taken verbatim after trimming. Booleans are true/false. Unknown
// or repeated keys are errors. The config hash is FNV-1a (64-bit) over the
// canonical text: every key in sorted order as "key=value\n".

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "qdrop/errors.hpp"
#include "qdrop/pipeline/dataset.hpp"
#include "qdrop/reconstruction.hpp"

namespace qdrop::pipeline {

struct ExperimentConfig {
  std::string arch = "rescnn:3,8";
  int bits_w = 2, bits_a = 2;
  ReconMode mode = ReconMode::qdrop;
  double drop_p = 0.5;
  int iterations = 2000;
  double lr_round = 1e-3, lr_step = 4e-5, lambda_reg = 0.01;
  std::size_t calib_size = 1024, batch_size = 32;
  std::uint64_t seed = 0;
  bool first_last_8bit = true, stem_output_8bit = false;
  std::string calib_domain = "in";  // in | cross
  SyntheticSpec data{};             // in-domain generator
  double cross_shift = 1.0;         // generator shift of the cross domain
  std::string data_dir = "data";
  std::string checkpoint = "ref.qdck";
  std::string output_dir = "out";

  SyntheticSpec cross_spec() const {
    SyntheticSpec s = data;
    s.shift = cross_shift;
    s.seed = data.seed + 1000;
    return s;
  }

  void validate() const {
    if (bits_w < 2 || bits_w > 8) throw ConfigError("bits_w must be in [2, 8]");
    if (bits_a < 2 || bits_a > 8) throw ConfigError("bits_a must be in [2, 8]");
    if (calib_domain != "in" && calib_domain != "cross") throw ConfigError("calib_domain must be in or cross");
    if (calib_size == 0) throw ConfigError("calib_size must be positive");
    if (calib_size > data.train) throw ConfigError("calib_size exceeds the training split size");
    if (!(cross_shift > 0)) throw ConfigError("cross_shift must be > 0");
    data.validate();
    recon().validate();
  }

  BlockReconConfig recon() const {
    BlockReconConfig b;
    b.iterations = iterations;
    b.batch_size = batch_size;
    b.lr_round = lr_round;
    b.lr_step = lr_step;
    b.drop_p = drop_p;
    b.mode = mode;
    b.seed = seed;
    b.lambda_reg = lambda_reg;
    return b;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("bad integer for " + key + ": '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "' (use true/false)");
}

}  // namespace detail

inline std::map<std::string, std::string> to_map(const ExperimentConfig& c) {
  using detail::fmt_double;
  return {
      {"arch", c.arch},
      {"bits_w", std::to_string(c.bits_w)},
      {"bits_a", std::to_string(c.bits_a)},
      {"mode", to_string(c.mode)},
      {"drop_p", fmt_double(c.drop_p)},
      {"iterations", std::to_string(c.iterations)},
      {"lr_round", fmt_double(c.lr_round)},
      {"lr_step", fmt_double(c.lr_step)},
      {"lambda_reg", fmt_double(c.lambda_reg)},
      {"calib_size", std::to_string(c.calib_size)},
      {"batch_size", std::to_string(c.batch_size)},
      {"seed", std::to_string(c.seed)},
      {"first_last_8bit", c.first_last_8bit ? "true" : "false"},
      {"stem_output_8bit", c.stem_output_8bit ? "true" : "false"},
      {"calib_domain", c.calib_domain},
      {"cross_shift", fmt_double(c.cross_shift)},
      {"data_classes", std::to_string(c.data.classes)},
      {"data_size", std::to_string(c.data.size)},
      {"data_channels", std::to_string(c.data.channels)},
      {"data_train", std::to_string(c.data.train)},
      {"data_test", std::to_string(c.data.test)},
      {"data_seed", std::to_string(c.data.seed)},
      {"data_noise", fmt_double(c.data.noise)},
      {"data_jitter", fmt_double(c.data.jitter)},
      {"data_norm_mean", fmt_double(c.data.norm.mean)},
      {"data_norm_std", fmt_double(c.data.norm.stddev)},
      {"data_dir", c.data_dir},
      {"checkpoint", c.checkpoint},
      {"output_dir", c.output_dir},
  };
}

inline void set_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "arch") c.arch = v;
  else if (key == "bits_w") c.bits_w = parse_int<int>(key, v);
  else if (key == "bits_a") c.bits_a = parse_int<int>(key, v);
  else if (key == "mode") c.mode = parse_mode(v);
  else if (key == "drop_p") c.drop_p = parse_double(key, v);
  else if (key == "iterations") c.iterations = parse_int<int>(key, v);
  else if (key == "lr_round") c.lr_round = parse_double(key, v);
  else if (key == "lr_step") c.lr_step = parse_double(key, v);
  else if (key == "lambda_reg") c.lambda_reg = parse_double(key, v);
  else if (key == "calib_size") c.calib_size = parse_int<std::size_t>(key, v);
  else if (key == "batch_size") c.batch_size = parse_int<std::size_t>(key, v);
  else if (key == "seed") c.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "first_last_8bit") c.first_last_8bit = parse_bool(key, v);
  else if (key == "stem_output_8bit") c.stem_output_8bit = parse_bool(key, v);
  else if (key == "calib_domain") c.calib_domain = v;
  else if (key == "cross_shift") c.cross_shift = parse_double(key, v);
  else if (key == "data_classes") c.data.classes = parse_int<int>(key, v);
  else if (key == "data_size") c.data.size = parse_int<int>(key, v);
  else if (key == "data_channels") c.data.channels = parse_int<int>(key, v);
  else if (key == "data_train") c.data.train = parse_int<std::size_t>(key, v);
  else if (key == "data_test") c.data.test = parse_int<std::size_t>(key, v);
  else if (key == "data_seed") c.data.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "data_noise") c.data.noise = parse_double(key, v);
  else if (key == "data_jitter") c.data.jitter = parse_double(key, v);
  else if (key == "data_norm_mean") c.data.norm.mean = parse_double(key, v);
  else if (key == "data_norm_std") c.data.norm.stddev = parse_double(key, v);
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "output_dir") c.output_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

// "key=value" override (CLI --set).
inline void apply_override(ExperimentConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override needs key=value: '" + kv + "'");
  set_key(c, detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig base = {}) {
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    if (key.empty() || !(std::islower(static_cast<unsigned char>(key[0])) || key[0] == '_'))
      throw ConfigError("line " + std::to_string(lineno) + ": bad key '" + key + "'");
    for (char ch : key)
      if (!(std::islower(static_cast<unsigned char>(ch)) || std::isdigit(static_cast<unsigned char>(ch)) || ch == '_'))
        throw ConfigError("line " + std::to_string(lineno) + ": bad key '" + key + "'");
    if (seen.count(key))
      throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' repeats line " + std::to_string(seen[key]));
    seen[key] = lineno;
    set_key(base, key, detail::trim(std::string_view(body).substr(eq + 1)));
  }
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  return parse_config(is, std::move(base));
}

inline std::string canonical_text(const ExperimentConfig& c) {
  std::string s;
  for (const auto& [k, v] : to_map(c)) s += k + "=" + v + "\n";
  return s;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_text(c))));
  return buf;
}

inline const char* code_version() {
#ifdef QDROP_CODE_VERSION
  return QDROP_CODE_VERSION;
#else
  return "unknown";
#endif
}

}  // namespace qdrop::pipeline
