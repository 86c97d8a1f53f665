#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdrop/pipeline/experiment.hpp"

namespace qdrop::pipeline {

using nlohmann::json;

inline void to_json(json& j, const UnitRecord& u) {
  j = json{{"unit", u.unit},
           {"initial_train_mse", u.initial_train_mse},
           {"final_train_mse", u.final_train_mse},
           {"final_hard_train_mse", u.final_hard_train_mse},
           {"heldout_mse", u.heldout_mse},
           {"nearest_heldout_mse", u.nearest_heldout_mse},
           {"flips", u.flips},
           {"weights", u.weights},
           {"binarized_fraction", u.binarized_fraction},
           {"final_loss", u.final_loss}};
}

inline void from_json(const json& j, UnitRecord& u) {
  j.at("unit").get_to(u.unit);
  j.at("initial_train_mse").get_to(u.initial_train_mse);
  j.at("final_train_mse").get_to(u.final_train_mse);
  j.at("final_hard_train_mse").get_to(u.final_hard_train_mse);
  j.at("heldout_mse").get_to(u.heldout_mse);
  j.at("nearest_heldout_mse").get_to(u.nearest_heldout_mse);
  j.at("flips").get_to(u.flips);
  j.at("weights").get_to(u.weights);
  j.at("binarized_fraction").get_to(u.binarized_fraction);
  j.at("final_loss").get_to(u.final_loss);
}

namespace detail {

template <class V>
void put_opt(json& j, const char* key, const std::optional<V>& v) {
  j[key] = v ? json(*v) : json(nullptr);
}

template <class V>
void get_opt(const json& j, const char* key, std::optional<V>& v) {
  if (!j.contains(key) || j.at(key).is_null()) v.reset();
  else v = j.at(key).get<V>();
}

}  // namespace detail

inline void to_json(json& j, const RunRecord& r) {
  j = json{{"config", r.config},
           {"config_hash", r.config_hash},
           {"code_version", r.code_version},
           {"status", r.status},
           {"calib_test_disjoint", r.calib_test_disjoint},
           {"calib_source", r.calib_source},
           {"units", r.units},
           {"diagnostics", r.diagnostics}};
  detail::put_opt(j, "failed_stage", r.failed_stage);
  detail::put_opt(j, "error", r.error);
  detail::put_opt(j, "fp_test_accuracy", r.fp_test_accuracy);
  detail::put_opt(j, "test_accuracy", r.test_accuracy);
  detail::put_opt(j, "calib_accuracy", r.calib_accuracy);
  detail::put_opt(j, "fp_calib_accuracy", r.fp_calib_accuracy);
  detail::put_opt(j, "seconds", r.seconds);
}

inline void from_json(const json& j, RunRecord& r) {
  j.at("config").get_to(r.config);
  j.at("config_hash").get_to(r.config_hash);
  j.at("code_version").get_to(r.code_version);
  j.at("status").get_to(r.status);
  j.at("calib_test_disjoint").get_to(r.calib_test_disjoint);
  j.at("calib_source").get_to(r.calib_source);
  j.at("units").get_to(r.units);
  j.at("diagnostics").get_to(r.diagnostics);
  detail::get_opt(j, "failed_stage", r.failed_stage);
  detail::get_opt(j, "error", r.error);
  detail::get_opt(j, "fp_test_accuracy", r.fp_test_accuracy);
  detail::get_opt(j, "test_accuracy", r.test_accuracy);
  detail::get_opt(j, "calib_accuracy", r.calib_accuracy);
  detail::get_opt(j, "fp_calib_accuracy", r.fp_calib_accuracy);
  detail::get_opt(j, "seconds", r.seconds);
}

// Mean/stddev of test accuracy (and of the calibration-minus-test gap) per
// value of `key`, over successful records.
struct AggregateRow {
  std::string key, value;
  std::size_t n = 0, failed = 0;
  double mean = 0, stddev = 0;
  double gap_mean = 0, gap_stddev = 0;
};

inline void to_json(json& j, const AggregateRow& a) {
  j = json{{"key", a.key},   {"value", a.value},   {"n", a.n},           {"failed", a.failed},
           {"mean", a.mean}, {"stddev", a.stddev}, {"gap_mean", a.gap_mean}, {"gap_stddev", a.gap_stddev}};
}

inline void from_json(const json& j, AggregateRow& a) {
  j.at("key").get_to(a.key);
  j.at("value").get_to(a.value);
  j.at("n").get_to(a.n);
  j.at("failed").get_to(a.failed);
  j.at("mean").get_to(a.mean);
  j.at("stddev").get_to(a.stddev);
  j.at("gap_mean").get_to(a.gap_mean);
  j.at("gap_stddev").get_to(a.gap_stddev);
}

inline std::pair<double, double> mean_stddev(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0;
  for (double x : v) s += x;
  const double m = s / static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// Rows in order of first appearance of each value.
inline std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& records, const std::string& key) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    const auto it = r.config.find(key);
    const std::string v = it == r.config.end() ? "" : it->second;
    if (!groups.count(v)) order.push_back(v);
    groups[v].push_back(&r);
  }
  std::vector<AggregateRow> rows;
  for (const auto& v : order) {
    AggregateRow a{key, v};
    std::vector<double> acc, gap;
    for (const RunRecord* r : groups[v]) {
      if (r->status != "ok" || !r->test_accuracy) {
        ++a.failed;
        continue;
      }
      acc.push_back(*r->test_accuracy);
      if (r->calib_accuracy) gap.push_back(*r->calib_accuracy - *r->test_accuracy);
    }
    a.n = acc.size();
    std::tie(a.mean, a.stddev) = mean_stddev(acc);
    std::tie(a.gap_mean, a.gap_stddev) = mean_stddev(gap);
    rows.push_back(a);
  }
  return rows;
}

struct Report {
  std::vector<RunRecord> records;
  std::vector<AggregateRow> aggregates;
};

inline void to_json(json& j, const Report& r) { j = json{{"records", r.records}, {"aggregates", r.aggregates}}; }

inline void from_json(const json& j, Report& r) {
  j.at("records").get_to(r.records);
  if (j.contains("aggregates")) j.at("aggregates").get_to(r.aggregates);
}

inline void write_report_json(const std::string& path, const Report& r) {
  if (r.records.empty()) throw ConfigError("report needs at least one record");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << json(r).dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path);
}

inline Report read_report_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  try {
    return json::parse(is).get<Report>();
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string opt_str(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

}  // namespace detail

inline const std::vector<std::string>& record_csv_columns() {
  static const std::vector<std::string> cols{"config_hash", "code_version", "status", "failed_stage", "arch",
                                             "mode", "bits_w", "bits_a", "drop_p", "calib_size", "calib_domain",
                                             "iterations", "seed", "fp_test_accuracy", "test_accuracy",
                                             "calib_accuracy", "fp_calib_accuracy", "calib_test_disjoint"};
  return cols;
}

// One header line plus one row per record.
inline void write_records_csv(const std::string& path, const std::vector<RunRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  const auto& cols = record_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : records) {
    auto cfg = [&](const char* k) {
      const auto it = r.config.find(k);
      return it == r.config.end() ? std::string() : it->second;
    };
    const std::vector<std::string> row{r.config_hash,
                                       r.code_version,
                                       r.status,
                                       r.failed_stage.value_or(""),
                                       cfg("arch"),
                                       cfg("mode"),
                                       cfg("bits_w"),
                                       cfg("bits_a"),
                                       cfg("drop_p"),
                                       cfg("calib_size"),
                                       cfg("calib_domain"),
                                       cfg("iterations"),
                                       cfg("seed"),
                                       detail::opt_str(r.fp_test_accuracy),
                                       detail::opt_str(r.test_accuracy),
                                       detail::opt_str(r.calib_accuracy),
                                       detail::opt_str(r.fp_calib_accuracy),
                                       r.calib_test_disjoint ? "true" : "false"};
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << detail::csv_field(row[i]);
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

inline void write_aggregate_csv(const std::string& path, const std::vector<AggregateRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "key,value,n,failed,mean,stddev,gap_mean,gap_stddev\n";
  for (const auto& a : rows)
    os << detail::csv_field(a.key) << ',' << detail::csv_field(a.value) << ',' << a.n << ',' << a.failed << ','
       << detail::fmt_double(a.mean) << ',' << detail::fmt_double(a.stddev) << ',' << detail::fmt_double(a.gap_mean) << ','
       << detail::fmt_double(a.gap_stddev) << '\n';
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace qdrop::pipeline
