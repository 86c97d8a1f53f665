#pragma once

#include <chrono>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qdrop/pipeline/calibration.hpp"
#include "qdrop/pipeline/config.hpp"
#include "qdrop/pipeline/train.hpp"
#include "qdrop/quantized_model.hpp"
#include "qdrop/reconstruction.hpp"

namespace qdrop::pipeline {

struct UnitRecord {
  std::string unit;
  double initial_train_mse = 0, final_train_mse = 0, final_hard_train_mse = 0;
  double heldout_mse = 0, nearest_heldout_mse = 0;
  std::size_t flips = 0, weights = 0;
  double binarized_fraction = 0;
  double final_loss = 0;  // last entry of the training trajectory (0 when no iterations)
};

struct RunRecord {
  std::map<std::string, std::string> config;
  std::string config_hash, code_version;
  std::string status = "ok";  // ok | failed
  std::optional<std::string> failed_stage, error;
  std::optional<double> fp_test_accuracy, test_accuracy, calib_accuracy, fp_calib_accuracy;
  bool calib_test_disjoint = false;
  std::string calib_source;
  std::vector<UnitRecord> units;
  std::vector<std::string> diagnostics;  // paths of files written alongside
  std::optional<double> seconds;         // wall time; not part of the determinism contract
};

struct ExperimentData {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  const Dataset* cross = nullptr;  // required when calib_domain = cross
  std::string train_source, cross_source;
};

struct ExperimentOutput {
  RunRecord record;
  std::optional<QuantizedModel<float>> model;
  std::optional<CalibrationSet> calibration;
  std::exception_ptr failure;
};

// Deployed accuracy: hard weights and enabled activation quantizers.
inline double quantized_accuracy(const QuantizedModel<float>& qm, const Dataset& d, Normalization norm) {
  const auto h = quantized_hooks(qm);
  return accuracy(qm.fp, d, norm, 256, &h);
}

// fold_batchnorm -> quantizer init -> reconstruction (mode from cfg) ->
// hard-round freeze -> evaluation on test and calibration data. Stage
// failures are captured in the record (status "failed", failed_stage) and in
// ExperimentOutput::failure; nothing is thrown.
inline ExperimentOutput run_experiment(const ExperimentConfig& cfg, const ModelGraph<float>& fp, const ExperimentData& data) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentOutput out;
  RunRecord& r = out.record;
  r.config = to_map(cfg);
  r.config_hash = config_hash(cfg);
  r.code_version = code_version();
  std::string stage = "config";
  try {
    cfg.validate();
    if (!data.train || !data.test) throw ConfigError("experiment needs train and test data");
    const Dataset* src = data.train;
    r.calib_source = data.train_source;
    if (cfg.calib_domain == "cross") {
      if (!data.cross) throw ConfigError("calib_domain=cross needs a cross-domain dataset");
      src = data.cross;
      r.calib_source = data.cross_source;
    }

    stage = "fold";
    const ModelGraph<float> folded = fold_batchnorm(fp);
    r.fp_test_accuracy = accuracy(folded, *data.test, cfg.data.norm);

    stage = "calibration";
    out.calibration = sample_calibration(*src, cfg.calib_size, cfg.seed, r.calib_source);
    const Dataset& calib = out.calibration->data;
    r.calib_test_disjoint = disjoint(calib, *data.test);
    if (!r.calib_test_disjoint) throw ConfigError("calibration data overlaps the test split");
    r.fp_calib_accuracy = accuracy(folded, calib, cfg.data.norm);

    stage = "quant_init";
    QuantConfig qc;
    qc.bits_w = cfg.bits_w;
    qc.bits_a = cfg.bits_a;
    qc.first_last_8bit = cfg.first_last_8bit;
    qc.stem_output_8bit = cfg.stem_output_8bit;
    qc.lambda_reg = cfg.lambda_reg;
    out.model = make_quantized_model(folded, qc);

    stage = "reconstruction";
    const auto results = run_reconstruction(*out.model, images<float>(calib, cfg.data.norm), cfg.recon());
    for (const auto& u : results)
      r.units.push_back({u.unit, u.initial_train_mse, u.final_train_mse, u.final_hard_train_mse, u.heldout_mse,
                         u.nearest_heldout_mse, u.flips, u.weights, u.binarized_fraction,
                         u.trajectory.empty() ? 0.0 : u.trajectory.back()});

    stage = "evaluation";
    out.model->refresh_all_hard();
    r.test_accuracy = quantized_accuracy(*out.model, *data.test, cfg.data.norm);
    r.calib_accuracy = quantized_accuracy(*out.model, calib, cfg.data.norm);
  } catch (const std::exception& e) {
    r.status = "failed";
    r.failed_stage = stage;
    r.error = e.what();
    out.failure = std::current_exception();
    out.model.reset();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---- sweeps ------------------------------------------------------------------

struct SweepAxis {
  std::string key;  // any config key, e.g. drop_p or calib_size
  std::vector<std::string> values;
};

inline SweepAxis drop_p_axis() { return {"drop_p", {"0", "0.25", "0.5", "0.75", "1"}}; }
inline SweepAxis calib_size_axis() { return {"calib_size", {"32", "64", "128", "256", "512", "1024"}}; }

using SweepProgress = std::function<void(const RunRecord&)>;

// One run per (axis value, seed). Failed cells are recorded and the sweep continues.
inline std::vector<RunRecord> run_sweep(const ExperimentConfig& base, const SweepAxis& axis,
                                        const std::vector<std::uint64_t>& seeds, const ModelGraph<float>& fp,
                                        const ExperimentData& data, const SweepProgress& progress = {}) {
  if (axis.values.empty() || seeds.empty()) throw ConfigError("sweep needs at least one axis value and one seed");
  {
    ExperimentConfig probe = base;
    for (const auto& v : axis.values) set_key(probe, axis.key, v);
  }
  std::vector<RunRecord> out;
  for (const auto& v : axis.values)
    for (auto s : seeds) {
      ExperimentConfig c = base;
      set_key(c, axis.key, v);
      c.seed = s;
      auto res = run_experiment(c, fp, data);
      if (progress) progress(res.record);
      out.push_back(std::move(res.record));
    }
  return out;
}

}  // namespace qdrop::pipeline
