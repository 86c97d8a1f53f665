#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "qdrop/checkpoint.hpp"
#include "qdrop/pipeline/config.hpp"
#include "qdrop/pipeline/experiment.hpp"
#include "qdrop/pipeline/flatness.hpp"
#include "qdrop/pipeline/report.hpp"
#include "qdrop/theory/surface.hpp"
#include "qdrop/theory/verify.hpp"

namespace fs = std::filesystem;
using namespace qdrop;
using namespace qdrop::pipeline;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitNumerical = 3;

// Options shared by every subcommand: a config file, generic key=value
// overrides, and one --<key> flag per config key.
struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "experiment config file (key = value lines)");
    app->add_option("--set", sets, "override, key=value (repeatable)");
    for (const auto& [key, value] : to_map(ExperimentConfig{})) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      auto* opt = app->add_option(flag, flags[key], "config key " + key + " (default " + value + ")");
      if (value == "true" || value == "false") opt->expected(0, 1)->default_str("")->force_callback(false);
      opt->group("Config keys");
    }
  }

  ExperimentConfig resolve(CLI::App* app) const {
    ExperimentConfig cfg = file.empty() ? ExperimentConfig{} : load_config(file);
    for (const auto& s : sets) apply_override(cfg, s);
    for (const auto& [key, value] : flags) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (app->count(flag) == 0) continue;
      set_key(cfg, key, value.empty() ? "true" : value);
    }
    cfg.validate();
    return cfg;
  }
};

void ensure_dir(const std::string& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw IoError("cannot create directory " + d + ": " + ec.message());
}

void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path);
}

std::string data_path(const ExperimentConfig& c, const char* split) { return (fs::path(c.data_dir) / (std::string(split) + ".qdds")).string(); }

struct LoadedData {
  Dataset train, test, cross;
  bool has_cross = false;
};

void check_matches(const Dataset& d, const SyntheticSpec& s, std::size_t count, const std::string& path) {
  if (d.classes != s.classes || d.height != s.size || d.width != s.size || d.channels != s.channels || d.size() != count)
    throw ConfigError(path + " does not match the configured dataset spec; rerun gen-data");
}

LoadedData load_data(const ExperimentConfig& c) {
  LoadedData d;
  const auto tp = data_path(c, "train"), ep = data_path(c, "test"), xp = data_path(c, "cross");
  if (!fs::exists(tp) || !fs::exists(ep)) throw IoError("no dataset in " + c.data_dir + "; run gen-data first");
  d.train = read_dataset(tp);
  d.test = read_dataset(ep);
  check_matches(d.train, c.data, c.data.train, tp);
  check_matches(d.test, c.data, c.data.test, ep);
  if (fs::exists(xp)) {
    d.cross = read_dataset(xp);
    check_matches(d.cross, c.cross_spec(), c.data.train, xp);
    d.has_cross = true;
  }
  return d;
}

ExperimentData experiment_data(const LoadedData& d, const ExperimentConfig& c) {
  ExperimentData e;
  e.train = &d.train;
  e.test = &d.test;
  e.cross = d.has_cross ? &d.cross : nullptr;
  e.train_source = c.data.str() + " train";
  e.cross_source = c.cross_spec().str() + " train";
  return e;
}

ModelGraph<float> fresh_model(const ExperimentConfig& c) {
  const auto ch = static_cast<std::size_t>(c.data.channels), hw = static_cast<std::size_t>(c.data.size);
  return build_model<float>(Arch::parse(c.arch), c.seed, {ch, hw, hw}, static_cast<std::size_t>(c.data.classes));
}

ModelGraph<float> load_reference(const ExperimentConfig& c) {
  auto m = fresh_model(c);
  load_parameters(m, read_checkpoint(c.checkpoint));
  return m;
}

QuantConfig quant_config(const ExperimentConfig& c) {
  QuantConfig q;
  q.bits_w = c.bits_w;
  q.bits_a = c.bits_a;
  q.first_last_8bit = c.first_last_8bit;
  q.stem_output_8bit = c.stem_output_8bit;
  q.lambda_reg = c.lambda_reg;
  return q;
}

QuantizedModel<float> load_quantized_model(const ExperimentConfig& c, const std::string& path) {
  return load_quantized(fold_batchnorm(fresh_model(c)), read_checkpoint(path), quant_config(c));
}

std::string run_stem(const ExperimentConfig& c) {
  return std::string(to_string(c.mode)) + "_w" + std::to_string(c.bits_w) + "a" + std::to_string(c.bits_a) + "_s" +
         std::to_string(c.seed);
}

// The calibration or test subset a flatness measurement runs on.
Dataset flatness_data(const ExperimentConfig& c, const LoadedData& d, const std::string& which) {
  if (which == "test") return d.test;
  if (which != "calibration") throw ConfigError("--dataset must be calibration or test");
  const bool cross = c.calib_domain == "cross";
  if (cross && !d.has_cross) throw ConfigError("calib_domain=cross needs cross.qdds; run gen-data");
  return sample_calibration(cross ? d.cross : d.train, c.calib_size, c.seed, "").data;
}

json hessian_json(const theory::HessianReport& r) {
  return json{{"eigenvalues", r.eigenvalues}, {"iterations", r.iterations},  {"converged", r.converged},
              {"last_relative_change", r.last_relative_change}, {"trace", r.trace}, {"trace_se", r.trace_se},
              {"probes", r.probes}};
}

json check_json(const theory::CheckResult& r) {
  return json{{"name", r.name},       {"passed", r.passed},       {"worst", r.worst},     {"threshold", r.threshold},
              {"instances", r.instances}, {"resampled", r.resampled}, {"seconds", r.seconds}, {"detail", r.detail}};
}

std::vector<RunRecord> load_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  json j;
  try {
    j = json::parse(is);
    if (j.is_object() && j.contains("records")) return j.get<Report>().records;
    if (!j.is_object() || !j.contains("config_hash")) throw IoError(path + " is not a run record or report");
    return {j.get<RunRecord>()};
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_report(const std::string& dir, std::vector<RunRecord> records, const std::string& by) {
  ensure_dir(dir);
  Report rep{std::move(records), {}};
  rep.aggregates = aggregate(rep.records, by);
  write_report_json((fs::path(dir) / "report.json").string(), rep);
  write_records_csv((fs::path(dir) / "records.csv").string(), rep.records);
  write_aggregate_csv((fs::path(dir) / "aggregate.csv").string(), rep.aggregates);
  std::cout << std::left << std::setw(14) << by << std::setw(6) << "n" << std::setw(8) << "failed" << std::setw(10)
            << "mean" << std::setw(10) << "stddev" << "gap\n";
  for (const auto& a : rep.aggregates)
    std::cout << std::setw(14) << a.value << std::setw(6) << a.n << std::setw(8) << a.failed << std::setw(10)
              << std::setprecision(4) << a.mean << std::setw(10) << a.stddev << a.gap_mean << '\n';
  std::cout << "wrote " << dir << "/{report.json,records.csv,aggregate.csv}\n";
}

void print_record(const RunRecord& r) {
  std::cout << r.config.at("mode") << " w" << r.config.at("bits_w") << "a" << r.config.at("bits_a") << " p=" << r.config.at("drop_p")
            << " calib=" << r.config.at("calib_size") << " seed=" << r.config.at("seed") << ": ";
  if (r.status != "ok") {
    std::cout << "FAILED at " << r.failed_stage.value_or("?") << ": " << r.error.value_or("") << '\n';
    return;
  }
  std::cout << std::fixed << std::setprecision(4) << "fp " << *r.fp_test_accuracy << " test " << *r.test_accuracy
            << " calib " << *r.calib_accuracy << " (" << std::setprecision(1) << r.seconds.value_or(0) << " s)\n"
            << std::defaultfloat;
}

std::vector<std::uint64_t> seeds_or_default(const std::vector<std::uint64_t>& s) {
  return s.empty() ? std::vector<std::uint64_t>{0, 1, 2, 3, 4} : s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization with block reconstruction and activation-quantization dropping"};
  app.require_subcommand(1);

  ConfigOptions common;
  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    common.attach(s);
    return s;
  };

  auto* gen = sub("gen-data", "generate the synthetic train/test splits and the shifted cross-domain split");

  int epochs = 15;
  double lr = 0.05;
  auto* train = sub("train-ref", "train the full-precision reference model and save its checkpoint");
  train->add_option("--epochs", epochs, "maximum epochs (early stop on test plateau)")->capture_default_str();
  train->add_option("--lr", lr, "peak SGD learning rate")->capture_default_str();

  auto* quant = sub("quantize", "quantize the reference model (mode case1|case2|case3|qdrop) and evaluate it");

  std::string quantized_path;
  auto* eval = sub("eval", "evaluate the reference checkpoint, or a quantized checkpoint with --quantized");
  eval->add_option("--quantized", quantized_path, "quantized checkpoint written by quantize");

  std::vector<std::uint64_t> seeds;
  auto* sweep_p = sub("sweep-p", "sweep drop_p over 0, 0.25, 0.5, 0.75, 1");
  auto* sweep_calib = sub("sweep-calib", "sweep calib_size over 32 ... 1024");
  for (auto* s : {sweep_p, sweep_calib}) s->add_option("--seeds", seeds, "seeds (default 0 1 2 3 4)");

  FlatnessOptions fo;
  std::string which = "calibration";
  std::string out_path;
  auto flat = [&](CLI::App* s) {
    s->add_option("--quantized", quantized_path, "quantized checkpoint written by quantize")->required();
    s->add_option("--dataset", which, "calibration or test")->capture_default_str();
    s->add_option("--samples", fo.samples, "samples of the dataset used for the loss")->capture_default_str();
    s->add_option("-o,--out", out_path, "output file");
  };
  auto* sharp = sub("sharpness", "relative loss change under random multiplicative weight perturbations");
  flat(sharp);
  sharp->add_option("--alphas", fo.alphas, "perturbation magnitudes (strictly increasing)");
  sharp->add_option("--directions", fo.directions, "random directions (each used with both signs)")->capture_default_str();
  sharp->add_option("--ratio", fo.ratio, "loss-change ratio for the tolerated magnitude")->capture_default_str();

  auto* hess = sub("hessian", "top Hessian eigenvalues (power iteration) and Hutchinson trace");
  flat(hess);
  fo.eigenvalues = 5;
  hess->add_option("--k", fo.eigenvalues, "eigenvalues")->capture_default_str();
  hess->add_option("--probes", fo.probes, "Rademacher probes for the trace")->capture_default_str();

  double range = 0.025;
  int steps = 21;
  auto* surf = sub("surface", "loss over a 2-D lattice of multiplicative weight perturbations");
  flat(surf);
  surf->add_option("--range", range, "half-width of the lattice")->capture_default_str();
  surf->add_option("--steps", steps, "lattice points per axis (odd)")->capture_default_str();

  auto* verify = sub("verify-theory", "noise-transplant identities, gap shrinkage and Hessian estimator checks");

  std::vector<std::string> inputs;
  std::string by = "mode";
  auto* report = app.add_subcommand("report", "merge record/report JSON files into report.json and CSV tables");
  report->add_option("inputs", inputs, "record or report JSON files")->required();
  report->add_option("--by", by, "config key to aggregate over")->capture_default_str();
  report->add_option("-o,--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    CLI::App* active = app.get_subcommands().front();
    if (active == report) {
      std::vector<RunRecord> all;
      for (const auto& p : inputs) {
        auto r = load_records(p);
        all.insert(all.end(), r.begin(), r.end());
      }
      write_report(out_path, std::move(all), by);
      return kExitOk;
    }

    const ExperimentConfig cfg = common.resolve(active);
    fo.seed = cfg.seed;

    if (active == gen) {
      ensure_dir(cfg.data_dir);
      const auto in = generate_dataset(cfg.data);
      const auto cross = generate_dataset(cfg.cross_spec());
      write_dataset(data_path(cfg, "train"), in.train);
      write_dataset(data_path(cfg, "test"), in.test);
      write_dataset(data_path(cfg, "cross"), cross.train);
      std::cout << "wrote " << cfg.data_dir << "/{train,test,cross}.qdds (" << in.train.size() << "/" << in.test.size()
                << "/" << cross.train.size() << " samples)\n";
      return kExitOk;
    }

    if (active == verify) {
      std::vector<theory::CheckResult> checks{theory::verify_fc_transplant(100, cfg.seed), theory::verify_conv_witness(20, cfg.seed)};
      for (auto& r : theory::verify_gap_order(10, 10, cfg.seed)) checks.push_back(r);
      for (auto& r : theory::verify_hessian_quadratic(20, cfg.seed)) checks.push_back(r);
      bool ok = true;
      json j = json::array();
      for (const auto& r : checks) {
        ok = ok && r.passed;
        j.push_back(check_json(r));
        std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(32) << r.name << " worst " << std::setw(12)
                  << r.worst << " threshold " << std::setw(10) << r.threshold << " n=" << r.instances << '\n';
      }
      ensure_dir(cfg.output_dir);
      write_json((fs::path(cfg.output_dir) / "verify_theory.json").string(), j);
      return ok ? kExitOk : kExitNumerical;
    }

    const LoadedData data = load_data(cfg);

    if (active == train) {
      auto m = fresh_model(cfg);
      TrainConfig tc;
      tc.epochs = epochs;
      tc.lr = lr;
      tc.seed = cfg.seed;
      tc.norm = cfg.data.norm;
      const auto log = train_reference(m, data.train, data.test, tc);
      if (const auto parent = fs::path(cfg.checkpoint).parent_path(); !parent.empty()) ensure_dir(parent.string());
      save_checkpoint(cfg.checkpoint, m);
      ensure_dir(cfg.output_dir);
      write_json((fs::path(cfg.output_dir) / "train_log.json").string(),
                 json{{"train_loss", log.train_loss}, {"test_accuracy", log.test_accuracy}, {"epochs_run", log.epochs_run},
                      {"plateau_stop", log.plateau_stop}, {"config_hash", config_hash(cfg)}, {"code_version", code_version()}});
      for (int e = 0; e < log.epochs_run; ++e)
        std::cout << "epoch " << e + 1 << " loss " << log.train_loss[static_cast<std::size_t>(e)] << " test "
                  << log.test_accuracy[static_cast<std::size_t>(e)] << '\n';
      std::cout << "saved " << cfg.checkpoint << '\n';
      return kExitOk;
    }

    if (active == eval) {
      json j{{"checkpoint", quantized_path.empty() ? cfg.checkpoint : quantized_path}};
      if (quantized_path.empty()) {
        const auto m = fold_batchnorm(load_reference(cfg));
        j["test_accuracy"] = accuracy(m, data.test, cfg.data.norm);
        j["train_accuracy"] = accuracy(m, data.train, cfg.data.norm);
      } else {
        const auto qm = load_quantized_model(cfg, quantized_path);
        j["test_accuracy"] = quantized_accuracy(qm, data.test, cfg.data.norm);
        j["train_accuracy"] = quantized_accuracy(qm, data.train, cfg.data.norm);
      }
      std::cout << j.dump(2) << '\n';
      return kExitOk;
    }

    if (active == quant) {
      auto out = run_experiment(cfg, load_reference(cfg), experiment_data(data, cfg));
      ensure_dir(cfg.output_dir);
      const auto stem = (fs::path(cfg.output_dir) / run_stem(cfg)).string();
      if (out.model) {
        write_checkpoint(stem + ".qdck", quantized_entries(*out.model));
        out.record.diagnostics.push_back(stem + ".qdck");
      }
      write_json(stem + ".json", json(out.record));
      print_record(out.record);
      std::cout << "wrote " << stem << ".json\n";
      if (out.failure) std::rethrow_exception(out.failure);
      return kExitOk;
    }

    if (active == sweep_p || active == sweep_calib) {
      const auto axis = active == sweep_p ? drop_p_axis() : calib_size_axis();
      ExperimentConfig base = cfg;
      if (active == sweep_p) base.mode = ReconMode::qdrop;
      const auto records = run_sweep(base, axis, seeds_or_default(seeds), load_reference(cfg), experiment_data(data, cfg), print_record);
      write_report(cfg.output_dir, records, axis.key);
      return kExitOk;
    }

    // sharpness, hessian, surface
    const auto qm = load_quantized_model(cfg, quantized_path);
    auto loss = hard_weight_loss(qm, flatness_data(cfg, data, which), fo.samples, cfg.data.norm);
    const auto stem = fs::path(quantized_path).replace_extension().string();

    if (active == sharp) {
      const auto r = measure_sharpness(loss, which, fo);
      const std::string path = out_path.empty() ? stem + ".sharpness." + which + ".csv" : out_path;
      std::ofstream os(path);
      if (!os) throw IoError("cannot open " + path);
      os << "alpha,mean,stddev,samples\n" << std::setprecision(17);
      for (const auto& p : r.curve.points) os << p.alpha << ',' << p.mean << ',' << p.stddev << ',' << p.samples << '\n';
      std::cout << "base loss " << r.curve.base_loss << "; tolerated alpha at ratio " << fo.ratio << ": "
                << (r.tolerated_alpha ? std::to_string(*r.tolerated_alpha) : std::string("> ") + std::to_string(fo.alphas.back()))
                << "\nwrote " << path << '\n';
      return kExitOk;
    }

    if (active == hess) {
      const auto r = measure_hessian(loss, fo);
      const std::string path = out_path.empty() ? stem + ".hessian." + which + ".json" : out_path;
      auto j = hessian_json(r);
      j["dataset"] = which;
      j["samples"] = loss.samples();
      write_json(path, j);
      for (std::size_t i = 0; i < r.eigenvalues.size(); ++i)
        std::cout << "lambda" << i + 1 << " " << r.eigenvalues[i] << (r.converged[i] ? "" : " (not converged)") << '\n';
      std::cout << "trace " << r.trace << " +- " << r.trace_se << "\nwrote " << path << '\n';
      return kExitOk;
    }

    if (active == surf) {
      Rng rng = Rng::substream(cfg.seed, 0x5f);
      const auto g = theory::loss_surface_grid([&](const std::vector<double>& w) { return loss(w); },
                                               theory::flat_weights(loss.model()), range, steps, rng);
      const std::string path = out_path.empty() ? stem + ".surface." + which + ".csv" : out_path;
      theory::write_surface_csv(path, g);
      std::cout << "center loss " << g.center << "\nwrote " << path << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
