#pragma once

#include <cmath>
#include <sstream>
#include <vector>

#include "qdrop/model.hpp"
#include "qdrop/optim.hpp"
#include "qdrop/pipeline/dataset.hpp"

namespace qdrop::pipeline {

struct TrainConfig {
  int epochs = 15;
  std::size_t batch_size = 64;
  double lr = 0.05, momentum = 0.9, weight_decay = 5e-4;
  std::uint64_t seed = 0;
  int patience = 4;          // epochs without test-accuracy improvement before stopping
  double min_delta = 0.002;  // improvement that resets patience
  Normalization norm{};
};

struct TrainLog {
  std::vector<double> train_loss, test_accuracy;
  int epochs_run = 0;
  bool plateau_stop = false;
};

// Top-1 accuracy of `m` (eval mode) on d.
template <class T>
double accuracy(const ModelGraph<T>& m, const Dataset& d, Normalization norm = {}, std::size_t batch = 256,
                const ForwardHooks<T>* hooks = nullptr) {
  NoGradScope<T> off;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < d.size(); b += batch) {
    const std::size_t e = std::min(d.size(), b + batch);
    const auto logits = forward(m, images<T>(d, b, e, norm), hooks);
    const std::size_t C = logits.dim(1);
    for (std::size_t i = 0; i < e - b; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits[i * C + c] > logits[i * C + best]) best = c;
      correct += best == d.labels[b + i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

// SGD with momentum on mean cross-entropy, cosine learning-rate decay over
// cfg.epochs, stopping early on a test-accuracy plateau. epochs = 0 leaves
// the model untouched.
template <class T>
TrainLog train_reference(ModelGraph<T>& m, const Dataset& train, const Dataset& test, const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be > 0");
  TrainLog log;
  SgdMomentum<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  auto params = trainable_parameters(m);
  for (auto& p : params) opt.add(p);
  Rng rng = Rng::substream(cfg.seed, 0x7ea1);
  double best = -1;
  int stale = 0;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    opt.set_lr(static_cast<T>(0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * ep / cfg.epochs))));
    const auto perm = rng.permutation(train.size());
    double total = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b + cfg.batch_size <= train.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> idx(perm.begin() + static_cast<long>(b), perm.begin() + static_cast<long>(b + cfg.batch_size));
      const Dataset batch = train.subset(idx);
      for (auto& p : params) p.set_requires_grad(true);
      TapeScope<T> scope;
      const auto y = labels_of(batch, 0, batch.size());
      auto loss = cross_entropy(forward_train(m, images<T>(batch, cfg.norm)), std::span<const int>(y));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "training diverged at epoch " << ep << " (loss " << lv << "); try lr <= " << cfg.lr / 10;
        throw NumericalError(os.str());
      }
      backward(loss);
      opt.step();
      opt.zero_grad();
      total += lv * static_cast<double>(idx.size());
      seen += idx.size();
    }
    for (auto& p : params) p.set_requires_grad(false);
    log.train_loss.push_back(seen ? total / static_cast<double>(seen) : 0.0);
    const double acc = accuracy(m, test, cfg.norm);
    log.test_accuracy.push_back(acc);
    log.epochs_run = ep + 1;
    if (acc > best + cfg.min_delta) {
      best = acc;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      log.plateau_stop = true;
      break;
    }
  }
  return log;
}

}  // namespace qdrop::pipeline
