// Copyright 2026 The VisemeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// SGD with momentum, global-norm clipping, and the epoch loop with seeded
// shuffling and early stopping on a validation metric.

#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "visemeflow/checkpoint.hpp"
#include "visemeflow/nn.hpp"

namespace visemeflow {

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  double clip_norm = 0.0;      // 0 disables clipping
  std::size_t max_steps = 0;   // 0 = unlimited
};

inline Json to_json(const OptimizerConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"batch_size", c.batch_size},       {"max_epochs", c.max_epochs},
          {"patience", c.patience},           {"clip_norm", c.clip_norm},
          {"max_steps", c.max_steps}};
}

template <Scalar T>
struct OptimizerState {
  OptimizerConfig config;
  ParamSet<T> velocity;

  OptimizerState() = default;
  OptimizerState(OptimizerConfig cfg, const ParamSet<T>& params)
      : config(cfg) {
    for (const auto& [k, v] : params) velocity.emplace(k, Tensor<T>(v.shape()));
  }
};

/// v <- momentum*v - lr*g; p <- p + v. Parameters without a gradient slot
/// are left untouched.
template <Scalar T>
void sgd_momentum_step(ParamSet<T>& params, const ParamSet<T>& grads,
                       OptimizerState<T>& state) {
  const T lr = static_cast<T>(state.config.learning_rate);
  const T mu = static_cast<T>(state.config.momentum);
  for (const auto& [name, g] : grads) {
    auto p = params.find(name);
    auto v = state.velocity.find(name);
    if (p == params.end() || v == state.velocity.end()) {
      throw ShapeError("gradient for unknown parameter " + name);
    }
    if (p->second.shape() != g.shape() || v->second.shape() != g.shape()) {
      throw ShapeError("sgd shape mismatch for " + name + ": param " +
                       p->second.shape().str() + ", grad " + g.shape().str());
    }
    auto pd = p->second.data();
    auto vd = v->second.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      vd[i] = mu * vd[i] - lr * gd[i];
      pd[i] += vd[i];
    }
  }
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <Scalar T>
double clip_global_norm(ParamSet<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [k, g] : grads) {
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [k, g] : grads) {
      for (auto& v : g.data()) v *= s;
    }
  }
  return norm;
}

/// What train_loop needs from a model + data pairing.
template <class Task>
concept TrainTask = requires(Task& t, std::span<const std::size_t> batch,
                             ParamSet<float>& grads) {
  { t.params() } -> std::same_as<ParamSet<float>&>;
  { t.train_size() } -> std::convertible_to<std::size_t>;
  { t.batch_loss(batch, grads) } -> std::convertible_to<double>;
  { t.validation_metric() } -> std::convertible_to<double>;
  { t.higher_is_better() } -> std::convertible_to<bool>;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainSummary {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs epochs of shuffled minibatch SGD. Returns a checkpoint holding the
/// parameters from the epoch with the best validation metric, ties going to
/// the lower training loss (small validation sets tie often); stops once
/// `patience` epochs pass without strict improvement. The task's parameters
/// are left at the best epoch's values on return.
template <TrainTask Task>
ModelCheckpoint train_loop(Task& task, const OptimizerConfig& cfg,
                           std::uint64_t seed, Json architecture = Json::object(),
                           const EpochCallback& on_epoch = {},
                           TrainSummary* summary_out = nullptr) {
  const std::size_t n = task.train_size();
  if (n == 0) throw DataError("empty training split");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (cfg.max_epochs == 0) throw ConfigError("max_epochs must be >= 1");

  OptimizerState<float> state(cfg, task.params());
  TrainSummary summary;
  ParamSet<float> best = task.params();
  bool have_best = false;
  double best_train_loss = 0.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {0x7472, epoch}));
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool step_cap_hit = false;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      ParamSet<float> grads;
      const double loss = task.batch_loss(batch, grads);
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite training loss at epoch " +
                              std::to_string(epoch) + ", step " +
                              std::to_string(summary.steps + 1));
      }
      if (cfg.clip_norm > 0.0) clip_global_norm(grads, cfg.clip_norm);
      sgd_momentum_step(task.params(), grads, state);
      loss_sum += loss;
      ++batches;
      ++summary.steps;
      if (cfg.max_steps != 0 && summary.steps >= cfg.max_steps) {
        step_cap_hit = true;
        break;
      }
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches),
                    task.validation_metric()};
    if (!std::isfinite(rec.val_metric)) {
      throw DivergenceError("non-finite validation metric at epoch " +
                            std::to_string(epoch));
    }
    summary.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const bool improved =
        !have_best || (task.higher_is_better() ? rec.val_metric > summary.best_metric
                                               : rec.val_metric < summary.best_metric);
    const bool tie_break = !improved && rec.val_metric == summary.best_metric &&
                           rec.train_loss < best_train_loss;
    if (improved || tie_break) {
      have_best = true;
      summary.best_metric = rec.val_metric;
      summary.best_epoch = epoch;
      best_train_loss = rec.train_loss;
      best = task.params();
    }
    if (improved) {
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience || step_cap_hit) break;
  }

  task.params() = best;
  ModelCheckpoint ckpt;
  ckpt.architecture = std::move(architecture);
  ckpt.params = std::move(best);
  Json hist = Json::array();
  for (const auto& r : summary.history) {
    hist.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss},
                    {"val_metric", r.val_metric}});
  }
  ckpt.metadata = {{"seed", seed},
                   {"epochs_run", summary.history.size()},
                   {"best_epoch", summary.best_epoch},
                   {"best_val_metric", summary.best_metric},
                   {"steps", summary.steps},
                   {"optimizer", to_json(cfg)},
                   {"history", hist}};
  if (summary_out) *summary_out = std::move(summary);
  return ckpt;
}

}  // namespace visemeflow
