// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ecgpt/nn.hpp"
#include "ecgpt/types.hpp"

namespace ecgpt {

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    // lr == 0 is allowed so a zero-step plan is expressible.
    if (!(lr >= 0.0)) throw std::invalid_argument("OptimizerConfig: lr must be non-negative");
    if (weight_decay < 0.0) throw std::invalid_argument("OptimizerConfig: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("OptimizerConfig: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("OptimizerConfig: epsilon must be positive");
  }
};

template <class S>
struct AdamWState {
  std::int64_t step = 0;
  std::vector<Mat<S>> m, v;
  std::vector<std::string> names;

  template <class RefList>
  void init(const RefList& refs) {
    step = 0;
    m.clear();
    v.clear();
    names.clear();
    for (const auto& ref : refs) {
      m.push_back(Mat<S>::Zero(ref.tensor->rows(), ref.tensor->cols()));
      v.push_back(Mat<S>::Zero(ref.tensor->rows(), ref.tensor->cols()));
      names.push_back(ref.name);
    }
  }
};

// Decoupled-weight-decay Adam step: bias-corrected moment update plus the
// decay term -lr*wd*theta applied to convolution/linear weights only. Frozen
// parameters are excluded entirely.
template <class S>
void adamw_step(Model<S>& model, const Model<S>& grads, AdamWState<S>& state,
                const OptimizerConfig& cfg, double lr) {
  cfg.validate();
  auto prefs = tensor_refs(model, false);
  auto grefs = tensor_refs(const_cast<Model<S>&>(grads), false);
  if (prefs.size() != grefs.size()) {
    throw std::invalid_argument("adamw_step: parameter/gradient tree mismatch");
  }
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    if (prefs[i].name != grefs[i].name || prefs[i].tensor->rows() != grefs[i].tensor->rows() ||
        prefs[i].tensor->cols() != grefs[i].tensor->cols()) {
      throw std::invalid_argument("adamw_step: parameter/gradient tree mismatch at " +
                                  prefs[i].name);
    }
  }
  if (state.names.empty()) state.init(prefs);
  if (state.names.size() != prefs.size()) {
    throw std::invalid_argument("adamw_step: optimizer state does not match parameter tree");
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const S b1 = static_cast<S>(cfg.beta1);
  const S b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.epsilon);

  for (std::size_t i = 0; i < prefs.size(); ++i) {
    if (!tensor_trainable(model, prefs[i])) continue;
    auto theta = prefs[i].tensor->array();
    const auto g = grefs[i].tensor->array();
    auto mi = state.m[i].array();
    auto vi = state.v[i].array();
    mi = b1 * mi + (S(1) - b1) * g;
    vi = b2 * vi + (S(1) - b2) * g.square();
    if (cfg.weight_decay > 0.0 && decays(prefs[i].kind)) {
      theta *= static_cast<S>(1.0 - lr * cfg.weight_decay);
    }
    theta -= static_cast<S>(lr) *
             ((mi / static_cast<S>(bc1)) / ((vi / static_cast<S>(bc2)).sqrt() + eps));
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

struct CosineSchedule {
  double eta_max = 5e-4;
  double eta_min = 1e-5;
  double total_epochs = 29;  // T

  void validate() const {
    if (!(eta_min <= eta_max)) throw std::invalid_argument("CosineSchedule: eta_min > eta_max");
    if (!(total_epochs >= 1.0)) throw std::invalid_argument("CosineSchedule: T must be >= 1");
  }
};

// lr(t) = eta_min + 0.5*(eta_max - eta_min)*(1 + cos(pi*t/T)), t in [0, T].
// The endpoints are returned exactly.
inline double cosine_lr(const CosineSchedule& s, double t) {
  s.validate();
  if (!(t >= 0.0 && t <= s.total_epochs)) {
    throw std::invalid_argument("cosine_lr: t outside [0, T]");
  }
  if (t == 0.0) return s.eta_max;
  if (t == s.total_epochs) return s.eta_min;
  const double pi = 3.14159265358979323846;
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(pi * t / s.total_epochs));
}

struct PlateauSchedule {
  double factor = 0.1;
  int patience = 10;
  std::optional<double> best_so_far;  // maximization mode
  int stale_count = 0;

  void validate() const {
    if (!(factor > 0.0 && factor < 1.0)) {
      throw std::invalid_argument("PlateauSchedule: factor must lie in (0, 1)");
    }
    if (patience < 0) throw std::invalid_argument("PlateauSchedule: patience must be >= 0");
  }
};

// Strict improvement resets the stale counter; once the counter exceeds the
// patience the lr is multiplied by `factor` and the counter resets.
inline double plateau_step(PlateauSchedule& s, double metric, double current_lr,
                           RunCounters* counters = nullptr) {
  s.validate();
  if (!std::isfinite(metric)) throw std::invalid_argument("plateau_step: non-finite metric");
  if (!s.best_so_far.has_value() || metric > *s.best_so_far) {
    s.best_so_far = metric;
    s.stale_count = 0;
    return current_lr;
  }
  ++s.stale_count;
  if (s.stale_count > s.patience) {
    s.stale_count = 0;
    if (counters != nullptr) ++counters->plateau_lr_reductions;
    return current_lr * s.factor;
  }
  return current_lr;
}

// ---------------------------------------------------------------------------
// Checkpoint selection

struct CheckpointEntry {
  int epoch = 0;
  double val_auroc = 0.0;
};

// Index of the entry with the highest validation macro AUROC; ties go to the
// earliest epoch.
inline std::size_t select_checkpoint(const std::vector<CheckpointEntry>& history) {
  if (history.empty()) throw std::invalid_argument("select_checkpoint: empty history");
  std::size_t best = 0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (!std::isfinite(history[i].val_auroc)) {
      throw std::invalid_argument("select_checkpoint: non-finite metric");
    }
    if (history[i].val_auroc > history[best].val_auroc) best = i;
  }
  return best;
}

}  // namespace ecgpt
