// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecgpt/optim.hpp"
#include "support.hpp"

using namespace ecgpt;
using testsupport::tiny_config;

namespace {

Model<double> one_param_model() {
  ModelConfig cfg;
  cfg.in_leads = 1;
  cfg.stem_channels = 1;
  cfg.stem_stride = 1;
  cfg.stages = {{1, 1, 1}};
  cfg.se_reduction = 1;
  cfg.kernel_size = 1;
  cfg.n_classes = 1;
  return make_model<double>(cfg, Rng(0));
}

}  // namespace

TEST_CASE("adamw: zero gradient and zero decay is a fixed point") {
  Model<float> m = make_model<float>(tiny_config(), Rng(3));
  const Model<float> before = m;
  Model<float> grads = zero_like(m);
  AdamWState<float> state;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step(m, grads, state, cfg, 0.01);
  CHECK(testsupport::models_bit_identical(m, before));
  CHECK(state.step == 3);
}

TEST_CASE("adamw: pure decay term") {
  Model<double> m = one_param_model();
  m.head_weight(0, 0) = 1.0;
  Model<double> grads = zero_like(m);
  AdamWState<double> state;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(m, grads, state, cfg, 0.01);
  CHECK(m.head_weight(0, 0) == doctest::Approx(0.999).epsilon(1e-15));
  // biases and normalization parameters do not decay
  CHECK(m.head_bias(0, 0) == 0.0);
  CHECK(m.stem_norm.gamma(0, 0) == 1.0);
}

TEST_CASE("adamw: converges on a 1-D quadratic") {
  Model<double> m = one_param_model();
  m.head_weight(0, 0) = 1.0;
  Model<double> grads = zero_like(m);
  AdamWState<double> state;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 500; ++i) {
    grads.head_weight(0, 0) = 2.0 * m.head_weight(0, 0);  // d/dx of x^2
    adamw_step(m, grads, state, cfg, 0.05);
  }
  CHECK(std::abs(m.head_weight(0, 0)) < 1e-3);
}

TEST_CASE("adamw: tree mismatch is rejected") {
  Model<float> m = make_model<float>(tiny_config(2, 2), Rng(3));
  Model<float> grads = zero_like(make_model<float>(tiny_config(2, 3), Rng(3)));
  AdamWState<float> state;
  CHECK_THROWS_AS(adamw_step(m, grads, state, OptimizerConfig{}, 0.01), std::invalid_argument);
}

TEST_CASE("adamw: identical inputs give bit-identical results") {
  auto run = [] {
    Model<float> m = make_model<float>(tiny_config(), Rng(8));
    Model<float> grads = zero_like(m);
    Rng rng(5);
    for (auto& ref : tensor_refs(grads, false)) {
      for (Index i = 0; i < ref.tensor->size(); ++i) {
        ref.tensor->data()[i] = static_cast<float>(rng.normal());
      }
    }
    AdamWState<float> state;
    OptimizerConfig cfg;
    cfg.weight_decay = 0.01;
    for (int i = 0; i < 5; ++i) adamw_step(m, grads, state, cfg, 1e-3);
    return m;
  };
  CHECK(testsupport::models_bit_identical(run(), run()));
}

TEST_CASE("cosine schedule closed form") {
  const CosineSchedule s{5e-4, 1e-5, 30.0};
  CHECK(cosine_lr(s, 0.0) == 5e-4);
  CHECK(cosine_lr(s, 30.0) == 1e-5);
  CHECK(cosine_lr(s, 15.0) == doctest::Approx((5e-4 + 1e-5) / 2.0).epsilon(1e-12));
  CHECK(cosine_lr(s, 15.0) == doctest::Approx(2.55e-4).epsilon(1e-12));

  double prev = cosine_lr(s, 0.0);
  for (double t = 0.5; t <= 30.0; t += 0.5) {
    const double lr = cosine_lr(s, t);
    CHECK(lr <= prev);  // monotonically non-increasing
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(s, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(s, 30.5), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(CosineSchedule{1e-5, 5e-4, 10.0}, 0.0), std::invalid_argument);
}

TEST_CASE("plateau schedule") {
  SUBCASE("strictly improving metric never reduces") {
    PlateauSchedule s{0.1, 10, std::nullopt, 0};
    double lr = 5e-3;
    for (int e = 0; e < 40; ++e) {
      lr = plateau_step(s, 0.5 + 0.01 * e, lr);
      CHECK(s.stale_count == 0);
    }
    CHECK(lr == 5e-3);
  }
  SUBCASE("constant metric for 11 epochs after a best reduces once by 10x") {
    PlateauSchedule s{0.1, 10, std::nullopt, 0};
    double lr = 5e-3;
    lr = plateau_step(s, 0.9, lr);  // the best
    int reductions = 0;
    for (int e = 0; e < 11; ++e) {
      const double next = plateau_step(s, 0.9, lr);  // not a strict improvement
      if (next != lr) ++reductions;
      lr = next;
      CHECK(s.stale_count <= 10);
    }
    CHECK(reductions == 1);
    CHECK(lr == doctest::Approx(5e-4).epsilon(1e-12));
  }
  SUBCASE("alternating improve/stall keeps the lr") {
    PlateauSchedule s{0.1, 10, std::nullopt, 0};
    double lr = 1e-3;
    double best = 0.5;
    for (int e = 0; e < 50; ++e) {
      const double metric = e % 2 == 0 ? (best += 0.01) : best - 0.2;
      lr = plateau_step(s, metric, lr);
      CHECK(s.stale_count <= 1);
    }
    CHECK(lr == 1e-3);
  }
  SUBCASE("non-finite metric is rejected") {
    PlateauSchedule s{0.1, 10, std::nullopt, 0};
    CHECK_THROWS_AS(plateau_step(s, std::nan(""), 1e-3), std::invalid_argument);
  }
}

TEST_CASE("select_checkpoint") {
  CHECK(select_checkpoint({{1, 0.90}, {2, 0.95}, {3, 0.93}}) == 1);
  CHECK(select_checkpoint({{1, 0.95}, {2, 0.95}}) == 0);  // tie goes to the earliest
  CHECK(select_checkpoint({{7, 0.5}}) == 0);
  CHECK_THROWS_AS(select_checkpoint({}), std::invalid_argument);
  CHECK_THROWS_AS(select_checkpoint({{1, std::nan("")}}), std::invalid_argument);

  // argmax invariance under strictly increasing transforms
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<CheckpointEntry> h;
    for (int e = 0; e < 12; ++e) h.push_back({e, rng.uniform()});
    std::vector<CheckpointEntry> t = h;
    for (auto& entry : t) entry.val_auroc = std::exp(2.0 * entry.val_auroc) - 0.5;
    CHECK(select_checkpoint(h) == select_checkpoint(t));
  }
}
