// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "ecgpt/checkpoint.hpp"
#include "ecgpt/csv.hpp"
#include "ecgpt/errors.hpp"

namespace ecgpt {

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kCosine: return "cosine";
    case ScheduleKind::kPlateau: return "plateau";
    case ScheduleKind::kConstant: return "constant";
  }
  return "?";
}

ScheduleKind schedule_from_name(const std::string& name) {
  if (name == "cosine") return ScheduleKind::kCosine;
  if (name == "plateau") return ScheduleKind::kPlateau;
  if (name == "constant") return ScheduleKind::kConstant;
  throw ConfigError("unknown schedule '" + name + "'");
}

}  // namespace

void StagePlan::validate() const {
  if (epochs < 1) throw ConfigError("StagePlan: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("StagePlan: batch_size must be >= 1");
  optimizer.validate();
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
    throw ConfigError("StagePlan: drop_path_rate must lie in [0, 1)");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("StagePlan: dropout_rate must lie in [0, 1)");
  }
  if (schedule == ScheduleKind::kCosine && !(cosine_eta_min <= optimizer.lr)) {
    throw ConfigError("StagePlan: cosine_eta_min must not exceed the initial lr");
  }
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw ConfigError("StagePlan: plateau_factor must lie in (0, 1)");
  }
  if (plateau_patience < 0) throw ConfigError("StagePlan: plateau_patience must be >= 0");
}

void TrainPlan::validate() const {
  model.validate();
  stage_a.validate();
  stage_b.validate();
  if (stage_a.scope != TrainableScope::kHeadOnly) {
    throw ConfigError("TrainPlan: stage_a must use head_only scope");
  }
  if (stage_b.scope != TrainableScope::kAll) {
    throw ConfigError("TrainPlan: stage_b must use full scope");
  }
  if (n_bootstrap < 0) throw ConfigError("TrainPlan: n_bootstrap must be >= 0");
  if (!(bootstrap_alpha > 0.0 && bootstrap_alpha < 1.0)) {
    throw ConfigError("TrainPlan: bootstrap_alpha must lie in (0, 1)");
  }
}

StagePlan default_stage_a_plan() {
  StagePlan p;
  p.epochs = 30;
  p.batch_size = 256;
  p.optimizer.lr = 5e-3;
  p.optimizer.weight_decay = 0.1;
  p.schedule = ScheduleKind::kPlateau;
  p.plateau_factor = 0.1;
  p.plateau_patience = 10;
  p.scope = TrainableScope::kHeadOnly;
  p.update_norm_stats = false;  // the frozen backbone is a fixed function
  return p;
}

StagePlan default_stage_b_plan() {
  StagePlan p;
  p.epochs = 30;
  p.batch_size = 256;
  p.optimizer.lr = 5e-4;
  p.optimizer.weight_decay = 0.05;
  p.schedule = ScheduleKind::kCosine;
  p.cosine_eta_min = 1e-5;
  p.drop_path_rate = 0.5;
  p.dropout_rate = 0.05;
  p.scope = TrainableScope::kAll;
  return p;
}

StagePlan default_baseline_stage_plan() {
  StagePlan p;
  p.epochs = 30;
  p.batch_size = 256;
  p.optimizer.lr = 5e-3;
  p.optimizer.weight_decay = 0.1;
  p.schedule = ScheduleKind::kPlateau;
  p.plateau_factor = 0.1;
  p.plateau_patience = 10;
  p.scope = TrainableScope::kAll;
  return p;
}

TrainPlan default_train_plan(RunMode mode) {
  TrainPlan plan;
  plan.mode = mode;
  plan.stage_a = default_stage_a_plan();
  plan.stage_b = mode == RunMode::kPostTrain ? default_stage_b_plan() : default_baseline_stage_plan();
  return plan;
}

namespace {

nlohmann::json stage_plan_to_json(const StagePlan& p) {
  return nlohmann::json{{"epochs", p.epochs},
                        {"batch_size", p.batch_size},
                        {"lr", p.optimizer.lr},
                        {"weight_decay", p.optimizer.weight_decay},
                        {"beta1", p.optimizer.beta1},
                        {"beta2", p.optimizer.beta2},
                        {"epsilon", p.optimizer.epsilon},
                        {"schedule", schedule_name(p.schedule)},
                        {"cosine_eta_min", p.cosine_eta_min},
                        {"plateau_factor", p.plateau_factor},
                        {"plateau_patience", p.plateau_patience},
                        {"drop_path_rate", p.drop_path_rate},
                        {"dropout_rate", p.dropout_rate},
                        {"scope", p.scope == TrainableScope::kHeadOnly ? "head_only" : "all"},
                        {"update_norm_stats", p.update_norm_stats}};
}

StagePlan stage_plan_from_json(const nlohmann::json& j, StagePlan p) {
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.optimizer.lr = j.value("lr", p.optimizer.lr);
  p.optimizer.weight_decay = j.value("weight_decay", p.optimizer.weight_decay);
  p.optimizer.beta1 = j.value("beta1", p.optimizer.beta1);
  p.optimizer.beta2 = j.value("beta2", p.optimizer.beta2);
  p.optimizer.epsilon = j.value("epsilon", p.optimizer.epsilon);
  if (j.contains("schedule")) p.schedule = schedule_from_name(j.at("schedule").get<std::string>());
  p.cosine_eta_min = j.value("cosine_eta_min", p.cosine_eta_min);
  p.plateau_factor = j.value("plateau_factor", p.plateau_factor);
  p.plateau_patience = j.value("plateau_patience", p.plateau_patience);
  p.drop_path_rate = j.value("drop_path_rate", p.drop_path_rate);
  p.dropout_rate = j.value("dropout_rate", p.dropout_rate);
  if (j.contains("scope")) {
    const std::string s = j.at("scope").get<std::string>();
    if (s == "head_only") p.scope = TrainableScope::kHeadOnly;
    else if (s == "all") p.scope = TrainableScope::kAll;
    else throw ConfigError("unknown scope '" + s + "'");
  }
  p.update_norm_stats = j.value("update_norm_stats", p.update_norm_stats);
  return p;
}

}  // namespace

nlohmann::json train_plan_to_json(const TrainPlan& plan) {
  return nlohmann::json{{"mode", plan.mode == RunMode::kPostTrain ? "posttrain" : "baseline"},
                        {"model", model_config_to_json(plan.model)},
                        {"stage_a", stage_plan_to_json(plan.stage_a)},
                        {"stage_b", stage_plan_to_json(plan.stage_b)},
                        {"flags",
                         {{"random_init", plan.flags.random_init},
                          {"use_stage_a", plan.flags.use_stage_a},
                          {"use_drop_path", plan.flags.use_drop_path},
                          {"use_dropout", plan.flags.use_dropout},
                          {"use_cosine", plan.flags.use_cosine}}},
                        {"seed", plan.seed},
                        {"init_checkpoint", plan.init_checkpoint},
                        {"n_bootstrap", plan.n_bootstrap},
                        {"bootstrap_alpha", plan.bootstrap_alpha}};
}

TrainPlan train_plan_from_json(const nlohmann::json& j) {
  TrainPlan plan;
  try {
    const std::string mode = j.value("mode", "posttrain");
    if (mode == "posttrain") plan.mode = RunMode::kPostTrain;
    else if (mode == "baseline") plan.mode = RunMode::kBaseline;
    else throw ConfigError("unknown run mode '" + mode + "'");
    plan = default_train_plan(plan.mode);
    if (j.contains("model")) plan.model = model_config_from_json(j.at("model"));
    if (j.contains("stage_a")) plan.stage_a = stage_plan_from_json(j.at("stage_a"), plan.stage_a);
    if (j.contains("stage_b")) plan.stage_b = stage_plan_from_json(j.at("stage_b"), plan.stage_b);
    if (j.contains("flags")) {
      const auto& f = j.at("flags");
      plan.flags.random_init = f.value("random_init", plan.flags.random_init);
      plan.flags.use_stage_a = f.value("use_stage_a", plan.flags.use_stage_a);
      plan.flags.use_drop_path = f.value("use_drop_path", plan.flags.use_drop_path);
      plan.flags.use_dropout = f.value("use_dropout", plan.flags.use_dropout);
      plan.flags.use_cosine = f.value("use_cosine", plan.flags.use_cosine);
    }
    plan.seed = j.value("seed", plan.seed);
    plan.init_checkpoint = j.value("init_checkpoint", plan.init_checkpoint);
    plan.n_bootstrap = j.value("n_bootstrap", plan.n_bootstrap);
    plan.bootstrap_alpha = j.value("bootstrap_alpha", plan.bootstrap_alpha);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train plan: ") + e.what());
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Task arrays

TaskArrays task_arrays_from_cache(const ptbxl::DatasetCache& cache) {
  TaskArrays data;
  data.meta = cache.meta;
  data.dataset_checksum = cache.dataset_checksum;
  data.signals.reserve(cache.signals.size());
  for (const MatF& x : cache.signals) {
    MatF z = x;
    for (Index l = 0; l < z.rows(); ++l) {
      z.row(l) = (z.row(l).array() - cache.lead_mean[l]) / cache.lead_std[l];
    }
    data.signals.push_back(std::move(z));
  }
  data.labels = cache.meta.labels.cast<float>();
  data.train_idx = cache.meta.indices_of(ptbxl::Split::kTrain);
  data.val_idx = cache.meta.indices_of(ptbxl::Split::kVal);
  data.test_idx = cache.meta.indices_of(ptbxl::Split::kTest);
  return data;
}

TaskArrays task_arrays_from_raw(const ptbxl::TaskDataset& meta, const std::vector<MatF>& signals) {
  if (meta.record_ids.size() != signals.size()) {
    throw DataError("task_arrays_from_raw: record/signal count mismatch");
  }
  ptbxl::DatasetCache cache;
  cache.meta = meta;
  cache.signals = signals;
  ptbxl::compute_lead_stats(signals, meta.indices_of(ptbxl::Split::kTrain), &cache.lead_mean,
                            &cache.lead_std);
  cache.dataset_checksum = "";
  return task_arrays_from_cache(cache);
}

TaskArrays TaskArrays::subsampled(double fraction, std::uint64_t seed) const {
  const ptbxl::TaskDataset sub_meta = ptbxl::subsample_train(meta, fraction, seed);
  const std::set<std::string> kept(sub_meta.record_ids.begin(), sub_meta.record_ids.end());

  TaskArrays out;
  out.meta = sub_meta;
  out.dataset_checksum = dataset_checksum;
  out.labels = MatF(static_cast<Index>(sub_meta.record_ids.size()), labels.cols());
  Index next = 0;
  for (std::size_t i = 0; i < meta.record_ids.size(); ++i) {
    if (kept.find(meta.record_ids[i]) == kept.end()) continue;
    out.signals.push_back(signals[i]);
    out.labels.row(next++) = labels.row(static_cast<Index>(i));
  }
  out.train_idx = sub_meta.indices_of(ptbxl::Split::kTrain);
  out.val_idx = sub_meta.indices_of(ptbxl::Split::kVal);
  out.test_idx = sub_meta.indices_of(ptbxl::Split::kTest);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

MatD split_scores(const Model<float>& model, const TaskArrays& data,
                  const std::vector<int>& indices, int batch_size) {
  MatD scores(static_cast<Index>(indices.size()), data.n_classes());
  Rng eval_rng(0);  // inference consumes no randomness
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    BatchView<float> xs;
    xs.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      xs.push_back(&data.signals[static_cast<std::size_t>(indices[i])]);
    }
    const MatF logits = forward(model, xs, Mode::kInfer, eval_rng);
    for (std::size_t i = start; i < end; ++i) {
      scores.row(static_cast<Index>(i)) = logits.row(static_cast<Index>(i - start)).cast<double>();
    }
  }
  return scores;
}

namespace {

LabelMatrix gather_labels(const TaskArrays& data, const std::vector<int>& indices) {
  LabelMatrix y(static_cast<Index>(indices.size()), data.n_classes());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    y.row(static_cast<Index>(i)) = data.meta.labels.row(indices[i]);
  }
  return y;
}

}  // namespace

metrics::MacroPair evaluate_split(const Model<float>& model, const TaskArrays& data,
                                  const std::vector<int>& indices, int batch_size) {
  if (indices.empty()) throw DataError("evaluate_split: empty split");
  const MatD scores = split_scores(model, data, indices, batch_size);
  return metrics::macro_pair(scores, gather_labels(data, indices));
}

// ---------------------------------------------------------------------------
// Stage A (linear probing on cached features)

StageResult run_stage_a(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                        Rng rng, RunCounters& counters) {
  plan.validate();
  if (plan.scope != TrainableScope::kHeadOnly) {
    throw ConfigError("run_stage_a: trainable scope must be head_only");
  }
  if (data.train_idx.empty()) throw DataError("run_stage_a: empty training split");
  if (data.val_idx.empty()) throw DataError("run_stage_a: empty validation split");

  freeze_backbone(model);

  // The backbone is frozen as a function, so pooled features are fixed per
  // record; compute them once.
  auto features_of = [&](const std::vector<int>& idx) {
    BatchView<float> xs;
    xs.reserve(idx.size());
    for (const int i : idx) xs.push_back(&data.signals[static_cast<std::size_t>(i)]);
    return backbone_features(model, xs);  // [C x n]
  };
  const MatF f_train = features_of(data.train_idx);
  const MatF f_val = features_of(data.val_idx);

  const Index k = model.head_weight.rows();
  MatF y_train(k, static_cast<Index>(data.train_idx.size()));
  for (std::size_t i = 0; i < data.train_idx.size(); ++i) {
    y_train.col(static_cast<Index>(i)) = data.labels.row(data.train_idx[i]).transpose();
  }
  const LabelMatrix y_val = gather_labels(data, data.val_idx);

  AdamWState<float> state;
  Model<float> grads = zero_like(model);
  PlateauSchedule plateau{plan.plateau_factor, plan.plateau_patience, std::nullopt, 0};
  double lr = plan.optimizer.lr;

  StageResult result;
  MatF best_w = model.head_weight;
  MatF best_b = model.head_bias;
  const Index n_train = f_train.cols();

  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double lr_e = lr;
    if (plan.schedule == ScheduleKind::kCosine) {
      CosineSchedule cs{plan.optimizer.lr, plan.cosine_eta_min,
                        static_cast<double>(std::max(1, plan.epochs - 1))};
      lr_e = cosine_lr(cs, static_cast<double>(epoch - 1));
      ++counters.cosine_lr_steps;
    } else if (plan.schedule == ScheduleKind::kConstant) {
      lr_e = plan.optimizer.lr;
    }

    std::vector<Index> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = rng.child({stream::kShuffle, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (Index start = 0; start < n_train; start += plan.batch_size) {
      const Index end = std::min(n_train, start + plan.batch_size);
      const Index b = end - start;
      MatF fb(f_train.rows(), b);
      MatF yb(k, b);
      for (Index i = 0; i < b; ++i) {
        fb.col(i) = f_train.col(order[static_cast<std::size_t>(start + i)]);
        yb.col(i) = y_train.col(order[static_cast<std::size_t>(start + i)]);
      }
      MatF z = (model.head_weight * fb).colwise() + model.head_bias.col(0);
      const MatF zt = z.transpose();
      const MatF yt = yb.transpose();
      loss_sum += static_cast<double>(bce_logits_loss(zt, yt)) * static_cast<double>(b);
      const MatF dz = bce_logits_grad(zt, yt).transpose();  // [K x b]
      grads.head_weight.noalias() = dz * fb.transpose();
      grads.head_bias.col(0) = dz.rowwise().sum();
      adamw_step(model, grads, state, plan.optimizer, lr_e);
      ++counters.optimizer_steps;
    }

    const MatF z_val = ((model.head_weight * f_val).colwise() + model.head_bias.col(0)).transpose();
    const metrics::MacroPair val = metrics::macro_pair(z_val.cast<double>(), y_val);

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(n_train);
    log.val_auroc = val.auroc;
    log.val_auprc = val.auprc;
    log.lr = lr_e;
    log.seconds = seconds_since(t0);
    result.logs.push_back(log);
    ++counters.stage_a_epochs;

    if (result.selected_epoch < 0 || val.auroc > result.best_val_auroc) {
      result.selected_epoch = epoch;
      result.best_val_auroc = val.auroc;
      best_w = model.head_weight;
      best_b = model.head_bias;
    }
    if (plan.schedule == ScheduleKind::kPlateau) {
      lr = plateau_step(plateau, val.auroc, lr, &counters);
    }
  }

  model.head_weight = best_w;
  model.head_bias = best_b;
  return result;
}

// ---------------------------------------------------------------------------
// Full fine-tuning stage

StageResult run_full_stage(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                           Rng rng, RunCounters& counters, bool eval_test_per_epoch,
                           const TaskArrays* test_data) {
  plan.validate();
  if (plan.scope != TrainableScope::kAll) {
    throw ConfigError("run_full_stage: trainable scope must be all");
  }
  if (data.train_idx.empty()) throw DataError("run_full_stage: empty training split");
  if (data.val_idx.empty()) throw DataError("run_full_stage: empty validation split");

  unfreeze_all(model);
  model.config.drop_path_rate = plan.drop_path_rate;
  model.config.dropout_rate = plan.dropout_rate;

  AdamWState<float> state;
  PlateauSchedule plateau{plan.plateau_factor, plan.plateau_patience, std::nullopt, 0};
  double lr = plan.optimizer.lr;

  StageResult result;
  Model<float> best = model;
  const auto n_train = static_cast<Index>(data.train_idx.size());

  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double lr_e = lr;
    if (plan.schedule == ScheduleKind::kCosine) {
      CosineSchedule cs{plan.optimizer.lr, plan.cosine_eta_min,
                        static_cast<double>(std::max(1, plan.epochs - 1))};
      lr_e = cosine_lr(cs, static_cast<double>(epoch - 1));
      ++counters.cosine_lr_steps;
    } else if (plan.schedule == ScheduleKind::kConstant) {
      lr_e = plan.optimizer.lr;
    }

    std::vector<int> order = data.train_idx;
    Rng shuffle_rng = rng.child({stream::kShuffle, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::uint64_t batch_index = 0;
    for (Index start = 0; start < n_train; start += plan.batch_size, ++batch_index) {
      const Index end = std::min(n_train, start + static_cast<Index>(plan.batch_size));
      const Index b = end - start;
      BatchView<float> xs;
      xs.reserve(static_cast<std::size_t>(b));
      MatF yb(b, data.n_classes());
      for (Index i = 0; i < b; ++i) {
        const int rec = order[static_cast<std::size_t>(start + i)];
        xs.push_back(&data.signals[static_cast<std::size_t>(rec)]);
        yb.row(i) = data.labels.row(rec);
      }
      Rng batch_rng = rng.child({stream::kEpoch, static_cast<std::uint64_t>(epoch), batch_index});
      auto out = backward(model, xs, yb, Mode::kTrain, batch_rng, plan.update_norm_stats,
                          &counters);
      adamw_step(model, out.grads, state, plan.optimizer, lr_e);
      ++counters.optimizer_steps;
      if (plan.update_norm_stats) update_norm_stats(model, out.stats, &counters);
      loss_sum += static_cast<double>(out.loss) * static_cast<double>(b);
    }

    const metrics::MacroPair val = evaluate_split(model, data, data.val_idx, plan.batch_size);

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(n_train);
    log.val_auroc = val.auroc;
    log.val_auprc = val.auprc;
    log.lr = lr_e;
    if (eval_test_per_epoch) {
      const TaskArrays& td = test_data != nullptr ? *test_data : data;
      const metrics::MacroPair test = evaluate_split(model, td, td.test_idx, plan.batch_size);
      log.test_auroc = test.auroc;
      log.test_auprc = test.auprc;
    }
    log.seconds = seconds_since(t0);
    result.logs.push_back(log);
    ++counters.full_stage_epochs;

    if (result.selected_epoch < 0 || val.auroc > result.best_val_auroc) {
      result.selected_epoch = epoch;
      result.best_val_auroc = val.auroc;
      best = model;
    }
    if (plan.schedule == ScheduleKind::kPlateau) {
      lr = plateau_step(plateau, val.auroc, lr, &counters);
    }
  }

  model = best;
  return result;
}

StageResult run_stage_b(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                        Rng rng, RunCounters& counters, bool eval_test_per_epoch) {
  return run_full_stage(model, data, plan, rng, counters, eval_test_per_epoch, nullptr);
}

StageResult run_baseline(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                         Rng rng, RunCounters& counters, bool eval_test_per_epoch) {
  if (plan.drop_path_rate != 0.0 || plan.dropout_rate != 0.0) {
    throw ConfigError("run_baseline: the baseline recipe uses no drop-path or dropout");
  }
  return run_full_stage(model, data, plan, rng, counters, eval_test_per_epoch, nullptr);
}

// ---------------------------------------------------------------------------
// Whole-plan runner

namespace {

Model<float> init_model(const TrainPlan& plan, const TaskArrays& data, Rng& run_rng) {
  ModelConfig cfg = plan.model;
  cfg.n_classes = data.n_classes();
  if (!plan.init_checkpoint.empty() && !plan.flags.random_init) {
    Model<float> model = load_checkpoint(plan.init_checkpoint);
    if (model.config.in_leads != data.n_leads()) {
      throw ConfigError("init checkpoint expects " + std::to_string(model.config.in_leads) +
                        " leads but the dataset has " + std::to_string(data.n_leads()));
    }
    model.config.batch_level_drop_path = cfg.batch_level_drop_path;
    return model;
  }
  return make_model<float>(cfg, run_rng.child({0xA0}));
}

}  // namespace

RunResult run_plan(const TrainPlan& plan, const TaskArrays& data, bool eval_test_per_epoch) {
  plan.validate();
  if (data.test_idx.empty()) throw DataError("run_plan: empty test split");
  const auto t0 = std::chrono::steady_clock::now();

  Rng run_rng(plan.seed);
  RunResult result;
  Model<float> model = init_model(plan, data, run_rng);
  replace_head(model, data.n_classes(), run_rng.child({stream::kHeadInit}));

  StagePlan stage_b = plan.stage_b;
  bool with_stage_a = plan.mode == RunMode::kPostTrain && plan.flags.use_stage_a;
  if (plan.mode == RunMode::kPostTrain) {
    if (!plan.flags.use_drop_path) stage_b.drop_path_rate = 0.0;
    if (!plan.flags.use_dropout) stage_b.dropout_rate = 0.0;
    if (!plan.flags.use_cosine && stage_b.schedule == ScheduleKind::kCosine) {
      stage_b.schedule = ScheduleKind::kConstant;
    }
  }

  if (with_stage_a) {
    result.stage_a =
        run_stage_a(model, data, plan.stage_a, run_rng.child({stream::kEpoch, 1}), result.counters);
    for (const EpochLog& log : result.stage_a.logs) result.logs.push_back(log);
  }

  unfreeze_all(model);
  Rng stage_b_rng = run_rng.child({stream::kEpoch, 2});
  result.stage_b = plan.mode == RunMode::kBaseline
                       ? run_baseline(model, data, stage_b, stage_b_rng, result.counters,
                                      eval_test_per_epoch)
                       : run_full_stage(model, data, stage_b, stage_b_rng, result.counters,
                                        eval_test_per_epoch, nullptr);
  const int offset = static_cast<int>(result.logs.size());
  for (EpochLog log : result.stage_b.logs) {
    log.epoch += offset;
    result.logs.push_back(log);
  }

  const int sel = result.stage_b.selected_epoch;
  result.val_auroc = result.stage_b.logs[static_cast<std::size_t>(sel - 1)].val_auroc;
  result.val_auprc = result.stage_b.logs[static_cast<std::size_t>(sel - 1)].val_auprc;

  const MatD test_scores = split_scores(model, data, data.test_idx, stage_b.batch_size);
  const LabelMatrix test_labels = gather_labels(data, data.test_idx);
  const std::uint64_t boot_seed = run_rng.child({stream::kBootstrap}).seed();
  result.test_report = metrics::evaluate(test_scores, test_labels, data.meta.spec.class_names,
                                         plan.n_bootstrap, plan.bootstrap_alpha, boot_seed);
  result.model = std::move(model);
  result.wall_seconds = seconds_since(t0);
  return result;
}

// ---------------------------------------------------------------------------
// Run directory

nlohmann::json run_counters_to_json(const RunCounters& c) {
  return nlohmann::json{{"drop_path_draws", c.drop_path_draws},
                        {"drop_path_skips", c.drop_path_skips},
                        {"dropout_units_zeroed", c.dropout_units_zeroed},
                        {"optimizer_steps", c.optimizer_steps},
                        {"cosine_lr_steps", c.cosine_lr_steps},
                        {"plateau_lr_reductions", c.plateau_lr_reductions},
                        {"norm_stat_updates", c.norm_stat_updates},
                        {"stage_a_epochs", c.stage_a_epochs},
                        {"full_stage_epochs", c.full_stage_epochs}};
}

void write_run_dir(const std::string& dir, const TrainPlan& plan, const RunResult& result,
                   const std::string& dataset_checksum, bool record_wall_time) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream out(fs::path(dir) / "plan.json", std::ios::binary);
    if (!out) throw DataError("cannot write plan.json in " + dir);
    out << train_plan_to_json(plan).dump(2) << '\n';
  }
  {
    std::vector<std::vector<std::string>> rows;
    for (const EpochLog& log : result.logs) {
      rows.push_back({std::to_string(log.epoch), format_general(log.train_loss),
                      format_fixed(log.val_auroc, 6), format_fixed(log.val_auprc, 6),
                      format_general(log.lr),
                      format_fixed(record_wall_time ? log.seconds : 0.0, 3)});
    }
    write_csv_file((fs::path(dir) / "epochs.csv").string(),
                   {"epoch", "train_loss", "val_auroc", "val_auprc", "lr", "seconds"}, rows);
  }
  save_checkpoint(result.model, (fs::path(dir) / "best.ckpt").string());
  {
    nlohmann::json j;
    j["test"] = {{"macro_auroc", result.test_report.macro_auroc},
                 {"macro_auprc", result.test_report.macro_auprc},
                 {"auroc_ci", {result.test_report.auroc_ci.lower, result.test_report.auroc_ci.upper}},
                 {"auprc_ci", {result.test_report.auprc_ci.lower, result.test_report.auprc_ci.upper}},
                 {"n_bootstrap", result.test_report.n_bootstrap},
                 {"skipped_classes_auroc", result.test_report.skipped_auroc},
                 {"skipped_classes_auprc", result.test_report.skipped_auprc}};
    j["validation"] = {{"macro_auroc", result.val_auroc}, {"macro_auprc", result.val_auprc}};
    j["selected_epoch"] = {{"stage_a", result.stage_a.selected_epoch},
                           {"stage_b", result.stage_b.selected_epoch}};
    j["counters"] = run_counters_to_json(result.counters);
    j["provenance"] = {{"seed", plan.seed},
                       {"config_hash", model_config_hash(plan.model)},
                       {"dataset_checksum", dataset_checksum},
                       {"init_checkpoint", plan.init_checkpoint}};
    if (record_wall_time) j["wall_seconds"] = result.wall_seconds;
    std::ofstream out(fs::path(dir) / "result.json", std::ios::binary);
    if (!out) throw DataError("cannot write result.json in " + dir);
    out << j.dump(2) << '\n';
  }
}

}  // namespace ecgpt
