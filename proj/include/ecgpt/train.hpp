// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgpt/metrics.hpp"
#include "ecgpt/nn.hpp"
#include "ecgpt/optim.hpp"
#include "ecgpt/ptbxl.hpp"
#include "ecgpt/rng.hpp"
#include "ecgpt/types.hpp"

namespace ecgpt {

enum class ScheduleKind { kCosine, kPlateau, kConstant };
enum class TrainableScope { kHeadOnly, kAll };

struct StagePlan {
  int epochs = 30;
  int batch_size = 256;
  OptimizerConfig optimizer;
  ScheduleKind schedule = ScheduleKind::kPlateau;
  double cosine_eta_min = 1e-5;
  double plateau_factor = 0.1;
  int plateau_patience = 10;
  double drop_path_rate = 0.0;
  double dropout_rate = 0.0;
  TrainableScope scope = TrainableScope::kAll;
  bool update_norm_stats = true;  // EMA stats during training steps

  void validate() const;
};

// Table-3 ablation axes; each flag toggles exactly one mechanism.
struct AblationFlags {
  bool random_init = false;  // ignore any pretrained checkpoint
  bool use_stage_a = true;   // preview linear probing
  bool use_drop_path = true;
  bool use_dropout = true;
  bool use_cosine = true;  // otherwise constant lr in the full stage
};

enum class RunMode { kPostTrain, kBaseline };

struct TrainPlan {
  RunMode mode = RunMode::kPostTrain;
  ModelConfig model;
  StagePlan stage_a;
  StagePlan stage_b;  // the full fine-tuning stage (both recipes)
  AblationFlags flags;
  std::uint64_t seed = 0;
  std::string init_checkpoint;  // empty = random initialization
  int n_bootstrap = 1000;
  double bootstrap_alpha = 0.05;

  void validate() const;
};

// Paper recipe defaults: Stage A 30 epochs, batch 256, AdamW lr 5e-3 /
// wd 0.1 with plateau(0.1, 10); Stage B 30 epochs, batch 256, AdamW lr 5e-4 /
// wd 0.05, cosine to 1e-5, drop-path 0.5, dropout 0.05. The baseline recipe
// is a single full stage with the Stage-A optimizer settings and no
// stochastic regularization.
StagePlan default_stage_a_plan();
StagePlan default_stage_b_plan();
StagePlan default_baseline_stage_plan();
TrainPlan default_train_plan(RunMode mode);

nlohmann::json train_plan_to_json(const TrainPlan& plan);
TrainPlan train_plan_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;  // 1-based within the run
  double train_loss = 0.0;
  double val_auroc = 0.0;
  double val_auprc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  double test_auroc = std::numeric_limits<double>::quiet_NaN();
  double test_auprc = std::numeric_limits<double>::quiet_NaN();
};

// Resident task tensors: normalized signals, float labels, split indices.
struct TaskArrays {
  ptbxl::TaskDataset meta;
  std::vector<MatF> signals;  // z-scored per lead with training-split stats
  MatF labels;                // n x K
  std::vector<int> train_idx, val_idx, test_idx;
  std::string dataset_checksum;

  int n_classes() const { return static_cast<int>(labels.cols()); }
  int n_leads() const { return signals.empty() ? 0 : static_cast<int>(signals.front().rows()); }

  // Seeded training-subset restriction; validation/test untouched.
  TaskArrays subsampled(double fraction, std::uint64_t seed) const;
};

TaskArrays task_arrays_from_cache(const ptbxl::DatasetCache& cache);
// Computes lead statistics from the training split, then normalizes.
TaskArrays task_arrays_from_raw(const ptbxl::TaskDataset& meta, const std::vector<MatF>& signals);

struct StageResult {
  std::vector<EpochLog> logs;
  int selected_epoch = -1;  // 1-based within the stage
  double best_val_auroc = 0.0;
};

metrics::MacroPair evaluate_split(const Model<float>& model, const TaskArrays& data,
                                  const std::vector<int>& indices, int batch_size = 256);
MatD split_scores(const Model<float>& model, const TaskArrays& data,
                  const std::vector<int>& indices, int batch_size = 256);

// Stage A: linear probing. The backbone is frozen as a function (weights and
// normalization statistics), so pooled features are computed once and the
// head is trained on them; per-epoch validation metrics drive plateau
// scheduling and best-epoch head selection.
StageResult run_stage_a(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                        Rng rng, RunCounters& counters);

// Full fine-tuning stage shared by Stage B and the baseline recipe.
StageResult run_full_stage(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                           Rng rng, RunCounters& counters, bool eval_test_per_epoch = false,
                           const TaskArrays* test_data = nullptr);

StageResult run_stage_b(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                        Rng rng, RunCounters& counters, bool eval_test_per_epoch = false);
StageResult run_baseline(Model<float>& model, const TaskArrays& data, const StagePlan& plan,
                         Rng rng, RunCounters& counters, bool eval_test_per_epoch = false);

struct RunResult {
  Model<float> model;             // selected checkpoint
  std::vector<EpochLog> logs;     // all stages, continuous epoch numbering
  StageResult stage_a, stage_b;
  RunCounters counters;
  metrics::EvalReport test_report;
  double val_auroc = 0.0;  // selected checkpoint's validation metrics
  double val_auprc = 0.0;
  double wall_seconds = 0.0;
};

// Executes the resolved plan: init -> replace_head -> (Stage A) -> full
// stage -> test evaluation of the selected checkpoint.
RunResult run_plan(const TrainPlan& plan, const TaskArrays& data, bool eval_test_per_epoch = false);

// plan.json + epochs.csv + best.ckpt + result.json. Wall-clock seconds are
// written only when record_wall_time is set; otherwise the seconds fields are
// zero so rerunning a manifest reproduces the files byte for byte.
void write_run_dir(const std::string& dir, const TrainPlan& plan, const RunResult& result,
                   const std::string& dataset_checksum, bool record_wall_time);

nlohmann::json run_counters_to_json(const RunCounters& c);

}  // namespace ecgpt
