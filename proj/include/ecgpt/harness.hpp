// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgpt/ptbxl.hpp"
#include "ecgpt/train.hpp"

namespace ecgpt::harness {

struct ExperimentManifest {
  std::string experiment_id;
  ptbxl::TaskId task = ptbxl::TaskId::kAll71;
  TrainPlan posttrain_plan;
  TrainPlan baseline_plan;
  std::vector<double> fractions = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string output_dir;
  std::string cache_dir;
  std::string init = "random";  // "random" or a checkpoint path
  bool record_wall_time = false;
  int device_threads = 0;  // 0 = library default
  std::string dataset_checksum;
  std::string reference_results;  // optional path for delta reporting

  void validate() const;
};

nlohmann::json manifest_to_json(const ExperimentManifest& m);
ExperimentManifest manifest_from_json(const nlohmann::json& j);

// Parses PTB-XL metadata + taxonomy, decodes the WFDB records, builds the
// task label matrix and split, and writes the dataset cache. Prints class,
// record and split counts to `log`.
void cmd_ingest(const std::string& dataset_root, ptbxl::TaskId task, const std::string& out_cache,
                int sampling_rate_hz, double min_likelihood, std::ostream& log);

TaskArrays load_task_arrays(const std::string& cache_dir);

// Baseline vs post-training comparison on one task; emits comparison.csv,
// bar plots and one run directory per (cell, seed).
void cmd_compare(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log);

// Per-epoch validation/test curves for both recipes; emits curves.csv and
// line plots.
void cmd_curves(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log);

// Training-set size sweep; emits sweep.csv and line plots.
void cmd_sweep(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log);

// Eight-cell ablation table; emits ablation.csv.
void cmd_ablate(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log);

// Renders SVG plots from an emitted result CSV (schema detected from the
// header row).
std::vector<std::string> emit_plots(const std::string& csv_path, const std::string& out_dir);

// The eight ablation cells in table order.
std::vector<std::pair<std::string, std::string>> ablation_cells();
TrainPlan ablation_cell_plan(const ExperimentManifest& manifest, const std::string& method,
                             const std::string& setting);

}  // namespace ecgpt::harness
