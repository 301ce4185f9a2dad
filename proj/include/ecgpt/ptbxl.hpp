// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ecgpt/types.hpp"

namespace ecgpt::ptbxl {

// Per-record SCP statements serialized as a python-style dict, e.g.
// "{'NORM': 100.0, 'SR': 0.0}". Codes are uppercased; likelihoods must lie in
// [0, 100]. Throws DataError on malformed input.
std::map<std::string, double> parse_statement_map(const std::string& text);

struct StatementInfo {
  std::string code;
  bool is_diagnostic = false;
  bool is_rhythm = false;
  std::string diagnostic_subclass;  // empty when not applicable
};

struct LabelTaxonomy {
  std::vector<StatementInfo> statements;  // ordered as in the taxonomy file
};

// scp_statements.csv: first (or "code") column is the statement code;
// `diagnostic` and `rhythm` flag columns; `diagnostic_subclass` string.
LabelTaxonomy load_taxonomy_csv(const std::string& path);

struct RecordAnnotation {
  std::string record_id;
  std::map<std::string, double> statements;
  int fold = 0;          // 1..10
  std::string file_path; // relative record path without extension
};

// ptbxl_database.csv: ecg_id, scp_codes, strat_fold and the filename column
// for the requested sampling rate (filename_lr for 100 Hz, filename_hr for
// 500 Hz).
std::vector<RecordAnnotation> load_metadata_csv(const std::string& path, int sampling_rate_hz);

enum class TaskId { kAll71, kDiagnostic44, kSubclass23, kRhythm12 };

TaskId parse_task_id(const std::string& name);
std::string task_id_name(TaskId task);

struct TaskSpec {
  TaskId task = TaskId::kAll71;
  std::vector<std::string> class_names;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct TaskDataset {
  TaskSpec spec;
  std::vector<std::string> record_ids;
  std::vector<std::string> record_paths;
  LabelMatrix labels;  // n_records x n_classes
  std::vector<Split> split;
  std::vector<int> fold;
  // Permutation of training positions used by the most recent subsampling;
  // empty before subsample_train is applied.
  std::vector<int> subsample_order;

  std::vector<int> indices_of(Split s) const;
};

// Builds one of the four benchmark label tasks. Class sets: all statements /
// diagnostic-flagged / rhythm-flagged statements, or the distinct diagnostic
// subclasses in taxonomy order. A statement present in a record's map counts
// as positive when its likelihood is >= min_likelihood (the benchmark
// convention is 0.0: any listed statement counts). Records whose label row is
// all zero are dropped. Folds 1-8 train, 9 validation, 10 test.
TaskDataset build_task(const std::vector<RecordAnnotation>& records, const LabelTaxonomy& taxonomy,
                       TaskId task, double min_likelihood = 0.0);

// Keeps ceil(fraction * n_train) training records chosen by a seeded
// permutation; validation and test records are untouched. The selection at a
// smaller fraction is a subset of the selection at a larger one for the same
// seed.
TaskDataset subsample_train(const TaskDataset& dataset, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset cache: one little-endian f32 signal blob and one label blob per
// split, plus a JSON manifest carrying shapes, class names, per-blob
// checksums, record ids and z-score statistics.

struct DatasetCache {
  TaskDataset meta;              // records ordered train, val, test
  std::vector<MatF> signals;     // per record [leads x samples], millivolts
  VecF lead_mean, lead_std;      // training-split statistics
  double sampling_rate_hz = 0.0;
  std::string dataset_checksum;  // hex digest over the blob checksums
};

void write_dataset_cache(const std::string& dir, const DatasetCache& cache);
DatasetCache load_dataset_cache(const std::string& dir);

// Training-split per-lead mean and standard deviation (population). Near-zero
// deviations are clamped to 1 so constant leads stay finite.
void compute_lead_stats(const std::vector<MatF>& signals, const std::vector<int>& train_indices,
                        VecF* mean, VecF* std);

}  // namespace ecgpt::ptbxl
