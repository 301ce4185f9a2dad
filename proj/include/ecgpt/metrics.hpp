// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecgpt/types.hpp"

namespace ecgpt::metrics {

// Probability that a random positive outranks a random negative, ties at 1/2
// (Mann-Whitney with average ranks). Undefined when either class is absent.
// Throws on NaN scores.
std::optional<double> auroc(const VecD& scores, const Vec<std::uint8_t>& labels);

// Average precision with step interpolation; tied-score groups are processed
// atomically. Undefined when there are no positives. Throws on NaN scores.
std::optional<double> average_precision(const VecD& scores, const Vec<std::uint8_t>& labels);

struct MacroResult {
  double value = 0.0;
  std::vector<int> skipped;  // class indices with undefined per-class metric
};

// Unweighted mean over defined classes. Throws when every class is undefined.
MacroResult macro_mean(const std::vector<std::optional<double>>& per_class);

enum class MacroMetric { kAuroc, kAuprc };

std::vector<std::optional<double>> per_class_metric(const MatD& scores, const LabelMatrix& labels,
                                                    MacroMetric metric);

struct BootstrapCi {
  double lower = 0.0;
  double upper = 0.0;
  int n_defined = 0;  // replicates where the macro metric was defined
};

// Percentile bootstrap over resampled records (rows). Per-replicate seeds are
// derived from `seed`, so the interval is deterministic and replicates can be
// evaluated in any order. Throws when the macro metric is undefined in more
// than half of the replicates.
BootstrapCi bootstrap_ci(const MatD& scores, const LabelMatrix& labels, MacroMetric metric,
                         int n_rep, double alpha, std::uint64_t seed);

struct EvalReport {
  std::vector<std::optional<double>> per_class_auroc;
  std::vector<std::optional<double>> per_class_auprc;
  double macro_auroc = 0.0;
  double macro_auprc = 0.0;
  BootstrapCi auroc_ci;
  BootstrapCi auprc_ci;
  int n_bootstrap = 0;
  std::vector<int> skipped_auroc;
  std::vector<int> skipped_auprc;
  std::vector<std::string> class_names;
};

EvalReport evaluate(const MatD& scores, const LabelMatrix& labels,
                    const std::vector<std::string>& class_names, int n_bootstrap, double alpha,
                    std::uint64_t seed);

// Point metrics only (no bootstrap); used for per-epoch validation logging.
struct MacroPair {
  double auroc = 0.0;
  double auprc = 0.0;
};
MacroPair macro_pair(const MatD& scores, const LabelMatrix& labels);

std::string eval_report_json(const EvalReport& report);
void write_per_class_csv(const EvalReport& report, const std::string& path);

}  // namespace ecgpt::metrics
