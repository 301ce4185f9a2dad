// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ecgpt/csv.hpp"
#include "ecgpt/errors.hpp"
#include "ecgpt/rng.hpp"

namespace ecgpt::metrics {
namespace {

void check_scores(const VecD& scores) {
  for (Index i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw std::invalid_argument("metric scores contain NaN");
  }
}

// Indices sorted by score; tie groups are [start, end) runs of equal score.
std::vector<int> score_order(const VecD& scores, bool descending) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  if (descending) {
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return scores[a] > scores[b]; });
  } else {
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return scores[a] < scores[b]; });
  }
  return order;
}

}  // namespace

std::optional<double> auroc(const VecD& scores, const Vec<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: shape mismatch");
  if (scores.size() == 0) throw std::invalid_argument("auroc: empty input");
  check_scores(scores);

  const Index n = scores.size();
  double n_pos = 0;
  for (Index i = 0; i < n; ++i) n_pos += labels[i] ? 1.0 : 0.0;
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;

  const std::vector<int> order = score_order(scores, /*descending=*/false);
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

std::optional<double> average_precision(const VecD& scores, const Vec<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auprc: shape mismatch");
  if (scores.size() == 0) throw std::invalid_argument("auprc: empty input");
  check_scores(scores);

  const Index n = scores.size();
  double n_pos = 0;
  for (Index i = 0; i < n; ++i) n_pos += labels[i] ? 1.0 : 0.0;
  if (n_pos == 0.0) return std::nullopt;

  const std::vector<int> order = score_order(scores, /*descending=*/true);
  double cum_tp = 0.0;
  double cum_fp = 0.0;
  double ap = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    double tp = 0.0;
    double fp = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) tp += 1.0;
      else fp += 1.0;
      ++j;
    }
    cum_tp += tp;
    cum_fp += fp;
    if (tp > 0.0) ap += (cum_tp / (cum_tp + cum_fp)) * (tp / n_pos);
    i = j;
  }
  return ap;
}

MacroResult macro_mean(const std::vector<std::optional<double>>& per_class) {
  MacroResult result;
  double sum = 0.0;
  int defined = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c].has_value()) {
      sum += *per_class[c];
      ++defined;
    } else {
      result.skipped.push_back(static_cast<int>(c));
    }
  }
  if (defined == 0) throw std::invalid_argument("macro_mean: every class is undefined");
  result.value = sum / defined;
  return result;
}

std::vector<std::optional<double>> per_class_metric(const MatD& scores, const LabelMatrix& labels,
                                                    MacroMetric metric) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw std::invalid_argument("per_class_metric: shape mismatch");
  }
  std::vector<std::optional<double>> out(static_cast<std::size_t>(scores.cols()));
  for (Index c = 0; c < scores.cols(); ++c) {
    const VecD s = scores.col(c);
    const Vec<std::uint8_t> y = labels.col(c);
    out[static_cast<std::size_t>(c)] =
        metric == MacroMetric::kAuroc ? auroc(s, y) : average_precision(s, y);
  }
  return out;
}

namespace {

// Per-class precomputed order for multiplicity-based bootstrap replicates.
struct ClassOrder {
  std::vector<int> asc;    // indices sorted by ascending score
  std::vector<int> group;  // tie-group id per position in `asc`
  int n_groups = 0;
};

ClassOrder build_class_order(const VecD& scores) {
  ClassOrder co;
  co.asc = score_order(scores, /*descending=*/false);
  co.group.resize(co.asc.size());
  int g = -1;
  for (std::size_t i = 0; i < co.asc.size(); ++i) {
    if (i == 0 || scores[co.asc[i]] != scores[co.asc[i - 1]]) ++g;
    co.group[i] = g;
  }
  co.n_groups = g + 1;
  return co;
}

// Macro metric over a resample expressed as per-record multiplicities.
// Equivalent to expanding the resample and running the plain metric.
std::optional<double> macro_on_counts(const MatD& scores, const LabelMatrix& labels,
                                      const std::vector<ClassOrder>& orders,
                                      const std::vector<double>& counts, MacroMetric metric) {
  const Index k = scores.cols();
  double sum = 0.0;
  int defined = 0;
  for (Index c = 0; c < k; ++c) {
    const ClassOrder& co = orders[static_cast<std::size_t>(c)];
    if (metric == MacroMetric::kAuroc) {
      double rank_sum_pos = 0.0;
      double n_pos = 0.0;
      double n_total = 0.0;
      std::size_t i = 0;
      while (i < co.asc.size()) {
        std::size_t j = i;
        double g_total = 0.0;
        double g_pos = 0.0;
        while (j < co.asc.size() && co.group[j] == co.group[i]) {
          const double m = counts[static_cast<std::size_t>(co.asc[j])];
          g_total += m;
          if (labels(co.asc[j], c)) g_pos += m;
          ++j;
        }
        if (g_total > 0.0) {
          const double avg_rank = n_total + 0.5 * (g_total + 1.0);
          rank_sum_pos += avg_rank * g_pos;
          n_total += g_total;
          n_pos += g_pos;
        }
        i = j;
      }
      const double n_neg = n_total - n_pos;
      if (n_pos > 0.0 && n_neg > 0.0) {
        sum += (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
        ++defined;
      }
    } else {
      double n_pos = 0.0;
      for (std::size_t i = 0; i < co.asc.size(); ++i) {
        if (labels(co.asc[i], c)) n_pos += counts[static_cast<std::size_t>(co.asc[i])];
      }
      if (n_pos > 0.0) {
        double cum_tp = 0.0;
        double cum_fp = 0.0;
        double ap = 0.0;
        // descending: iterate tie groups of `asc` from the back
        std::ptrdiff_t i = static_cast<std::ptrdiff_t>(co.asc.size()) - 1;
        while (i >= 0) {
          std::ptrdiff_t j = i;
          double tp = 0.0;
          double fp = 0.0;
          while (j >= 0 && co.group[static_cast<std::size_t>(j)] == co.group[static_cast<std::size_t>(i)]) {
            const double m = counts[static_cast<std::size_t>(co.asc[static_cast<std::size_t>(j)])];
            if (labels(co.asc[static_cast<std::size_t>(j)], c)) tp += m;
            else fp += m;
            --j;
          }
          cum_tp += tp;
          cum_fp += fp;
          if (tp > 0.0) ap += (cum_tp / (cum_tp + cum_fp)) * (tp / n_pos);
          i = j;
        }
        sum += ap;
        ++defined;
      }
    }
  }
  if (defined == 0) return std::nullopt;
  return sum / defined;
}

double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

}  // namespace

BootstrapCi bootstrap_ci(const MatD& scores, const LabelMatrix& labels, MacroMetric metric,
                         int n_rep, double alpha, std::uint64_t seed) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw std::invalid_argument("bootstrap_ci: shape mismatch");
  }
  const Index n = scores.rows();
  if (n < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 records");
  if (n_rep < 1) throw std::invalid_argument("bootstrap_ci: n_rep must be positive");
  for (Index c = 0; c < scores.cols(); ++c) check_scores(scores.col(c));

  std::vector<ClassOrder> orders;
  orders.reserve(static_cast<std::size_t>(scores.cols()));
  for (Index c = 0; c < scores.cols(); ++c) orders.push_back(build_class_order(scores.col(c)));

  const Rng base(seed);
  std::vector<std::optional<double>> replicate(static_cast<std::size_t>(n_rep));
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n_rep; ++r) {
    Rng rng = base.child({stream::kBootstrap, static_cast<std::uint64_t>(r)});
    std::vector<double> counts(static_cast<std::size_t>(n), 0.0);
    for (Index i = 0; i < n; ++i) {
      counts[rng.uniform_index(static_cast<std::uint64_t>(n))] += 1.0;
    }
    replicate[static_cast<std::size_t>(r)] = macro_on_counts(scores, labels, orders, counts, metric);
  }

  std::vector<double> defined;
  defined.reserve(static_cast<std::size_t>(n_rep));
  for (const auto& v : replicate) {
    if (v.has_value()) defined.push_back(*v);
  }
  if (defined.size() * 2 < static_cast<std::size_t>(n_rep)) {
    std::ostringstream msg;
    msg << "bootstrap_ci: macro metric undefined in " << (n_rep - static_cast<int>(defined.size()))
        << " of " << n_rep << " replicates (n=" << n << ", classes=" << scores.cols()
        << "); evaluation set too degenerate for a confidence interval";
    throw std::runtime_error(msg.str());
  }

  BootstrapCi ci;
  ci.n_defined = static_cast<int>(defined.size());
  ci.lower = percentile(defined, alpha / 2.0);
  ci.upper = percentile(defined, 1.0 - alpha / 2.0);
  return ci;
}

MacroPair macro_pair(const MatD& scores, const LabelMatrix& labels) {
  MacroPair out;
  out.auroc = macro_mean(per_class_metric(scores, labels, MacroMetric::kAuroc)).value;
  out.auprc = macro_mean(per_class_metric(scores, labels, MacroMetric::kAuprc)).value;
  return out;
}

EvalReport evaluate(const MatD& scores, const LabelMatrix& labels,
                    const std::vector<std::string>& class_names, int n_bootstrap, double alpha,
                    std::uint64_t seed) {
  EvalReport report;
  report.class_names = class_names;
  report.per_class_auroc = per_class_metric(scores, labels, MacroMetric::kAuroc);
  report.per_class_auprc = per_class_metric(scores, labels, MacroMetric::kAuprc);
  const MacroResult ma = macro_mean(report.per_class_auroc);
  const MacroResult mp = macro_mean(report.per_class_auprc);
  report.macro_auroc = ma.value;
  report.macro_auprc = mp.value;
  report.skipped_auroc = ma.skipped;
  report.skipped_auprc = mp.skipped;
  report.n_bootstrap = n_bootstrap;
  if (n_bootstrap > 0) {
    report.auroc_ci = bootstrap_ci(scores, labels, MacroMetric::kAuroc, n_bootstrap, alpha, seed);
    report.auprc_ci = bootstrap_ci(scores, labels, MacroMetric::kAuprc, n_bootstrap, alpha, seed);
  }
  return report;
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  j["macro_auroc"] = report.macro_auroc;
  j["macro_auprc"] = report.macro_auprc;
  j["auroc_ci"] = {report.auroc_ci.lower, report.auroc_ci.upper};
  j["auprc_ci"] = {report.auprc_ci.lower, report.auprc_ci.upper};
  j["n_bootstrap"] = report.n_bootstrap;
  j["skipped_classes_auroc"] = report.skipped_auroc;
  j["skipped_classes_auprc"] = report.skipped_auprc;
  return j.dump(2);
}

void write_per_class_csv(const EvalReport& report, const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t c = 0; c < report.per_class_auroc.size(); ++c) {
    const std::string name =
        c < report.class_names.size() ? report.class_names[c] : std::to_string(c);
    const auto& roc = report.per_class_auroc[c];
    const auto& prc = report.per_class_auprc[c];
    rows.push_back({name, roc ? format_fixed(*roc, 6) : "", prc ? format_fixed(*prc, 6) : "",
                    (roc && prc) ? "1" : "0"});
  }
  write_csv_file(path, {"class", "auroc", "auprc", "defined"}, rows);
}

}  // namespace ecgpt::metrics
