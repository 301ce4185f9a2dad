// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "ecgpt/csv.hpp"
#include "ecgpt/errors.hpp"
#include "ecgpt/svg.hpp"
#include "ecgpt/wfdb.hpp"

namespace ecgpt::harness {

namespace fs = std::filesystem;

namespace {

double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double cell_value(const std::vector<std::vector<std::string>>& rows, std::size_t row, int col) {
  return std::stod(rows[row][static_cast<std::size_t>(col)]);
}

}  // namespace

void ExperimentManifest::validate() const {
  if (seeds.empty()) throw ConfigError("manifest: seeds must be non-empty");
  for (const double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw ConfigError("manifest: fractions must lie in (0, 1]");
    }
  }
  if (output_dir.empty()) throw ConfigError("manifest: output_dir is required");
  posttrain_plan.validate();
  baseline_plan.validate();
  if (device_threads < 0) throw ConfigError("manifest: device_threads must be >= 0");
}

nlohmann::json manifest_to_json(const ExperimentManifest& m) {
  return nlohmann::json{{"experiment_id", m.experiment_id},
                        {"task", ptbxl::task_id_name(m.task)},
                        {"posttrain_plan", train_plan_to_json(m.posttrain_plan)},
                        {"baseline_plan", train_plan_to_json(m.baseline_plan)},
                        {"fractions", m.fractions},
                        {"seeds", m.seeds},
                        {"output_dir", m.output_dir},
                        {"cache_dir", m.cache_dir},
                        {"init", m.init},
                        {"record_wall_time", m.record_wall_time},
                        {"device_threads", m.device_threads},
                        {"dataset_checksum", m.dataset_checksum},
                        {"reference_results", m.reference_results}};
}

ExperimentManifest manifest_from_json(const nlohmann::json& j) {
  ExperimentManifest m;
  try {
    m.experiment_id = j.value("experiment_id", m.experiment_id);
    if (j.contains("task")) m.task = ptbxl::parse_task_id(j.at("task").get<std::string>());
    if (j.contains("posttrain_plan")) m.posttrain_plan = train_plan_from_json(j.at("posttrain_plan"));
    else m.posttrain_plan = default_train_plan(RunMode::kPostTrain);
    if (j.contains("baseline_plan")) m.baseline_plan = train_plan_from_json(j.at("baseline_plan"));
    else m.baseline_plan = default_train_plan(RunMode::kBaseline);
    if (j.contains("fractions")) m.fractions = j.at("fractions").get<std::vector<double>>();
    if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.output_dir = j.value("output_dir", m.output_dir);
    m.cache_dir = j.value("cache_dir", m.cache_dir);
    m.init = j.value("init", m.init);
    m.record_wall_time = j.value("record_wall_time", m.record_wall_time);
    m.device_threads = j.value("device_threads", m.device_threads);
    m.dataset_checksum = j.value("dataset_checksum", m.dataset_checksum);
    m.reference_results = j.value("reference_results", m.reference_results);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ingestion

void cmd_ingest(const std::string& dataset_root, ptbxl::TaskId task, const std::string& out_cache,
                int sampling_rate_hz, double min_likelihood, std::ostream& log) {
  const fs::path root(dataset_root);
  const fs::path metadata_csv = root / "ptbxl_database.csv";
  const fs::path taxonomy_csv = root / "scp_statements.csv";
  if (!fs::exists(metadata_csv)) {
    throw DataError("missing metadata file: " + metadata_csv.string());
  }
  if (!fs::exists(taxonomy_csv)) {
    throw DataError("missing taxonomy file: " + taxonomy_csv.string());
  }

  const ptbxl::LabelTaxonomy taxonomy = ptbxl::load_taxonomy_csv(taxonomy_csv.string());
  const std::vector<ptbxl::RecordAnnotation> records =
      ptbxl::load_metadata_csv(metadata_csv.string(), sampling_rate_hz);
  ptbxl::TaskDataset dataset = ptbxl::build_task(records, taxonomy, task, min_likelihood);

  ptbxl::DatasetCache cache;
  cache.sampling_rate_hz = sampling_rate_hz;
  cache.signals.resize(dataset.record_ids.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dataset.record_ids.size()); ++i) {
    const wfdb::EcgRecord rec =
        wfdb::read_record(dataset_root, dataset.record_paths[static_cast<std::size_t>(i)]);
    cache.signals[static_cast<std::size_t>(i)] = rec.samples;
  }
  cache.meta = std::move(dataset);
  ptbxl::compute_lead_stats(cache.signals, cache.meta.indices_of(ptbxl::Split::kTrain),
                            &cache.lead_mean, &cache.lead_std);
  ptbxl::write_dataset_cache(out_cache, cache);

  const ptbxl::DatasetCache reloaded = ptbxl::load_dataset_cache(out_cache);
  const std::size_t n_train = reloaded.meta.indices_of(ptbxl::Split::kTrain).size();
  const std::size_t n_val = reloaded.meta.indices_of(ptbxl::Split::kVal).size();
  const std::size_t n_test = reloaded.meta.indices_of(ptbxl::Split::kTest).size();
  log << "ingest complete: task " << ptbxl::task_id_name(task) << ", "
      << reloaded.meta.spec.class_names.size() << " classes, " << reloaded.meta.record_ids.size()
      << " records (train " << n_train << " / val " << n_val << " / test " << n_test << ")\n"
      << "cache: " << out_cache << " checksum " << reloaded.dataset_checksum << "\n";
}

TaskArrays load_task_arrays(const std::string& cache_dir) {
  return task_arrays_from_cache(ptbxl::load_dataset_cache(cache_dir));
}

// ---------------------------------------------------------------------------
// Shared runner plumbing

namespace {

TrainPlan recipe_plan(const ExperimentManifest& m, const std::string& cell, std::uint64_t seed) {
  TrainPlan plan = cell == "baseline" ? m.baseline_plan : m.posttrain_plan;
  plan.seed = seed;
  plan.init_checkpoint = m.init == "random" ? "" : m.init;
  return plan;
}

const std::vector<std::string> kResultHeader = {
    "cell",           "seed",           "macro_auroc",    "auroc_ci_lower", "auroc_ci_upper",
    "macro_auprc",    "auprc_ci_lower", "auprc_ci_upper", "seconds"};

std::vector<std::string> result_row(const std::string& cell, std::uint64_t seed,
                                    const RunResult& result, bool record_wall_time) {
  const auto& r = result.test_report;
  return {cell,
          std::to_string(seed),
          format_fixed(r.macro_auroc, 6),
          format_fixed(r.auroc_ci.lower, 6),
          format_fixed(r.auroc_ci.upper, 6),
          format_fixed(r.macro_auprc, 6),
          format_fixed(r.auprc_ci.lower, 6),
          format_fixed(r.auprc_ci.upper, 6),
          format_fixed(record_wall_time ? result.wall_seconds : 0.0, 3)};
}

void report_reference_delta(const ExperimentManifest& m, const std::string& cell,
                            double macro_auroc, double macro_auprc, std::ostream& log) {
  if (m.reference_results.empty() || !fs::exists(m.reference_results)) return;
  std::ifstream in(m.reference_results);
  nlohmann::json ref;
  try {
    in >> ref;
  } catch (const nlohmann::json::exception&) {
    return;  // reference file is informational only
  }
  const std::string task = ptbxl::task_id_name(m.task);
  const std::string key = cell == "baseline" ? "baseline_finetune" : "posttrain";
  if (!ref.contains("tasks") || !ref.at("tasks").contains(task)) return;
  const auto& t = ref.at("tasks").at(task);
  if (!t.contains(key)) return;
  const double ref_auroc = t.at(key).value("macro_auroc", 0.0);
  const double ref_auprc = t.at(key).value("macro_auprc", 0.0);
  log << "  reference (" << key << ", full-scale): auroc " << format_fixed(ref_auroc, 3)
      << " (delta " << format_fixed(macro_auroc - ref_auroc, 3) << "), auprc "
      << format_fixed(ref_auprc, 3) << " (delta " << format_fixed(macro_auprc - ref_auprc, 3)
      << ")\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// compare

void cmd_compare(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log) {
  manifest.validate();
  fs::create_directories(manifest.output_dir);
  {
    std::ofstream out(fs::path(manifest.output_dir) / "manifest.json", std::ios::binary);
    out << manifest_to_json(manifest).dump(2) << '\n';
  }

  std::vector<std::vector<std::string>> rows;
  for (const std::string cell : {"baseline", "posttrain"}) {
    for (const std::uint64_t seed : manifest.seeds) {
      const TrainPlan plan = recipe_plan(manifest, cell, seed);
      const RunResult result = run_plan(plan, data);
      const std::string run_dir = (fs::path(manifest.output_dir) / "runs" /
                                   (cell + "-seed" + std::to_string(seed)))
                                      .string();
      write_run_dir(run_dir, plan, result, data.dataset_checksum, manifest.record_wall_time);
      rows.push_back(result_row(cell, seed, result, manifest.record_wall_time));
      log << cell << " seed " << seed << ": test auroc "
          << format_fixed(result.test_report.macro_auroc, 4) << " auprc "
          << format_fixed(result.test_report.macro_auprc, 4) << "\n";
      report_reference_delta(manifest, cell, result.test_report.macro_auroc,
                             result.test_report.macro_auprc, log);
    }
  }
  const std::string csv_path = (fs::path(manifest.output_dir) / "comparison.csv").string();
  write_csv_file(csv_path, kResultHeader, rows);
  emit_plots(csv_path, manifest.output_dir);
  log << "wrote " << csv_path << "\n";
}

// ---------------------------------------------------------------------------
// curves

void cmd_curves(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log) {
  manifest.validate();
  fs::create_directories(manifest.output_dir);
  {
    std::ofstream out(fs::path(manifest.output_dir) / "manifest.json", std::ios::binary);
    out << manifest_to_json(manifest).dump(2) << '\n';
  }

  std::vector<std::vector<std::string>> rows;
  for (const std::string cell : {"baseline", "posttrain"}) {
    for (const std::uint64_t seed : manifest.seeds) {
      const TrainPlan plan = recipe_plan(manifest, cell, seed);
      const RunResult result = run_plan(plan, data, /*eval_test_per_epoch=*/true);
      const std::string run_dir = (fs::path(manifest.output_dir) / "runs" /
                                   (cell + "-seed" + std::to_string(seed)))
                                      .string();
      write_run_dir(run_dir, plan, result, data.dataset_checksum, manifest.record_wall_time);
      // The comparison curves cover the full fine-tuning stage of each recipe.
      for (const EpochLog& l : result.stage_b.logs) {
        rows.push_back({cell, std::to_string(seed), std::to_string(l.epoch),
                        format_general(l.lr), format_general(l.train_loss),
                        format_fixed(l.val_auroc, 6), format_fixed(l.val_auprc, 6),
                        format_fixed(l.test_auroc, 6), format_fixed(l.test_auprc, 6)});
      }
      log << cell << " seed " << seed << ": " << result.stage_b.logs.size()
          << " epochs, best val auroc " << format_fixed(result.stage_b.best_val_auroc, 4) << "\n";
    }
  }
  const std::string csv_path = (fs::path(manifest.output_dir) / "curves.csv").string();
  write_csv_file(csv_path,
                 {"recipe", "seed", "epoch", "lr", "train_loss", "val_auroc", "val_auprc",
                  "test_auroc", "test_auprc"},
                 rows);
  emit_plots(csv_path, manifest.output_dir);
  log << "wrote " << csv_path << "\n";
}

// ---------------------------------------------------------------------------
// sweep

void cmd_sweep(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log) {
  manifest.validate();
  if (manifest.fractions.empty()) throw ConfigError("sweep: no fractions given");
  fs::create_directories(manifest.output_dir);
  {
    std::ofstream out(fs::path(manifest.output_dir) / "manifest.json", std::ios::binary);
    out << manifest_to_json(manifest).dump(2) << '\n';
  }

  std::vector<std::vector<std::string>> rows;
  for (const double fraction : manifest.fractions) {
    for (const std::string cell : {"baseline", "posttrain"}) {
      for (const std::uint64_t seed : manifest.seeds) {
        const TaskArrays sub = data.subsampled(fraction, seed);
        const TrainPlan plan = recipe_plan(manifest, cell, seed);
        const RunResult result = run_plan(plan, sub);
        char frac_buf[32];
        std::snprintf(frac_buf, sizeof(frac_buf), "%.2f", fraction);
        const std::string run_dir =
            (fs::path(manifest.output_dir) / "runs" /
             ("f" + std::string(frac_buf) + "-" + cell + "-seed" + std::to_string(seed)))
                .string();
        write_run_dir(run_dir, plan, result, data.dataset_checksum, manifest.record_wall_time);
        std::vector<std::string> row = {frac_buf};
        const std::vector<std::string> base = result_row(cell, seed, result, manifest.record_wall_time);
        row.insert(row.end(), base.begin(), base.end() - 1);
        row.push_back(format_fixed(result.val_auroc, 6));
        row.push_back(format_fixed(result.val_auprc, 6));
        row.push_back(base.back());
        rows.push_back(row);
        log << "fraction " << frac_buf << " " << cell << " seed " << seed << ": test auroc "
            << format_fixed(result.test_report.macro_auroc, 4) << "\n";
      }
    }
  }
  const std::string csv_path = (fs::path(manifest.output_dir) / "sweep.csv").string();
  write_csv_file(csv_path,
                 {"fraction", "cell", "seed", "macro_auroc", "auroc_ci_lower", "auroc_ci_upper",
                  "macro_auprc", "auprc_ci_lower", "auprc_ci_upper", "val_auroc", "val_auprc",
                  "seconds"},
                 rows);
  emit_plots(csv_path, manifest.output_dir);
  log << "wrote " << csv_path << "\n";
}

// ---------------------------------------------------------------------------
// ablation

std::vector<std::pair<std::string, std::string>> ablation_cells() {
  return {{"baseline", "random_initialization"},
          {"baseline", "pre_training"},
          {"proposed", "random_initialization"},
          {"proposed", "without_droppath"},
          {"proposed", "without_linear_probing"},
          {"proposed", "without_dropout"},
          {"proposed", "without_cosine_schedule"},
          {"proposed", "all_components"}};
}

TrainPlan ablation_cell_plan(const ExperimentManifest& manifest, const std::string& method,
                             const std::string& setting) {
  TrainPlan plan = method == "baseline" ? manifest.baseline_plan : manifest.posttrain_plan;
  plan.init_checkpoint = manifest.init == "random" ? "" : manifest.init;
  if (setting == "random_initialization") {
    plan.flags.random_init = true;
  } else if (setting == "without_droppath") {
    plan.flags.use_drop_path = false;
  } else if (setting == "without_linear_probing") {
    plan.flags.use_stage_a = false;
  } else if (setting == "without_dropout") {
    plan.flags.use_dropout = false;
  } else if (setting == "without_cosine_schedule") {
    plan.flags.use_cosine = false;
  } else if (setting != "all_components" && setting != "pre_training") {
    throw ConfigError("unknown ablation setting '" + setting + "'");
  }
  return plan;
}

void cmd_ablate(const ExperimentManifest& manifest, const TaskArrays& data, std::ostream& log) {
  manifest.validate();
  fs::create_directories(manifest.output_dir);
  {
    std::ofstream out(fs::path(manifest.output_dir) / "manifest.json", std::ios::binary);
    out << manifest_to_json(manifest).dump(2) << '\n';
  }

  std::vector<std::vector<std::string>> rows;
  for (const auto& [method, setting] : ablation_cells()) {
    std::vector<double> val_auroc, val_auprc, test_auroc, test_auprc;
    for (const std::uint64_t seed : manifest.seeds) {
      TrainPlan plan = ablation_cell_plan(manifest, method, setting);
      plan.seed = seed;
      const RunResult result = run_plan(plan, data);
      const std::string run_dir = (fs::path(manifest.output_dir) / "runs" /
                                   (method + "-" + setting + "-seed" + std::to_string(seed)))
                                      .string();
      write_run_dir(run_dir, plan, result, data.dataset_checksum, manifest.record_wall_time);
      val_auroc.push_back(result.val_auroc);
      val_auprc.push_back(result.val_auprc);
      test_auroc.push_back(result.test_report.macro_auroc);
      test_auprc.push_back(result.test_report.macro_auprc);
    }
    rows.push_back({method, setting, format_fixed(median(val_auroc), 6),
                    format_fixed(median(val_auprc), 6), format_fixed(median(test_auroc), 6),
                    format_fixed(median(test_auprc), 6)});
    log << method << " / " << setting << ": test auroc " << format_fixed(median(test_auroc), 4)
        << " auprc " << format_fixed(median(test_auprc), 4) << "\n";
  }
  const std::string csv_path = (fs::path(manifest.output_dir) / "ablation.csv").string();
  write_csv_file(csv_path, {"method", "setting", "val_auroc", "val_auprc", "test_auroc", "test_auprc"},
                 rows);
  emit_plots(csv_path, manifest.output_dir);
  log << "wrote " << csv_path << "\n";
}

// ---------------------------------------------------------------------------
// plots

namespace {

std::vector<std::string> plot_comparison(const CsvTable& t, const std::string& out_dir) {
  const int cell_col = t.column("cell");
  const int auroc_col = t.column("macro_auroc");
  const int auroc_lo = t.column("auroc_ci_lower");
  const int auroc_hi = t.column("auroc_ci_upper");
  const int auprc_col = t.column("macro_auprc");
  const int auprc_lo = t.column("auprc_ci_lower");
  const int auprc_hi = t.column("auprc_ci_upper");

  std::vector<std::string> cells;
  for (const auto& row : t.rows) {
    const std::string& c = row[static_cast<std::size_t>(cell_col)];
    if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  }
  auto bars_for = [&](int vcol, int lcol, int hcol) {
    std::vector<svg::Bar> bars;
    for (const std::string& c : cells) {
      std::vector<double> v, lo, hi;
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r][static_cast<std::size_t>(cell_col)] != c) continue;
        v.push_back(cell_value(t.rows, r, vcol));
        lo.push_back(cell_value(t.rows, r, lcol));
        hi.push_back(cell_value(t.rows, r, hcol));
      }
      svg::Bar b;
      b.label = c;
      b.value = median(v);
      b.ci_lower = median(lo);
      b.ci_upper = median(hi);
      b.has_ci = true;
      bars.push_back(b);
    }
    return bars;
  };
  const std::string p1 = (fs::path(out_dir) / "comparison_auroc.svg").string();
  const std::string p2 = (fs::path(out_dir) / "comparison_auprc.svg").string();
  svg::write_bar_plot(p1, "Test macro AUROC", "macro AUROC", bars_for(auroc_col, auroc_lo, auroc_hi));
  svg::write_bar_plot(p2, "Test macro AUPRC", "macro AUPRC", bars_for(auprc_col, auprc_lo, auprc_hi));
  return {p1, p2};
}

// Median y per (recipe, x) across seeds, as one series per recipe.
std::vector<svg::Series> median_series(const CsvTable& t, int recipe_col, int x_col, int y_col) {
  std::vector<std::string> recipes;
  for (const auto& row : t.rows) {
    const std::string& c = row[static_cast<std::size_t>(recipe_col)];
    if (std::find(recipes.begin(), recipes.end(), c) == recipes.end()) recipes.push_back(c);
  }
  std::vector<svg::Series> series;
  for (const std::string& recipe : recipes) {
    std::map<double, std::vector<double>> by_x;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (t.rows[r][static_cast<std::size_t>(recipe_col)] != recipe) continue;
      by_x[cell_value(t.rows, r, x_col)].push_back(cell_value(t.rows, r, y_col));
    }
    svg::Series s;
    s.label = recipe;
    for (const auto& [x, ys] : by_x) {
      s.x.push_back(x);
      s.y.push_back(median(ys));
    }
    series.push_back(std::move(s));
  }
  return series;
}

std::vector<std::string> plot_xy_panels(const CsvTable& t, const std::string& out_dir,
                                        const std::string& stem, const std::string& x_name,
                                        const std::string& x_label) {
  const int recipe_col = std::max(t.column("recipe"), t.column("cell"));
  const int x_col = t.column(x_name);
  std::vector<std::string> written;
  const std::vector<std::pair<std::string, std::string>> panels = {
      {"val_auroc", "validation macro AUROC"},
      {"val_auprc", "validation macro AUPRC"},
      {"test_auroc", "test macro AUROC"},
      {"test_auprc", "test macro AUPRC"}};
  for (const auto& [col, label] : panels) {
    const int y_col = col == "test_auroc" && t.column(col) < 0 ? t.column("macro_auroc")
                      : col == "test_auprc" && t.column(col) < 0 ? t.column("macro_auprc")
                                                                 : t.column(col);
    if (y_col < 0) continue;
    const std::string path = (fs::path(out_dir) / (stem + "_" + col + ".svg")).string();
    svg::write_line_plot(path, label + " vs " + x_label, x_label, label,
                         median_series(t, recipe_col, x_col, y_col));
    written.push_back(path);
  }
  return written;
}

std::vector<std::string> plot_ablation(const CsvTable& t, const std::string& out_dir) {
  const int setting_col = t.column("setting");
  const int method_col = t.column("method");
  std::vector<std::string> written;
  for (const std::string metric : {"test_auroc", "test_auprc"}) {
    const int y_col = t.column(metric);
    std::vector<svg::Bar> bars;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      svg::Bar b;
      b.label = t.rows[r][static_cast<std::size_t>(method_col)].substr(0, 1) + ":" +
                t.rows[r][static_cast<std::size_t>(setting_col)];
      b.value = cell_value(t.rows, r, y_col);
      bars.push_back(b);
    }
    const std::string path = (fs::path(out_dir) / ("ablation_" + metric + ".svg")).string();
    svg::write_bar_plot(path, "Ablation " + metric, metric, bars);
    written.push_back(path);
  }
  return written;
}

}  // namespace

std::vector<std::string> emit_plots(const std::string& csv_path, const std::string& out_dir) {
  const CsvTable t = read_csv_file(csv_path);
  if (t.rows.empty()) throw DataError("emit_plots: " + csv_path + " has no data rows");
  fs::create_directories(out_dir);

  if (t.column("fraction") >= 0) {
    return plot_xy_panels(t, out_dir, "sweep", "fraction", "training fraction");
  }
  if (t.column("epoch") >= 0 && t.column("recipe") >= 0) {
    return plot_xy_panels(t, out_dir, "curves", "epoch", "epoch");
  }
  if (t.column("setting") >= 0) {
    return plot_ablation(t, out_dir);
  }
  if (t.column("cell") >= 0 && t.column("macro_auroc") >= 0) {
    return plot_comparison(t, out_dir);
  }
  throw DataError("emit_plots: unrecognized csv schema in " + csv_path);
}

}  // namespace ecgpt::harness
