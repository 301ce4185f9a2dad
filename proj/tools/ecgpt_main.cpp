// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: `ingest` builds a dataset cache from a PTB-XL
// directory; `compare`, `curves`, `sweep` and `ablate` run the experiment
// protocols on a cache; `plot` re-renders SVG figures from an emitted CSV.
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "ecgpt/errors.hpp"
#include "ecgpt/harness.hpp"

namespace {

using ecgpt::ConfigError;
using ecgpt::DataError;

struct GlobalOptions {
  std::string config_path;
  std::string task = "all_71";
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string init = "random";
  std::string cache;
  int device_threads = 0;
  bool record_wall_time = false;
  std::string reference;
};

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

ecgpt::harness::ExperimentManifest build_manifest(const GlobalOptions& opts,
                                                  const std::string& experiment_id) {
  const nlohmann::json config = load_config(opts.config_path);
  ecgpt::harness::ExperimentManifest manifest = ecgpt::harness::manifest_from_json(config);
  manifest.experiment_id = experiment_id;
  manifest.task = ecgpt::ptbxl::parse_task_id(opts.task);
  if (!opts.seeds.empty()) manifest.seeds = opts.seeds;
  if (!opts.out.empty()) manifest.output_dir = opts.out;
  if (!opts.cache.empty()) manifest.cache_dir = opts.cache;
  manifest.init = opts.init;
  manifest.device_threads = opts.device_threads;
  if (opts.record_wall_time) manifest.record_wall_time = true;
  if (!opts.reference.empty()) manifest.reference_results = opts.reference;
  if (manifest.cache_dir.empty()) {
    throw ConfigError("a dataset cache is required (--cache or \"cache_dir\" in --config)");
  }
  if (manifest.output_dir.empty()) throw ConfigError("--out is required");
  return manifest;
}

ecgpt::TaskArrays load_data(const ecgpt::harness::ExperimentManifest& manifest) {
  ecgpt::TaskArrays data = ecgpt::harness::load_task_arrays(manifest.cache_dir);
  if (data.meta.spec.task != manifest.task) {
    throw ConfigError("cache at " + manifest.cache_dir + " holds task " +
                      ecgpt::ptbxl::task_id_name(data.meta.spec.task) + ", not " +
                      ecgpt::ptbxl::task_id_name(manifest.task));
  }
  return data;
}

void apply_threads(int device_threads) {
#ifdef _OPENMP
  if (device_threads > 0) omp_set_num_threads(device_threads);
#else
  (void)device_threads;
#endif
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ECG post-training experiment harness"};
  app.require_subcommand(1);

  GlobalOptions opts;
  app.add_option("--config", opts.config_path, "JSON config with plan/model overrides");
  app.add_option("--task", opts.task, "Task id: all_71, diagnostic_44, subclass_23, rhythm_12");
  app.add_option("--seeds", opts.seeds, "Run seeds (default 0 1 2)");
  app.add_option("--out", opts.out, "Output directory");
  app.add_option("--init", opts.init, "Initialization: 'random' or a checkpoint path");
  app.add_option("--cache", opts.cache, "Dataset cache directory");
  app.add_option("--device-threads", opts.device_threads, "Worker threads (0 = default)");
  app.add_flag("--timings", opts.record_wall_time,
               "Record wall-clock seconds in emitted files (breaks byte reproducibility)");
  app.add_option("--reference", opts.reference, "reference_results.json for delta reporting");

  std::string dataset_root;
  int sampling_rate = 100;
  double min_likelihood = 0.0;
  auto* ingest = app.add_subcommand("ingest", "Build a dataset cache from a PTB-XL directory");
  ingest->add_option("--data", dataset_root, "PTB-XL root directory")->required();
  ingest->add_option("--sampling-rate", sampling_rate, "100 (records100) or 500 (records500)");
  ingest->add_option("--min-likelihood", min_likelihood,
                     "Likelihood threshold for positive labels (default 0: any listed statement)");

  auto* compare = app.add_subcommand("compare", "Baseline vs post-training comparison");
  auto* curves = app.add_subcommand("curves", "Per-epoch metric curves for both recipes");
  std::vector<double> fractions;
  auto* sweep = app.add_subcommand("sweep", "Training-set size sweep");
  sweep->add_option("--fractions", fractions, "Training fractions in (0, 1]");
  auto* ablate = app.add_subcommand("ablate", "Component ablation table");

  std::vector<std::string> plot_inputs;
  auto* plot = app.add_subcommand("plot", "Render SVG plots from a result CSV");
  plot->add_option("csv", plot_inputs, "Result CSV file(s)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    apply_threads(opts.device_threads);
    if (ingest->parsed()) {
      if (opts.out.empty()) throw ConfigError("--out is required for ingest");
      ecgpt::harness::cmd_ingest(dataset_root, ecgpt::ptbxl::parse_task_id(opts.task), opts.out,
                                 sampling_rate, min_likelihood, std::cout);
      return 0;
    }
    if (plot->parsed()) {
      if (opts.out.empty()) throw ConfigError("--out is required for plot");
      for (const std::string& csv : plot_inputs) {
        for (const std::string& f : ecgpt::harness::emit_plots(csv, opts.out)) {
          std::cout << "wrote " << f << "\n";
        }
      }
      return 0;
    }

    const std::string id = app.get_subcommands().front()->get_name();
    ecgpt::harness::ExperimentManifest manifest = build_manifest(opts, id);
    if (sweep->parsed() && !fractions.empty()) manifest.fractions = fractions;
    const ecgpt::TaskArrays data = load_data(manifest);
    manifest.dataset_checksum = data.dataset_checksum;

    if (compare->parsed()) ecgpt::harness::cmd_compare(manifest, data, std::cout);
    else if (curves->parsed()) ecgpt::harness::cmd_curves(manifest, data, std::cout);
    else if (sweep->parsed()) ecgpt::harness::cmd_sweep(manifest, data, std::cout);
    else if (ablate->parsed()) ecgpt::harness::cmd_ablate(manifest, data, std::cout);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
