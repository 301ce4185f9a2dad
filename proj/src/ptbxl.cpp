// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/ptbxl.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "ecgpt/csv.hpp"
#include "ecgpt/errors.hpp"
#include "ecgpt/hash.hpp"
#include "ecgpt/rng.hpp"

namespace ecgpt::ptbxl {

namespace {

[[noreturn]] void map_fail(const std::string& text, std::size_t pos, const std::string& what) {
  throw DataError("statement map parse error at position " + std::to_string(pos) + ": " + what +
                  " in \"" + text + "\"");
}

void skip_ws(const std::string& s, std::size_t& i) {
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r')) ++i;
}

}  // namespace

std::map<std::string, double> parse_statement_map(const std::string& text) {
  std::map<std::string, double> out;
  std::size_t i = 0;
  skip_ws(text, i);
  if (i >= text.size() || text[i] != '{') map_fail(text, i, "expected '{'");
  ++i;
  skip_ws(text, i);
  if (i < text.size() && text[i] == '}') {
    ++i;
    skip_ws(text, i);
    if (i != text.size()) map_fail(text, i, "trailing characters after '}'");
    return out;
  }
  for (;;) {
    skip_ws(text, i);
    if (i >= text.size() || (text[i] != '\'' && text[i] != '"')) {
      map_fail(text, i, "expected quoted statement code");
    }
    const char quote = text[i++];
    std::string code;
    while (i < text.size() && text[i] != quote) code.push_back(text[i++]);
    if (i >= text.size()) map_fail(text, i, "unterminated quoted code");
    ++i;
    skip_ws(text, i);
    if (i >= text.size() || text[i] != ':') map_fail(text, i, "expected ':' after code");
    ++i;
    skip_ws(text, i);
    char* end = nullptr;
    const double value = std::strtod(text.c_str() + i, &end);
    if (end == text.c_str() + i) map_fail(text, i, "expected numeric likelihood");
    if (!std::isfinite(value) || value < 0.0 || value > 100.0) {
      map_fail(text, i, "likelihood outside [0, 100]");
    }
    i = static_cast<std::size_t>(end - text.c_str());
    std::transform(code.begin(), code.end(), code.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    out[code] = value;
    skip_ws(text, i);
    if (i >= text.size()) map_fail(text, i, "unterminated map (missing '}')");
    if (text[i] == ',') {
      ++i;
      continue;
    }
    if (text[i] == '}') {
      ++i;
      skip_ws(text, i);
      if (i != text.size()) map_fail(text, i, "trailing characters after '}'");
      return out;
    }
    map_fail(text, i, "expected ',' or '}'");
  }
}

namespace {

bool flag_set(const std::string& cell) {
  if (cell.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end == cell.c_str()) return false;
  return v != 0.0;
}

}  // namespace

LabelTaxonomy load_taxonomy_csv(const std::string& path) {
  const CsvTable table = read_csv_file(path);
  if (table.header.empty()) throw DataError("taxonomy csv " + path + ": empty file");
  int code_col = table.column("code");
  if (code_col < 0) code_col = 0;  // unnamed index column
  const int diag_col = table.require_column("diagnostic", "taxonomy csv " + path);
  const int rhythm_col = table.require_column("rhythm", "taxonomy csv " + path);
  const int sub_col = table.require_column("diagnostic_subclass", "taxonomy csv " + path);

  LabelTaxonomy tax;
  std::set<std::string> seen;
  for (const auto& row : table.rows) {
    StatementInfo info;
    info.code = row[static_cast<std::size_t>(code_col)];
    std::transform(info.code.begin(), info.code.end(), info.code.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (info.code.empty()) throw DataError("taxonomy csv " + path + ": empty statement code");
    if (!seen.insert(info.code).second) {
      throw DataError("taxonomy csv " + path + ": duplicate statement code " + info.code);
    }
    info.is_diagnostic = flag_set(row[static_cast<std::size_t>(diag_col)]);
    info.is_rhythm = flag_set(row[static_cast<std::size_t>(rhythm_col)]);
    info.diagnostic_subclass = row[static_cast<std::size_t>(sub_col)];
    tax.statements.push_back(std::move(info));
  }
  if (tax.statements.empty()) throw DataError("taxonomy csv " + path + ": no statements");
  return tax;
}

std::vector<RecordAnnotation> load_metadata_csv(const std::string& path, int sampling_rate_hz) {
  if (sampling_rate_hz != 100 && sampling_rate_hz != 500) {
    throw ConfigError("sampling rate must be 100 or 500, got " + std::to_string(sampling_rate_hz));
  }
  const CsvTable table = read_csv_file(path);
  const std::string ctx = "metadata csv " + path;
  const int id_col = table.require_column("ecg_id", ctx);
  const int scp_col = table.require_column("scp_codes", ctx);
  const int fold_col = table.require_column("strat_fold", ctx);
  const int file_col =
      table.require_column(sampling_rate_hz == 100 ? "filename_lr" : "filename_hr", ctx);

  std::vector<RecordAnnotation> records;
  records.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    RecordAnnotation ann;
    ann.record_id = row[static_cast<std::size_t>(id_col)];
    ann.statements = parse_statement_map(row[static_cast<std::size_t>(scp_col)]);
    char* end = nullptr;
    const double fold = std::strtod(row[static_cast<std::size_t>(fold_col)].c_str(), &end);
    if (end == row[static_cast<std::size_t>(fold_col)].c_str()) {
      throw DataError(ctx + ": row " + std::to_string(r + 2) + ": non-numeric strat_fold");
    }
    ann.fold = static_cast<int>(fold);
    ann.file_path = row[static_cast<std::size_t>(file_col)];
    records.push_back(std::move(ann));
  }
  return records;
}

TaskId parse_task_id(const std::string& name) {
  if (name == "all_71") return TaskId::kAll71;
  if (name == "diagnostic_44") return TaskId::kDiagnostic44;
  if (name == "subclass_23") return TaskId::kSubclass23;
  if (name == "rhythm_12") return TaskId::kRhythm12;
  throw ConfigError("unknown task id '" + name +
                    "' (expected all_71, diagnostic_44, subclass_23 or rhythm_12)");
}

std::string task_id_name(TaskId task) {
  switch (task) {
    case TaskId::kAll71: return "all_71";
    case TaskId::kDiagnostic44: return "diagnostic_44";
    case TaskId::kSubclass23: return "subclass_23";
    case TaskId::kRhythm12: return "rhythm_12";
  }
  throw ConfigError("unknown task id");
}

std::vector<int> TaskDataset::indices_of(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(static_cast<int>(i));
  }
  return out;
}

TaskDataset build_task(const std::vector<RecordAnnotation>& records, const LabelTaxonomy& taxonomy,
                       TaskId task, double min_likelihood) {
  if (taxonomy.statements.empty()) throw DataError("build_task: empty taxonomy");

  // Class set and statement-code -> class-index mapping.
  TaskDataset ds;
  ds.spec.task = task;
  std::map<std::string, int> code_to_class;
  if (task == TaskId::kSubclass23) {
    std::map<std::string, int> sub_index;
    for (const auto& st : taxonomy.statements) {
      if (!st.is_diagnostic || st.diagnostic_subclass.empty()) continue;
      auto it = sub_index.find(st.diagnostic_subclass);
      if (it == sub_index.end()) {
        it = sub_index.emplace(st.diagnostic_subclass,
                               static_cast<int>(ds.spec.class_names.size()))
                 .first;
        ds.spec.class_names.push_back(st.diagnostic_subclass);
      }
      code_to_class[st.code] = it->second;
    }
  } else {
    for (const auto& st : taxonomy.statements) {
      const bool in_task = task == TaskId::kAll71 ||
                           (task == TaskId::kDiagnostic44 && st.is_diagnostic) ||
                           (task == TaskId::kRhythm12 && st.is_rhythm);
      if (!in_task) continue;
      code_to_class[st.code] = static_cast<int>(ds.spec.class_names.size());
      ds.spec.class_names.push_back(st.code);
    }
  }
  const int k = static_cast<int>(ds.spec.class_names.size());
  if (k == 0) throw DataError("build_task: task " + task_id_name(task) + " has an empty class set");

  std::vector<std::vector<std::uint8_t>> rows;
  for (const auto& rec : records) {
    if (rec.fold < 1 || rec.fold > 10) {
      throw DataError("build_task: record " + rec.record_id + " has fold " +
                      std::to_string(rec.fold) + " outside 1..10");
    }
    std::vector<std::uint8_t> row(static_cast<std::size_t>(k), 0);
    bool any = false;
    for (const auto& [code, likelihood] : rec.statements) {
      if (likelihood < min_likelihood) continue;
      const auto it = code_to_class.find(code);
      if (it == code_to_class.end()) continue;
      row[static_cast<std::size_t>(it->second)] = 1;
      any = true;
    }
    if (!any) continue;  // no positive label in this task
    ds.record_ids.push_back(rec.record_id);
    ds.record_paths.push_back(rec.file_path);
    ds.fold.push_back(rec.fold);
    ds.split.push_back(rec.fold <= 8 ? Split::kTrain : rec.fold == 9 ? Split::kVal : Split::kTest);
    rows.push_back(std::move(row));
  }

  ds.labels = LabelMatrix::Zero(static_cast<Index>(rows.size()), k);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < k; ++c) ds.labels(static_cast<Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  }
  return ds;
}

TaskDataset subsample_train(const TaskDataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subsample_train: fraction must lie in (0, 1], got " +
                      std::to_string(fraction));
  }
  const std::vector<int> train = dataset.indices_of(Split::kTrain);
  std::vector<int> perm = train;
  Rng rng = Rng(seed).child({stream::kSubsample});
  rng.shuffle(perm);
  const auto n_keep = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(train.size())));
  std::set<int> kept(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(n_keep, perm.size())));

  TaskDataset out;
  out.spec = dataset.spec;
  out.subsample_order = perm;
  std::vector<Index> keep_rows;
  for (std::size_t i = 0; i < dataset.record_ids.size(); ++i) {
    const bool is_train = dataset.split[i] == Split::kTrain;
    if (is_train && kept.find(static_cast<int>(i)) == kept.end()) continue;
    keep_rows.push_back(static_cast<Index>(i));
    out.record_ids.push_back(dataset.record_ids[i]);
    out.record_paths.push_back(dataset.record_paths[i]);
    out.fold.push_back(dataset.fold[i]);
    out.split.push_back(dataset.split[i]);
  }
  out.labels = LabelMatrix(static_cast<Index>(keep_rows.size()), dataset.labels.cols());
  for (std::size_t i = 0; i < keep_rows.size(); ++i) {
    out.labels.row(static_cast<Index>(i)) = dataset.labels.row(keep_rows[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cache

namespace {

constexpr int kCacheFormatVersion = 1;

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::uint64_t write_blob(const std::filesystem::path& path, const std::vector<float>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write cache blob: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw DataError("failed writing cache blob: " + path.string());
  return fnv1a64(data.data(), data.size() * sizeof(float));
}

std::vector<float> read_blob(const std::filesystem::path& path, std::size_t expected,
                             const std::string& expected_checksum) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open cache blob: " + path.string());
  std::vector<float> data(expected);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(expected * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(expected * sizeof(float))) {
    throw DataError("cache blob truncated: " + path.string());
  }
  char extra = 0;
  if (in.read(&extra, 1)) throw DataError("cache blob larger than manifest shape: " + path.string());
  const std::string checksum = hex64(fnv1a64(data.data(), data.size() * sizeof(float)));
  if (checksum != expected_checksum) {
    throw DataError("cache blob checksum failure: " + path.string() + " (expected " +
                    expected_checksum + ", got " + checksum + ")");
  }
  return data;
}

}  // namespace

void compute_lead_stats(const std::vector<MatF>& signals, const std::vector<int>& train_indices,
                        VecF* mean, VecF* std) {
  if (signals.empty() || train_indices.empty()) {
    throw DataError("compute_lead_stats: empty training split");
  }
  const Index leads = signals.front().rows();
  VecD sum = VecD::Zero(leads);
  VecD sum_sq = VecD::Zero(leads);
  double count = 0.0;
  for (const int i : train_indices) {
    const MatF& x = signals[static_cast<std::size_t>(i)];
    sum += x.cast<double>().rowwise().sum();
    sum_sq += x.cast<double>().array().square().matrix().rowwise().sum();
    count += static_cast<double>(x.cols());
  }
  const VecD m = sum / count;
  VecD var = (sum_sq.array() / count - m.array().square()).cwiseMax(0.0);
  VecD sd = var.array().sqrt();
  for (Index l = 0; l < leads; ++l) {
    if (sd[l] < 1e-8) sd[l] = 1.0;
  }
  *mean = m.cast<float>();
  *std = sd.cast<float>();
}

void write_dataset_cache(const std::string& dir, const DatasetCache& cache) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& meta = cache.meta;
  if (cache.signals.size() != meta.record_ids.size()) {
    throw DataError("write_dataset_cache: signal count does not match record count");
  }

  nlohmann::json manifest;
  manifest["format_version"] = kCacheFormatVersion;
  manifest["task"] = task_id_name(meta.spec.task);
  manifest["class_names"] = meta.spec.class_names;
  manifest["sampling_rate_hz"] = cache.sampling_rate_hz;
  const Index leads = cache.signals.empty() ? 0 : cache.signals.front().rows();
  const Index t = cache.signals.empty() ? 0 : cache.signals.front().cols();
  manifest["n_leads"] = leads;
  manifest["n_samples"] = t;
  manifest["lead_mean"] = std::vector<float>(cache.lead_mean.data(),
                                             cache.lead_mean.data() + cache.lead_mean.size());
  manifest["lead_std"] =
      std::vector<float>(cache.lead_std.data(), cache.lead_std.data() + cache.lead_std.size());

  std::string checksum_chain;
  nlohmann::json blobs = nlohmann::json::object();
  for (const Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const std::vector<int> idx = meta.indices_of(s);
    const std::string name = split_name(s);

    std::vector<float> sig;
    sig.reserve(idx.size() * static_cast<std::size_t>(leads * t));
    std::vector<float> lab;
    lab.reserve(idx.size() * static_cast<std::size_t>(meta.labels.cols()));
    nlohmann::json ids = nlohmann::json::array();
    nlohmann::json folds = nlohmann::json::array();
    nlohmann::json paths = nlohmann::json::array();
    for (const int i : idx) {
      const MatF& x = cache.signals[static_cast<std::size_t>(i)];
      if (x.rows() != leads || x.cols() != t) {
        throw DataError("write_dataset_cache: record " + meta.record_ids[static_cast<std::size_t>(i)] +
                        " has a different shape than the first record");
      }
      for (Index r = 0; r < x.rows(); ++r) {
        for (Index c = 0; c < x.cols(); ++c) sig.push_back(x(r, c));
      }
      for (Index c = 0; c < meta.labels.cols(); ++c) {
        lab.push_back(static_cast<float>(meta.labels(i, c)));
      }
      ids.push_back(meta.record_ids[static_cast<std::size_t>(i)]);
      folds.push_back(meta.fold[static_cast<std::size_t>(i)]);
      paths.push_back(meta.record_paths[static_cast<std::size_t>(i)]);
    }
    const std::uint64_t sig_sum = write_blob(fs::path(dir) / (name + "_signals.f32"), sig);
    const std::uint64_t lab_sum = write_blob(fs::path(dir) / (name + "_labels.f32"), lab);
    blobs[name + "_signals"] = {{"file", name + "_signals.f32"},
                                {"shape", {idx.size(), leads, t}},
                                {"checksum", hex64(sig_sum)}};
    blobs[name + "_labels"] = {{"file", name + "_labels.f32"},
                               {"shape", {idx.size(), meta.labels.cols()}},
                               {"checksum", hex64(lab_sum)}};
    manifest["record_ids"][name] = ids;
    manifest["folds"][name] = folds;
    manifest["record_paths"][name] = paths;
    checksum_chain += hex64(sig_sum) + hex64(lab_sum);
  }
  manifest["blobs"] = blobs;
  manifest["dataset_checksum"] = hex64(fnv1a64(checksum_chain));

  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write cache manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

DatasetCache load_dataset_cache(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw DataError("cannot open cache manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cache manifest parse error: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != kCacheFormatVersion) {
    throw DataError("cache manifest: unsupported format version");
  }

  DatasetCache cache;
  cache.meta.spec.task = parse_task_id(manifest.at("task").get<std::string>());
  cache.meta.spec.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  cache.sampling_rate_hz = manifest.at("sampling_rate_hz").get<double>();
  const auto mean = manifest.at("lead_mean").get<std::vector<float>>();
  const auto sd = manifest.at("lead_std").get<std::vector<float>>();
  cache.lead_mean = Eigen::Map<const VecF>(mean.data(), static_cast<Index>(mean.size()));
  cache.lead_std = Eigen::Map<const VecF>(sd.data(), static_cast<Index>(sd.size()));
  cache.dataset_checksum = manifest.at("dataset_checksum").get<std::string>();

  const Index leads = manifest.at("n_leads").get<Index>();
  const Index t = manifest.at("n_samples").get<Index>();
  const Index k = static_cast<Index>(cache.meta.spec.class_names.size());

  std::vector<std::vector<std::uint8_t>> label_rows;
  for (const Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const std::string name = split_name(s);
    const auto ids = manifest.at("record_ids").at(name).get<std::vector<std::string>>();
    const auto folds = manifest.at("folds").at(name).get<std::vector<int>>();
    const auto paths = manifest.at("record_paths").at(name).get<std::vector<std::string>>();
    const auto& sig_info = manifest.at("blobs").at(name + "_signals");
    const auto& lab_info = manifest.at("blobs").at(name + "_labels");
    const std::size_t n = ids.size();

    const std::vector<float> sig =
        read_blob(fs::path(dir) / sig_info.at("file").get<std::string>(),
                  n * static_cast<std::size_t>(leads * t),
                  sig_info.at("checksum").get<std::string>());
    const std::vector<float> lab =
        read_blob(fs::path(dir) / lab_info.at("file").get<std::string>(),
                  n * static_cast<std::size_t>(k), lab_info.at("checksum").get<std::string>());

    for (std::size_t i = 0; i < n; ++i) {
      cache.meta.record_ids.push_back(ids[i]);
      cache.meta.fold.push_back(folds[i]);
      cache.meta.record_paths.push_back(paths[i]);
      cache.meta.split.push_back(s);
      MatF x(leads, t);
      std::size_t pos = i * static_cast<std::size_t>(leads * t);
      for (Index r = 0; r < leads; ++r) {
        for (Index c = 0; c < t; ++c) x(r, c) = sig[pos++];
      }
      cache.signals.push_back(std::move(x));
      std::vector<std::uint8_t> row(static_cast<std::size_t>(k));
      for (Index c = 0; c < k; ++c) {
        row[static_cast<std::size_t>(c)] =
            lab[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)] != 0.0f ? 1 : 0;
      }
      label_rows.push_back(std::move(row));
    }
  }
  cache.meta.labels = LabelMatrix(static_cast<Index>(label_rows.size()), k);
  for (std::size_t i = 0; i < label_rows.size(); ++i) {
    for (Index c = 0; c < k; ++c) {
      cache.meta.labels(static_cast<Index>(i), c) = label_rows[i][static_cast<std::size_t>(c)];
    }
  }
  return cache;
}

}  // namespace ecgpt::ptbxl
