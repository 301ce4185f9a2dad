// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "ecgpt/errors.hpp"
#include "ecgpt/ptbxl.hpp"
#include "ecgpt/wfdb.hpp"
#include "support.hpp"

using namespace ecgpt;
using namespace ecgpt::ptbxl;

TEST_CASE("parse_statement_map") {
  const auto m = parse_statement_map("{'NORM': 100.0, 'SR': 0.0}");
  REQUIRE(m.size() == 2);
  CHECK(m.at("NORM") == 100.0);
  CHECK(m.at("SR") == 0.0);

  CHECK(parse_statement_map("{}").empty());
  CHECK(parse_statement_map("  { \"afib\" : 80 }  ").at("AFIB") == 80.0);

  CHECK_THROWS_AS(parse_statement_map("{'AFIB' 80}"), DataError);
  CHECK_THROWS_AS(parse_statement_map("{'AFIB': 80"), DataError);
  CHECK_THROWS_AS(parse_statement_map("'AFIB': 80}"), DataError);
  CHECK_THROWS_AS(parse_statement_map("{'AFIB': abc}"), DataError);
  CHECK_THROWS_AS(parse_statement_map("{'AFIB': 120}"), DataError);
  CHECK_THROWS_AS(parse_statement_map("{'AFIB': 80} x"), DataError);
}

namespace {

LabelTaxonomy two_statement_taxonomy() {
  LabelTaxonomy tax;
  tax.statements.push_back({"NORM", true, false, "SUB_NORM"});
  tax.statements.push_back({"AFIB", true, true, "SUB_AFIB"});
  return tax;
}

RecordAnnotation make_record(const std::string& id, std::map<std::string, double> codes, int fold) {
  RecordAnnotation r;
  r.record_id = id;
  r.statements = std::move(codes);
  r.fold = fold;
  r.file_path = "records100/00000/" + id;
  return r;
}

}  // namespace

TEST_CASE("build_task: constructed micro-fixture") {
  const std::vector<RecordAnnotation> records = {
      make_record("a", {{"NORM", 100.0}}, 9),
      make_record("b", {{"AFIB", 80.0}}, 10),
  };
  const TaskDataset ds = build_task(records, two_statement_taxonomy(), TaskId::kAll71);
  REQUIRE(ds.record_ids.size() == 2);
  CHECK(ds.spec.class_names == std::vector<std::string>{"NORM", "AFIB"});
  CHECK(ds.labels(0, 0) == 1);
  CHECK(ds.labels(0, 1) == 0);
  CHECK(ds.labels(1, 0) == 0);
  CHECK(ds.labels(1, 1) == 1);
  CHECK(ds.split[0] == Split::kVal);
  CHECK(ds.split[1] == Split::kTest);
}

TEST_CASE("build_task: positivity rule, drops and thresholds") {
  const std::vector<RecordAnnotation> records = {
      make_record("zero_likelihood", {{"NORM", 0.0}}, 1),   // still positive
      make_record("unknown_code", {{"XXXX", 100.0}}, 2),    // no label -> dropped
      make_record("mixed", {{"NORM", 40.0}, {"AFIB", 90.0}}, 3),
  };
  const TaskDataset ds = build_task(records, two_statement_taxonomy(), TaskId::kAll71);
  REQUIRE(ds.record_ids.size() == 2);
  CHECK(ds.record_ids[0] == "zero_likelihood");
  CHECK(ds.labels(0, 0) == 1);
  CHECK(ds.labels(1, 0) == 1);
  CHECK(ds.labels(1, 1) == 1);

  // configurable threshold: only likelihood >= 50 counts
  const TaskDataset strict = build_task(records, two_statement_taxonomy(), TaskId::kAll71, 50.0);
  REQUIRE(strict.record_ids.size() == 1);
  CHECK(strict.record_ids[0] == "mixed");
  CHECK(strict.labels(0, 0) == 0);
  CHECK(strict.labels(0, 1) == 1);
}

TEST_CASE("build_task: per-task class sets and errors") {
  LabelTaxonomy tax = two_statement_taxonomy();
  tax.statements.push_back({"SR", false, true, ""});     // rhythm only
  tax.statements.push_back({"LVOLT", false, false, ""}); // form only
  const std::vector<RecordAnnotation> records = {
      make_record("a", {{"NORM", 100.0}, {"SR", 0.0}}, 1),
      make_record("b", {{"AFIB", 80.0}, {"LVOLT", 50.0}}, 9),
      make_record("c", {{"LVOLT", 50.0}}, 10),
  };
  CHECK(build_task(records, tax, TaskId::kAll71).spec.class_names.size() == 4);
  CHECK(build_task(records, tax, TaskId::kDiagnostic44).spec.class_names ==
        std::vector<std::string>{"NORM", "AFIB"});
  CHECK(build_task(records, tax, TaskId::kRhythm12).spec.class_names ==
        std::vector<std::string>{"AFIB", "SR"});
  CHECK(build_task(records, tax, TaskId::kSubclass23).spec.class_names ==
        std::vector<std::string>{"SUB_NORM", "SUB_AFIB"});

  LabelTaxonomy no_rhythm;
  no_rhythm.statements.push_back({"NORM", true, false, ""});
  CHECK_THROWS_AS(build_task(records, no_rhythm, TaskId::kRhythm12), DataError);
  CHECK_THROWS_AS(
      build_task({make_record("bad", {{"NORM", 10.0}}, 11)}, tax, TaskId::kAll71), DataError);
  CHECK_THROWS_AS(parse_task_id("all_72"), ConfigError);
}

TEST_CASE("synthetic full taxonomy yields the benchmark class counts and split ratio") {
  const std::string dir = testsupport::temp_dir("ptbxl_counts");
  testsupport::SyntheticPtbxlOptions opt;
  opt.n_records = 600;
  testsupport::write_synthetic_ptbxl(dir, opt);
  const LabelTaxonomy tax = load_taxonomy_csv(dir + "/scp_statements.csv");
  CHECK(tax.statements.size() == 71);
  const auto records = load_metadata_csv(dir + "/ptbxl_database.csv", 100);
  CHECK(records.size() == 600);

  CHECK(build_task(records, tax, TaskId::kAll71).spec.class_names.size() == 71);
  CHECK(build_task(records, tax, TaskId::kDiagnostic44).spec.class_names.size() == 44);
  CHECK(build_task(records, tax, TaskId::kSubclass23).spec.class_names.size() == 23);
  CHECK(build_task(records, tax, TaskId::kRhythm12).spec.class_names.size() == 12);

  const TaskDataset all = build_task(records, tax, TaskId::kAll71);
  const double n = static_cast<double>(all.record_ids.size());
  const double train = static_cast<double>(all.indices_of(Split::kTrain).size());
  const double val = static_cast<double>(all.indices_of(Split::kVal).size());
  const double test = static_cast<double>(all.indices_of(Split::kTest).size());
  CHECK(std::abs(train / n - 0.8) < 0.02);
  CHECK(std::abs(val / n - 0.1) < 0.02);
  CHECK(std::abs(test / n - 0.1) < 0.02);
}

TEST_CASE("build_task is deterministic") {
  const std::string dir = testsupport::temp_dir("ptbxl_det");
  testsupport::SyntheticPtbxlOptions opt;
  opt.n_records = 60;
  testsupport::write_synthetic_ptbxl(dir, opt);
  const LabelTaxonomy tax = load_taxonomy_csv(dir + "/scp_statements.csv");
  const auto records = load_metadata_csv(dir + "/ptbxl_database.csv", 100);
  const TaskDataset a = build_task(records, tax, TaskId::kAll71);
  const TaskDataset b = build_task(records, tax, TaskId::kAll71);
  CHECK(a.record_ids == b.record_ids);
  CHECK(a.labels == b.labels);
  CHECK(a.fold == b.fold);
}

TEST_CASE("subsample_train") {
  std::vector<RecordAnnotation> records;
  LabelTaxonomy tax = two_statement_taxonomy();
  for (int i = 0; i < 100; ++i) {
    records.push_back(make_record("t" + std::to_string(i), {{"NORM", 100.0}}, 1 + i % 8));
  }
  for (int i = 0; i < 10; ++i) {
    records.push_back(make_record("v" + std::to_string(i), {{"NORM", 100.0}}, 9));
    records.push_back(make_record("s" + std::to_string(i), {{"AFIB", 100.0}}, 10));
  }
  const TaskDataset ds = build_task(records, tax, TaskId::kAll71);
  REQUIRE(ds.indices_of(Split::kTrain).size() == 100);

  SUBCASE("fraction 1.0 is the identity") {
    const TaskDataset full = subsample_train(ds, 1.0, 7);
    CHECK(full.record_ids == ds.record_ids);
    CHECK(full.labels == ds.labels);
  }
  SUBCASE("deterministic and correctly sized") {
    const TaskDataset a = subsample_train(ds, 0.1, 7);
    const TaskDataset b = subsample_train(ds, 0.1, 7);
    CHECK(a.indices_of(Split::kTrain).size() == 10);
    CHECK(a.record_ids == b.record_ids);
    CHECK(a.indices_of(Split::kVal).size() == 10);
    CHECK(a.indices_of(Split::kTest).size() == 10);
    const TaskDataset c = subsample_train(ds, 0.1, 8);
    CHECK(a.record_ids != c.record_ids);  // different seed, different subset
  }
  SUBCASE("ceil sizing") {
    CHECK(subsample_train(ds, 0.101, 7).indices_of(Split::kTrain).size() == 11);
    CHECK(subsample_train(ds, 0.001, 7).indices_of(Split::kTrain).size() == 1);
  }
  SUBCASE("nesting: smaller fractions are subsets of larger ones") {
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
      const TaskDataset small = subsample_train(ds, 0.1, seed);
      const TaskDataset large = subsample_train(ds, 0.3, seed);
      std::set<std::string> large_ids(large.record_ids.begin(), large.record_ids.end());
      for (const auto& id : small.record_ids) CHECK(large_ids.count(id) == 1);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(subsample_train(ds, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(subsample_train(ds, -0.5, 1), ConfigError);
    CHECK_THROWS_AS(subsample_train(ds, 1.5, 1), ConfigError);
  }
}

TEST_CASE("dataset cache round trip, checksum stability and corruption detection") {
  const std::string dir = testsupport::temp_dir("ptbxl_cache_src");
  testsupport::SyntheticPtbxlOptions opt;
  opt.n_records = 40;
  testsupport::write_synthetic_ptbxl(dir, opt);
  const LabelTaxonomy tax = load_taxonomy_csv(dir + "/scp_statements.csv");
  const auto records = load_metadata_csv(dir + "/ptbxl_database.csv", 100);
  TaskDataset ds = build_task(records, tax, TaskId::kAll71);

  DatasetCache cache;
  cache.sampling_rate_hz = 100;
  for (const auto& path : ds.record_paths) {
    cache.signals.push_back(wfdb::read_record(dir, path).samples);
  }
  cache.meta = ds;
  compute_lead_stats(cache.signals, ds.indices_of(Split::kTrain), &cache.lead_mean,
                     &cache.lead_std);

  const std::string cache_dir = testsupport::temp_dir("ptbxl_cache_out");
  write_dataset_cache(cache_dir, cache);
  const DatasetCache loaded = load_dataset_cache(cache_dir);
  CHECK(loaded.meta.spec.class_names == ds.spec.class_names);
  CHECK(loaded.meta.record_ids.size() == ds.record_ids.size());
  CHECK(loaded.signals.size() == cache.signals.size());
  // per-record content survives (cache orders records train, val, test)
  {
    std::map<std::string, const MatF*> by_id;
    for (std::size_t i = 0; i < ds.record_ids.size(); ++i) {
      by_id[ds.record_ids[i]] = &cache.signals[i];
    }
    for (std::size_t i = 0; i < loaded.meta.record_ids.size(); ++i) {
      const MatF& original = *by_id.at(loaded.meta.record_ids[i]);
      CHECK(loaded.signals[i] == original);
    }
  }

  // rewriting the same content leaves the checksum unchanged
  const std::string cache_dir2 = testsupport::temp_dir("ptbxl_cache_out2");
  write_dataset_cache(cache_dir2, cache);
  const DatasetCache reloaded = load_dataset_cache(cache_dir2);
  CHECK(reloaded.dataset_checksum == loaded.dataset_checksum);

  // flip one byte in a blob: checksum verification must fail
  {
    const std::string blob = cache_dir + "/train_signals.f32";
    std::string bytes = testsupport::read_file(blob);
    REQUIRE(!bytes.empty());
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    std::ofstream out(blob, std::ios::binary);
    out << bytes;
    out.close();
    CHECK_THROWS_WITH_AS(load_dataset_cache(cache_dir), doctest::Contains("checksum"), DataError);
  }
}
