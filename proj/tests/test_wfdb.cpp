// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "ecgpt/errors.hpp"
#include "ecgpt/wfdb.hpp"
#include "support.hpp"

using namespace ecgpt;
using namespace ecgpt::wfdb;

TEST_CASE("parse_wfdb_header: two-signal synthetic fixture") {
  const RecordHeader h =
      parse_wfdb_header("r1 2 100 1000\nr1.dat 16 1000/mV 0 I\nr1.dat 16 1000/mV 0 II");
  CHECK(h.record_name == "r1");
  CHECK(h.n_signals == 2);
  CHECK(h.sampling_rate == 100.0);
  CHECK(h.n_samples == 1000);
  REQUIRE(h.signals.size() == 2);
  CHECK(h.signals[0].file_name == "r1.dat");
  CHECK(h.signals[0].storage_format == 16);
  CHECK(h.signals[0].gain == 1000.0);
  CHECK(h.signals[0].baseline == 0);
  CHECK(h.signals[0].unit_label == "mV");
  CHECK(h.signals[0].signal_name == "I");
  CHECK(h.signals[1].signal_name == "II");
}

TEST_CASE("parse_wfdb_header: gain/baseline variants and defaults") {
  const RecordHeader h = parse_wfdb_header(
      "# a comment line\n"
      "rec 3 500 5000\n"
      "rec.dat 16 1000.0(-12)/mV 16 0 -119 0 0 V6\n"
      "rec.dat 16\n"
      "rec.dat 16 0 16 7 0 0 0 aVL\n");
  CHECK(h.sampling_rate == 500.0);
  CHECK(h.signals[0].baseline == -12);  // parenthesized baseline wins
  CHECK(h.signals[0].gain == 1000.0);
  CHECK(h.signals[0].signal_name == "V6");
  CHECK(h.signals[1].gain == kDefaultGain);  // absent gain -> 200 ADC/mV
  CHECK(h.signals[1].baseline == 0);
  CHECK(h.signals[2].gain == kDefaultGain);  // zero gain means uncalibrated
  CHECK(h.signals[2].baseline == 7);         // adc zero serves as baseline
  CHECK(h.signals[2].signal_name == "aVL");
}

TEST_CASE("parse_wfdb_header: errors name the line") {
  CHECK_THROWS_WITH_AS(parse_wfdb_header("r1 0 100 1000"),
                       doctest::Contains("line 1"), DataError);
  CHECK_THROWS_AS(parse_wfdb_header("r1 2 100 1000\nr1.dat 16 1000/mV 0 I"), DataError);
  CHECK_THROWS_WITH_AS(parse_wfdb_header("r1 1 -5 1000\nr1.dat 16"),
                       doctest::Contains("sampling rate"), DataError);
  CHECK_THROWS_AS(parse_wfdb_header("r1 1 100\nr1.dat 16"), DataError);
  CHECK_THROWS_AS(parse_wfdb_header(""), DataError);
  CHECK_THROWS_AS(parse_wfdb_header("r1 1 100 0\nr1.dat 16"), DataError);
}

namespace {

RecordHeader simple_header(int n_signals, long n_samples, double gain = 1000.0, int baseline = 0) {
  RecordHeader h;
  h.record_name = "r";
  h.n_signals = n_signals;
  h.sampling_rate = 100.0;
  h.n_samples = n_samples;
  for (int i = 0; i < n_signals; ++i) {
    SignalSpec s;
    s.file_name = "r.dat";
    s.storage_format = 16;
    s.gain = gain;
    s.baseline = baseline;
    h.signals.push_back(s);
  }
  return h;
}

}  // namespace

TEST_CASE("decode_signal_format16: hand-decoded values") {
  const RecordHeader h = simple_header(1, 3);
  // adc = 0, 1000 (0xE8 0x03), -32768 sentinel
  const std::vector<std::uint8_t> bytes = {0x00, 0x00, 0xE8, 0x03, 0x00, 0x80};
  const EcgRecord rec = decode_signal_format16(bytes, h);
  CHECK(rec.samples(0, 0) == 0.0f);
  CHECK(rec.samples(0, 1) == 1.0f);  // (1000 - 0) / 1000
  CHECK(rec.samples(0, 2) == 0.0f);  // sentinel imputed
  CHECK(rec.missing_mask(0, 0) == 0);
  CHECK(rec.missing_mask(0, 2) == 1);
}

TEST_CASE("decode_signal_format16: baseline and interleaving") {
  const RecordHeader h = simple_header(2, 2, 500.0, 100);
  // samples interleaved by time: t0 -> (600, 100), t1 -> (100, -400)
  auto le = [](std::int16_t v) {
    const auto u = static_cast<std::uint16_t>(v);
    return std::pair<std::uint8_t, std::uint8_t>{static_cast<std::uint8_t>(u & 0xff),
                                                 static_cast<std::uint8_t>(u >> 8)};
  };
  std::vector<std::uint8_t> bytes;
  for (const std::int16_t v : {600, 100, 100, -400}) {
    const auto [lo, hi] = le(v);
    bytes.push_back(lo);
    bytes.push_back(hi);
  }
  const EcgRecord rec = decode_signal_format16(bytes, h);
  CHECK(rec.samples(0, 0) == 1.0f);   // (600-100)/500
  CHECK(rec.samples(1, 0) == 0.0f);   // (100-100)/500
  CHECK(rec.samples(0, 1) == 0.0f);
  CHECK(rec.samples(1, 1) == -1.0f);  // (-400-100)/500
}

TEST_CASE("decode_signal_format16: errors") {
  const RecordHeader h = simple_header(2, 4);
  CHECK_THROWS_WITH_AS(decode_signal_format16(std::vector<std::uint8_t>(15, 0), h),
                       doctest::Contains("bytes"), DataError);
  RecordHeader bad = h;
  bad.signals[1].storage_format = 212;
  CHECK_THROWS_WITH_AS(decode_signal_format16(std::vector<std::uint8_t>(16, 0), bad),
                       doctest::Contains("unsupported format"), DataError);
}

TEST_CASE("decode-encode round trip reproduces the byte stream") {
  Rng rng(321);
  for (int rep = 0; rep < 20; ++rep) {
    const int n_sig = 1 + static_cast<int>(rng.uniform_index(4));
    const long n_samp = 1 + static_cast<long>(rng.uniform_index(64));
    const double gain = 200.0 + static_cast<double>(rng.uniform_index(1800));
    const int baseline = static_cast<int>(rng.uniform_index(201)) - 100;
    const RecordHeader h = simple_header(n_sig, n_samp, gain, baseline);
    std::vector<std::uint8_t> bytes;
    for (long t = 0; t < n_samp; ++t) {
      for (int s = 0; s < n_sig; ++s) {
        // full int16 range including occasional sentinels
        const auto adc = static_cast<std::int16_t>(
            static_cast<long>(rng.uniform_index(65536)) - 32768);
        const auto u = static_cast<std::uint16_t>(adc);
        bytes.push_back(static_cast<std::uint8_t>(u & 0xff));
        bytes.push_back(static_cast<std::uint8_t>(u >> 8));
      }
    }
    const EcgRecord rec = decode_signal_format16(bytes, h);
    CHECK(encode_signal_format16(rec) == bytes);
  }
}

TEST_CASE("read_record on a synthetic tree") {
  const std::string dir = testsupport::temp_dir("wfdb_read");
  testsupport::SyntheticPtbxlOptions opt;
  opt.n_records = 3;
  testsupport::write_synthetic_ptbxl(dir, opt);
  const EcgRecord rec = read_record(dir, "records100/00000/00001_lr");
  CHECK(rec.header.n_signals == 12);
  CHECK(rec.header.sampling_rate == 100.0);
  CHECK(rec.samples.rows() == 12);
  CHECK(rec.samples.cols() == opt.n_samples);
}

// Runs only when a real PTB-XL tree is supplied via ECGPT_PTBXL_ROOT.
TEST_CASE("real PTB-XL low-rate header (conditional)") {
  const char* root = std::getenv("ECGPT_PTBXL_ROOT");
  if (root == nullptr) return;
  namespace fs = std::filesystem;
  fs::path hea;
  for (const auto& entry : fs::recursive_directory_iterator(fs::path(root) / "records100")) {
    if (entry.path().extension() == ".hea") {
      hea = entry.path();
      break;
    }
  }
  REQUIRE(!hea.empty());
  const RecordHeader h = parse_wfdb_header(testsupport::read_file(hea.string()));
  CHECK(h.sampling_rate == 100.0);
  CHECK(h.n_signals == 12);
}
