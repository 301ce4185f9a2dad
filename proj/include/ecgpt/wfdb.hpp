// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecgpt/types.hpp"

namespace ecgpt::wfdb {

constexpr std::int16_t kMissingAdc = -32768;
constexpr double kDefaultGain = 200.0;  // ADC units per mV

struct SignalSpec {
  std::string file_name;
  int storage_format = 16;
  double gain = kDefaultGain;  // ADC units per mV
  int baseline = 0;            // ADC units
  std::string unit_label = "mV";
  std::string signal_name;
};

struct RecordHeader {
  std::string record_name;
  int n_signals = 0;
  double sampling_rate = 0.0;  // Hz
  long n_samples = 0;
  std::vector<SignalSpec> signals;
};

struct EcgRecord {
  RecordHeader header;
  MatF samples;             // [n_signals x n_samples], millivolts
  MaskMatrix missing_mask;  // 1 where the ADC sentinel was found
};

// Parses a WFDB text header: a record line `name n_signals fs n_samples`
// followed by one line per signal carrying file name, format code, gain with
// optional (baseline) and /units, and a trailing signal description. Absent
// gain defaults to 200 ADC/mV, absent baseline to 0. Comment lines start
// with '#'. Errors name the offending line. Throws DataError.
RecordHeader parse_wfdb_header(const std::string& text);

// Decodes interleaved little-endian signed 16-bit samples (storage format 16)
// to millivolts: value = (adc - baseline) / gain. The ADC value -32768 is a
// missing-sample sentinel; it is flagged and imputed to 0.0 mV.
EcgRecord decode_signal_format16(const std::vector<std::uint8_t>& bytes,
                                 const RecordHeader& header);

// Inverse of the decoder for round-trip checks: quantizes back to ADC counts
// and re-emits the interleaved byte stream (missing positions become the
// sentinel).
std::vector<std::uint8_t> encode_signal_format16(const EcgRecord& record);

// Reads `<root>/<record_path>.hea` and its companion .dat file.
EcgRecord read_record(const std::string& root, const std::string& record_path);

}  // namespace ecgpt::wfdb
