// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/wfdb.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ecgpt/errors.hpp"

namespace ecgpt::wfdb {

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

[[noreturn]] void fail(int line_no, const std::string& what) {
  throw DataError("wfdb header parse error at line " + std::to_string(line_no) + ": " + what);
}

bool parse_long(const std::string& tok, long* out) {
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (end == tok.c_str() || *end != '\0') return false;
  *out = v;
  return true;
}

// Leading numeric value; WFDB numeric fields may carry suffixes such as
// `/counter` or `(base)` that we do not interpret here.
bool parse_leading_double(const std::string& tok, double* out) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str()) return false;
  *out = v;
  return true;
}

bool is_numeric_token(const std::string& tok) {
  char* end = nullptr;
  std::strtod(tok.c_str(), &end);
  return end != tok.c_str() && *end == '\0';
}

// Gain field: gain[(baseline)][/units]. A zero gain means "uncalibrated" and
// falls back to the WFDB default of 200 ADC/mV.
void parse_gain_token(const std::string& tok, int line_no, SignalSpec* spec,
                      bool* baseline_given) {
  std::string s = tok;
  const auto slash = s.find('/');
  if (slash != std::string::npos) {
    spec->unit_label = s.substr(slash + 1);
    s = s.substr(0, slash);
  }
  const auto open = s.find('(');
  if (open != std::string::npos) {
    const auto close = s.find(')', open);
    if (close == std::string::npos) fail(line_no, "unterminated baseline in gain field '" + tok + "'");
    long b = 0;
    if (!parse_long(s.substr(open + 1, close - open - 1), &b)) {
      fail(line_no, "non-integer baseline in gain field '" + tok + "'");
    }
    spec->baseline = static_cast<int>(b);
    *baseline_given = true;
    s = s.substr(0, open);
  }
  double g = 0.0;
  if (!parse_leading_double(s, &g)) fail(line_no, "non-numeric gain '" + tok + "'");
  if (g < 0.0) fail(line_no, "negative gain");
  spec->gain = g == 0.0 ? kDefaultGain : g;
}

}  // namespace

RecordHeader parse_wfdb_header(const std::string& text) {
  RecordHeader header;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool have_record_line = false;
  int signals_seen = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;

    const std::vector<std::string> tokens = tokenize(line);
    if (!have_record_line) {
      if (tokens.size() < 4) fail(line_no, "record line needs `name n_signals fs n_samples`");
      header.record_name = tokens[0].substr(0, tokens[0].find('/'));
      long n_sig = 0;
      if (!parse_long(tokens[1], &n_sig)) fail(line_no, "non-integer signal count");
      if (n_sig <= 0) fail(line_no, "non-positive signal count");
      double fs = 0.0;
      if (!parse_leading_double(tokens[2], &fs)) fail(line_no, "non-numeric sampling rate");
      if (fs <= 0.0) fail(line_no, "non-positive sampling rate");
      long n_samp = 0;
      if (!parse_long(tokens[3], &n_samp)) fail(line_no, "non-integer sample count");
      if (n_samp <= 0) fail(line_no, "non-positive sample count");
      header.n_signals = static_cast<int>(n_sig);
      header.sampling_rate = fs;
      header.n_samples = n_samp;
      have_record_line = true;
      continue;
    }

    if (signals_seen >= header.n_signals) {
      fail(line_no, "more signal lines than the declared n_signals=" +
                        std::to_string(header.n_signals));
    }
    if (tokens.size() < 2) fail(line_no, "signal line needs at least file name and format");
    SignalSpec spec;
    spec.file_name = tokens[0];
    {
      // Format code may carry xNN, :skew, +offset suffixes.
      const std::string& f = tokens[1];
      char* end = nullptr;
      const long code = std::strtol(f.c_str(), &end, 10);
      if (end == f.c_str()) fail(line_no, "non-numeric storage format '" + f + "'");
      spec.storage_format = static_cast<int>(code);
    }
    bool baseline_given = false;
    std::size_t next = 2;
    if (next < tokens.size()) {
      parse_gain_token(tokens[next], line_no, &spec, &baseline_given);
      ++next;
    }
    // Up to five numeric fields may follow the gain (adc resolution, adc
    // zero, initial value, checksum, block size); the description starts at
    // the first non-numeric token. The ADC zero serves as the baseline when
    // no parenthesized baseline was given.
    int numeric_seen = 0;
    while (next < tokens.size() && numeric_seen < 5 && is_numeric_token(tokens[next])) {
      if (numeric_seen == 1 && !baseline_given) {
        long adc_zero = 0;
        if (parse_long(tokens[next], &adc_zero)) spec.baseline = static_cast<int>(adc_zero);
      }
      ++numeric_seen;
      ++next;
    }
    std::string desc;
    for (std::size_t i = next; i < tokens.size(); ++i) {
      if (!desc.empty()) desc += ' ';
      desc += tokens[i];
    }
    spec.signal_name = desc;
    header.signals.push_back(std::move(spec));
    ++signals_seen;
  }

  if (!have_record_line) throw DataError("wfdb header parse error: empty header");
  if (signals_seen != header.n_signals) {
    throw DataError("wfdb header parse error: expected " + std::to_string(header.n_signals) +
                    " signal lines, found " + std::to_string(signals_seen));
  }
  return header;
}

EcgRecord decode_signal_format16(const std::vector<std::uint8_t>& bytes,
                                 const RecordHeader& header) {
  for (std::size_t s = 0; s < header.signals.size(); ++s) {
    if (header.signals[s].storage_format != 16) {
      throw DataError("unsupported format " + std::to_string(header.signals[s].storage_format) +
                      " for signal " + std::to_string(s) + " (only format 16 is supported)");
    }
  }
  const std::size_t expected =
      2 * static_cast<std::size_t>(header.n_signals) * static_cast<std::size_t>(header.n_samples);
  if (bytes.size() != expected) {
    throw DataError("format-16 payload has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expected));
  }

  EcgRecord record;
  record.header = header;
  record.samples = MatF::Zero(header.n_signals, header.n_samples);
  record.missing_mask = MaskMatrix::Zero(header.n_signals, header.n_samples);
  std::size_t pos = 0;
  for (long t = 0; t < header.n_samples; ++t) {
    for (int s = 0; s < header.n_signals; ++s) {
      const auto lo = static_cast<std::uint16_t>(bytes[pos]);
      const auto hi = static_cast<std::uint16_t>(bytes[pos + 1]);
      pos += 2;
      const auto adc = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
      if (adc == kMissingAdc) {
        record.missing_mask(s, t) = 1;
        record.samples(s, t) = 0.0f;
      } else {
        const auto& spec = header.signals[static_cast<std::size_t>(s)];
        record.samples(s, t) =
            static_cast<float>((static_cast<double>(adc) - spec.baseline) / spec.gain);
      }
    }
  }
  return record;
}

std::vector<std::uint8_t> encode_signal_format16(const EcgRecord& record) {
  const auto& header = record.header;
  std::vector<std::uint8_t> bytes;
  bytes.reserve(2 * static_cast<std::size_t>(header.n_signals) *
                static_cast<std::size_t>(header.n_samples));
  for (long t = 0; t < header.n_samples; ++t) {
    for (int s = 0; s < header.n_signals; ++s) {
      std::int16_t adc;
      if (record.missing_mask(s, t)) {
        adc = kMissingAdc;
      } else {
        const auto& spec = header.signals[static_cast<std::size_t>(s)];
        const double value = static_cast<double>(record.samples(s, t)) * spec.gain + spec.baseline;
        adc = static_cast<std::int16_t>(std::lround(value));
      }
      const auto u = static_cast<std::uint16_t>(adc);
      bytes.push_back(static_cast<std::uint8_t>(u & 0xff));
      bytes.push_back(static_cast<std::uint8_t>(u >> 8));
    }
  }
  return bytes;
}

EcgRecord read_record(const std::string& root, const std::string& record_path) {
  namespace fs = std::filesystem;
  const fs::path hea = fs::path(root) / (record_path + ".hea");
  std::ifstream hin(hea, std::ios::binary);
  if (!hin) throw DataError("cannot open header file: " + hea.string());
  std::ostringstream hs;
  hs << hin.rdbuf();
  const RecordHeader header = parse_wfdb_header(hs.str());

  for (const auto& spec : header.signals) {
    if (spec.file_name != header.signals.front().file_name) {
      throw DataError("record " + record_path + ": multi-file records are not supported");
    }
  }
  const fs::path dat = hea.parent_path() / header.signals.front().file_name;
  std::ifstream din(dat, std::ios::binary);
  if (!din) throw DataError("cannot open signal file: " + dat.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(din)),
                                  std::istreambuf_iterator<char>());
  return decode_signal_format16(bytes, header);
}

}  // namespace ecgpt::wfdb
