// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ecgpt/nn.hpp"
#include "ecgpt/ptbxl.hpp"
#include "ecgpt/rng.hpp"
#include "ecgpt/train.hpp"

namespace ecgpt::testsupport {

// 2-block, 8-channel model family used across the unit tests.
inline ModelConfig tiny_config(int leads = 2, int n_classes = 2) {
  ModelConfig cfg;
  cfg.in_leads = leads;
  cfg.stem_channels = 8;
  cfg.stem_stride = 1;
  cfg.stages = {{2, 8, 1}};
  cfg.bottleneck_expansion = 1.0;
  cfg.se_reduction = 4;
  cfg.kernel_size = 3;
  cfg.n_classes = n_classes;
  return cfg;
}

struct MicroTaskOptions {
  int n_records = 20;
  int n_classes = 2;
  int leads = 2;
  int t = 64;
  bool with_test = false;
  std::uint64_t seed = 42;
  double noise = 0.05;
  double amplitude_step = 0.9;  // spacing between class amplitudes
};

// Synthetic multi-label task whose classes are sinusoids of distinct
// frequency and amplitude; pooled features of a random conv backbone separate
// them linearly. Labels are one-hot, folds round-robin so splits stay
// class-balanced.
inline TaskArrays make_micro_task(const MicroTaskOptions& opt) {
  ptbxl::TaskDataset meta;
  meta.spec.task = ptbxl::TaskId::kAll71;  // spec label only; class set is synthetic
  for (int c = 0; c < opt.n_classes; ++c) meta.spec.class_names.push_back("C" + std::to_string(c));
  meta.labels = LabelMatrix::Zero(opt.n_records, opt.n_classes);

  Rng rng(opt.seed);
  std::vector<MatF> signals;
  for (int i = 0; i < opt.n_records; ++i) {
    const int cls = i % opt.n_classes;
    meta.record_ids.push_back("r" + std::to_string(i));
    meta.record_paths.push_back("");
    meta.labels(i, cls) = 1;

    // Round-robin within each class so every split sees every class.
    const int rank = i / opt.n_classes;
    const int per_class = (opt.n_records + opt.n_classes - 1) / opt.n_classes;
    int fold;
    if (opt.with_test) {
      const int train_upto = (per_class * 6) / 10;
      const int val_upto = (per_class * 8) / 10;
      fold = rank < train_upto ? 1 + (rank % 8) : rank < val_upto ? 9 : 10;
    } else {
      const int train_upto = (per_class * 6) / 10;
      fold = rank < train_upto ? 1 + (rank % 8) : 9;
    }
    meta.fold.push_back(fold);
    meta.split.push_back(fold <= 8   ? ptbxl::Split::kTrain
                         : fold == 9 ? ptbxl::Split::kVal
                                     : ptbxl::Split::kTest);

    const double freq = 2.0 + 3.0 * cls;
    const double amp = 0.5 + opt.amplitude_step * cls;
    const double phase = rng.uniform() * 6.283185307179586;
    MatF x(opt.leads, opt.t);
    for (int l = 0; l < opt.leads; ++l) {
      for (int tt = 0; tt < opt.t; ++tt) {
        const double arg = 6.283185307179586 * freq * tt / opt.t + phase + 0.4 * l;
        x(l, tt) = static_cast<float>((1.0 + 0.3 * l) * amp * std::sin(arg) +
                                      opt.noise * rng.normal());
      }
    }
    signals.push_back(std::move(x));
  }
  return task_arrays_from_raw(meta, signals);
}

// ---------------------------------------------------------------------------
// Synthetic PTB-XL directory tree (metadata + taxonomy + WFDB files)

struct SyntheticPtbxlOptions {
  int n_records = 400;
  int n_samples = 40;
  int n_leads = 12;
  std::uint64_t seed = 7;
  bool full_taxonomy = true;  // 71 statements: 44 diagnostic / 23 subclasses / 12 rhythm
};

inline void write_synthetic_ptbxl(const std::string& dir, const SyntheticPtbxlOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "records100" / "00000");

  std::vector<std::string> codes;
  {
    std::ofstream tax(fs::path(dir) / "scp_statements.csv");
    tax << ",description,diagnostic,form,rhythm,diagnostic_class,diagnostic_subclass\n";
    const int n_diag = opt.full_taxonomy ? 44 : 2;
    const int n_sub = opt.full_taxonomy ? 23 : 2;
    const int n_rhythm = opt.full_taxonomy ? 12 : 1;
    const int n_form = opt.full_taxonomy ? 15 : 1;
    for (int i = 0; i < n_diag; ++i) {
      const std::string code = "D" + std::to_string(i);
      tax << code << ",diag statement,1.0,,,CLS" << (i % 5) << ",SUB" << (i % n_sub) << "\n";
      codes.push_back(code);
    }
    for (int i = 0; i < n_rhythm; ++i) {
      const std::string code = "R" + std::to_string(i);
      tax << code << ",rhythm statement,,,1.0,,\n";
      codes.push_back(code);
    }
    for (int i = 0; i < n_form; ++i) {
      const std::string code = "F" + std::to_string(i);
      tax << code << ",form statement,,1.0,,,\n";
      codes.push_back(code);
    }
  }

  Rng rng(opt.seed);
  std::ofstream db(fs::path(dir) / "ptbxl_database.csv");
  db << "ecg_id,patient_id,scp_codes,strat_fold,filename_lr,filename_hr\n";
  const double likelihoods[] = {0.0, 15.0, 35.0, 50.0, 80.0, 100.0};
  for (int i = 1; i <= opt.n_records; ++i) {
    char base[32];
    std::snprintf(base, sizeof(base), "%05d_lr", i);
    const std::string rel = "records100/00000/" + std::string(base);

    const int n_codes = 1 + static_cast<int>(rng.uniform_index(3));
    std::string scp = "{";
    for (int c = 0; c < n_codes; ++c) {
      if (c) scp += ", ";
      scp += "'" + codes[rng.uniform_index(codes.size())] + "': ";
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.1f", likelihoods[rng.uniform_index(6)]);
      scp += buf;
    }
    scp += "}";
    db << i << "," << (1000 + i) << ",\"" << scp << "\"," << (1 + (i - 1) % 10) << "," << rel
       << "," << rel << "\n";

    std::ofstream hea(fs::path(dir) / (rel + ".hea"));
    hea << base << " " << opt.n_leads << " 100 " << opt.n_samples << "\n";
    for (int s = 0; s < opt.n_leads; ++s) {
      hea << base << ".dat 16 1000.0(0)/mV 16 0 0 0 0 L" << s << "\n";
    }
    std::ofstream dat(fs::path(dir) / (rel + ".dat"), std::ios::binary);
    for (int t = 0; t < opt.n_samples; ++t) {
      for (int s = 0; s < opt.n_leads; ++s) {
        const auto adc = static_cast<std::int16_t>(
            static_cast<long>(rng.uniform_index(4001)) - 2000);
        const auto u = static_cast<std::uint16_t>(adc);
        const char bytes[2] = {static_cast<char>(u & 0xff), static_cast<char>(u >> 8)};
        dat.write(bytes, 2);
      }
    }
  }
}

inline std::string temp_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("ecgpt_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Moves every tensor off its init value so relu kinks sit at generic
// positions. A freshly initialized model has zero betas and zero running
// means, which places pre-activation values exactly at the kink wherever an
// activation column is zero; the loss is non-differentiable there and central
// differences straddle the kink.
template <class S>
inline void jitter_model(Model<S>& m, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& ref : tensor_refs(m, true)) {
    for (Index i = 0; i < ref.tensor->size(); ++i) {
      if (ref.kind == TensorKind::kNormRunningVar) {
        ref.tensor->data()[i] *= static_cast<S>(0.8 + 0.4 * rng.uniform());
      } else {
        ref.tensor->data()[i] += static_cast<S>(scale * (2.0 * rng.uniform() - 1.0));
      }
    }
  }
}

template <class S>
inline bool models_bit_identical(const Model<S>& a, const Model<S>& b, bool include_buffers = true,
                                 bool backbone_only = false) {
  auto ra = tensor_refs(const_cast<Model<S>&>(a), include_buffers);
  auto rb = tensor_refs(const_cast<Model<S>&>(b), include_buffers);
  if (ra.size() != rb.size()) return false;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (backbone_only && ra[i].head) continue;
    if (ra[i].tensor->rows() != rb[i].tensor->rows() ||
        ra[i].tensor->cols() != rb[i].tensor->cols()) {
      return false;
    }
    if (std::memcmp(ra[i].tensor->data(), rb[i].tensor->data(),
                    sizeof(S) * static_cast<std::size_t>(ra[i].tensor->size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace ecgpt::testsupport
