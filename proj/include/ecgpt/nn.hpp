// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ecgpt/rng.hpp"
#include "ecgpt/types.hpp"

namespace ecgpt {

enum class Mode { kTrain, kInfer };

struct StageConfig {
  int n_blocks = 2;
  int channels = 32;
  int stride = 1;
};

// Parametric 1D residual CNN family: stem conv, stages of bottleneck blocks
// with channel attention and drop-path residuals, global average pooling and
// a linear head.
struct ModelConfig {
  int in_leads = 12;
  int stem_channels = 32;
  int stem_stride = 2;
  std::vector<StageConfig> stages = {{2, 32, 1}, {2, 64, 2}, {2, 128, 2}, {2, 256, 2}};
  double bottleneck_expansion = 1.0;
  int se_reduction = 8;
  int kernel_size = 7;
  double drop_path_rate = 0.0;  // lambda
  double dropout_rate = 0.0;    // p
  int n_classes = 2;
  bool batch_level_drop_path = false;  // one mask per (batch, block) instead of per sample

  void validate() const {
    if (in_leads < 1) throw std::invalid_argument("ModelConfig: in_leads must be >= 1");
    if (stem_channels < 1) throw std::invalid_argument("ModelConfig: stem_channels must be >= 1");
    if (stem_stride < 1) throw std::invalid_argument("ModelConfig: stem_stride must be >= 1");
    if (stages.empty()) throw std::invalid_argument("ModelConfig: stages must be non-empty");
    for (const auto& s : stages) {
      if (s.n_blocks < 1 || s.channels < 1 || s.stride < 1) {
        throw std::invalid_argument("ModelConfig: invalid stage");
      }
      if (se_reduction < 1 || s.channels % se_reduction != 0) {
        throw std::invalid_argument("ModelConfig: stage channels must be divisible by se_reduction");
      }
    }
    if (bottleneck_expansion <= 0.0) {
      throw std::invalid_argument("ModelConfig: bottleneck_expansion must be positive");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0) {
      throw std::invalid_argument("ModelConfig: kernel_size must be a positive odd integer");
    }
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
      throw std::invalid_argument("ModelConfig: drop_path_rate must lie in [0, 1)");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("ModelConfig: dropout_rate must lie in [0, 1)");
    }
    if (n_classes < 1) throw std::invalid_argument("ModelConfig: n_classes must be >= 1");
  }

  int mid_channels(int stage) const {
    const double m = stages[static_cast<std::size_t>(stage)].channels * bottleneck_expansion;
    return std::max(1, static_cast<int>(std::lround(m)));
  }

  // Shortest input the stride plan supports.
  Index min_input_length() const {
    Index m = stem_stride;
    for (const auto& s : stages) m *= s.stride;
    return m;
  }

  int final_channels() const { return stages.back().channels; }
};

template <class S>
struct Conv1dParams {
  Mat<S> weight;  // [out_ch x in_ch*ksize], logical layout (out, in, k)
  int in_ch = 0;
  int out_ch = 0;
  int ksize = 1;
  int stride = 1;
};

template <class S>
struct NormParams {
  Mat<S> gamma, beta, running_mean, running_var;  // all [C x 1]
};

template <class S>
struct SeParams {
  Mat<S> w1;  // [C/r x C]
  Mat<S> b1;  // [C/r x 1]
  Mat<S> w2;  // [C x C/r]
  Mat<S> b2;  // [C x 1]
};

template <class S>
struct BottleneckParams {
  Conv1dParams<S> conv1, conv2, conv3;
  NormParams<S> bn1, bn2, bn3;
  SeParams<S> se;
  bool has_projection = false;
  Conv1dParams<S> proj;
  NormParams<S> proj_norm;
};

template <class S>
struct Model {
  ModelConfig config;
  Conv1dParams<S> stem;
  NormParams<S> stem_norm;
  std::vector<BottleneckParams<S>> blocks;
  Mat<S> head_weight;  // [n_classes x final_channels]
  Mat<S> head_bias;    // [n_classes x 1]
  bool backbone_frozen = false;
};

constexpr double kNormEpsilon = 1e-5;
constexpr double kNormMomentum = 0.1;

// ---------------------------------------------------------------------------
// Named tensor traversal

enum class TensorKind {
  kConvWeight,
  kNormGamma,
  kNormBeta,
  kNormRunningMean,
  kNormRunningVar,
  kSeWeight,
  kSeBias,
  kHeadWeight,
  kHeadBias,
};

inline bool is_buffer(TensorKind k) {
  return k == TensorKind::kNormRunningMean || k == TensorKind::kNormRunningVar;
}

// Decoupled weight decay acts on convolution/linear weights only.
inline bool decays(TensorKind k) {
  return k == TensorKind::kConvWeight || k == TensorKind::kSeWeight || k == TensorKind::kHeadWeight;
}

template <class S>
struct TensorRef {
  std::string name;
  TensorKind kind;
  Mat<S>* tensor;
  std::vector<Index> shape;  // logical shape (conv: [out, in, k])
  bool head = false;
};

template <class S>
std::vector<TensorRef<S>> tensor_refs(Model<S>& m, bool include_buffers) {
  std::vector<TensorRef<S>> refs;
  auto add = [&](const std::string& name, TensorKind kind, Mat<S>& t, std::vector<Index> shape,
                 bool head = false) {
    refs.push_back(TensorRef<S>{name, kind, &t, std::move(shape), head});
  };
  auto add_norm = [&](const std::string& prefix, NormParams<S>& n) {
    const Index c = n.gamma.rows();
    add(prefix + ".gamma", TensorKind::kNormGamma, n.gamma, {c});
    add(prefix + ".beta", TensorKind::kNormBeta, n.beta, {c});
    if (include_buffers) {
      add(prefix + ".running_mean", TensorKind::kNormRunningMean, n.running_mean, {c});
      add(prefix + ".running_var", TensorKind::kNormRunningVar, n.running_var, {c});
    }
  };
  auto add_conv = [&](const std::string& name, Conv1dParams<S>& c) {
    add(name, TensorKind::kConvWeight, c.weight, {c.out_ch, c.in_ch, c.ksize});
  };

  add_conv("stem.conv.weight", m.stem);
  add_norm("stem.norm", m.stem_norm);
  int global = 0;
  std::size_t next = 0;
  for (std::size_t s = 0; s < m.config.stages.size(); ++s) {
    for (int b = 0; b < m.config.stages[s].n_blocks; ++b, ++global) {
      auto& blk = m.blocks[next++];
      const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      add_conv(p + ".conv1.weight", blk.conv1);
      add_norm(p + ".bn1", blk.bn1);
      add_conv(p + ".conv2.weight", blk.conv2);
      add_norm(p + ".bn2", blk.bn2);
      add_conv(p + ".conv3.weight", blk.conv3);
      add_norm(p + ".bn3", blk.bn3);
      add(p + ".se.w1", TensorKind::kSeWeight, blk.se.w1, {blk.se.w1.rows(), blk.se.w1.cols()});
      add(p + ".se.b1", TensorKind::kSeBias, blk.se.b1, {blk.se.b1.rows()});
      add(p + ".se.w2", TensorKind::kSeWeight, blk.se.w2, {blk.se.w2.rows(), blk.se.w2.cols()});
      add(p + ".se.b2", TensorKind::kSeBias, blk.se.b2, {blk.se.b2.rows()});
      if (blk.has_projection) {
        add_conv(p + ".proj.weight", blk.proj);
        add_norm(p + ".proj_norm", blk.proj_norm);
      }
    }
  }
  add("head.weight", TensorKind::kHeadWeight, m.head_weight,
      {m.head_weight.rows(), m.head_weight.cols()}, true);
  add("head.bias", TensorKind::kHeadBias, m.head_bias, {m.head_bias.rows()}, true);
  return refs;
}

template <class S>
std::vector<TensorRef<S>> tensor_refs(const Model<S>& m, bool include_buffers) {
  return tensor_refs(const_cast<Model<S>&>(m), include_buffers);
}

template <class S>
bool tensor_trainable(const Model<S>& m, const TensorRef<S>& ref) {
  if (is_buffer(ref.kind)) return false;
  if (ref.head) return true;
  return !m.backbone_frozen;
}

template <class S>
Index trainable_parameter_count(const Model<S>& m) {
  Index n = 0;
  for (const auto& ref : tensor_refs(m, false)) {
    if (tensor_trainable(m, ref)) n += ref.tensor->size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <class S>
void init_uniform_fan_in(Mat<S>& w, Index fan_in, Rng rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      w(r, c) = static_cast<S>((2.0 * rng.uniform() - 1.0) * bound);
    }
  }
}

template <class S>
Conv1dParams<S> make_conv(int in_ch, int out_ch, int ksize, int stride) {
  Conv1dParams<S> c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.ksize = ksize;
  c.stride = stride;
  c.weight = Mat<S>::Zero(out_ch, static_cast<Index>(in_ch) * ksize);
  return c;
}

template <class S>
NormParams<S> make_norm(int channels) {
  NormParams<S> n;
  n.gamma = Mat<S>::Ones(channels, 1);
  n.beta = Mat<S>::Zero(channels, 1);
  n.running_mean = Mat<S>::Zero(channels, 1);
  n.running_var = Mat<S>::Ones(channels, 1);
  return n;
}

}  // namespace detail

template <class S>
void replace_head(Model<S>& m, int n_classes, Rng rng) {
  if (n_classes < 1) throw std::invalid_argument("replace_head: n_classes must be >= 1");
  const int c = m.config.final_channels();
  m.config.n_classes = n_classes;
  m.head_weight = Mat<S>::Zero(n_classes, c);
  detail::init_uniform_fan_in(m.head_weight, c, rng.child({stream::kHeadInit}));
  m.head_bias = Mat<S>::Zero(n_classes, 1);
}

template <class S>
Model<S> make_model(const ModelConfig& config, Rng rng) {
  config.validate();
  Model<S> m;
  m.config = config;
  m.stem = detail::make_conv<S>(config.in_leads, config.stem_channels, config.kernel_size,
                                config.stem_stride);
  m.stem_norm = detail::make_norm<S>(config.stem_channels);
  int in_ch = config.stem_channels;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto& st = config.stages[s];
    const int mid = m.config.mid_channels(static_cast<int>(s));
    for (int b = 0; b < st.n_blocks; ++b) {
      const int stride = b == 0 ? st.stride : 1;
      BottleneckParams<S> blk;
      blk.conv1 = detail::make_conv<S>(in_ch, mid, 1, 1);
      blk.bn1 = detail::make_norm<S>(mid);
      blk.conv2 = detail::make_conv<S>(mid, mid, config.kernel_size, stride);
      blk.bn2 = detail::make_norm<S>(mid);
      blk.conv3 = detail::make_conv<S>(mid, st.channels, 1, 1);
      blk.bn3 = detail::make_norm<S>(st.channels);
      const int hidden = st.channels / config.se_reduction;
      blk.se.w1 = Mat<S>::Zero(hidden, st.channels);
      blk.se.b1 = Mat<S>::Zero(hidden, 1);
      blk.se.w2 = Mat<S>::Zero(st.channels, hidden);
      blk.se.b2 = Mat<S>::Zero(st.channels, 1);
      blk.has_projection = (in_ch != st.channels) || (stride != 1);
      if (blk.has_projection) {
        blk.proj = detail::make_conv<S>(in_ch, st.channels, 1, stride);
        blk.proj_norm = detail::make_norm<S>(st.channels);
      }
      m.blocks.push_back(std::move(blk));
      in_ch = st.channels;
    }
  }
  m.head_weight = Mat<S>::Zero(config.n_classes, config.final_channels());
  m.head_bias = Mat<S>::Zero(config.n_classes, 1);

  // Deterministic per-tensor init streams keyed by traversal order.
  auto refs = tensor_refs(m, false);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto& ref = refs[i];
    Rng tensor_rng = rng.child({stream::kInit, static_cast<std::uint64_t>(i)});
    switch (ref.kind) {
      case TensorKind::kConvWeight: {
        const Index fan_in = ref.shape[1] * ref.shape[2];
        detail::init_uniform_fan_in(*ref.tensor, fan_in, tensor_rng);
        break;
      }
      case TensorKind::kSeWeight:
      case TensorKind::kHeadWeight:
        detail::init_uniform_fan_in(*ref.tensor, ref.tensor->cols(), tensor_rng);
        break;
      default:
        break;  // biases zero, gamma/beta preset
    }
  }
  return m;
}

template <class S>
void freeze_backbone(Model<S>& m) {
  m.backbone_frozen = true;
}

template <class S>
void unfreeze_all(Model<S>& m) {
  m.backbone_frozen = false;
}

// Gradient container with the same tree shape; buffers stay zero and unused.
template <class S>
Model<S> zero_like(const Model<S>& m) {
  Model<S> g = m;
  for (auto& ref : tensor_refs(g, true)) ref.tensor->setZero();
  return g;
}

// ---------------------------------------------------------------------------
// Instrumentation

struct RunCounters {
  std::uint64_t drop_path_draws = 0;  // Bernoulli draws performed (train mode, lambda > 0)
  std::uint64_t drop_path_skips = 0;  // draws that skipped the block (r == 0)
  std::uint64_t dropout_units_zeroed = 0;
  std::uint64_t optimizer_steps = 0;
  std::uint64_t cosine_lr_steps = 0;
  std::uint64_t plateau_lr_reductions = 0;
  std::uint64_t norm_stat_updates = 0;
  std::uint64_t stage_a_epochs = 0;
  std::uint64_t full_stage_epochs = 0;

  void merge(const RunCounters& o) {
    drop_path_draws += o.drop_path_draws;
    drop_path_skips += o.drop_path_skips;
    dropout_units_zeroed += o.dropout_units_zeroed;
    optimizer_steps += o.optimizer_steps;
    cosine_lr_steps += o.cosine_lr_steps;
    plateau_lr_reductions += o.plateau_lr_reductions;
    norm_stat_updates += o.norm_stat_updates;
    stage_a_epochs += o.stage_a_epochs;
    full_stage_epochs += o.full_stage_epochs;
  }
};

// ---------------------------------------------------------------------------
// Primitive layers

namespace detail {

template <class S>
Index conv_out_len(Index t_in, int ksize, int stride) {
  const Index pad = (ksize - 1) / 2;
  return (t_in + 2 * pad - ksize) / stride + 1;
}

template <class S>
Mat<S> im2col(const Mat<S>& x, int ksize, int stride) {
  const Index c_in = x.rows();
  const Index t_in = x.cols();
  const Index pad = (ksize - 1) / 2;
  const Index t_out = conv_out_len<S>(t_in, ksize, stride);
  Mat<S> cols = Mat<S>::Zero(c_in * ksize, t_out);
  for (Index t = 0; t < t_out; ++t) {
    const Index base = t * stride - pad;
    for (int j = 0; j < ksize; ++j) {
      const Index src = base + j;
      if (src < 0 || src >= t_in) continue;
      for (Index ci = 0; ci < c_in; ++ci) {
        cols(ci * ksize + j, t) = x(ci, src);
      }
    }
  }
  return cols;
}

template <class S>
void col2im_add(const Mat<S>& dcols, int ksize, int stride, Mat<S>& dx) {
  const Index c_in = dx.rows();
  const Index t_in = dx.cols();
  const Index pad = (ksize - 1) / 2;
  const Index t_out = dcols.cols();
  for (Index t = 0; t < t_out; ++t) {
    const Index base = t * stride - pad;
    for (int j = 0; j < ksize; ++j) {
      const Index src = base + j;
      if (src < 0 || src >= t_in) continue;
      for (Index ci = 0; ci < c_in; ++ci) {
        dx(ci, src) += dcols(ci * ksize + j, t);
      }
    }
  }
}

template <class S>
Mat<S> conv1d_forward(const Conv1dParams<S>& c, const Mat<S>& x) {
  return c.weight * im2col(x, c.ksize, c.stride);
}

// Accumulates the weight gradient; optionally returns the input gradient.
template <class S>
void conv1d_backward(const Conv1dParams<S>& c, const Mat<S>& x, const Mat<S>& dy,
                     Mat<S>& dweight, Mat<S>* dx) {
  const Mat<S> cols = im2col(x, c.ksize, c.stride);
  dweight.noalias() += dy * cols.transpose();
  if (dx != nullptr) {
    const Mat<S> dcols = c.weight.transpose() * dy;
    dx->setZero();
    col2im_add(dcols, c.ksize, c.stride, *dx);
  }
}

// Normalization uses the running statistics in every mode, so training and
// inference share one forward definition; the statistics themselves are
// updated out-of-band from batch moments during full-training steps.
template <class S>
struct NormCoeffs {
  Arr<S> scale, shift, inv_std;
};

template <class S>
NormCoeffs<S> norm_coeffs(const NormParams<S>& n) {
  NormCoeffs<S> c;
  c.inv_std = (n.running_var.col(0).array() + static_cast<S>(kNormEpsilon)).sqrt().inverse();
  c.scale = n.gamma.col(0).array() * c.inv_std;
  c.shift = n.beta.col(0).array() - n.running_mean.col(0).array() * c.scale;
  return c;
}

template <class S>
Mat<S> norm_forward(const NormCoeffs<S>& c, const Mat<S>& x) {
  return ((x.array().colwise() * c.scale).colwise() + c.shift).matrix();
}

// dgamma/dbeta accumulate; returns dx.
template <class S>
Mat<S> norm_backward(const NormParams<S>& n, const NormCoeffs<S>& c, const Mat<S>& x,
                     const Mat<S>& dy, Mat<S>& dgamma, Mat<S>& dbeta) {
  const auto xhat = (x.array().colwise() - n.running_mean.col(0).array()).colwise() * c.inv_std;
  dgamma.col(0).array() += (dy.array() * xhat).rowwise().sum();
  dbeta.col(0).array() += dy.array().rowwise().sum();
  return (dy.array().colwise() * c.scale).matrix();
}

template <class S>
Arr<S> stable_sigmoid(const Arr<S>& a) {
  return a.unaryExpr([](S v) {
    if (v >= S(0)) {
      return S(1) / (S(1) + std::exp(-v));
    }
    const S e = std::exp(v);
    return e / (S(1) + e);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stochastic depth (drop-path)

// Mask law: r = 1 iff U < 1 - lambda, U ~ Uniform[0, 1). Train mode scales the
// surviving branch by 1/(1 - lambda); inference uses the plain residual sum.
inline double drop_path_coefficient(double lambda, Mode mode, Rng& rng,
                                    RunCounters* counters = nullptr) {
  if (!(lambda >= 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("drop_path: lambda must lie in [0, 1)");
  }
  if (mode == Mode::kInfer || lambda == 0.0) return 1.0;
  const bool keep = rng.uniform() < 1.0 - lambda;
  if (counters != nullptr) {
    ++counters->drop_path_draws;
    if (!keep) ++counters->drop_path_skips;
  }
  return keep ? 1.0 / (1.0 - lambda) : 0.0;
}

template <class S>
Mat<S> drop_path(const Mat<S>& block_output, const Mat<S>& identity, double lambda, Mode mode,
                 Rng& rng) {
  if (block_output.rows() != identity.rows() || block_output.cols() != identity.cols()) {
    throw std::invalid_argument("drop_path: block output and identity shapes differ");
  }
  const S k = static_cast<S>(drop_path_coefficient(lambda, mode, rng));
  return k * block_output + identity;
}

// ---------------------------------------------------------------------------
// Squeeze-excitation channel attention

template <class S>
Mat<S> se_attention(const Mat<S>& features, const SeParams<S>& se) {
  if (features.rows() != se.w1.cols()) {
    throw std::invalid_argument("se_attention: channel count does not match weights");
  }
  const Mat<S> z = features.rowwise().mean();
  const Mat<S> h = (se.w1 * z + se.b1).cwiseMax(S(0));
  const Arr<S> gate = detail::stable_sigmoid<S>((se.w2 * h + se.b2).col(0).array());
  return (features.array().colwise() * gate).matrix();
}

// ---------------------------------------------------------------------------
// Multi-label loss

template <class S>
void check_bce_inputs(const Mat<S>& logits, const Mat<S>& labels) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) {
    throw std::invalid_argument("bce_logits_loss: shape mismatch");
  }
  for (Index i = 0; i < labels.size(); ++i) {
    const S y = labels.data()[i];
    if (y != S(0) && y != S(1)) {
      throw std::invalid_argument("bce_logits_loss: labels must be 0 or 1");
    }
  }
}

// Mean over all entries of softplus(z) - y*z, evaluated in the
// overflow-free form softplus(z) = max(z, 0) + log1p(exp(-|z|)).
template <class S>
S bce_logits_loss(const Mat<S>& logits, const Mat<S>& labels) {
  check_bce_inputs(logits, labels);
  double acc = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits.data()[i]);
    const double y = static_cast<double>(labels.data()[i]);
    acc += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
  }
  return static_cast<S>(acc / static_cast<double>(logits.size()));
}

template <class S>
Mat<S> bce_logits_grad(const Mat<S>& logits, const Mat<S>& labels) {
  check_bce_inputs(logits, labels);
  const S inv_n = S(1) / static_cast<S>(logits.size());
  Mat<S> g(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.size(); ++i) {
    const S z = logits.data()[i];
    S sig;
    if (z >= S(0)) {
      sig = S(1) / (S(1) + std::exp(-z));
    } else {
      const S e = std::exp(z);
      sig = e / (S(1) + e);
    }
    g.data()[i] = (sig - labels.data()[i]) * inv_n;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Whole-model forward / backward

// Batch moments of every normalization layer's input, accumulated per sample
// and reduced in sample order so results do not depend on thread count.
template <class S>
struct NormStatsAccum {
  std::vector<Vec<S>> sum, sum_sq;
  std::vector<long long> count;

  void init_like(const Model<S>& m) {
    sum.clear();
    sum_sq.clear();
    count.clear();
    auto add = [&](Index c) {
      sum.push_back(Vec<S>::Zero(c));
      sum_sq.push_back(Vec<S>::Zero(c));
      count.push_back(0);
    };
    add(m.stem_norm.gamma.rows());
    for (const auto& blk : m.blocks) {
      add(blk.bn1.gamma.rows());
      add(blk.bn2.gamma.rows());
      add(blk.bn3.gamma.rows());
      if (blk.has_projection) add(blk.proj_norm.gamma.rows());
    }
  }

  void add(std::size_t layer, const Mat<S>& x) {
    sum[layer] += x.rowwise().sum();
    sum_sq[layer] += x.array().square().matrix().rowwise().sum();
    count[layer] += x.cols();
  }

  void merge(const NormStatsAccum& o) {
    for (std::size_t i = 0; i < sum.size(); ++i) {
      sum[i] += o.sum[i];
      sum_sq[i] += o.sum_sq[i];
      count[i] += o.count[i];
    }
  }
};

// EMA update of the running statistics from accumulated batch moments.
template <class S>
void update_norm_stats(Model<S>& m, const NormStatsAccum<S>& stats, RunCounters* counters = nullptr) {
  std::size_t layer = 0;
  auto apply = [&](NormParams<S>& n) {
    const auto& s = stats.sum[layer];
    const auto& q = stats.sum_sq[layer];
    const auto c = static_cast<S>(stats.count[layer]);
    if (c > S(0)) {
      const Vec<S> mean = s / c;
      const Vec<S> var = (q.array() / c - mean.array().square()).cwiseMax(S(0)).matrix();
      const S mom = static_cast<S>(kNormMomentum);
      n.running_mean.col(0) = (S(1) - mom) * n.running_mean.col(0) + mom * mean;
      n.running_var.col(0) = (S(1) - mom) * n.running_var.col(0) + mom * var;
    }
    ++layer;
  };
  apply(m.stem_norm);
  for (auto& blk : m.blocks) {
    apply(blk.bn1);
    apply(blk.bn2);
    apply(blk.bn3);
    if (blk.has_projection) apply(blk.proj_norm);
  }
  if (counters != nullptr) ++counters->norm_stat_updates;
}

namespace detail {

template <class S>
struct BlockCache {
  Mat<S> x_in;
  Mat<S> conv1_out, conv2_out, conv3_out;
  Mat<S> se_input;         // bn3 output
  Mat<S> se_z, se_h;       // pooled vector, hidden activation
  Arr<S> se_gate;
  Mat<S> proj_out;         // pre-norm projection (when present)
  Mat<S> preact;           // k*branch + shortcut, before the post-add relu
  MaskMatrix drop1, drop2; // dropout keep masks (empty when inactive)
  S drop_coeff = S(1);
};

template <class S>
struct SampleCache {
  Mat<S> input;
  Mat<S> stem_conv_out;
  std::vector<BlockCache<S>> blocks;
  Mat<S> features;  // pooled [C x 1]
  Index t_final = 0;
};

template <class S>
Mat<S> apply_dropout(const Mat<S>& x, double p, Rng rng, MaskMatrix* mask_out,
                     RunCounters* counters) {
  MaskMatrix mask(x.rows(), x.cols());
  std::uint64_t zeroed = 0;
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const bool keep = !(rng.uniform() < p);
      mask(r, c) = keep ? 1 : 0;
      if (!keep) ++zeroed;
    }
  }
  if (counters != nullptr) counters->dropout_units_zeroed += zeroed;
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  Mat<S> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      y(r, c) = mask(r, c) ? x(r, c) * scale : S(0);
    }
  }
  if (mask_out != nullptr) *mask_out = std::move(mask);
  return y;
}

// Forward through the backbone for one sample. When `cache` is non-null all
// intermediates needed by the backward pass are retained. Per-mechanism rng
// streams are derived from `sample_rng`, so mask draws are independent of
// evaluation order and of each other.
template <class S>
Mat<S> backbone_forward_sample(const Model<S>& m, const Mat<S>& x, Mode mode,
                               const Rng& sample_rng, const std::vector<double>* batch_drop_coeffs,
                               SampleCache<S>* cache, NormStatsAccum<S>* stats,
                               RunCounters* counters) {
  const bool train = mode == Mode::kTrain;
  const double p = train ? m.config.dropout_rate : 0.0;
  const double lambda = train ? m.config.drop_path_rate : 0.0;
  std::size_t norm_layer = 0;

  Mat<S> h = conv1d_forward(m.stem, x);
  if (stats != nullptr) stats->add(norm_layer, h);
  ++norm_layer;
  if (cache != nullptr) {
    cache->input = x;
    cache->stem_conv_out = h;
    cache->blocks.resize(m.blocks.size());
  }
  Mat<S> act = norm_forward(norm_coeffs(m.stem_norm), h).cwiseMax(S(0));

  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    BlockCache<S>* bc = cache != nullptr ? &cache->blocks[b] : nullptr;
    if (bc != nullptr) bc->x_in = act;

    Mat<S> c1 = conv1d_forward(blk.conv1, act);
    if (stats != nullptr) stats->add(norm_layer, c1);
    ++norm_layer;
    Mat<S> a1 = norm_forward(norm_coeffs(blk.bn1), c1).cwiseMax(S(0));
    if (p > 0.0) {
      a1 = apply_dropout<S>(a1, p,
                            sample_rng.child({stream::kDropout, static_cast<std::uint64_t>(b), 0}),
                            bc != nullptr ? &bc->drop1 : nullptr, counters);
    }

    Mat<S> c2 = conv1d_forward(blk.conv2, a1);
    if (stats != nullptr) stats->add(norm_layer, c2);
    ++norm_layer;
    Mat<S> a2 = norm_forward(norm_coeffs(blk.bn2), c2).cwiseMax(S(0));
    if (p > 0.0) {
      a2 = apply_dropout<S>(a2, p,
                            sample_rng.child({stream::kDropout, static_cast<std::uint64_t>(b), 1}),
                            bc != nullptr ? &bc->drop2 : nullptr, counters);
    }

    Mat<S> c3 = conv1d_forward(blk.conv3, a2);
    if (stats != nullptr) stats->add(norm_layer, c3);
    ++norm_layer;
    Mat<S> u = norm_forward(norm_coeffs(blk.bn3), c3);

    const Mat<S> z = u.rowwise().mean();
    const Mat<S> hh = (blk.se.w1 * z + blk.se.b1).cwiseMax(S(0));
    const Arr<S> gate = stable_sigmoid<S>((blk.se.w2 * hh + blk.se.b2).col(0).array());
    Mat<S> branch = (u.array().colwise() * gate).matrix();

    Mat<S> shortcut;
    if (blk.has_projection) {
      Mat<S> pc = conv1d_forward(blk.proj, act);
      if (stats != nullptr) stats->add(norm_layer, pc);
      ++norm_layer;
      shortcut = norm_forward(norm_coeffs(blk.proj_norm), pc);
      if (bc != nullptr) bc->proj_out = std::move(pc);
    } else {
      shortcut = act;
    }

    double coeff = 1.0;
    if (lambda > 0.0) {
      if (batch_drop_coeffs != nullptr) {
        coeff = (*batch_drop_coeffs)[b];
      } else {
        Rng dp_rng = sample_rng.child({stream::kDropPath, static_cast<std::uint64_t>(b)});
        coeff = drop_path_coefficient(lambda, mode, dp_rng, counters);
      }
    }

    Mat<S> pre = static_cast<S>(coeff) * branch + shortcut;
    act = pre.cwiseMax(S(0));
    if (bc != nullptr) {
      bc->conv1_out = std::move(c1);
      bc->conv2_out = std::move(c2);
      bc->conv3_out = std::move(c3);
      bc->se_input = std::move(u);
      bc->se_z = z;
      bc->se_h = hh;
      bc->se_gate = gate;
      bc->preact = std::move(pre);
      bc->drop_coeff = static_cast<S>(coeff);
    }
  }

  Mat<S> features = act.rowwise().mean();
  if (cache != nullptr) {
    cache->features = features;
    cache->t_final = act.cols();
  }
  return features;
}

template <class S>
Vec<S> head_forward(const Model<S>& m, const Mat<S>& features) {
  return m.head_weight * features + m.head_bias;
}

// Reverse pass for one sample; parameter gradients accumulate into `grads`.
template <class S>
void backward_sample(const Model<S>& m, const SampleCache<S>& cache, const Vec<S>& dlogits,
                     Model<S>& grads) {
  const double p = m.config.dropout_rate;

  // Head and pooling.
  grads.head_weight.noalias() += dlogits * cache.features.transpose();
  grads.head_bias.col(0) += dlogits;
  Vec<S> dfeat = m.head_weight.transpose() * dlogits;
  const Index t_final = cache.t_final;
  const S inv_t = S(1) / static_cast<S>(t_final);
  Mat<S> dact = (dfeat * Mat<S>::Constant(1, t_final, inv_t));

  for (std::size_t bi = m.blocks.size(); bi-- > 0;) {
    const auto& blk = m.blocks[bi];
    const auto& bc = cache.blocks[bi];
    auto& gblk = grads.blocks[bi];

    // Post-add relu.
    Mat<S> dpre =
        (dact.array() * (bc.preact.array() > S(0)).template cast<S>()).matrix();

    Mat<S> dx = Mat<S>::Zero(bc.x_in.rows(), bc.x_in.cols());

    if (bc.drop_coeff != S(0)) {
      Mat<S> dbranch = bc.drop_coeff * dpre;

      // Squeeze-excitation.
      const Mat<S>& u = bc.se_input;
      Mat<S> du = (dbranch.array().colwise() * bc.se_gate).matrix();
      Vec<S> dgate = (dbranch.array() * u.array()).rowwise().sum().matrix();
      Vec<S> da =
          (dgate.array() * bc.se_gate * (S(1) - bc.se_gate)).matrix();
      gblk.se.w2.noalias() += da * bc.se_h.transpose();
      gblk.se.b2.col(0) += da;
      Vec<S> dh = blk.se.w2.transpose() * da;
      dh = (dh.array() * (bc.se_h.col(0).array() > S(0)).template cast<S>()).matrix();
      gblk.se.w1.noalias() += dh * bc.se_z.transpose();
      gblk.se.b1.col(0) += dh;
      Vec<S> dz = blk.se.w1.transpose() * dh;
      const S inv_t2 = S(1) / static_cast<S>(u.cols());
      du.noalias() += (dz * Mat<S>::Constant(1, u.cols(), inv_t2));

      // bn3 + conv3.
      const auto cf3 = norm_coeffs(blk.bn3);
      Mat<S> dc3 = norm_backward(blk.bn3, cf3, bc.conv3_out, du, gblk.bn3.gamma, gblk.bn3.beta);
      // Recompute conv3's input: a2 = dropout(relu(bn2(conv2_out))).
      const auto cf2 = norm_coeffs(blk.bn2);
      Mat<S> b2 = norm_forward(cf2, bc.conv2_out);
      Mat<S> a2 = b2.cwiseMax(S(0));
      if (bc.drop2.size() > 0) {
        const S scale = static_cast<S>(1.0 / (1.0 - p));
        a2 = (a2.array() * bc.drop2.array().template cast<S>() * scale).matrix();
      }
      Mat<S> da2(a2.rows(), a2.cols());
      conv1d_backward(blk.conv3, a2, dc3, gblk.conv3.weight, &da2);

      // dropout2 + relu2 + bn2 + conv2.
      if (bc.drop2.size() > 0) {
        const S scale = static_cast<S>(1.0 / (1.0 - p));
        da2 = (da2.array() * bc.drop2.array().template cast<S>() * scale).matrix();
      }
      Mat<S> db2 = (da2.array() * (b2.array() > S(0)).template cast<S>()).matrix();
      Mat<S> dc2 = norm_backward(blk.bn2, cf2, bc.conv2_out, db2, gblk.bn2.gamma, gblk.bn2.beta);
      const auto cf1 = norm_coeffs(blk.bn1);
      Mat<S> b1 = norm_forward(cf1, bc.conv1_out);
      Mat<S> a1 = b1.cwiseMax(S(0));
      if (bc.drop1.size() > 0) {
        const S scale = static_cast<S>(1.0 / (1.0 - p));
        a1 = (a1.array() * bc.drop1.array().template cast<S>() * scale).matrix();
      }
      Mat<S> da1(a1.rows(), a1.cols());
      conv1d_backward(blk.conv2, a1, dc2, gblk.conv2.weight, &da1);

      // dropout1 + relu1 + bn1 + conv1.
      if (bc.drop1.size() > 0) {
        const S scale = static_cast<S>(1.0 / (1.0 - p));
        da1 = (da1.array() * bc.drop1.array().template cast<S>() * scale).matrix();
      }
      Mat<S> db1 = (da1.array() * (b1.array() > S(0)).template cast<S>()).matrix();
      Mat<S> dc1 = norm_backward(blk.bn1, cf1, bc.conv1_out, db1, gblk.bn1.gamma, gblk.bn1.beta);
      Mat<S> dx_branch(bc.x_in.rows(), bc.x_in.cols());
      conv1d_backward(blk.conv1, bc.x_in, dc1, gblk.conv1.weight, &dx_branch);
      dx += dx_branch;
    }

    // Shortcut path.
    if (blk.has_projection) {
      const auto cfp = norm_coeffs(blk.proj_norm);
      Mat<S> dpc = norm_backward(blk.proj_norm, cfp, bc.proj_out, dpre, gblk.proj_norm.gamma,
                                 gblk.proj_norm.beta);
      Mat<S> dx_proj(bc.x_in.rows(), bc.x_in.cols());
      conv1d_backward(blk.proj, bc.x_in, dpc, gblk.proj.weight, &dx_proj);
      dx += dx_proj;
    } else {
      dx += dpre;
    }
    dact = std::move(dx);
  }

  // Stem: relu + norm + conv.
  const auto cfs = norm_coeffs(m.stem_norm);
  Mat<S> bs = norm_forward(cfs, cache.stem_conv_out);
  Mat<S> dbs = (dact.array() * (bs.array() > S(0)).template cast<S>()).matrix();
  Mat<S> dcs = norm_backward(m.stem_norm, cfs, cache.stem_conv_out, dbs, grads.stem_norm.gamma,
                             grads.stem_norm.beta);
  conv1d_backward(m.stem, cache.input, dcs, grads.stem.weight, static_cast<Mat<S>*>(nullptr));
}

template <class S>
void validate_batch(const Model<S>& m, const BatchView<S>& batch) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  const Index min_len = m.config.min_input_length();
  for (const auto* x : batch) {
    if (x->rows() != m.config.in_leads) {
      throw std::invalid_argument("forward: input lead count does not match model config");
    }
    if (x->cols() < min_len) {
      throw std::invalid_argument("forward: input shorter than the minimum length implied by strides");
    }
    if (!x->allFinite()) throw std::invalid_argument("forward: non-finite input");
  }
}

template <class S>
std::vector<double> draw_batch_drop_coeffs(const Model<S>& m, Mode mode, Rng& batch_rng,
                                           RunCounters* counters) {
  std::vector<double> coeffs(m.blocks.size(), 1.0);
  if (mode == Mode::kTrain && m.config.drop_path_rate > 0.0 && m.config.batch_level_drop_path) {
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
      Rng r = batch_rng.child({stream::kDropPath, static_cast<std::uint64_t>(b)});
      coeffs[b] = drop_path_coefficient(m.config.drop_path_rate, mode, r, counters);
    }
  }
  return coeffs;
}

}  // namespace detail

// Forward pass over a batch; one logits row per sample. Train-mode draws are
// keyed per (forward call, sample, block, mechanism) so results are
// bit-reproducible for a given rng seed regardless of scheduling.
template <class S>
Mat<S> forward(const Model<S>& m, const BatchView<S>& batch, Mode mode, Rng& rng,
               RunCounters* counters = nullptr) {
  detail::validate_batch(m, batch);
  const Index n = static_cast<Index>(batch.size());
  Rng base = rng.fork();
  const bool batch_level = m.config.batch_level_drop_path;
  std::vector<double> batch_coeffs;
  if (batch_level) {
    Rng bd = base.child({stream::kDropPath});
    batch_coeffs = detail::draw_batch_drop_coeffs(m, mode, bd, counters);
  }

  Mat<S> logits(n, m.config.n_classes);
  std::vector<RunCounters> local(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    const Rng sample_rng = base.child({stream::kSample, static_cast<std::uint64_t>(i)});
    const Mat<S> f = detail::backbone_forward_sample(
        m, *batch[static_cast<std::size_t>(i)], mode, sample_rng,
        batch_level ? &batch_coeffs : nullptr, static_cast<detail::SampleCache<S>*>(nullptr),
        static_cast<NormStatsAccum<S>*>(nullptr), &local[static_cast<std::size_t>(i)]);
    logits.row(i) = detail::head_forward(m, f).transpose();
  }
  if (counters != nullptr) {
    for (const auto& c : local) counters->merge(c);
  }
  return logits;
}

// Pooled backbone features (no head); inference mode only.
template <class S>
Mat<S> backbone_features(const Model<S>& m, const BatchView<S>& batch) {
  detail::validate_batch(m, batch);
  const Index n = static_cast<Index>(batch.size());
  Mat<S> features(m.config.final_channels(), n);
  const Rng dummy(0);
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    features.col(i) = detail::backbone_forward_sample(
        m, *batch[static_cast<std::size_t>(i)], Mode::kInfer, dummy, nullptr,
        static_cast<detail::SampleCache<S>*>(nullptr), static_cast<NormStatsAccum<S>*>(nullptr),
        nullptr);
  }
  return features;
}

template <class S>
struct BackwardOutput {
  S loss = S(0);
  Model<S> grads;
  NormStatsAccum<S> stats;
  Mat<S> logits;
};

// Loss, exact parameter gradients, and batch normalization moments in one
// pass. Masks are drawn once per sample and shared by the forward and
// backward computation. Per-sample work runs in parallel; reductions happen
// in a fixed order.
template <class S>
BackwardOutput<S> backward(const Model<S>& m, const BatchView<S>& batch, const Mat<S>& labels,
                           Mode mode, Rng& rng, bool collect_stats = false,
                           RunCounters* counters = nullptr) {
  detail::validate_batch(m, batch);
  const Index n = static_cast<Index>(batch.size());
  if (labels.rows() != n || labels.cols() != m.config.n_classes) {
    throw std::invalid_argument("backward: label shape mismatch");
  }

  Rng base = rng.fork();
  const bool batch_level = m.config.batch_level_drop_path;
  std::vector<double> batch_coeffs;
  if (batch_level) {
    Rng bd = base.child({stream::kDropPath});
    batch_coeffs = detail::draw_batch_drop_coeffs(m, mode, bd, counters);
  }

  int n_threads = 1;
#ifdef _OPENMP
  n_threads = omp_get_max_threads();
#endif
  std::vector<Model<S>> thread_grads;
  thread_grads.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) thread_grads.push_back(zero_like(m));

  std::vector<double> sample_loss(static_cast<std::size_t>(n), 0.0);
  std::vector<NormStatsAccum<S>> sample_stats;
  if (collect_stats) sample_stats.resize(static_cast<std::size_t>(n));
  std::vector<RunCounters> local(static_cast<std::size_t>(n));
  Mat<S> logits(n, m.config.n_classes);
  const S inv_nk = S(1) / static_cast<S>(n * m.config.n_classes);

#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    int tid = 0;
#ifdef _OPENMP
    tid = omp_get_thread_num();
#endif
    const std::size_t si = static_cast<std::size_t>(i);
    NormStatsAccum<S>* stats = nullptr;
    if (collect_stats) {
      sample_stats[si].init_like(m);
      stats = &sample_stats[si];
    }
    detail::SampleCache<S> cache;
    const Rng sample_rng = base.child({stream::kSample, static_cast<std::uint64_t>(i)});
    const Mat<S> f = detail::backbone_forward_sample(m, *batch[si], mode, sample_rng,
                                                     batch_level ? &batch_coeffs : nullptr, &cache,
                                                     stats, &local[si]);
    const Vec<S> z = detail::head_forward(m, f);
    logits.row(i) = z.transpose();

    double loss_i = 0.0;
    Vec<S> dz(z.size());
    for (Index k = 0; k < z.size(); ++k) {
      const double zk = static_cast<double>(z[k]);
      const double yk = static_cast<double>(labels(i, k));
      loss_i += std::max(zk, 0.0) + std::log1p(std::exp(-std::abs(zk))) - yk * zk;
      double sig;
      if (zk >= 0.0) {
        sig = 1.0 / (1.0 + std::exp(-zk));
      } else {
        const double e = std::exp(zk);
        sig = e / (1.0 + e);
      }
      dz[k] = static_cast<S>(sig - yk) * inv_nk;
    }
    sample_loss[si] = loss_i;
    detail::backward_sample(m, cache, dz, thread_grads[static_cast<std::size_t>(tid)]);
  }

  BackwardOutput<S> out;
  out.grads = std::move(thread_grads[0]);
  {
    auto dst = tensor_refs(out.grads, false);
    for (int t = 1; t < n_threads; ++t) {
      auto src = tensor_refs(thread_grads[static_cast<std::size_t>(t)], false);
      for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].tensor += *src[i].tensor;
    }
  }
  double loss_acc = 0.0;
  for (Index i = 0; i < n; ++i) loss_acc += sample_loss[static_cast<std::size_t>(i)];
  out.loss = static_cast<S>(loss_acc / static_cast<double>(n * m.config.n_classes));
  if (collect_stats) {
    out.stats.init_like(m);
    for (Index i = 0; i < n; ++i) out.stats.merge(sample_stats[static_cast<std::size_t>(i)]);
  }
  if (counters != nullptr) {
    for (const auto& c : local) counters->merge(c);
  }
  out.logits = std::move(logits);
  return out;
}

}  // namespace ecgpt
