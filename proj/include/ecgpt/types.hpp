// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace ecgpt {

using Index = Eigen::Index;

// Dense types templated on scalar; float for training, double for oracles.
template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

// Binary label matrix, one row per record, one column per class.
using LabelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// A batch of per-sample [channels x time] matrices, addressed by pointer so
// callers can hand out views into a resident dataset without copying.
template <class Scalar>
using BatchView = std::vector<const Mat<Scalar>*>;

template <class Scalar>
BatchView<Scalar> make_batch_view(const std::vector<Mat<Scalar>>& samples) {
  BatchView<Scalar> view;
  view.reserve(samples.size());
  for (const auto& s : samples) view.push_back(&s);
  return view;
}

}  // namespace ecgpt
