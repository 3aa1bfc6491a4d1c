#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "megalab/autodiff.hpp"
#include "megalab/error.hpp"

namespace megalab {

// Index of the codebook row closest to `h` in Euclidean distance; ties go to
// the lowest index.
template <typename DerivedH, typename DerivedC>
int nearest_code(const Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedC>& codebook) {
  using Scalar = typename DerivedC::Scalar;
  if (!h.allFinite()) {
    throw NumericError("quantize: non-finite input vector");
  }
  int best = 0;
  Scalar best_dist = std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
    const Scalar d = (codebook.row(k) - h.derived().reshaped().transpose()).squaredNorm();
    if (d < best_dist) {
      best_dist = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

template <typename Scalar>
struct Quantized {
  int index = 0;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> z_q;
  Scalar codebook_loss = 0;  // ||sg[h] - z_q||^2
  Scalar commit_loss = 0;    // ||sg[z_q] - h||^2
};

template <typename DerivedH, typename DerivedC>
Quantized<typename DerivedC::Scalar> quantize(const Eigen::MatrixBase<DerivedH>& h,
                                              const Eigen::MatrixBase<DerivedC>& codebook) {
  Quantized<typename DerivedC::Scalar> q;
  q.index = nearest_code(h, codebook);
  q.z_q = codebook.row(q.index);
  const auto sq = (q.z_q - h.derived().reshaped().transpose()).squaredNorm();
  q.codebook_loss = sq;
  q.commit_loss = sq;
  return q;
}

// Differentiable sequence quantizer over the rows of `h`.
struct VectorQuantized {
  std::vector<int> codes;
  ad::Var quantized;      // straight-through: value z_q, gradient -> h
  ad::Var codebook_loss;  // mean over rows of ||sg[h] - z_q||^2 (grad -> codebook)
  ad::Var commit_loss;    // mean over rows of ||sg[z_q] - h||^2 (grad -> h)
};

[[nodiscard]] VectorQuantized vector_quantize(const ad::Var& h, const ad::Var& codebook);

// Row i repeated durations[i] times.
[[nodiscard]] std::vector<int> expand_durations(std::span<const int> durations);

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> length_regulate(
    const Eigen::MatrixBase<Derived>& x, std::span<const int> durations) {
  if (static_cast<Eigen::Index>(durations.size()) != x.rows()) {
    throw ValidationError("length_regulate: " + std::to_string(durations.size()) + " durations for " +
                          std::to_string(x.rows()) + " rows");
  }
  const auto index = expand_durations(durations);
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(static_cast<Eigen::Index>(index.size()),
                                                                             x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  return out;
}

[[nodiscard]] ad::Var length_regulate(const ad::Var& x, std::span<const int> durations);

// phonemes x frames averaging operator over each phoneme's frame span; a
// zero-duration phoneme gets an all-zero row.
[[nodiscard]] Eigen::MatrixXd phoneme_pooling_matrix(std::span<const int> durations);

}  // namespace megalab
