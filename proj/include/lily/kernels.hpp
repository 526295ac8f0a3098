#pragma once

// Forward kernels for the differentiable primitive set that are not plain
// linear algebra. Both the eager backend and the tape call exactly these
// functions, so recorded and direct evaluations agree bitwise.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "lily/numkit.hpp"

namespace lily {

inline constexpr double kLayerNormEps = 1e-5;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& a) {
  Matrix r = a;
  for (double& v : r.data()) v = gelu_scalar(v);
  return r;
}

inline Matrix relu(const Matrix& a) {
  Matrix r = a;
  for (double& v : r.data()) v = v > 0.0 ? v : 0.0;
  return r;
}

/// Per-row normalization to zero mean and unit variance (no affine part).
/// Also returns the per-row inverse standard deviations for the backward pass.
inline Matrix layer_norm(const Matrix& a, std::vector<double>* inv_std = nullptr) {
  Matrix r(a.rows(), a.cols());
  if (inv_std) inv_std->resize(a.rows());
  const double n = static_cast<double>(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto x = a.row(i);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    auto y = r.row(i);
    for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mean) * is;
    if (inv_std) (*inv_std)[i] = is;
  }
  return r;
}

/// Mean over rows of -log softmax(logits_i)[label_i]; returns a 1x1 matrix.
inline Matrix cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows())
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     logits.shape_string() + " logits");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= z.size())
      throw std::out_of_range("cross_entropy: label out of range");
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    total += mx + std::log(s) - z[static_cast<std::size_t>(y)];
  }
  return Matrix(1, 1, total / static_cast<double>(logits.rows()));
}

/// Mean of squared differences; returns a 1x1 matrix.
inline Matrix mse(const Matrix& pred, const Matrix& target) {
  detail::require(pred.same_shape(target), "mse", pred, target);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  return Matrix(1, 1, s / static_cast<double>(pred.size()));
}

inline Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols())
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + a.shape_string());
  Matrix r(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) r(i, j - begin) = a(i, j);
  return r;
}

inline Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols", parts[0], p);
    cols += p.cols();
  }
  Matrix r(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) r(i, off + j) = p(i, j);
    off += p.cols();
  }
  return r;
}

/// sum_i weights[0,i] * terms[i], accumulated in index order from zero.
inline Matrix weighted_sum(const Matrix& weights, std::span<const Matrix> terms) {
  if (weights.rows() != 1 || weights.cols() != terms.size() || terms.empty())
    throw ShapeError("weighted_sum: " + weights.shape_string() + " weights for " +
                     std::to_string(terms.size()) + " terms");
  Matrix r(terms[0].rows(), terms[0].cols());
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(terms[i].same_shape(r), "weighted_sum", r, terms[i]);
    axpy(weights(0, i), terms[i], r);
  }
  return r;
}

}  // namespace lily
