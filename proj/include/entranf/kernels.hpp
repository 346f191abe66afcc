#pragma once

#include "entranf/core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace entranf {

enum class KernelKind { linear, gaussian };

/// Positive-definite kernel. Linear: x'y + 1. Gaussian: exp(-|x-y|^p / r^2) with
/// p = `exponent` (2 is the squared-exponential default, 1 the literal variant).
struct Kernel {
  KernelKind kind = KernelKind::gaussian;
  double bandwidth = 1.0;
  double exponent = 2.0;

  static Kernel linear() { return Kernel{KernelKind::linear, 1.0, 2.0}; }
  static Kernel gaussian(double bandwidth, double exponent = 2.0) {
    detail::require(bandwidth > 0.0 && std::isfinite(bandwidth), "gaussian bandwidth must be positive");
    detail::require(exponent == 1.0 || exponent == 2.0, "gaussian exponent must be 1 or 2");
    return Kernel{KernelKind::gaussian, bandwidth, exponent};
  }
};

namespace detail {

inline double dot(const double* x, const double* y, Eigen::Index n) {
  double acc = 0.0;
  for (Eigen::Index c = 0; c < n; ++c) acc += x[c] * y[c];
  return acc;
}

inline double squared_distance(const double* x, const double* y, Eigen::Index n) {
  double acc = 0.0;
  for (Eigen::Index c = 0; c < n; ++c) {
    const double d = x[c] - y[c];
    acc += d * d;
  }
  return acc;
}

// Pointer form shared by kernel_eval and gram so both produce identical bits.
inline double kernel_value(const Kernel& k, const double* x, const double* y, Eigen::Index n) {
  if (k.kind == KernelKind::linear) return dot(x, y, n) + 1.0;
  const double d2 = squared_distance(x, y, n);
  const double r2 = k.bandwidth * k.bandwidth;
  return k.exponent == 2.0 ? std::exp(-d2 / r2) : std::exp(-std::sqrt(d2) / r2);
}

// Gradient of k(x, y) with respect to x, accumulated as out += scale * grad.
inline void kernel_grad_first_acc(const Kernel& k, const double* x, const double* y, Eigen::Index n,
                                  double kval, double scale, double* out) {
  if (k.kind == KernelKind::linear) {
    for (Eigen::Index c = 0; c < n; ++c) out[c] += scale * y[c];
    return;
  }
  const double r2 = k.bandwidth * k.bandwidth;
  if (k.exponent == 2.0) {
    const double f = -2.0 * kval / r2 * scale;
    for (Eigen::Index c = 0; c < n; ++c) out[c] += f * (x[c] - y[c]);
    return;
  }
  const double dist = std::sqrt(squared_distance(x, y, n));
  if (dist == 0.0) return;  // subgradient 0 at coincident points
  const double f = -kval / (r2 * dist) * scale;
  for (Eigen::Index c = 0; c < n; ++c) out[c] += f * (x[c] - y[c]);
}

// Row-major copy so each member is a contiguous block of `dim` doubles.
inline std::vector<double> packed_rows(const Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.rows() * m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(i * m.cols() + c)] = m(i, c);
  return out;
}

}  // namespace detail

inline double kernel_eval(const Kernel& k, const Vector& x, const Vector& y) {
  detail::require(x.size() == y.size(), "kernel arguments differ in dimension");
  return detail::kernel_value(k, x.data(), y.data(), x.size());
}

/// Gram matrix between the rows of two point sets (N_a x n and N_b x n).
inline Matrix gram_points(const Kernel& k, const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(), "gram arguments differ in dimension");
  const auto n = a.cols();
  const auto pa = detail::packed_rows(a);
  const auto pb = detail::packed_rows(b);
  Matrix g(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      g(i, j) = detail::kernel_value(k, pa.data() + i * n, pb.data() + j * n, n);
  return g;
}

inline Matrix gram(const Kernel& k, const Ensemble& a, const Ensemble& b) {
  return gram_points(k, a.members(), b.members());
}

/// Median (upper median for even counts) of the pairwise distances between distinct members.
inline double median_pairwise_distance(const Matrix& points) {
  const auto n = points.cols();
  const auto packed = detail::packed_rows(points);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(points.rows() * (points.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = i + 1; j < points.rows(); ++j)
      d.push_back(std::sqrt(detail::squared_distance(packed.data() + i * n, packed.data() + j * n, n)));
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

}  // namespace entranf
