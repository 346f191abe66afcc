#pragma once

#include "entranf/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace entranf {

/// 97.5% standard normal quantile, the two-sided 95% band.
inline constexpr double kDefaultTAlpha = 1.959964;

/// |mean - truth|_2 / sqrt(n)
inline double rmse_step(const Vector& mean, const Vector& truth) {
  detail::require(mean.size() == truth.size(), "rmse arguments differ in dimension");
  return (mean - truth).norm() / std::sqrt(static_cast<double>(mean.size()));
}

/// sqrt(tr(C) / n); a negative trace from roundoff is clipped to zero and flagged.
inline double ens_step(const Matrix& cov, bool* clipped = nullptr) {
  detail::require(cov.rows() == cov.cols() && cov.rows() > 0, "ensemble spread needs a square matrix");
  const double t = cov.trace() / static_cast<double>(cov.rows());
  if (clipped) *clipped = t < 0.0;
  return std::sqrt(std::max(t, 0.0));
}

/// Fraction of components with |mean_i - truth_i| / sqrt(C_ii) <= t_alpha.
/// Zero-variance components count as covered only when the error is exactly zero.
inline double cp_step(const Vector& mean, const Vector& truth, const Vector& cov_diag, double t_alpha) {
  detail::require(mean.size() == truth.size() && mean.size() == cov_diag.size(), "coverage arguments differ in dimension");
  int covered = 0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double err = std::abs(mean[i] - truth[i]);
    if (cov_diag[i] <= 0.0) {
      covered += err == 0.0 ? 1 : 0;
    } else if (err / std::sqrt(cov_diag[i]) <= t_alpha) {
      ++covered;
    }
  }
  return static_cast<double>(covered) / static_cast<double>(mean.size());
}

struct MetricSeries {
  std::vector<double> values;
  double time_average = 0.0;
  int trial_id = 0;

  static MetricSeries from(std::vector<double> values, int trial_id) {
    MetricSeries s;
    s.values = std::move(values);
    s.trial_id = trial_id;
    double acc = 0.0;
    for (double v : s.values) acc += v;
    s.time_average = s.values.empty() ? std::numeric_limits<double>::quiet_NaN()
                                      : acc / static_cast<double>(s.values.size());
    return s;
  }
};

struct SummaryStat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

/// Mean and standard error across trials of the time-averaged metric. Trials are
/// reduced in trial-id order; non-finite averages are skipped.
inline SummaryStat aggregate(std::vector<MetricSeries> series) {
  std::sort(series.begin(), series.end(), [](const auto& a, const auto& b) { return a.trial_id < b.trial_id; });
  std::vector<double> xs;
  for (const auto& s : series)
    if (std::isfinite(s.time_average)) xs.push_back(s.time_average);
  SummaryStat out;
  out.count = xs.size();
  if (xs.empty()) return out;
  double acc = 0.0;
  for (double x : xs) acc += x;
  out.mean = acc / static_cast<double>(xs.size());
  if (xs.size() == 1) {
    out.se = 0.0;
    return out;
  }
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / static_cast<double>(xs.size() - 1)) / std::sqrt(static_cast<double>(xs.size()));
  return out;
}

}  // namespace entranf
