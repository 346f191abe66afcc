#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace entranf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when a numerical routine would produce or received non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a linear system is singular beyond the jitter policy.
class SingularMatrixError : public NumericalError {
 public:
  SingularMatrixError(const std::string& what, double condition)
      : NumericalError(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

namespace detail {

inline void require(bool ok, const char* message) {
  if (!ok) throw std::invalid_argument(message);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace detail

/// N members of dimension n, stored dense as an N x n matrix (one column per
/// state component, one row per member).
class Ensemble {
 public:
  Ensemble() = default;

  explicit Ensemble(Matrix members) : members_(std::move(members)) {
    detail::require(members_.rows() >= 2, "ensemble needs at least two members");
    detail::require(members_.cols() >= 1, "ensemble state dimension must be positive");
    if (!detail::all_finite(members_)) throw NumericalError("ensemble contains non-finite entries");
  }

  static Ensemble from_members(std::span<const Vector> members) {
    detail::require(!members.empty(), "ensemble needs members");
    Matrix m(static_cast<Eigen::Index>(members.size()), members.front().size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      detail::require(members[i].size() == m.cols(), "ensemble members differ in dimension");
      m.row(static_cast<Eigen::Index>(i)) = members[i].transpose();
    }
    return Ensemble(std::move(m));
  }

  Eigen::Index size() const noexcept { return members_.rows(); }
  Eigen::Index dim() const noexcept { return members_.cols(); }

  Vector member(Eigen::Index i) const { return members_.row(i).transpose(); }
  const Matrix& members() const noexcept { return members_; }

  bool operator==(const Ensemble& other) const {
    return members_.rows() == other.members_.rows() && members_.cols() == other.members_.cols() &&
           members_ == other.members_;
  }

 private:
  Matrix members_;
};

inline constexpr double kWeightTolerance = 1e-12;
inline constexpr double kWeightRenormalizeTolerance = 1e-8;

/// Ensemble with nonnegative weights summing to one.
class WeightedEnsemble {
 public:
  WeightedEnsemble(Ensemble ensemble, Vector weights)
      : ensemble_(std::move(ensemble)), weights_(std::move(weights)) {
    detail::require(weights_.size() == ensemble_.size(), "weight count must equal member count");
    if (!detail::all_finite(weights_)) throw NumericalError("weights contain non-finite entries");
    detail::require((weights_.array() >= 0.0).all(), "weights must be nonnegative");
    const double total = weights_.sum();
    const double drift = std::abs(total - 1.0);
    if (drift > kWeightRenormalizeTolerance) throw std::invalid_argument("weights are not normalized");
    if (drift > kWeightTolerance) weights_ /= total;
  }

  static WeightedEnsemble uniform(Ensemble ensemble) {
    const auto n = ensemble.size();
    return WeightedEnsemble(std::move(ensemble), Vector::Constant(n, 1.0 / static_cast<double>(n)));
  }

  const Ensemble& ensemble() const noexcept { return ensemble_; }
  const Vector& weights() const noexcept { return weights_; }
  Eigen::Index size() const noexcept { return ensemble_.size(); }
  Eigen::Index dim() const noexcept { return ensemble_.dim(); }

 private:
  Ensemble ensemble_;
  Vector weights_;
};

namespace detail {

inline Vector weighted_sum(const Matrix& members, const Vector& weights) {
  Vector out = Vector::Zero(members.cols());
  for (Eigen::Index c = 0; c < members.cols(); ++c) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < members.rows(); ++i) acc += weights[i] * members(i, c);
    out[c] = acc;
  }
  return out;
}

}  // namespace detail

inline Vector ensemble_mean(const Ensemble& e) {
  return detail::weighted_sum(e.members(),
                              Vector::Constant(e.size(), 1.0 / static_cast<double>(e.size())));
}

inline Vector weighted_mean(const WeightedEnsemble& we) {
  return detail::weighted_sum(we.ensemble().members(), we.weights());
}

/// Unbiased sample covariance, 1/(N-1) normalization.
inline Matrix sample_covariance(const Ensemble& e) {
  detail::require(e.size() >= 2, "sample covariance needs at least two members");
  const Matrix centered = e.members().rowwise() - ensemble_mean(e).transpose();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(e.size() - 1);
  return 0.5 * (cov + cov.transpose());
}

/// Effective sample size 1 / sum(w^2).
inline double effective_sample_size(const Vector& weights) { return 1.0 / weights.squaredNorm(); }

enum class StreamRole : std::uint64_t {
  init = 1,
  model_noise = 2,
  obs_noise = 3,
  perturbation = 4,
  optimizer = 5,
  truth = 6,
  reference = 7,
};

/// Deterministic random stream identified by (seed, stream-id).
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32)};
    engine_.seed(seq);
  }

  /// Stream for one role within one trial; distinct (trial, role) pairs never collide.
  static RngStream for_role(std::uint64_t trial_seed, StreamRole role, std::uint64_t sub = 0) {
    return RngStream(trial_seed, (static_cast<std::uint64_t>(role) << 32) | sub);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline std::vector<double> gaussian_draws(RngStream& rng, std::size_t count, double mean, double std) {
  detail::require(std >= 0.0 && std::isfinite(std), "standard deviation must be nonnegative");
  std::vector<double> out(count);
  for (auto& v : out) v = mean + std * rng.normal();
  return out;
}

/// count x dim matrix of independent N(0, std_c^2) draws, column c scaled by stds[c].
inline Matrix gaussian_matrix(RngStream& rng, Eigen::Index count, const Vector& stds) {
  Matrix out(count, stds.size());
  for (Eigen::Index i = 0; i < count; ++i)
    for (Eigen::Index c = 0; c < stds.size(); ++c) out(i, c) = stds[c] * rng.normal();
  return out;
}

}  // namespace entranf
