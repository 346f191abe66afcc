#pragma once

#include "entranf/core.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace entranf {

// ---------------------------------------------------------------------------
// Drift functions

inline double double_well_drift(double x) { return x - x * x * x; }

inline double double_well_obs(double x) { return 0.1 * x * x + std::sin(x); }

struct Lorenz63Params {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

inline void lorenz63_drift(const double* x, double* out, const Lorenz63Params& p = {}) {
  out[0] = -p.sigma * x[0] + p.sigma * x[1];
  out[1] = -x[0] * x[2] + p.rho * x[0] - x[1];
  out[2] = x[0] * x[1] - p.beta * x[2];
}

inline Vector lorenz63_drift(const Vector& x, const Lorenz63Params& p = {}) {
  detail::require(x.size() == 3, "lorenz63 state must have three components");
  Vector out(3);
  lorenz63_drift(x.data(), out.data(), p);
  return out;
}

/// dX_i/dt = (X_{i+1} - X_{i-2}) X_{i-1} - X_i + F with periodic indexing.
inline void lorenz96_drift(const double* x, double* out, Eigen::Index n, double forcing) {
  for (Eigen::Index i = 0; i < n; ++i) {
    const double xp1 = x[(i + 1) % n];
    const double xm1 = x[(i + n - 1) % n];
    const double xm2 = x[(i + n - 2) % n];
    out[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
  }
}

inline Vector lorenz96_drift(const Vector& x, double forcing) {
  detail::require(x.size() >= 4, "lorenz96 needs at least four components");
  Vector out(x.size());
  lorenz96_drift(x.data(), out.data(), x.size(), forcing);
  return out;
}

// ---------------------------------------------------------------------------
// Observation operators

/// coefficient * prod_c x_c^powers[c]
struct PolynomialTerm {
  double coefficient = 1.0;
  std::vector<int> powers;
};

class ObservationOperator {
 public:
  enum class Kind { identity, subset, double_well, polynomial };

  static ObservationOperator identity(Eigen::Index state_dim) {
    ObservationOperator h(Kind::identity, state_dim);
    for (Eigen::Index i = 0; i < state_dim; ++i) h.indices_.push_back(i);
    return h;
  }

  static ObservationOperator subset(Eigen::Index state_dim, std::vector<Eigen::Index> indices) {
    detail::require(!indices.empty(), "observation subset must be nonempty");
    for (auto i : indices) detail::require(i >= 0 && i < state_dim, "observation index out of range");
    ObservationOperator h(Kind::subset, state_dim);
    h.indices_ = std::move(indices);
    return h;
  }

  /// Scalar map 0.1 x^2 + sin(x).
  static ObservationOperator double_well() { return ObservationOperator(Kind::double_well, 1); }

  /// One polynomial per observed output.
  static ObservationOperator polynomial(Eigen::Index state_dim, std::vector<std::vector<PolynomialTerm>> outputs) {
    detail::require(!outputs.empty(), "polynomial operator needs at least one output");
    for (const auto& out : outputs)
      for (const auto& t : out)
        detail::require(static_cast<Eigen::Index>(t.powers.size()) == state_dim, "polynomial term arity mismatch");
    ObservationOperator h(Kind::polynomial, state_dim);
    h.polynomials_ = std::move(outputs);
    return h;
  }

  Kind kind() const noexcept { return kind_; }
  Eigen::Index state_dim() const noexcept { return state_dim_; }
  Eigen::Index obs_dim() const noexcept {
    switch (kind_) {
      case Kind::identity:
      case Kind::subset: return static_cast<Eigen::Index>(indices_.size());
      case Kind::double_well: return 1;
      case Kind::polynomial: return static_cast<Eigen::Index>(polynomials_.size());
    }
    return 0;
  }
  const std::vector<Eigen::Index>& indices() const noexcept { return indices_; }

  void apply(const double* x, double* out) const {
    switch (kind_) {
      case Kind::identity:
      case Kind::subset:
        for (std::size_t o = 0; o < indices_.size(); ++o) out[o] = x[indices_[o]];
        return;
      case Kind::double_well: out[0] = double_well_obs(x[0]); return;
      case Kind::polynomial:
        for (std::size_t o = 0; o < polynomials_.size(); ++o) {
          double acc = 0.0;
          for (const auto& t : polynomials_[o]) {
            double term = t.coefficient;
            for (std::size_t c = 0; c < t.powers.size(); ++c)
              for (int p = 0; p < t.powers[c]; ++p) term *= x[c];
            acc += term;
          }
          out[o] = acc;
        }
        return;
    }
  }

  Vector apply(const Vector& x) const {
    detail::require(x.size() == state_dim_, "observation operator dimension mismatch");
    Vector out(obs_dim());
    apply(x.data(), out.data());
    return out;
  }

  /// Row i = H(member i); N x m.
  Matrix apply_rows(const Matrix& members) const {
    detail::require(members.cols() == state_dim_, "observation operator dimension mismatch");
    Matrix out(members.rows(), obs_dim());
    Vector x(state_dim_), y(obs_dim());
    for (Eigen::Index i = 0; i < members.rows(); ++i) {
      x = members.row(i).transpose();
      apply(x.data(), y.data());
      out.row(i) = y.transpose();
    }
    return out;
  }

 private:
  ObservationOperator(Kind kind, Eigen::Index state_dim) : kind_(kind), state_dim_(state_dim) {}

  Kind kind_;
  Eigen::Index state_dim_;
  std::vector<Eigen::Index> indices_;
  std::vector<std::vector<PolynomialTerm>> polynomials_;
};

// ---------------------------------------------------------------------------
// Stochastic models

enum class Integrator { euler_maruyama, rk4_additive };

using DriftFn = std::function<void(const double* x, double* out)>;

/// dX = drift(X) dt + diag(gamma) dW, integrated with a fixed internal step.
class StochasticModel {
 public:
  StochasticModel(std::string name, Eigen::Index dim, DriftFn drift, Vector gamma, double dt,
                  Integrator integrator = Integrator::rk4_additive)
      : name_(std::move(name)), dim_(dim), drift_(std::move(drift)), gamma_(std::move(gamma)), dt_(dt),
        integrator_(integrator) {
    detail::require(dim_ >= 1, "model dimension must be positive");
    detail::require(gamma_.size() == dim_, "noise amplitude count must equal state dimension");
    detail::require((gamma_.array() >= 0.0).all(), "noise amplitudes must be nonnegative");
    detail::require(dt_ > 0.0 && std::isfinite(dt_), "internal step must be positive");
    noisy_ = (gamma_.array() > 0.0).any();
  }

  const std::string& name() const noexcept { return name_; }
  Eigen::Index dim() const noexcept { return dim_; }
  double dt() const noexcept { return dt_; }
  const Vector& gamma() const noexcept { return gamma_; }
  Integrator integrator() const noexcept { return integrator_; }
  bool stochastic() const noexcept { return noisy_; }

  void drift(const double* x, double* out) const { drift_(x, out); }

  /// Number of internal steps per interval; rejects intervals that dt does not divide.
  long steps_for(double interval) const {
    detail::require(interval >= 0.0, "interval must be nonnegative");
    const double ratio = interval / dt_;
    const long steps = std::lround(ratio);
    if (std::abs(static_cast<double>(steps) * dt_ - interval) > 1e-12)
      throw std::invalid_argument("internal step does not divide the observation interval");
    return steps;
  }

  /// One step on a raw state buffer. `work` must hold at least 5 * dim doubles.
  void step(double* x, double dt, RngStream& rng, double* work) const {
    const auto n = dim_;
    double* k1 = work;
    if (integrator_ == Integrator::euler_maruyama) {
      drift_(x, k1);
      for (Eigen::Index c = 0; c < n; ++c) x[c] += dt * k1[c];
    } else {
      double* k2 = work + n;
      double* k3 = work + 2 * n;
      double* k4 = work + 3 * n;
      double* tmp = work + 4 * n;
      drift_(x, k1);
      for (Eigen::Index c = 0; c < n; ++c) tmp[c] = x[c] + 0.5 * dt * k1[c];
      drift_(tmp, k2);
      for (Eigen::Index c = 0; c < n; ++c) tmp[c] = x[c] + 0.5 * dt * k2[c];
      drift_(tmp, k3);
      for (Eigen::Index c = 0; c < n; ++c) tmp[c] = x[c] + dt * k3[c];
      drift_(tmp, k4);
      for (Eigen::Index c = 0; c < n; ++c) x[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    }
    if (noisy_) {
      const double sq = std::sqrt(dt);
      for (Eigen::Index c = 0; c < n; ++c)
        if (gamma_[c] > 0.0) x[c] += gamma_[c] * sq * rng.normal();
    }
  }

  /// Advance a single state over `interval` using the internal step.
  void advance(Vector& x, double interval, RngStream& rng) const {
    detail::require(x.size() == dim_, "state dimension does not match model");
    const long steps = steps_for(interval);
    std::vector<double> work(static_cast<std::size_t>(5 * dim_));
    for (long s = 0; s < steps; ++s) step(x.data(), dt_, rng, work.data());
    if (!x.allFinite()) throw NumericalError("model produced a non-finite state");
  }

  /// Advance each member (row) independently, in member order.
  Matrix advance_rows(const Matrix& members, double interval, RngStream& rng) const {
    detail::require(members.cols() == dim_, "ensemble dimension does not match model");
    const long steps = steps_for(interval);
    Matrix out = members;
    std::vector<double> x(static_cast<std::size_t>(dim_));
    std::vector<double> work(static_cast<std::size_t>(5 * dim_));
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      for (Eigen::Index c = 0; c < dim_; ++c) x[c] = out(i, c);
      for (long s = 0; s < steps; ++s) step(x.data(), dt_, rng, work.data());
      for (Eigen::Index c = 0; c < dim_; ++c) out(i, c) = x[c];
    }
    if (!out.allFinite()) throw NumericalError("model produced a non-finite state");
    return out;
  }

 private:
  std::string name_;
  Eigen::Index dim_;
  DriftFn drift_;
  Vector gamma_;
  double dt_;
  Integrator integrator_;
  bool noisy_ = false;
};

/// One RK4 step of the drift followed by additive noise gamma * sqrt(dt) * xi.
inline Vector step_rk4_additive(const StochasticModel& model, const Vector& x, double dt, RngStream& rng) {
  detail::require(dt > 0.0, "step must be positive");
  detail::require(x.size() == model.dim(), "state dimension does not match model");
  StochasticModel rk4(model.name(), model.dim(), [&](const double* a, double* b) { model.drift(a, b); },
                      model.gamma(), dt, Integrator::rk4_additive);
  Vector out = x;
  std::vector<double> work(static_cast<std::size_t>(5 * model.dim()));
  rk4.step(out.data(), dt, rng, work.data());
  if (!out.allFinite()) throw NumericalError("model produced a non-finite state");
  return out;
}

inline StochasticModel make_double_well(double gamma = 0.8, double dt = 0.01,
                                        Integrator integrator = Integrator::rk4_additive) {
  return StochasticModel("doublewell", 1, [](const double* x, double* o) { o[0] = double_well_drift(x[0]); },
                         Vector::Constant(1, gamma), dt, integrator);
}

inline StochasticModel make_lorenz63(double gamma = 1.0, double dt = 0.01, Lorenz63Params p = {},
                                     Integrator integrator = Integrator::rk4_additive) {
  return StochasticModel("lorenz63", 3, [p](const double* x, double* o) { lorenz63_drift(x, o, p); },
                         Vector::Constant(3, gamma), dt, integrator);
}

inline StochasticModel make_lorenz96(Eigen::Index n = 20, double forcing = 8.0, double gamma = 0.0,
                                     double dt = 0.01, Integrator integrator = Integrator::rk4_additive) {
  detail::require(n >= 4, "lorenz96 needs at least four components");
  return StochasticModel("lorenz96", n, [n, forcing](const double* x, double* o) { lorenz96_drift(x, o, n, forcing); },
                         Vector::Constant(n, gamma), dt, integrator);
}

/// Identity dynamics without noise, used for the static inverse problems.
inline StochasticModel make_static(Eigen::Index dim, std::string name) {
  return StochasticModel(std::move(name), dim, [dim](const double*, double* o) {
    for (Eigen::Index c = 0; c < dim; ++c) o[c] = 0.0;
  }, Vector::Zero(dim), 1.0, Integrator::euler_maruyama);
}

// ---------------------------------------------------------------------------
// Quadrature reference posterior for the static problems

struct GaussianPrior {
  Vector mean;
  Vector std;
};

struct PosteriorGrid {
  Vector lower;
  Vector upper;
  int points = 401;  // per axis, odd so the half-resolution check lines up
};

/// Posterior density tabulated on a tensor grid (1-D or 2-D).
/// density is stored with the last axis fastest.
struct PosteriorTable {
  std::vector<Vector> axes;
  Vector density;
  Vector mean;
  Vector map;
  double normalization_error = 0.0;
};

namespace detail {

inline double trapezoid_weight(int i, int points, double h) {
  return (i == 0 || i == points - 1) ? 0.5 * h : h;
}

}  // namespace detail

inline PosteriorTable static_posterior_oracle(const GaussianPrior& prior, const ObservationOperator& h,
                                              const Vector& obs, const Vector& noise_std,
                                              const PosteriorGrid& grid) {
  const auto dim = prior.mean.size();
  detail::require(dim == 1 || dim == 2, "quadrature oracle supports 1-D and 2-D states");
  detail::require(prior.std.size() == dim && (prior.std.array() > 0.0).all(), "prior std must be positive");
  detail::require(h.state_dim() == dim, "observation operator dimension mismatch");
  detail::require(obs.size() == h.obs_dim() && noise_std.size() == obs.size(), "observation dimension mismatch");
  detail::require((noise_std.array() > 0.0).all(), "noise std must be positive");
  detail::require(grid.points >= 5 && grid.points % 2 == 1, "grid needs an odd number of points >= 5");
  detail::require(grid.lower.size() == dim && grid.upper.size() == dim, "grid bounds dimension mismatch");

  PosteriorTable table;
  const int p = grid.points;
  Vector step(dim);
  for (Eigen::Index d = 0; d < dim; ++d) {
    detail::require(grid.upper[d] > grid.lower[d], "grid bounds must be increasing");
    step[d] = (grid.upper[d] - grid.lower[d]) / (p - 1);
    table.axes.push_back(Vector::LinSpaced(p, grid.lower[d], grid.upper[d]));
  }
  const Eigen::Index cells = dim == 1 ? p : static_cast<Eigen::Index>(p) * p;

  Vector log_density(cells);
  Vector x(dim), y(h.obs_dim());
  for (Eigen::Index idx = 0; idx < cells; ++idx) {
    if (dim == 1) {
      x[0] = table.axes[0][idx];
    } else {
      x[0] = table.axes[0][idx / p];
      x[1] = table.axes[1][idx % p];
    }
    double lp = 0.0;
    for (Eigen::Index d = 0; d < dim; ++d) {
      const double z = (x[d] - prior.mean[d]) / prior.std[d];
      lp -= 0.5 * z * z;
    }
    h.apply(x.data(), y.data());
    for (Eigen::Index o = 0; o < y.size(); ++o) {
      const double z = (obs[o] - y[o]) / noise_std[o];
      lp -= 0.5 * z * z;
    }
    log_density[idx] = lp;
  }
  const double peak = log_density.maxCoeff();
  Vector dens = (log_density.array() - peak).exp().matrix();

  auto integrate = [&](int stride, const std::function<double(Eigen::Index)>& f) {
    const int q = (p - 1) / stride + 1;
    double acc = 0.0;
    if (dim == 1) {
      for (int i = 0; i < q; ++i) acc += detail::trapezoid_weight(i, q, step[0] * stride) * f(i * stride);
    } else {
      for (int i = 0; i < q; ++i)
        for (int j = 0; j < q; ++j)
          acc += detail::trapezoid_weight(i, q, step[0] * stride) * detail::trapezoid_weight(j, q, step[1] * stride) *
                 f(static_cast<Eigen::Index>(i * stride) * p + j * stride);
    }
    return acc;
  };

  auto density_at = [&](Eigen::Index idx) { return dens[idx]; };
  const double z_fine = integrate(1, density_at);
  const double z_coarse = integrate(2, density_at);
  table.normalization_error = std::abs(z_fine - z_coarse) / z_fine;
  if (!(table.normalization_error <= 1e-6))
    throw std::invalid_argument("quadrature grid too coarse: normalization error " +
                                std::to_string(table.normalization_error));
  dens /= z_fine;
  table.density = dens;

  table.mean = Vector::Zero(dim);
  for (Eigen::Index d = 0; d < dim; ++d) {
    table.mean[d] = integrate(1, [&](Eigen::Index idx) {
      const double coord = dim == 1 ? table.axes[0][idx] : (d == 0 ? table.axes[0][idx / p] : table.axes[1][idx % p]);
      return coord * dens[idx];
    });
  }
  Eigen::Index best = 0;
  dens.maxCoeff(&best);
  table.map = Vector(dim);
  if (dim == 1) {
    table.map[0] = table.axes[0][best];
  } else {
    table.map[0] = table.axes[0][best / p];
    table.map[1] = table.axes[1][best % p];
  }
  return table;
}

/// Trapezoid integral of a tabulated density (sanity check helper).
inline double integrate_table(const PosteriorTable& t) {
  const int p = static_cast<int>(t.axes[0].size());
  const double h0 = t.axes[0][1] - t.axes[0][0];
  double acc = 0.0;
  if (t.axes.size() == 1) {
    for (int i = 0; i < p; ++i) acc += detail::trapezoid_weight(i, p, h0) * t.density[i];
    return acc;
  }
  const double h1 = t.axes[1][1] - t.axes[1][0];
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j)
      acc += detail::trapezoid_weight(i, p, h0) * detail::trapezoid_weight(j, p, h1) *
             t.density[static_cast<Eigen::Index>(i) * p + j];
  return acc;
}

}  // namespace entranf
