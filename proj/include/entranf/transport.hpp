#pragma once

#include "entranf/core.hpp"
#include "entranf/mmd.hpp"
#include "entranf/models.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <variant>
#include <vector>

namespace entranf {

/// Row i = y + eps_i - H(x_i), the per-member innovation fed to the map.
inline Matrix innovations(const Matrix& forecast, const Vector& obs, const Matrix& obs_noise,
                          const ObservationOperator& h) {
  detail::require(obs.size() == h.obs_dim(), "observation dimension mismatch");
  detail::require(obs_noise.rows() == forecast.rows() && obs_noise.cols() == obs.size(),
                  "observation noise draws must be N x m");
  Matrix d = h.apply_rows(forecast);
  d = (-d).rowwise() + obs.transpose();
  d += obs_noise;
  return d;
}

/// Observation perturbations with their sample correlation against the forecast ensemble
/// and its predicted observations removed.
///
/// Each noise column is projected onto the orthogonal complement of span{1, X, H(X)}
/// (columns over members) and rescaled to its original norm. With such draws the
/// ensemble estimators of E[X eps^T] and E[H(X) eps^T] vanish exactly, so the empirical
/// penalized linear-kernel loss is minimized by the closed-form gain. Falls back to the
/// raw draws when N is too small to leave a nontrivial complement.
inline Matrix decorrelated_perturbations(const Matrix& draws, const Matrix& forecast, const Matrix& predicted) {
  const auto n_members = draws.rows();
  detail::require(forecast.rows() == n_members && predicted.rows() == n_members, "perturbation shape mismatch");
  Matrix basis(n_members, 1 + forecast.cols() + predicted.cols());
  basis.col(0).setOnes();
  basis.middleCols(1, forecast.cols()) = forecast;
  basis.rightCols(predicted.cols()) = predicted;
  Eigen::ColPivHouseholderQR<Matrix> qr(basis);
  const auto rank = qr.rank();
  if (n_members - rank < 2) return draws;
  const Matrix q = Matrix(qr.householderQ()).leftCols(rank);
  Matrix out = draws - q * (q.transpose() * draws);
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double before = draws.col(c).norm();
    const double after = out.col(c).norm();
    if (after > 0.0) out.col(c) *= before / after;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Innovation maps

/// x -> x + T d with T of shape state_dim x obs_dim.
struct LinearInnovationMap {
  Matrix gain;
};

enum class Activation { tanh, identity };

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;
  Activation activation = Activation::tanh;
};

/// Fully connected network from obs_dim to state_dim; last layer is affine.
struct FeedforwardMap {
  std::vector<DenseLayer> layers;
};

/// Pre-activations and activations from a batched forward pass (columns = members).
struct ForwardCache {
  std::vector<Matrix> inputs;          // A_{l-1} for each layer l
  std::vector<Matrix> preactivations;  // Z_l
  Matrix output;                       // state_dim x N
};

struct LayerGradient {
  Matrix weights;
  Vector bias;
};

namespace detail {

inline Matrix activate(const Matrix& z, Activation a) {
  return a == Activation::tanh ? Matrix(z.array().tanh().matrix()) : z;
}

}  // namespace detail

inline void validate(const FeedforwardMap& map, Eigen::Index obs_dim, Eigen::Index state_dim) {
  detail::require(!map.layers.empty(), "feedforward map needs at least one layer");
  Eigen::Index in = obs_dim;
  for (const auto& layer : map.layers) {
    detail::require(layer.weights.cols() == in, "feedforward layer dimensions do not chain");
    detail::require(layer.bias.size() == layer.weights.rows(), "feedforward bias size mismatch");
    in = layer.weights.rows();
  }
  detail::require(in == state_dim, "feedforward output dimension must equal state dimension");
  detail::require(map.layers.back().activation == Activation::identity, "final activation must be identity");
}

/// Batched forward pass; `input` is obs_dim x N.
inline ForwardCache feedforward_forward(const FeedforwardMap& map, const Matrix& input) {
  ForwardCache cache;
  Matrix a = input;
  for (const auto& layer : map.layers) {
    cache.inputs.push_back(a);
    Matrix z = (layer.weights * a).colwise() + layer.bias;
    a = detail::activate(z, layer.activation);
    cache.preactivations.push_back(std::move(z));
  }
  cache.output = std::move(a);
  return cache;
}

/// Reverse-mode gradients of a scalar loss. `upstream` is state_dim x N and holds
/// d loss / d output for each member.
inline std::vector<LayerGradient> feedforward_gradients(const FeedforwardMap& map, const Matrix& upstream,
                                                        const ForwardCache& cache) {
  const auto layers = map.layers.size();
  std::vector<LayerGradient> grads(layers);
  Matrix delta = upstream;
  for (std::size_t l = layers; l-- > 0;) {
    const auto& layer = map.layers[l];
    if (layer.activation == Activation::tanh) {
      const Matrix a = cache.preactivations[l].array().tanh().matrix();
      delta = (delta.array() * (1.0 - a.array().square())).matrix();
    }
    grads[l].weights = delta * cache.inputs[l].transpose();
    grads[l].bias = delta.rowwise().sum();
    if (l > 0) delta = layer.weights.transpose() * delta;
  }
  return grads;
}

/// Glorot-uniform weights scaled down so the initial map is close to zero; zero biases.
inline FeedforwardMap make_feedforward_map(Eigen::Index obs_dim, const std::vector<int>& hidden,
                                           Eigen::Index state_dim, RngStream& rng, double scale = 1e-2) {
  FeedforwardMap map;
  Eigen::Index in = obs_dim;
  std::vector<Eigen::Index> widths(hidden.begin(), hidden.end());
  widths.push_back(state_dim);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const Eigen::Index out = widths[l];
    detail::require(out >= 1, "layer width must be positive");
    const double limit = scale * std::sqrt(6.0 / static_cast<double>(in + out));
    DenseLayer layer;
    layer.weights.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = limit * (2.0 * rng.uniform() - 1.0);
    layer.bias = Vector::Zero(out);
    layer.activation = l + 1 == widths.size() ? Activation::identity : Activation::tanh;
    map.layers.push_back(std::move(layer));
    in = out;
  }
  return map;
}

/// Linear gain or feedforward network applied to innovations.
class InnovationMap {
 public:
  InnovationMap(LinearInnovationMap m) : impl_(std::move(m)) {}  // NOLINT(google-explicit-constructor)
  InnovationMap(FeedforwardMap m) : impl_(std::move(m)) {}       // NOLINT(google-explicit-constructor)

  static InnovationMap zero_linear(Eigen::Index state_dim, Eigen::Index obs_dim) {
    return LinearInnovationMap{Matrix::Zero(state_dim, obs_dim)};
  }

  bool is_linear() const noexcept { return std::holds_alternative<LinearInnovationMap>(impl_); }
  const LinearInnovationMap& linear() const { return std::get<LinearInnovationMap>(impl_); }
  const FeedforwardMap& feedforward() const { return std::get<FeedforwardMap>(impl_); }

  void validate(Eigen::Index state_dim, Eigen::Index obs_dim) const {
    if (is_linear()) {
      detail::require(linear().gain.rows() == state_dim && linear().gain.cols() == obs_dim,
                      "linear map must be state_dim x obs_dim");
    } else {
      entranf::validate(feedforward(), obs_dim, state_dim);
    }
  }

  /// Row i = T(d_i) for innovations D (N x m).
  Matrix increments(const Matrix& d) const {
    if (is_linear()) return d * linear().gain.transpose();
    return feedforward_forward(feedforward(), d.transpose()).output.transpose();
  }

  Eigen::Index parameter_count() const {
    if (is_linear()) return linear().gain.size();
    Eigen::Index count = 0;
    for (const auto& l : feedforward().layers) count += l.weights.size() + l.bias.size();
    return count;
  }

  Vector parameters() const {
    Vector p(parameter_count());
    if (is_linear()) {
      p = Eigen::Map<const Vector>(linear().gain.data(), linear().gain.size());
      return p;
    }
    Eigen::Index at = 0;
    for (const auto& l : feedforward().layers) {
      p.segment(at, l.weights.size()) = Eigen::Map<const Vector>(l.weights.data(), l.weights.size());
      at += l.weights.size();
      p.segment(at, l.bias.size()) = l.bias;
      at += l.bias.size();
    }
    return p;
  }

  void set_parameters(const Vector& p) {
    detail::require(p.size() == parameter_count(), "parameter vector size mismatch");
    if (is_linear()) {
      auto& g = std::get<LinearInnovationMap>(impl_).gain;
      Eigen::Map<Vector>(g.data(), g.size()) = p;
      return;
    }
    Eigen::Index at = 0;
    for (auto& l : std::get<FeedforwardMap>(impl_).layers) {
      Eigen::Map<Vector>(l.weights.data(), l.weights.size()) = p.segment(at, l.weights.size());
      at += l.weights.size();
      l.bias = p.segment(at, l.bias.size());
      at += l.bias.size();
    }
  }

  /// Increments for D and, given upstream gradients G (N x n) of a loss with respect to
  /// the increments, the flattened parameter gradient.
  Vector parameter_gradient(const Matrix& d, const Matrix& upstream) const {
    if (is_linear()) {
      const Matrix g = upstream.transpose() * d;  // n x m
      return Eigen::Map<const Vector>(g.data(), g.size());
    }
    const auto cache = feedforward_forward(feedforward(), d.transpose());
    const auto grads = feedforward_gradients(feedforward(), upstream.transpose(), cache);
    Vector p(parameter_count());
    Eigen::Index at = 0;
    for (const auto& g : grads) {
      p.segment(at, g.weights.size()) = Eigen::Map<const Vector>(g.weights.data(), g.weights.size());
      at += g.weights.size();
      p.segment(at, g.bias.size()) = g.bias;
      at += g.bias.size();
    }
    return p;
  }

 private:
  std::variant<LinearInnovationMap, FeedforwardMap> impl_;
};

/// member i -> x_i + T(y + eps_i - H(x_i)).
inline Ensemble apply_map(const InnovationMap& map, const Ensemble& forecast, const Vector& obs,
                          const Matrix& obs_noise, const ObservationOperator& h) {
  detail::require(h.state_dim() == forecast.dim(), "observation operator does not match state dimension");
  map.validate(forecast.dim(), h.obs_dim());
  const Matrix d = innovations(forecast.members(), obs, obs_noise, h);
  return Ensemble(forecast.members() + map.increments(d));
}

// ---------------------------------------------------------------------------
// Closed-form linear maps

struct LinearSolveInfo {
  double condition = 1.0;
  bool jittered = false;
};

namespace detail {

inline double spd_condition(const Matrix& b) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(b, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace detail

/// Returns C B^{-1} for symmetric positive-definite B; retries once with jitter
/// 1e-10 * trace(B) / m on the diagonal and throws SingularMatrixError otherwise.
inline Matrix solve_spd_right(const Matrix& c, const Matrix& b, LinearSolveInfo* info = nullptr) {
  detail::require(b.rows() == b.cols() && c.cols() == b.rows(), "solve shape mismatch");
  if (!b.allFinite() || !c.allFinite()) throw NumericalError("non-finite entries in linear solve");
  const Matrix sym = 0.5 * (b + b.transpose());
  Eigen::LLT<Matrix> llt(sym);
  LinearSolveInfo local;
  local.condition = detail::spd_condition(sym);
  if (llt.info() != Eigen::Success || !std::isfinite(local.condition) || local.condition > 1e15) {
    const double trace = sym.trace();
    const double jitter = 1e-10 * trace / static_cast<double>(sym.rows());
    if (!(jitter > 0.0))
      throw SingularMatrixError("singular bracket matrix (condition number inf)", local.condition);
    const Matrix jittered = sym + jitter * Matrix::Identity(sym.rows(), sym.cols());
    llt.compute(jittered);
    local.condition = detail::spd_condition(jittered);
    local.jittered = true;
    if (llt.info() != Eigen::Success || !std::isfinite(local.condition))
      throw SingularMatrixError("singular bracket matrix (condition number " + std::to_string(local.condition) + ")",
                                local.condition);
  }
  if (info) *info = local;
  return llt.solve(c.transpose()).transpose();
}

/// T = E[Xb Yb^T] {E[Yb Yb^T] + E[eps eps^T]}^{-1}, Xb = x - sum w x, Yb = H(x) - y,
/// each moment estimated with 1/(N-1) normalization.
inline Matrix closed_form_linear(const Ensemble& forecast, const Vector& pf_weights, const Vector& obs,
                                 const Matrix& obs_noise_draws, const ObservationOperator& h,
                                 LinearSolveInfo* info = nullptr) {
  const WeightedEnsemble weighted(forecast, pf_weights);
  detail::require(obs.size() == h.obs_dim(), "observation dimension mismatch");
  detail::require(obs_noise_draws.rows() == forecast.size() && obs_noise_draws.cols() == obs.size(),
                  "observation noise draws must be N x m");
  const double norm = 1.0 / static_cast<double>(forecast.size() - 1);
  const Matrix xbar = forecast.members().rowwise() - weighted_mean(weighted).transpose();
  const Matrix ybar = h.apply_rows(forecast.members()).rowwise() - obs.transpose();
  const Matrix cross = norm * xbar.transpose() * ybar;
  const Matrix bracket = norm * (ybar.transpose() * ybar + obs_noise_draws.transpose() * obs_noise_draws);
  return solve_spd_right(cross, bracket, info);
}

/// T = E[Xb] E[Yb]^T {E[Yb] E[Yb]^T}^{-1}: the slope from prior mean to posterior mean.
/// The bracket is rank one, so it is only invertible for scalar observations.
inline Matrix geometric_slope_linear(const Ensemble& forecast, const Vector& pf_weights, const Vector& obs,
                                     const ObservationOperator& h) {
  const WeightedEnsemble weighted(forecast, pf_weights);
  detail::require(obs.size() == h.obs_dim(), "observation dimension mismatch");
  const Vector mean_xbar = ensemble_mean(forecast) - weighted_mean(weighted);
  const Matrix ybar = h.apply_rows(forecast.members()).rowwise() - obs.transpose();
  const Vector mean_ybar = ybar.colwise().mean().transpose();
  const Matrix bracket = mean_ybar * mean_ybar.transpose();
  const Matrix cross = mean_xbar * mean_ybar.transpose();
  if (bracket.rows() > 1) {
    throw SingularMatrixError("geometric slope bracket is rank one for vector observations",
                              std::numeric_limits<double>::infinity());
  }
  const double scale = std::abs(mean_ybar[0]);
  if (!(scale > 1e-12 * (1.0 + ybar.cwiseAbs().maxCoeff())))
    throw SingularMatrixError("geometric slope undefined: mean innovation is zero",
                              std::numeric_limits<double>::infinity());
  return cross / bracket(0, 0);
}

// ---------------------------------------------------------------------------
// Training

enum class Optimizer { plain_gradient, adaptive_moment };

struct TrainSpec {
  double step_size = 1e-2;
  int max_iterations = 500;
  double tolerance = 1e-6;
  int stall_window = 20;
  Optimizer optimizer = Optimizer::adaptive_moment;
  MmdLossSpec loss;

  void validate() const {
    detail::require(step_size > 0.0 && std::isfinite(step_size), "step size must be positive");
    detail::require(max_iterations >= 0, "max iterations must be nonnegative");
    detail::require(tolerance >= 0.0, "tolerance must be nonnegative");
    detail::require(stall_window >= 1, "stall window must be positive");
    loss.validate();
  }
};

struct TrainResult {
  InnovationMap map;
  std::vector<double> loss_trace;
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Loss and parameter gradient of the transported ensemble for a fixed window.
class TransportObjective {
 public:
  TransportObjective(const MmdLossSpec& spec, const Ensemble& forecast, const Vector& pf_weights,
                     Matrix innovations)
      : forecast_(forecast.members()),
        d_(std::move(innovations)),
        loss_(MmdLoss::uniform_candidate(spec, forecast.members(), pf_weights, forecast.size())) {
    detail::require(d_.rows() == forecast_.rows(), "innovation count mismatch");
  }

  double value(const InnovationMap& map) const { return loss_.evaluate(candidate(map)).loss; }

  double value_and_gradient(const InnovationMap& map, Vector& grad) const {
    Matrix g;
    const auto terms = loss_.evaluate(candidate(map), g);
    grad = map.parameter_gradient(d_, g);
    return terms.loss;
  }

  Matrix candidate(const InnovationMap& map) const { return forecast_ + map.increments(d_); }
  const Matrix& innovations() const noexcept { return d_; }

 private:
  Matrix forecast_;
  Matrix d_;
  MmdLoss loss_;
};

/// Gradient descent on the penalized MMD loss. Returns the best parameters seen, so
/// the final loss never exceeds the initial one.
inline TrainResult train_map(const InnovationMap& initial, const TrainSpec& spec, const Ensemble& forecast,
                             const Vector& pf_weights, const Vector& obs, const Matrix& obs_noise_draws,
                             const ObservationOperator& h) {
  spec.validate();
  initial.validate(forecast.dim(), h.obs_dim());
  const TransportObjective objective(spec.loss, forecast, pf_weights,
                                     innovations(forecast.members(), obs, obs_noise_draws, h));

  TrainResult result{initial, {}, 0, 0.0, 0.0};
  InnovationMap current = initial;
  Vector params = current.parameters();
  Vector grad;
  double loss = objective.value_and_gradient(current, grad);
  if (!std::isfinite(loss) || !grad.allFinite()) throw NumericalError("non-finite initial loss or gradient");
  result.loss_trace.push_back(loss);
  result.initial_loss = loss;
  double best = loss;

  Vector m1 = Vector::Zero(params.size());
  Vector m2 = Vector::Zero(params.size());
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (int it = 1; it <= spec.max_iterations && best > 0.0; ++it) {
    if (spec.optimizer == Optimizer::plain_gradient) {
      params -= spec.step_size * grad;
    } else {
      m1 = beta1 * m1 + (1.0 - beta1) * grad;
      m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(beta1, it);
      const double c2 = 1.0 - std::pow(beta2, it);
      params -= (spec.step_size * (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps)).matrix();
    }
    current.set_parameters(params);
    loss = objective.value_and_gradient(current, grad);
    if (!std::isfinite(loss) || !grad.allFinite())
      throw NumericalError("non-finite loss or gradient at iteration " + std::to_string(it));
    result.loss_trace.push_back(loss);
    result.iterations = it;
    if (loss < best) {
      best = loss;
      result.map = current;
    }
    const auto n = result.loss_trace.size();
    if (it >= spec.stall_window) {
      const double past = result.loss_trace[n - 1 - static_cast<std::size_t>(spec.stall_window)];
      if (past - loss <= spec.tolerance * std::abs(past)) break;
    }
  }
  result.final_loss = best;
  return result;
}

}  // namespace entranf
