#pragma once

#include "entranf/core.hpp"
#include "entranf/kernels.hpp"
#include "entranf/metrics.hpp"
#include "entranf/mmd.hpp"
#include "entranf/models.hpp"
#include "entranf/transport.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace entranf {

/// Diagonal Gaussian observation likelihood.
struct LikelihoodSpec {
  Vector obs_noise_std;

  void validate(Eigen::Index obs_dim) const {
    detail::require(obs_noise_std.size() == obs_dim, "noise std count must equal observation dimension");
    detail::require((obs_noise_std.array() > 0.0).all(), "observation noise std must be positive");
  }
};

struct WeightDiagnostics {
  bool fell_back_to_uniform = false;
  double ess = 0.0;
};

/// w_i proportional to pi(y | x_i), via log-likelihoods with max subtraction.
inline Vector pf_weights(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                         const ObservationOperator& h, WeightDiagnostics* diag = nullptr) {
  detail::require(h.state_dim() == forecast.dim(), "observation operator does not match state dimension");
  detail::require(obs.size() == h.obs_dim(), "observation dimension mismatch");
  lik.validate(h.obs_dim());
  const Matrix predicted = h.apply_rows(forecast.members());
  Vector logw(forecast.size());
  for (Eigen::Index i = 0; i < forecast.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index o = 0; o < obs.size(); ++o) {
      const double z = (obs[o] - predicted(i, o)) / lik.obs_noise_std[o];
      acc -= 0.5 * z * z;
    }
    logw[i] = acc;
  }
  const double peak = logw.maxCoeff();
  Vector w(forecast.size());
  bool fallback = !std::isfinite(peak);
  if (!fallback) {
    w = (logw.array() - peak).exp().matrix();
    for (Eigen::Index i = 0; i < w.size(); ++i)
      if (!std::isfinite(w[i])) w[i] = 0.0;
    const double total = w.sum();
    fallback = !(total > 0.0) || !std::isfinite(total);
    if (!fallback) w /= total;
  }
  if (fallback) w = Vector::Constant(forecast.size(), 1.0 / static_cast<double>(forecast.size()));
  if (diag) {
    diag->fell_back_to_uniform = fallback;
    diag->ess = effective_sample_size(w);
  }
  return w;
}

/// Copy counts of systematic resampling with positions (offset + i) / N.
inline std::vector<int> systematic_counts(const Vector& weights, double offset) {
  detail::require(offset >= 0.0 && offset < 1.0, "resampling offset must lie in [0, 1)");
  const auto n = weights.size();
  const double scale = static_cast<double>(n);
  std::vector<int> counts(static_cast<std::size_t>(n), 0);
  auto snapped = [](double c) {
    const double r = std::round(c);
    return std::abs(c - r) < 1e-9 ? r : c;
  };
  double cumulative = 0.0;
  double prev_edge = std::ceil(snapped(0.0) - offset);
  for (Eigen::Index j = 0; j < n; ++j) {
    cumulative += weights[j] * scale;
    const double c = j + 1 == n ? scale : snapped(cumulative);
    const double edge = std::ceil(c - offset);
    counts[static_cast<std::size_t>(j)] = static_cast<int>(edge - prev_edge);
    prev_edge = edge;
  }
  return counts;
}

inline Ensemble systematic_resample(const WeightedEnsemble& we, double offset) {
  const auto counts = systematic_counts(we.weights(), offset);
  Matrix out(we.size(), we.dim());
  Eigen::Index row = 0;
  for (Eigen::Index j = 0; j < we.size(); ++j)
    for (int c = 0; c < counts[static_cast<std::size_t>(j)]; ++c) out.row(row++) = we.ensemble().members().row(j);
  return Ensemble(std::move(out));
}

inline Ensemble systematic_resample(const WeightedEnsemble& we, RngStream& rng) {
  return systematic_resample(we, rng.uniform());
}

// ---------------------------------------------------------------------------
// Observation perturbations

enum class PerturbationScheme { iid, decorrelated };

/// N x m perturbation draws from the observation-noise law for one analysis window.
inline Matrix draw_perturbations(RngStream& rng, const Ensemble& forecast, const LikelihoodSpec& lik,
                                 const ObservationOperator& h, PerturbationScheme scheme) {
  Matrix draws = gaussian_matrix(rng, forecast.size(), lik.obs_noise_std);
  if (scheme == PerturbationScheme::decorrelated)
    draws = decorrelated_perturbations(draws, forecast.members(), h.apply_rows(forecast.members()));
  return draws;
}

// ---------------------------------------------------------------------------
// Analysis steps

/// Perturbed-observation EnKF with K = E[Xt Yt^T]{E[Yt Yt^T] + E[eps eps^T]}^{-1},
/// anomalies taken about the forecast means.
inline Ensemble enkf_analysis(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                              const ObservationOperator& h, const Matrix& obs_noise_draws,
                              LinearSolveInfo* info = nullptr) {
  detail::require(h.state_dim() == forecast.dim(), "observation operator does not match state dimension");
  lik.validate(h.obs_dim());
  detail::require(obs_noise_draws.rows() == forecast.size() && obs_noise_draws.cols() == h.obs_dim(),
                  "observation noise draws must be N x m");
  const double norm = 1.0 / static_cast<double>(forecast.size() - 1);
  const Matrix predicted = h.apply_rows(forecast.members());
  const Matrix xt = forecast.members().rowwise() - forecast.members().colwise().mean();
  const Matrix yt = predicted.rowwise() - predicted.colwise().mean();
  const Matrix cross = norm * xt.transpose() * yt;
  const Matrix bracket = norm * (yt.transpose() * yt + obs_noise_draws.transpose() * obs_noise_draws);
  const Matrix gain = solve_spd_right(cross, bracket, info);
  return apply_map(LinearInnovationMap{gain}, forecast, obs, obs_noise_draws, h);
}

inline Ensemble enkf_analysis(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                              const ObservationOperator& h, RngStream& rng,
                              PerturbationScheme scheme = PerturbationScheme::iid) {
  return enkf_analysis(forecast, obs, lik, h, draw_perturbations(rng, forecast, lik, h, scheme));
}

struct AnalysisDiagnostics {
  double ess = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> loss_trace;
  int iterations = 0;
  double condition = std::numeric_limits<double>::quiet_NaN();
  bool weight_fallback = false;
};

/// Closed-form penalized transport (linear kernel, lambda = 1, linear map).
inline Ensemble entranfp_analysis(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                                  const ObservationOperator& h, const Matrix& obs_noise_draws,
                                  AnalysisDiagnostics* diag = nullptr) {
  WeightDiagnostics wd;
  const Vector w = pf_weights(forecast, obs, lik, h, &wd);
  LinearSolveInfo info;
  const Matrix gain = closed_form_linear(forecast, w, obs, obs_noise_draws, h, &info);
  if (diag) {
    diag->ess = wd.ess;
    diag->weight_fallback = wd.fell_back_to_uniform;
    diag->condition = info.condition;
  }
  return apply_map(LinearInnovationMap{gain}, forecast, obs, obs_noise_draws, h);
}

inline Ensemble entranfp_analysis(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                                  const ObservationOperator& h, RngStream& rng,
                                  PerturbationScheme scheme = PerturbationScheme::decorrelated) {
  return entranfp_analysis(forecast, obs, lik, h, draw_perturbations(rng, forecast, lik, h, scheme));
}

enum class MapKind { linear, mlp };
enum class MapInit { zero, closed_form };

struct BandwidthSpec {
  bool median = true;
  double value = 1.0;
};

/// Everything the trained transport analysis needs beyond the window data.
struct TransportConfig {
  KernelKind kernel = KernelKind::gaussian;
  BandwidthSpec bandwidth;
  double exponent = 2.0;
  double lambda = 0.0;
  MapKind map = MapKind::linear;
  std::vector<int> hidden{32, 32};
  MapInit init = MapInit::zero;
  double init_scale = 1e-2;
  bool warm_start = false;
  double step_size = 1e-2;
  int max_iterations = 500;
  double tolerance = 1e-6;
  int stall_window = 20;
  Optimizer optimizer = Optimizer::adaptive_moment;

  Kernel resolve_kernel(const Ensemble& forecast) const {
    if (kernel == KernelKind::linear) return Kernel::linear();
    double r = bandwidth.value;
    if (bandwidth.median) {
      r = median_pairwise_distance(forecast.members());
      if (!(r > 0.0) || !std::isfinite(r)) r = 1.0;
    }
    return Kernel::gaussian(r, exponent);
  }

  TrainSpec train_spec(const Ensemble& forecast) const {
    TrainSpec s;
    s.step_size = step_size;
    s.max_iterations = max_iterations;
    s.tolerance = tolerance;
    s.stall_window = stall_window;
    s.optimizer = optimizer;
    s.loss = MmdLossSpec{resolve_kernel(forecast), lambda};
    return s;
  }
};

struct TransportAnalysis {
  Ensemble ensemble;
  InnovationMap map;
  AnalysisDiagnostics diagnostics;
};

/// Gradient-trained transport analysis: PF weights, map initialization, MMD training.
inline TransportAnalysis entranf_analysis(const Ensemble& forecast, const Vector& obs, const LikelihoodSpec& lik,
                                          const ObservationOperator& h, const TransportConfig& cfg,
                                          const Matrix& obs_noise_draws, RngStream& optimizer_rng,
                                          const std::optional<InnovationMap>& warm = std::nullopt) {
  WeightDiagnostics wd;
  const Vector w = pf_weights(forecast, obs, lik, h, &wd);
  const auto n = forecast.dim();
  const auto m = h.obs_dim();
  AnalysisDiagnostics diag;
  diag.ess = wd.ess;
  diag.weight_fallback = wd.fell_back_to_uniform;

  auto initial = [&]() -> InnovationMap {
    if (cfg.warm_start && warm) return *warm;
    if (cfg.map == MapKind::mlp) return make_feedforward_map(m, cfg.hidden, n, optimizer_rng, cfg.init_scale);
    if (cfg.init == MapInit::closed_form) {
      LinearSolveInfo info;
      Matrix gain = closed_form_linear(forecast, w, obs, obs_noise_draws, h, &info);
      diag.condition = info.condition;
      return LinearInnovationMap{std::move(gain)};
    }
    return InnovationMap::zero_linear(n, m);
  }();

  const auto trained = train_map(initial, cfg.train_spec(forecast), forecast, w, obs, obs_noise_draws, h);
  diag.loss_trace = trained.loss_trace;
  diag.iterations = trained.iterations;
  Ensemble out = apply_map(trained.map, forecast, obs, obs_noise_draws, h);
  return TransportAnalysis{std::move(out), trained.map, std::move(diag)};
}

// ---------------------------------------------------------------------------
// Sequential filtering

enum class Method { enkf, pf, entranf, entranfp };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::enkf: return "enkf";
    case Method::pf: return "pf";
    case Method::entranf: return "entranf";
    case Method::entranfp: return "entranfp";
  }
  return "?";
}

struct FilterConfig {
  Method method = Method::enkf;
  TransportConfig transport;
  PerturbationScheme perturbation = PerturbationScheme::decorrelated;
  bool perturb_obs = true;
  bool paired_noise = false;

  /// entranfp with a linear kernel, linear map and lambda = 1 uses the closed form.
  bool analytic() const {
    return method == Method::entranfp && transport.kernel == KernelKind::linear && transport.map == MapKind::linear &&
           transport.lambda == 1.0;
  }

  std::string label() const {
    std::string base = method_name(method);
    if (method == Method::entranf || method == Method::entranfp) {
      base += transport.map == MapKind::linear ? "(L-" : "(N-";
      base += transport.kernel == KernelKind::linear ? "L)" : "G)";
    }
    return base;
  }
};

struct FilterState {
  Ensemble ensemble;
  int step = 0;
  AnalysisDiagnostics diagnostics;
};

/// Advance every member through the model over one observation interval.
inline FilterState forecast(const FilterState& state, const StochasticModel& model, double interval, RngStream& rng) {
  detail::require(state.ensemble.dim() == model.dim(), "ensemble dimension does not match model");
  FilterState next{Ensemble(model.advance_rows(state.ensemble.members(), interval, rng)), state.step, {}};
  return next;
}

struct WindowRecord {
  int window = 0;
  double time = 0.0;
  Vector mean;
  double rmse_truth = std::numeric_limits<double>::quiet_NaN();
  double rmse_post = std::numeric_limits<double>::quiet_NaN();
  double ens = 0.0;
  double cp = std::numeric_limits<double>::quiet_NaN();
  double ess = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  double condition = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
};

/// Per-window log of one filter run. `initial` describes the state before the
/// first analysis; `records` hold windows 1..T.
struct TrialLog {
  std::string method;
  int trial = 0;
  std::uint64_t seed = 0;
  WindowRecord initial;
  std::vector<WindowRecord> records;
  bool failed = false;
  std::string failure;
  std::vector<std::pair<int, Matrix>> snapshots;
  int weight_fallbacks = 0;
};

/// Observation stream plus optional references used for metrics.
struct ObservationSequence {
  double interval = 0.0;
  std::vector<Vector> values;      // y at windows 1..T
  std::vector<Vector> truth;       // optional, same length
  std::vector<Vector> reference;   // optional posterior-mean reference, same length
};

struct RunOptions {
  double t_alpha = kDefaultTAlpha;
  int snapshot_every = 0;  // 0 keeps no ensembles
  bool record_wall_time = false;
  std::uint64_t method_stream = 0;
};

namespace detail {

inline void fill_metrics(WindowRecord& rec, const Vector& mean, const Matrix& cov,
                         const Vector* truth, const Vector* reference, double t_alpha) {
  rec.mean = mean;
  rec.ens = ens_step(cov);
  if (truth) {
    rec.rmse_truth = rmse_step(mean, *truth);
    rec.cp = cp_step(mean, *truth, cov.diagonal(), t_alpha);
  }
  if (reference) rec.rmse_post = rmse_step(mean, *reference);
}

}  // namespace detail

/// Alternate forecast and analysis over the observation sequence. Any analysis
/// failure ends the trial and is recorded in the log rather than thrown.
inline TrialLog run_filter(const FilterConfig& cfg, const StochasticModel& model, const ObservationOperator& h,
                           const LikelihoodSpec& lik, const Ensemble& initial, const ObservationSequence& obs,
                           std::uint64_t trial_seed, const RunOptions& opts = {}) {
  TrialLog log;
  log.method = cfg.label();
  log.seed = trial_seed;

  const std::size_t windows = obs.values.size();
  detail::require(obs.truth.empty() || obs.truth.size() == windows, "truth sequence length mismatch");
  detail::require(obs.reference.empty() || obs.reference.size() == windows, "reference sequence length mismatch");
  detail::require(initial.dim() == model.dim() && h.state_dim() == model.dim(), "dimension mismatch in filter setup");
  lik.validate(h.obs_dim());

  RngStream model_rng = RngStream::for_role(trial_seed, StreamRole::model_noise);
  const std::uint64_t pert_sub = cfg.paired_noise ? 0 : opts.method_stream;
  RngStream pert_rng = RngStream::for_role(trial_seed, StreamRole::perturbation, pert_sub);
  RngStream opt_rng = RngStream::for_role(trial_seed, StreamRole::optimizer, opts.method_stream);

  FilterState state{initial, 0, {}};
  log.initial.window = 0;
  detail::fill_metrics(log.initial, ensemble_mean(initial), sample_covariance(initial), nullptr, nullptr, opts.t_alpha);
  if (opts.snapshot_every > 0) log.snapshots.emplace_back(0, initial.members());

  std::optional<InnovationMap> warm;
  for (std::size_t k = 0; k < windows; ++k) {
    const auto started = std::chrono::steady_clock::now();
    WindowRecord rec;
    rec.window = static_cast<int>(k + 1);
    rec.time = obs.interval * static_cast<double>(k + 1);
    try {
      FilterState fc = forecast(state, model, obs.interval, model_rng);
      const Ensemble& xf = fc.ensemble;
      const Vector& y = obs.values[k];
      detail::require(y.size() == h.obs_dim(), "observation dimension mismatch");

      Matrix draws;
      if (cfg.method != Method::pf) {
        draws = cfg.perturb_obs ? draw_perturbations(pert_rng, xf, lik, h, cfg.perturbation)
                                : Matrix::Zero(xf.size(), h.obs_dim());
      }

      Vector mean;
      Ensemble analysis;
      AnalysisDiagnostics diag;
      switch (cfg.method) {
        case Method::enkf: {
          LinearSolveInfo info;
          analysis = enkf_analysis(xf, y, lik, h, draws, &info);
          diag.condition = info.condition;
          mean = ensemble_mean(analysis);
          break;
        }
        case Method::pf: {
          WeightDiagnostics wd;
          const Vector w = pf_weights(xf, y, lik, h, &wd);
          diag.ess = wd.ess;
          diag.weight_fallback = wd.fell_back_to_uniform;
          const WeightedEnsemble we(xf, w);
          mean = weighted_mean(we);
          analysis = systematic_resample(we, pert_rng);
          break;
        }
        case Method::entranf:
        case Method::entranfp: {
          if (cfg.analytic()) {
            analysis = entranfp_analysis(xf, y, lik, h, draws, &diag);
          } else {
            auto res = entranf_analysis(xf, y, lik, h, cfg.transport, draws, opt_rng, warm);
            analysis = std::move(res.ensemble);
            diag = std::move(res.diagnostics);
            warm = std::move(res.map);
          }
          mean = ensemble_mean(analysis);
          break;
        }
      }
      if (!mean.allFinite()) throw NumericalError("non-finite analysis mean");
      detail::fill_metrics(rec, mean, sample_covariance(analysis), obs.truth.empty() ? nullptr : &obs.truth[k],
                           obs.reference.empty() ? nullptr : &obs.reference[k], opts.t_alpha);
      rec.ess = diag.ess;
      rec.condition = diag.condition;
      rec.iterations = diag.iterations;
      if (!diag.loss_trace.empty()) rec.loss = diag.loss_trace.back();
      if (diag.weight_fallback) ++log.weight_fallbacks;
      state = FilterState{std::move(analysis), state.step + 1, std::move(diag)};
    } catch (const std::exception& e) {
      log.failed = true;
      log.failure = "window " + std::to_string(k + 1) + ": " + e.what();
      return log;
    }
    if (opts.record_wall_time)
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    log.records.push_back(std::move(rec));
    if (opts.snapshot_every > 0 && (k + 1) % static_cast<std::size_t>(opts.snapshot_every) == 0)
      log.snapshots.emplace_back(static_cast<int>(k + 1), state.ensemble.members());
  }
  return log;
}

/// Posterior-mean trajectory of a particle filter, used as the RMSE_post reference.
inline std::vector<Vector> pf_reference_means(const StochasticModel& model, const ObservationOperator& h,
                                              const LikelihoodSpec& lik, const Ensemble& initial,
                                              const ObservationSequence& obs, std::uint64_t seed) {
  FilterConfig cfg;
  cfg.method = Method::pf;
  ObservationSequence bare{obs.interval, obs.values, {}, {}};
  RunOptions opts;
  opts.method_stream = 0xFFFF;
  const auto log = run_filter(cfg, model, h, lik, initial, bare, seed, opts);
  if (log.failed) throw NumericalError("reference particle filter failed: " + log.failure);
  std::vector<Vector> means;
  means.reserve(log.records.size());
  for (const auto& r : log.records) means.push_back(r.mean);
  return means;
}

}  // namespace entranf
