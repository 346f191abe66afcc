// One line per acceptance criterion; exit status 1 if any fails.
#include "oracles.hpp"

#include "entranf/bench/config.hpp"
#include "entranf/bench/runner.hpp"

#include <chrono>
#include <deque>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

using namespace entranf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

bench::ExperimentConfig config(const std::string& name) {
  return bench::load_config(std::string(ENTRANF_CONFIG_DIR) + "/" + name + ".json");
}

const bench::MethodResult& method(const bench::BatteryResult& r, const std::string& label) {
  for (const auto& m : r.methods)
    if (m.spec.label == label) return m;
  throw std::runtime_error("no method '" + label + "' in " + r.config.model + " battery");
}

double time_average(const TrialLog& log, double WindowRecord::*field) {
  if (log.failed || log.records.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (const auto& r : log.records) acc += r.*field;
  return acc / static_cast<double>(log.records.size());
}

// every battery run here feeds the logged-row metric check
std::deque<bench::BatteryResult> batteries;

const bench::BatteryResult& run_logged(const bench::ExperimentConfig& c) {
  batteries.push_back(bench::run_battery(c));
  return batteries.back();
}

std::map<double, const bench::BatteryResult*> doublewell_by_interval;

const bench::BatteryResult& doublewell(double interval) {
  auto& slot = doublewell_by_interval[interval];
  if (!slot) {
    auto c = config("doublewell");
    c.obs_interval = interval;
    if (interval != 0.5) c.reference_size = 0;
    slot = &run_logged(c);
  }
  return *slot;
}

struct Instance {
  Ensemble forecast;
  Vector weights;
  Vector obs;
  Matrix draws;
  ObservationOperator h;
};

Instance random_instance(RngStream& rng, Eigen::Index n, Eigen::Index N) {
  const Ensemble f(check::random_matrix(rng, N, n));
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < n; i += 2) idx.push_back(i);
  auto h = ObservationOperator::subset(n, idx);
  LikelihoodSpec lik{Vector::Constant(h.obs_dim(), 0.5 + rng.uniform())};
  Vector y = h.apply(Vector(f.member(0))) + 0.5 * check::random_matrix(rng, h.obs_dim(), 1).col(0);
  const Vector w = pf_weights(f, y, lik, h);
  Matrix draws = gaussian_matrix(rng, N, lik.obs_noise_std);
  draws = decorrelated_perturbations(draws, f.members(), h.apply_rows(f.members()));
  return {f, w, y, draws, h};
}

Outcome closed_form_equivalence() {
  RngStream rng(101, 1);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const Eigen::Index N = 8 + static_cast<Eigen::Index>(rng.uniform() * 57);
    const auto inst = random_instance(rng, n, N);
    const Matrix d = innovations(inst.forecast.members(), inst.obs, inst.draws, inst.h);
    const double lip = 2.0 * Eigen::SelfAdjointEigenSolver<Matrix>(d.transpose() * d / static_cast<double>(N))
                                 .eigenvalues()
                                 .maxCoeff();
    TrainSpec spec;
    spec.loss = MmdLossSpec{Kernel::linear(), 1.0};
    spec.optimizer = Optimizer::plain_gradient;
    spec.step_size = 1.0 / lip;
    spec.max_iterations = 5000;
    spec.tolerance = 0.0;
    const auto r = train_map(InnovationMap::zero_linear(n, inst.h.obs_dim()), spec, inst.forecast, inst.weights,
                             inst.obs, inst.draws, inst.h);
    const Matrix cf = closed_form_linear(inst.forecast, inst.weights, inst.obs, inst.draws, inst.h);
    worst = std::max(worst, (r.map.linear().gain - cf).norm() / std::max(cf.norm(), 1e-12));
  }
  return {worst <= 1e-3, fmt("50 instances, worst relative Frobenius error %.3g (tol 1e-3)", worst)};
}

Outcome mmd_correctness() {
  RngStream rng(102, 1);
  double naive_gap = 0.0, self_gap = 0.0, mean_gap = 0.0;
  for (int rep = 0; rep < 60; ++rep) {
    const Eigen::Index nr = 1 + static_cast<Eigen::Index>(rng.uniform() * 64);
    const Eigen::Index nc = 1 + static_cast<Eigen::Index>(rng.uniform() * 64);
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const Matrix x = check::random_matrix(rng, nr, n);
    const Matrix z = check::random_matrix(rng, nc, n, 1.5);
    const Vector w = check::random_simplex(rng, nr);
    const Vector v = check::random_simplex(rng, nc);
    for (const auto& k : {Kernel::linear(), Kernel::gaussian(0.5 + rng.uniform())}) {
      const MmdLossSpec spec{k, 0.0};
      if (nr >= 2 && nc >= 2) {
        const WeightedEnsemble a(Ensemble(x), w), b(Ensemble(z), v);
        naive_gap = std::max(naive_gap, std::abs(mmd_squared(spec, a, b) - check::naive_mmd2(k, x, w, z, v)));
        naive_gap = std::max(naive_gap, std::abs(pairwise_penalty(spec, a, b) - check::naive_penalty(k, x, w, z, v)));
        self_gap = std::max(self_gap, std::abs(mmd_squared(spec, a, a)));
      }
      const auto t = MmdLoss(spec, x, w, v).evaluate(z);
      naive_gap = std::max(naive_gap, std::abs(t.mmd2_raw - check::naive_mmd2(k, x, w, z, v)));
      naive_gap = std::max(naive_gap, std::abs(t.penalty_raw - check::naive_penalty(k, x, w, z, v)));
      self_gap = std::max(self_gap, std::abs(MmdLoss(spec, x, w, w).evaluate(x).mmd2));
    }
    const Vector gap = x.transpose() * w - z.transpose() * v;
    mean_gap = std::max(mean_gap, std::abs(MmdLoss(MmdLossSpec{Kernel::linear(), 0.0}, x, w, v).evaluate(z).mmd2_raw -
                                           gap.squaredNorm()));
  }
  const bool ok = naive_gap <= 1e-12 && self_gap == 0.0 && mean_gap <= 1e-10;
  return {ok, fmt("naive oracle gap %.3g (tol 1e-12), MMD(p,p) %.3g (want 0), mean-gap identity %.3g (tol 1e-10)",
                  naive_gap, self_gap, mean_gap)};
}

Outcome gradient_suite() {
  RngStream rng(103, 1);
  double loss_worst = 0.0, net_worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index nr = 2 + static_cast<Eigen::Index>(rng.uniform() * 12);
    const Eigen::Index nc = 2 + static_cast<Eigen::Index>(rng.uniform() * 12);
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const Matrix x = check::random_matrix(rng, nr, n);
    const Matrix z = check::random_matrix(rng, nc, n);
    const Vector w = check::random_simplex(rng, nr);
    const Vector v = check::random_simplex(rng, nc);
    const double lambda = rep % 3 == 0 ? 0.0 : (rep % 3 == 1 ? 1.0 : rng.uniform());
    const Kernel k = rep % 2 == 0 ? Kernel::linear() : Kernel::gaussian(0.7 + rng.uniform());
    const MmdLoss loss(MmdLossSpec{k, lambda}, x, w, v);
    Matrix g;
    loss.evaluate(z, g);
    auto f = [&](const Vector& p) {
      const auto t = loss.evaluate(Eigen::Map<const Matrix>(p.data(), nc, n));
      return (1.0 - lambda) * t.mmd2_raw + lambda * t.penalty_raw;
    };
    const Vector p = Eigen::Map<const Vector>(z.data(), z.size());
    loss_worst = std::max(loss_worst, check::relative_error(Eigen::Map<const Vector>(g.data(), g.size()),
                                                            check::central_difference(f, p)));
  }
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index m = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.uniform() * 3);
    const int width = 2 + static_cast<int>(rng.uniform() * 6);
    InnovationMap map = make_feedforward_map(m, {width, width}, n, rng, 1.0);
    Vector p = map.parameters();
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.1 * rng.normal();
    map.set_parameters(p);
    const Eigen::Index N = 3 + static_cast<Eigen::Index>(rng.uniform() * 8);
    const Matrix d = check::random_matrix(rng, N, m);
    const Matrix c = check::random_matrix(rng, N, n);
    auto f = [&](const Vector& q) {
      InnovationMap mm = map;
      mm.set_parameters(q);
      const Matrix out = mm.increments(d);
      return (c.array() * out.array()).sum() + 0.5 * out.squaredNorm();
    };
    const Vector an = map.parameter_gradient(d, c + map.increments(d));
    net_worst = std::max(net_worst, check::relative_error(an, check::central_difference(f, p)));
  }
  const bool ok = loss_worst <= 1e-4 && net_worst <= 1e-4;
  return {ok, fmt("100 loss instances worst %.3g, 100 feedforward instances worst %.3g (tol 1e-4)", loss_worst,
                  net_worst)};
}

Outcome scalar_linear_gaussian() {
  // prior N(0, 1), sigma 0.5, y = 1: posterior N(0.8, 0.2)
  constexpr Eigen::Index n = 10000;
  const double se = std::sqrt(0.2 / static_cast<double>(n));
  const LikelihoodSpec lik{Vector::Constant(1, 0.5)};
  const Vector y = Vector::Constant(1, 1.0);
  const auto h = ObservationOperator::identity(1);
  RngStream rng(104, 1);
  const Ensemble prior(check::random_matrix(rng, n, 1));
  RngStream a(104, 2), b(104, 3);
  const double enkf = ensemble_mean(enkf_analysis(prior, y, lik, h, a))[0];
  const double tp = ensemble_mean(entranfp_analysis(prior, y, lik, h, b))[0];
  const double za = std::abs(enkf - 0.8) / se, zb = std::abs(tp - 0.8) / se;
  return {za <= 3.0 && zb <= 3.0,
          fmt("EnKF mean %.5f (%.2f SE), EnTranFp mean %.5f (%.2f SE) vs 0.8", enkf, za, tp, zb)};
}

Outcome doublewell_reference() {
  const auto& r = doublewell(0.5);
  const double kf = method(r, "enkf").summary.rmse_post.mean;
  const double tp = method(r, "entranfp(L-L)").summary.rmse_post.mean;
  return {tp <= 0.75 * kf, fmt("RMSE_post EnTranFp %.4f, EnKF %.4f, ratio %.3f (need <= 0.75)", tp, kf, tp / kf)};
}

Outcome doublewell_trend() {
  bool ok = true;
  std::string detail;
  for (double dt : {0.3, 0.4, 0.5}) {
    const auto& r = doublewell(dt);
    const double kf = method(r, "enkf").summary.rmse_truth.mean;
    const double tp = method(r, "entranfp(L-L)").summary.rmse_truth.mean;
    ok = ok && tp < kf;
    detail += fmt("dt %.1f: %.4f vs %.4f; ", dt, tp, kf);
  }
  return {ok, "RMSE_truth EnTranFp vs EnKF, " + detail.substr(0, detail.size() - 2)};
}

const bench::BatteryResult& lorenz63() {
  static const bench::BatteryResult* r = &run_logged(config("lorenz63"));
  return *r;
}

Outcome lorenz63_partial() {
  const auto& r = lorenz63();
  const double kf = method(r, "enkf").summary.rmse_truth.mean;
  bool ok = std::isfinite(kf);
  std::string detail;
  for (const char* label : {"entranfp(L-G)", "entranfp(N-G)"}) {
    const auto& s = method(r, label).summary;
    ok = ok && s.failures == 0 && s.rmse_truth.mean <= 0.9 * kf;
    detail += std::string(label) + fmt(" %.4f (ratio %.3f, failures %.0f); ", s.rmse_truth.mean,
                                       s.rmse_truth.mean / kf, s.failures);
  }
  return {ok, detail + fmt("EnKF %.4f, need ratio <= 0.9", kf)};
}

Outcome lorenz63_collapse() {
  const auto& r = lorenz63();
  const auto& kf = method(r, "enkf").logs;
  bool ok = true;
  std::string detail;
  for (const char* label : {"entranf(L-L)", "entranf(N-L)"}) {
    const auto& logs = method(r, label).logs;
    int collapsed = 0, failed = 0;
    double worst = 0.0;
    for (std::size_t t = 0; t < logs.size(); ++t) {
      const double ref = time_average(kf[t], &WindowRecord::rmse_truth);
      const double own = time_average(logs[t], &WindowRecord::rmse_truth);
      if (logs[t].failed) ++failed;
      if (logs[t].failed || !std::isfinite(own) || own > 2.0 * ref) ++collapsed;
      if (std::isfinite(own)) worst = std::max(worst, own / ref);
    }
    ok = ok && 2 * collapsed > static_cast<int>(logs.size());
    detail += std::string(label) + fmt(" %.0f/%.0f collapsed (%.0f aborted, worst ratio %.2f); ", collapsed,
                                       static_cast<double>(logs.size()), failed, worst);
  }
  return {ok, detail + "need a majority"};
}

Outcome lorenz96_stability() {
  const auto& r = run_logged(config("lorenz96"));
  const auto& kf = method(r, "enkf").summary;
  const auto& tp = method(r, "entranfp(L-L)").summary;
  const bool ok = kf.failures == 0 && tp.failures == 0 && tp.rmse_truth.mean <= 1.25 * kf.rmse_truth.mean;
  return {ok, fmt("RMSE_truth EnTranFp %.4f, EnKF %.4f, ratio %.3f (need <= 1.25)", tp.rmse_truth.mean,
                  kf.rmse_truth.mean, tp.rmse_truth.mean / kf.rmse_truth.mean)};
}

Outcome static2d_ordering() {
  const auto c = config("static2d");
  const auto& r = run_logged(c);
  const auto oracle = bench::static_oracle(c, bench::build_model(c)).mean;
  const auto& kf = method(r, "enkf").logs;
  const auto& tf = method(r, "entranf(L-L)").logs;
  int wins = 0;
  for (std::size_t t = 0; t < kf.size(); ++t) {
    if (kf[t].failed || tf[t].failed) continue;
    const Vector& a = kf[t].records.at(0).mean;
    const Vector& b = tf[t].records.at(0).mean;
    bool win = true;
    for (Eigen::Index d = 0; d < oracle.size(); ++d) win = win && std::abs(b[d] - oracle[d]) < std::abs(a[d] - oracle[d]);
    wins += win ? 1 : 0;
  }
  return {wins >= 16, fmt("EnTranF closer than EnKF on both components in %.0f/%.0f seeds (need >= 16); oracle mean "
                          "(%.4f, %.4f)",
                          wins, static_cast<double>(kf.size()), oracle[0], oracle[1])};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = bench::read_file(e.path().string());
  return out;
}

Outcome metric_properties() {
  std::size_t rows = 0, bad = 0;
  for (const auto& b : batteries)
    for (const auto& m : b.methods)
      for (const auto& log : m.logs)
        for (const auto& r : log.records) {
          ++rows;
          const bool cp_ok = std::isnan(r.cp) || (r.cp >= 0.0 && r.cp <= 1.0);
          const bool ens_ok = std::isnan(r.ens) || r.ens >= 0.0;
          const bool rmse_ok = (std::isnan(r.rmse_truth) || r.rmse_truth >= 0.0) &&
                               (std::isnan(r.rmse_post) || r.rmse_post >= 0.0);
          bad += cp_ok && ens_ok && rmse_ok ? 0 : 1;
        }

  RngStream rng(105, 1);
  constexpr int n = 100000;
  const Matrix z = check::random_matrix(rng, n, 1);
  const double cp = cp_step(z.col(0), Vector::Zero(n), Vector::Ones(n), kDefaultTAlpha);

  const StochasticModel growth("exp", 1, [](const double* x, double* o) { o[0] = x[0]; }, Vector::Zero(1), 0.01);
  auto error_at = [&](int steps) {
    RngStream r(105, 2);
    Vector x = Vector::Ones(1);
    for (int s = 0; s < steps; ++s) x = step_rk4_additive(growth, x, 1.0 / steps, r);
    return std::abs(x[0] - std::exp(1.0));
  };
  const double order = std::log2(error_at(10) / error_at(20));

  auto c = config("doublewell");
  c.windows = 6;
  c.trials = 3;
  c.reference_size = 200;
  c.methods.push_back(bench::MethodSpec{FilterConfig{}, "pf"});
  c.methods.back().filter.method = Method::pf;
  const fs::path root = fs::temp_directory_path() / "entranf_acceptance_rerun";
  fs::remove_all(root);
  c.output = (root / "a").string();
  bench::run(c);
  c.output = (root / "b").string();
  bench::run(c);
  const auto first = snapshot(root / "a");
  const bool identical = !first.empty() && first == snapshot(root / "b");
  fs::remove_all(root);

  const bool ok = rows > 0 && bad == 0 && std::abs(cp - 0.95) <= 0.01 && order >= 3.7 && order <= 4.3 && identical;
  return {ok, fmt("%.0f logged rows, %.0f out of range; CP calibration %.4f; RK4 order %.3f; ", static_cast<double>(rows),
                  static_cast<double>(bad), cp, order) +
                  (identical ? "reruns byte-identical (" + std::to_string(first.size()) + " files)" : "reruns differ")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"closed-form equivalence", closed_form_equivalence},
      {"mmd correctness", mmd_correctness},
      {"gradient suite", gradient_suite},
      {"scalar linear-gaussian consistency", scalar_linear_gaussian},
      {"double-well vs pf reference", doublewell_reference},
      {"double-well trend", doublewell_trend},
      {"lorenz63 partial observation", lorenz63_partial},
      {"lorenz63 collapse", lorenz63_collapse},
      {"lorenz96 stability", lorenz96_stability},
      {"static 2-d ordering", static2d_ordering},
      {"metric properties", metric_properties},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
