#pragma once

#include "entranf/bench/config.hpp"
#include "entranf/bench/csv.hpp"
#include "entranf/filters.hpp"
#include "entranf/metrics.hpp"
#include "entranf/models.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace entranf::bench {

inline const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols{
      "method", "model", "N", "dt_ob", "kernel", "lambda", "map", "trials",
      "rmse_truth_mean", "rmse_truth_se", "rmse_post_mean", "rmse_post_se", "ens_mean", "cp_mean", "failures"};
  return cols;
}

inline const std::vector<std::string>& trial_columns() {
  static const std::vector<std::string> cols{
      "method", "trial", "seed", "window", "time", "rmse_truth", "rmse_post", "ens", "cp",
      "ess", "loss", "iterations", "condition", "wall_time", "status"};
  return cols;
}

/// Observations, truth and references shared by every method of one trial.
struct TrialData {
  int trial = 0;
  std::uint64_t seed = 0;
  Ensemble initial;
  ObservationSequence obs;
};

struct SummaryRow {
  std::string method;
  std::string model;
  int ensemble_size = 0;
  double dt_ob = 0.0;
  std::string kernel;
  double lambda = 0.0;
  std::string map;
  int trials = 0;
  SummaryStat rmse_truth;
  SummaryStat rmse_post;
  SummaryStat ens;
  SummaryStat cp;
  int failures = 0;
};

struct MethodResult {
  MethodSpec spec;
  std::vector<TrialLog> logs;  // by trial index
  SummaryRow summary;
};

struct BatteryResult {
  ExperimentConfig config;
  std::vector<TrialData> data;
  std::vector<MethodResult> methods;

  bool all_failed() const {
    std::size_t total = 0, failed = 0;
    for (const auto& m : methods)
      for (const auto& l : m.logs) {
        ++total;
        failed += l.failed ? 1 : 0;
      }
    return total > 0 && failed == total;
  }
};

namespace detail {

inline unsigned worker_count(std::size_t tasks) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ENTRANF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(n, tasks)));
}

/// Runs task(i) for i in [0, count) on a pool; results land in caller-owned slots.
template <class F>
void parallel_for(std::size_t count, F&& task) {
  const unsigned workers = worker_count(count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline Matrix gaussian_rows(RngStream& rng, Eigen::Index count, const Vector& mean, const Vector& std) {
  Matrix out = gaussian_matrix(rng, count, std);
  out.rowwise() += mean.transpose();
  return out;
}

inline Vector spun_up_truth(const ExperimentConfig& c, const StochasticModel& model, RngStream& rng) {
  const auto dim = c.state_dim();
  Vector x = c.model == "lorenz63" ? Vector::Ones(3) : Vector::Constant(dim, c.forcing);
  for (Eigen::Index i = 0; i < dim; ++i) x[i] += rng.normal();
  model.advance(x, c.spinup, rng);
  return x;
}

inline std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.') ? ch : '_';
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

inline std::string short_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string kernel_name(const MethodSpec& m) {
  if (m.filter.method == Method::enkf || m.filter.method == Method::pf) return "none";
  return m.filter.transport.kernel == KernelKind::linear ? "linear" : "gaussian";
}

inline std::string map_name(const MethodSpec& m) {
  if (m.filter.method == Method::enkf || m.filter.method == Method::pf) return "none";
  return m.filter.transport.map == MapKind::linear ? "linear" : "mlp";
}

}  // namespace detail

/// Quadrature reference for the static problems.
inline PosteriorTable static_oracle(const ExperimentConfig& c, const ModelSetup& setup) {
  entranf::detail::require(c.is_static(), "quadrature oracle needs a static problem");
  return static_posterior_oracle(GaussianPrior{c.prior_mean, c.prior_std}, setup.h, c.observation,
                                 setup.likelihood.obs_noise_std,
                                 PosteriorGrid{c.grid_lower, c.grid_upper, c.grid_points});
}

/// Truth, observations, initial ensemble and (optional) reference means for one trial.
/// Everything is drawn from streams keyed by base seed + trial index.
inline TrialData make_trial_data(const ExperimentConfig& c, const ModelSetup& setup, int trial,
                                 const std::optional<Vector>& static_reference = std::nullopt) {
  TrialData d;
  d.trial = trial;
  d.seed = c.seed + static_cast<std::uint64_t>(trial);
  RngStream truth_rng = RngStream::for_role(d.seed, StreamRole::truth);
  RngStream obs_rng = RngStream::for_role(d.seed, StreamRole::obs_noise);
  RngStream init_rng = RngStream::for_role(d.seed, StreamRole::init);
  const auto dim = c.state_dim();
  const auto m = setup.h.obs_dim();
  d.obs.interval = c.obs_interval;

  if (c.is_static()) {
    d.initial = Ensemble(detail::gaussian_rows(init_rng, c.ensemble_size, c.prior_mean, c.prior_std));
    d.obs.values = {c.observation};
    if (static_reference) d.obs.reference = {*static_reference};
    return d;
  }

  Vector x;
  Matrix members;
  if (c.model == "doublewell") {
    x = detail::gaussian_rows(truth_rng, 1, c.prior_mean, c.prior_std).row(0).transpose();
    members = detail::gaussian_rows(init_rng, c.ensemble_size, c.prior_mean, c.prior_std);
  } else {
    x = detail::spun_up_truth(c, setup.model, truth_rng);
    members = detail::gaussian_rows(init_rng, c.ensemble_size, x, Vector::Constant(dim, c.init_spread));
  }
  d.initial = Ensemble(std::move(members));
  for (int k = 0; k < c.windows; ++k) {
    setup.model.advance(x, c.obs_interval, truth_rng);
    Vector y = setup.h.apply(x);
    for (Eigen::Index o = 0; o < m; ++o) y[o] += setup.likelihood.obs_noise_std[o] * obs_rng.normal();
    d.obs.values.push_back(std::move(y));
    d.obs.truth.push_back(x);
  }
  if (c.reference_size > 0) {
    RngStream ref_rng = RngStream::for_role(d.seed, StreamRole::reference, 1);
    Matrix ref;
    if (c.model == "doublewell") {
      ref = detail::gaussian_rows(ref_rng, c.reference_size, c.prior_mean, c.prior_std);
    } else {
      const Vector start = d.initial.members().colwise().mean().transpose();
      ref = detail::gaussian_rows(ref_rng, c.reference_size, start, Vector::Constant(dim, c.init_spread));
    }
    d.obs.reference = pf_reference_means(setup.model, setup.h, setup.likelihood, Ensemble(std::move(ref)), d.obs, d.seed);
  }
  return d;
}

inline SummaryRow summarize(const ExperimentConfig& c, const MethodSpec& spec, const std::vector<TrialLog>& logs) {
  SummaryRow row;
  row.method = spec.label;
  row.model = c.model;
  row.ensemble_size = c.ensemble_size;
  row.dt_ob = c.obs_interval;
  row.kernel = detail::kernel_name(spec);
  row.map = detail::map_name(spec);
  row.lambda = row.kernel == "none" ? std::numeric_limits<double>::quiet_NaN() : spec.filter.transport.lambda;
  row.trials = c.trials;
  std::vector<MetricSeries> truth, post, ens, cp;
  for (std::size_t t = 0; t < logs.size(); ++t) {
    const auto& log = logs[t];
    if (log.failed) {
      ++row.failures;
      continue;
    }
    std::vector<double> a, b, e, p;
    for (const auto& r : log.records) {
      a.push_back(r.rmse_truth);
      b.push_back(r.rmse_post);
      e.push_back(r.ens);
      p.push_back(r.cp);
    }
    const int id = log.trial;
    truth.push_back(MetricSeries::from(a, id));
    post.push_back(MetricSeries::from(b, id));
    ens.push_back(MetricSeries::from(e, id));
    cp.push_back(MetricSeries::from(p, id));
  }
  row.rmse_truth = aggregate(truth);
  row.rmse_post = aggregate(post);
  row.ens = aggregate(ens);
  row.cp = aggregate(cp);
  return row;
}

inline std::vector<std::string> summary_fields(const SummaryRow& r) {
  return {r.method,
          r.model,
          std::to_string(r.ensemble_size),
          format_double(r.dt_ob),
          r.kernel,
          format_double(r.lambda),
          r.map,
          std::to_string(r.trials),
          format_double(r.rmse_truth.mean),
          format_double(r.rmse_truth.se),
          format_double(r.rmse_post.mean),
          format_double(r.rmse_post.se),
          format_double(r.ens.mean),
          format_double(r.cp.mean),
          std::to_string(r.failures)};
}

inline CsvTable trial_table(const TrialLog& log, Eigen::Index dim) {
  CsvTable t;
  t.header = trial_columns();
  for (Eigen::Index i = 0; i < dim; ++i) t.header.push_back("mean_" + std::to_string(i));
  auto row = [&](const WindowRecord& r, const std::string& status) {
    std::vector<std::string> f{log.method,
                               std::to_string(log.trial),
                               std::to_string(log.seed),
                               std::to_string(r.window),
                               format_double(r.time),
                               format_double(r.rmse_truth),
                               format_double(r.rmse_post),
                               format_double(r.ens),
                               format_double(r.cp),
                               format_double(r.ess),
                               format_double(r.loss),
                               std::to_string(r.iterations),
                               format_double(r.condition),
                               format_double(r.wall_time),
                               status};
    for (Eigen::Index i = 0; i < dim; ++i)
      f.push_back(r.mean.size() == dim ? format_double(r.mean[i]) : "nan");
    t.rows.push_back(std::move(f));
  };
  row(log.initial, "initial");
  for (const auto& r : log.records) row(r, "ok");
  if (log.failed) {
    WindowRecord fail;
    fail.window = static_cast<int>(log.records.size()) + 1;
    fail.time = log.records.empty() ? 0.0 : log.records.back().time;
    fail.ens = std::numeric_limits<double>::quiet_NaN();
    row(fail, "failed: " + log.failure);
  }
  return t;
}

inline CsvTable snapshot_table(const TrialLog& log, Eigen::Index dim) {
  CsvTable t;
  t.header = {"window", "member"};
  for (Eigen::Index i = 0; i < dim; ++i) t.header.push_back("x_" + std::to_string(i));
  for (const auto& [window, members] : log.snapshots)
    for (Eigen::Index j = 0; j < members.rows(); ++j) {
      std::vector<std::string> f{std::to_string(window), std::to_string(j)};
      for (Eigen::Index i = 0; i < dim; ++i) f.push_back(format_double(members(j, i)));
      t.rows.push_back(std::move(f));
    }
  return t;
}

/// Run every (method, trial) pair of a config. No files are written.
inline BatteryResult run_battery(const ExperimentConfig& c) {
  BatteryResult result;
  result.config = c;
  const ModelSetup setup = build_model(c);
  std::optional<Vector> static_reference;
  if (c.is_static() && c.trials > 0) static_reference = static_oracle(c, setup).mean;

  result.data.resize(static_cast<std::size_t>(c.trials));
  detail::parallel_for(result.data.size(), [&](std::size_t t) {
    result.data[t] = make_trial_data(c, setup, static_cast<int>(t), static_reference);
  });

  const std::size_t nm = c.methods.size();
  result.methods.resize(nm);
  for (std::size_t m = 0; m < nm; ++m) {
    result.methods[m].spec = c.methods[m];
    result.methods[m].logs.resize(result.data.size());
  }
  detail::parallel_for(nm * result.data.size(), [&](std::size_t task) {
    const std::size_t m = task / result.data.size();
    const std::size_t t = task % result.data.size();
    const auto& data = result.data[t];
    RunOptions opts;
    opts.t_alpha = c.t_alpha;
    opts.snapshot_every = c.snapshot_every;
    opts.record_wall_time = c.record_wall_time;
    opts.method_stream = m + 1;
    TrialLog log = run_filter(c.methods[m].filter, setup.model, setup.h, setup.likelihood, data.initial, data.obs,
                              data.seed, opts);
    log.method = c.methods[m].label;
    log.trial = data.trial;
    result.methods[m].logs[t] = std::move(log);
  });
  for (auto& mr : result.methods) mr.summary = summarize(c, mr.spec, mr.logs);
  return result;
}

namespace detail {

inline std::string trial_id(std::size_t method_index, const std::string& label, int trial, const std::string& suffix) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", trial);
  return std::to_string(method_index) + "-" + sanitize(label) + suffix + "-trial" + buf;
}

inline void write_trials(const BatteryResult& r, const std::filesystem::path& dir, const std::string& suffix) {
  std::filesystem::create_directories(dir / "trials");
  const auto dim = r.config.state_dim();
  for (std::size_t m = 0; m < r.methods.size(); ++m)
    for (const auto& log : r.methods[m].logs) {
      const auto id = trial_id(m, r.methods[m].spec.label, log.trial, suffix);
      write_file((dir / "trials" / (id + ".csv")).string(), to_csv(trial_table(log, dim)));
      if (!log.snapshots.empty())
        write_file((dir / "trials" / (id + "-ensembles.csv")).string(), to_csv(snapshot_table(log, dim)));
    }
}

}  // namespace detail

struct RunStatus {
  int exit_code = 0;
  CsvTable summary;
};

/// `run`: battery plus trials/<id>.csv and summary.csv under the output directory.
inline RunStatus run(const ExperimentConfig& c) {
  const auto result = run_battery(c);
  const std::filesystem::path dir(c.output);
  std::filesystem::create_directories(dir);
  detail::write_trials(result, dir, "");
  RunStatus status;
  status.summary.header = summary_columns();
  if (c.trials > 0)
    for (const auto& m : result.methods) status.summary.rows.push_back(summary_fields(m.summary));
  write_file((dir / "summary.csv").string(), to_csv(status.summary));
  status.exit_code = result.all_failed() ? 2 : 0;
  return status;
}

enum class SweepAxis { obs_interval, ensemble_size };

/// One summary row per (method, value); rows ordered by value, then method.
inline RunStatus sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<ExperimentConfig> configs;
  for (double v : values) {
    ExperimentConfig c = base;
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("sweep values must be positive");
    if (axis == SweepAxis::obs_interval) {
      if (c.is_static()) throw ConfigError("static problems have no observation interval to sweep");
      c.obs_interval = v;
      try {
        build_model(c).model.steps_for(v);
      } catch (const std::exception&) {
        throw ConfigError("dt must divide sweep value " + format_double(v));
      }
    } else {
      if (v != std::floor(v) || v < 2) throw ConfigError("ensemble sizes must be integers >= 2");
      c.ensemble_size = static_cast<int>(v);
    }
    configs.push_back(std::move(c));
  }
  const std::filesystem::path dir(base.output);
  std::filesystem::create_directories(dir);
  RunStatus status;
  status.summary.header = summary_columns();
  bool any_ok = false, any_task = false;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto result = run_battery(configs[i]);
    const std::string suffix =
        std::string("-") + (axis == SweepAxis::obs_interval ? "dt" : "N") + detail::sanitize(detail::short_value(values[i]));
    detail::write_trials(result, dir, suffix);
    if (configs[i].trials > 0)
      for (const auto& m : result.methods) status.summary.rows.push_back(summary_fields(m.summary));
    for (const auto& m : result.methods)
      for (const auto& l : m.logs) {
        any_task = true;
        any_ok = any_ok || !l.failed;
      }
  }
  write_file((dir / "summary.csv").string(), to_csv(status.summary));
  status.exit_code = any_task && !any_ok ? 2 : 0;
  return status;
}

/// `oracle`: a quadrature density table for static problems, or PF reference
/// mean trajectories (one file per trial) for the Double-Well model.
inline std::vector<std::string> oracle(const ExperimentConfig& c) {
  const std::filesystem::path dir(c.output);
  std::filesystem::create_directories(dir);
  const ModelSetup setup = build_model(c);
  std::vector<std::string> written;
  if (c.is_static()) {
    const auto table = static_oracle(c, setup);
    CsvTable density;
    const auto dim = static_cast<Eigen::Index>(table.axes.size());
    for (Eigen::Index i = 0; i < dim; ++i) density.header.push_back("x_" + std::to_string(i));
    density.header.push_back("density");
    const auto p0 = table.axes[0].size();
    const auto p1 = dim == 2 ? table.axes[1].size() : 1;
    for (Eigen::Index i = 0; i < p0; ++i)
      for (Eigen::Index j = 0; j < p1; ++j) {
        std::vector<std::string> f{format_double(table.axes[0][i])};
        if (dim == 2) f.push_back(format_double(table.axes[1][j]));
        f.push_back(format_double(table.density[i * p1 + j]));
        density.rows.push_back(std::move(f));
      }
    CsvTable summary;
    summary.header = {"quantity", "component", "value"};
    for (Eigen::Index i = 0; i < dim; ++i) {
      summary.rows.push_back({"mean", std::to_string(i), format_double(table.mean[i])});
      summary.rows.push_back({"map", std::to_string(i), format_double(table.map[i])});
    }
    summary.rows.push_back({"normalization_error", "-", format_double(table.normalization_error)});
    written.push_back((dir / "oracle_density.csv").string());
    write_file(written.back(), to_csv(density));
    written.push_back((dir / "oracle_summary.csv").string());
    write_file(written.back(), to_csv(summary));
    return written;
  }
  if (c.model != "doublewell") throw ConfigError("oracle supports static1d, static2d and doublewell only");
  ExperimentConfig rc = c;
  if (rc.reference_size <= 0) rc.reference_size = 10000;
  std::vector<TrialData> data(static_cast<std::size_t>(rc.trials));
  detail::parallel_for(data.size(), [&](std::size_t t) { data[t] = make_trial_data(rc, setup, static_cast<int>(t)); });
  std::filesystem::create_directories(dir / "oracle");
  for (const auto& d : data) {
    CsvTable t;
    t.header = {"trial", "seed", "window", "time", "truth_0", "reference_mean_0"};
    for (std::size_t k = 0; k < d.obs.values.size(); ++k)
      t.rows.push_back({std::to_string(d.trial), std::to_string(d.seed), std::to_string(k + 1),
                        format_double(d.obs.interval * static_cast<double>(k + 1)), format_double(d.obs.truth[k][0]),
                        format_double(d.obs.reference[k][0])});
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", d.trial);
    written.push_back((dir / "oracle" / (std::string("reference-trial") + buf + ".csv")).string());
    write_file(written.back(), to_csv(t));
  }
  return written;
}

}  // namespace entranf::bench
