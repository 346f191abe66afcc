#pragma once

#include "entranf/filters.hpp"
#include "entranf/models.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace entranf::bench {

/// Invalid configuration; message carries "line N:" when the location is known.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kConfigVersion = 1;

struct MethodSpec {
  FilterConfig filter;
  std::string label;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string model;
  double dt = 0.01;
  double obs_interval = 0.5;
  double obs_noise_std = 0.5;
  double gamma = 0.0;
  double forcing = 8.0;
  int n = 20;
  std::vector<int> observed;
  std::string observation_operator = "default";
  Vector prior_mean;
  Vector prior_std;
  Vector observation;
  double spinup = 10.0;
  double init_spread = 1.0;

  int ensemble_size = 400;
  int windows = 100;
  int trials = 20;
  std::uint64_t seed = 1;
  std::string output = "out";
  int reference_size = 0;
  double t_alpha = kDefaultTAlpha;
  int snapshot_every = 0;
  bool record_wall_time = false;

  Vector grid_lower;
  Vector grid_upper;
  int grid_points = 401;

  std::vector<MethodSpec> methods;

  bool is_static() const { return model == "static1d" || model == "static2d"; }
  Eigen::Index state_dim() const {
    if (model == "doublewell" || model == "static1d") return 1;
    if (model == "static2d") return 2;
    if (model == "lorenz63") return 3;
    return n;
  }
};

/// Concrete model, observation operator and likelihood for a validated config.
struct ModelSetup {
  StochasticModel model;
  ObservationOperator h;
  LikelihoodSpec likelihood;
};

namespace detail {

using nlohmann::json;

inline int line_of_offset(const std::string& text, std::size_t offset) {
  int line = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

class Locator {
 public:
  explicit Locator(const std::string& text) : text_(text) {}

  /// Line of the first occurrence of "key" at or after the line of `after`.
  int line(const std::string& key, std::size_t* cursor = nullptr) const {
    const std::string quoted = "\"" + key + "\"";
    const auto from = cursor ? *cursor : 0;
    auto pos = text_.find(quoted, from);
    if (pos == std::string::npos) pos = text_.find(quoted);
    if (pos == std::string::npos) return 0;
    return line_of_offset(text_, pos);
  }

  std::size_t offset_of(const std::string& key, std::size_t from) const {
    const auto pos = text_.find("\"" + key + "\"", from);
    return pos == std::string::npos ? from : pos;
  }

 private:
  const std::string& text_;
};

[[noreturn]] inline void fail(int line, const std::string& message) {
  if (line > 0) throw ConfigError("line " + std::to_string(line) + ": " + message);
  throw ConfigError(message);
}

template <class F>
auto guarded(const Locator& loc, const std::string& key, std::size_t scope, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    std::size_t cursor = scope;
    fail(loc.line(key, &cursor), "key '" + key + "': " + e.what());
  }
}

inline double number(const json& v) {
  if (!v.is_number()) throw std::invalid_argument("expected a number");
  return v.get<double>();
}

inline int integer(const json& v) {
  if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
  return v.get<int>();
}

inline bool boolean(const json& v) {
  if (!v.is_boolean()) throw std::invalid_argument("expected true or false");
  return v.get<bool>();
}

inline std::string string(const json& v) {
  if (!v.is_string()) throw std::invalid_argument("expected a string");
  return v.get<std::string>();
}

inline Vector vector(const json& v) {
  if (!v.is_array() || v.empty()) throw std::invalid_argument("expected a nonempty array of numbers");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = number(v[i]);
  return out;
}

inline std::vector<int> integers(const json& v) {
  if (!v.is_array() || v.empty()) throw std::invalid_argument("expected a nonempty array of integers");
  std::vector<int> out;
  for (const auto& x : v) out.push_back(integer(x));
  return out;
}

template <class E>
E choice(const json& v, std::initializer_list<std::pair<const char*, E>> options) {
  const auto s = string(v);
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw std::invalid_argument("unknown value '" + s + "' (expected " + names + ")");
}

inline const std::set<std::string>& top_level_keys() {
  static const std::set<std::string> keys{
      "version",  "model",      "dt",          "obs_interval",   "obs_noise_std", "gamma",
      "F",        "n",          "observed",    "observation_operator", "prior_mean", "prior_std",
      "observation", "spinup",  "init_spread", "ensemble_size",  "windows",       "trials",
      "seed",     "output",     "reference_size", "t_alpha",     "snapshot_every", "record_wall_time",
      "grid_lower", "grid_upper", "grid_points", "methods"};
  return keys;
}

inline const std::set<std::string>& method_keys() {
  static const std::set<std::string> keys{
      "method", "label", "kernel", "bandwidth", "exponent", "lambda", "map", "hidden", "init",
      "init_scale", "warm_start", "step_size", "max_iterations", "tolerance", "stall_window",
      "optimizer", "perturbation", "perturb_obs", "paired_noise"};
  return keys;
}

inline void apply_model_defaults(ExperimentConfig& c) {
  if (c.model == "doublewell") {
    c.dt = 0.01;
    c.obs_interval = 0.5;
    c.obs_noise_std = 0.5;
    c.gamma = 0.8;
    c.prior_mean = Vector::Zero(1);
    c.prior_std = Vector::Ones(1);
    c.ensemble_size = 400;
    c.reference_size = 10000;
  } else if (c.model == "lorenz63") {
    c.dt = 0.01;
    c.obs_interval = 0.5;
    c.obs_noise_std = 1.0;
    c.gamma = 1.0;
    c.observed = {0};
    c.ensemble_size = 400;
  } else if (c.model == "lorenz96") {
    c.dt = 0.01;
    c.obs_interval = 0.1;
    c.obs_noise_std = 1.0;
    c.gamma = 0.0;
    c.forcing = 8.0;
    c.n = 20;
    c.ensemble_size = 2000;
  } else if (c.model == "static1d") {
    c.obs_interval = 0.0;
    c.windows = 1;
    c.obs_noise_std = 1.0;
    c.prior_mean = Vector::Zero(1);
    c.prior_std = Vector::Ones(1);
    c.observation = Vector::Constant(1, 3.0);
    c.ensemble_size = 1000;
    c.grid_lower = Vector::Constant(1, -6.0);
    c.grid_upper = Vector::Constant(1, 6.0);
    c.grid_points = 4001;
  } else if (c.model == "static2d") {
    c.obs_interval = 0.0;
    c.windows = 1;
    c.obs_noise_std = 0.6315019;
    c.prior_mean = Vector::Zero(2);
    c.prior_std = Vector::Ones(2);
    c.observation = Vector::Constant(1, 1.0922364);
    c.ensemble_size = 5000;
    c.grid_lower = Vector::Constant(2, -6.0);
    c.grid_upper = Vector::Constant(2, 6.0);
    c.grid_points = 401;
  }
}

inline MethodSpec parse_method(const json& j, const Locator& loc, std::size_t scope) {
  if (!j.is_object()) fail(loc.line("methods"), "each method entry must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!method_keys().count(key)) {
      std::size_t cursor = scope;
      fail(loc.line(key, &cursor), "unknown method key '" + key + "'");
    }
  }
  if (!j.contains("method")) fail(loc.line("methods"), "method entry needs a 'method' key");
  MethodSpec spec;
  auto& f = spec.filter;
  auto& t = f.transport;
  auto get = [&](const char* key, auto&& apply) {
    if (j.contains(key)) guarded(loc, key, scope, [&] { apply(j.at(key)); return 0; });
  };
  get("method", [&](const json& v) {
    f.method = choice<Method>(v, {{"enkf", Method::enkf}, {"pf", Method::pf}, {"entranf", Method::entranf},
                                  {"entranfp", Method::entranfp}});
  });
  t.kernel = KernelKind::linear;
  t.lambda = f.method == Method::entranfp ? 0.5 : 0.0;
  get("kernel", [&](const json& v) {
    t.kernel = choice<KernelKind>(v, {{"linear", KernelKind::linear}, {"gaussian", KernelKind::gaussian}});
  });
  get("map", [&](const json& v) { t.map = choice<MapKind>(v, {{"linear", MapKind::linear}, {"mlp", MapKind::mlp}}); });
  if (f.method == Method::entranfp && t.kernel == KernelKind::linear && t.map == MapKind::linear) t.lambda = 1.0;
  get("bandwidth", [&](const json& v) {
    if (v.is_string()) {
      if (v.get<std::string>() != "median") throw std::invalid_argument("bandwidth must be \"median\" or a number");
      t.bandwidth.median = true;
    } else {
      t.bandwidth.median = false;
      t.bandwidth.value = number(v);
      if (!(t.bandwidth.value > 0.0)) throw std::invalid_argument("bandwidth must be positive");
    }
  });
  get("exponent", [&](const json& v) {
    t.exponent = number(v);
    if (t.exponent != 1.0 && t.exponent != 2.0) throw std::invalid_argument("exponent must be 1 or 2");
  });
  get("lambda", [&](const json& v) {
    t.lambda = number(v);
    if (!(t.lambda >= 0.0 && t.lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  });
  get("hidden", [&](const json& v) {
    t.hidden = integers(v);
    for (int h : t.hidden)
      if (h < 1) throw std::invalid_argument("hidden widths must be positive");
  });
  get("init", [&](const json& v) {
    t.init = choice<MapInit>(v, {{"zero", MapInit::zero}, {"closed_form", MapInit::closed_form}});
  });
  get("init_scale", [&](const json& v) {
    t.init_scale = number(v);
    if (!(t.init_scale > 0.0)) throw std::invalid_argument("init_scale must be positive");
  });
  get("warm_start", [&](const json& v) { t.warm_start = boolean(v); });
  get("step_size", [&](const json& v) {
    t.step_size = number(v);
    if (!(t.step_size > 0.0)) throw std::invalid_argument("step_size must be positive");
  });
  get("max_iterations", [&](const json& v) {
    t.max_iterations = integer(v);
    if (t.max_iterations < 0) throw std::invalid_argument("max_iterations must be nonnegative");
  });
  get("tolerance", [&](const json& v) {
    t.tolerance = number(v);
    if (t.tolerance < 0.0) throw std::invalid_argument("tolerance must be nonnegative");
  });
  get("stall_window", [&](const json& v) {
    t.stall_window = integer(v);
    if (t.stall_window < 1) throw std::invalid_argument("stall_window must be positive");
  });
  get("optimizer", [&](const json& v) {
    t.optimizer = choice<Optimizer>(v, {{"adam", Optimizer::adaptive_moment}, {"gradient", Optimizer::plain_gradient}});
  });
  get("perturbation", [&](const json& v) {
    f.perturbation = choice<PerturbationScheme>(
        v, {{"decorrelated", PerturbationScheme::decorrelated}, {"iid", PerturbationScheme::iid}});
  });
  get("perturb_obs", [&](const json& v) { f.perturb_obs = boolean(v); });
  get("paired_noise", [&](const json& v) { f.paired_noise = boolean(v); });
  spec.label = f.label();
  get("label", [&](const json& v) {
    spec.label = string(v);
    if (spec.label.empty()) throw std::invalid_argument("label must be nonempty");
  });
  return spec;
}

}  // namespace detail

/// Parse and fully validate a config document. `text` is kept for line lookups.
inline ExperimentConfig parse_config(const std::string& text) {
  using detail::fail;
  using detail::json;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(detail::line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0), std::string("malformed config: ") + e.what());
  }
  if (!root.is_object()) fail(1, "config must be an object");
  const detail::Locator loc(text);
  for (const auto& [key, value] : root.items()) {
    (void)value;
    if (!detail::top_level_keys().count(key)) fail(loc.line(key), "unknown key '" + key + "'");
  }

  ExperimentConfig c;
  if (!root.contains("version")) fail(0, "missing 'version'");
  c.version = detail::guarded(loc, "version", 0, [&] { return detail::integer(root.at("version")); });
  if (c.version != kConfigVersion)
    fail(loc.line("version"), "unsupported config version " + std::to_string(c.version));
  if (!root.contains("model")) fail(0, "missing 'model'");
  c.model = detail::guarded(loc, "model", 0, [&] { return detail::string(root.at("model")); });
  static const std::set<std::string> models{"doublewell", "lorenz63", "lorenz96", "static1d", "static2d"};
  if (!models.count(c.model)) fail(loc.line("model"), "unknown model '" + c.model + "'");
  detail::apply_model_defaults(c);

  auto get = [&](const char* key, auto&& apply) {
    if (root.contains(key)) detail::guarded(loc, key, 0, [&] { apply(root.at(key)); return 0; });
  };
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(what) + " must be positive");
    return v;
  };
  get("dt", [&](const json& v) { c.dt = positive(detail::number(v), "dt"); });
  get("obs_interval", [&](const json& v) {
    c.obs_interval = detail::number(v);
    if (!c.is_static()) positive(c.obs_interval, "obs_interval");
  });
  get("obs_noise_std", [&](const json& v) { c.obs_noise_std = positive(detail::number(v), "obs_noise_std"); });
  get("gamma", [&](const json& v) {
    c.gamma = detail::number(v);
    if (c.gamma < 0.0) throw std::invalid_argument("gamma must be nonnegative");
  });
  get("F", [&](const json& v) { c.forcing = detail::number(v); });
  get("n", [&](const json& v) {
    c.n = detail::integer(v);
    if (c.model != "lorenz96") throw std::invalid_argument("'n' applies only to lorenz96");
    if (c.n < 4) throw std::invalid_argument("lorenz96 needs n >= 4");
  });
  get("observed", [&](const json& v) { c.observed = detail::integers(v); });
  get("observation_operator", [&](const json& v) {
    c.observation_operator = detail::string(v);
    if (c.observation_operator != "default" && c.observation_operator != "identity")
      throw std::invalid_argument("observation_operator must be \"default\" or \"identity\"");
  });
  get("prior_mean", [&](const json& v) { c.prior_mean = detail::vector(v); });
  get("prior_std", [&](const json& v) { c.prior_std = detail::vector(v); });
  get("observation", [&](const json& v) { c.observation = detail::vector(v); });
  get("spinup", [&](const json& v) {
    c.spinup = detail::number(v);
    if (c.spinup < 0.0) throw std::invalid_argument("spinup must be nonnegative");
  });
  get("init_spread", [&](const json& v) { c.init_spread = positive(detail::number(v), "init_spread"); });
  get("ensemble_size", [&](const json& v) {
    c.ensemble_size = detail::integer(v);
    if (c.ensemble_size < 2) throw std::invalid_argument("ensemble_size must be at least 2");
  });
  get("windows", [&](const json& v) {
    c.windows = detail::integer(v);
    if (c.windows < 0) throw std::invalid_argument("windows must be nonnegative");
    if (c.is_static() && c.windows != 1) throw std::invalid_argument("static problems have exactly one window");
  });
  get("trials", [&](const json& v) {
    c.trials = detail::integer(v);
    if (c.trials < 0) throw std::invalid_argument("trials must be nonnegative");
  });
  get("seed", [&](const json& v) {
    if (!v.is_number_unsigned()) throw std::invalid_argument("seed must be a nonnegative integer");
    c.seed = v.get<std::uint64_t>();
  });
  get("output", [&](const json& v) { c.output = detail::string(v); });
  get("reference_size", [&](const json& v) {
    c.reference_size = detail::integer(v);
    if (c.reference_size != 0 && c.reference_size < 2)
      throw std::invalid_argument("reference_size must be 0 or at least 2");
  });
  get("t_alpha", [&](const json& v) { c.t_alpha = positive(detail::number(v), "t_alpha"); });
  get("snapshot_every", [&](const json& v) {
    c.snapshot_every = detail::integer(v);
    if (c.snapshot_every < 0) throw std::invalid_argument("snapshot_every must be nonnegative");
  });
  get("record_wall_time", [&](const json& v) { c.record_wall_time = detail::boolean(v); });
  get("grid_lower", [&](const json& v) { c.grid_lower = detail::vector(v); });
  get("grid_upper", [&](const json& v) { c.grid_upper = detail::vector(v); });
  get("grid_points", [&](const json& v) {
    c.grid_points = detail::integer(v);
    if (c.grid_points < 5 || c.grid_points % 2 == 0) throw std::invalid_argument("grid_points must be odd and >= 5");
  });

  const auto dim = c.state_dim();
  if (c.model == "lorenz96" && !root.contains("observed")) {
    c.observed.clear();
    for (int i = 0; i < c.n; i += 2) c.observed.push_back(i);
  }
  if (!c.observed.empty()) {
    if (c.is_static() || c.model == "doublewell") fail(loc.line("observed"), "'observed' applies only to lorenz models");
    for (int i : c.observed)
      if (i < 0 || i >= dim) fail(loc.line("observed"), "observed index out of range");
  }
  if (c.observation_operator == "identity" && c.model != "static1d" && c.model != "static2d")
    fail(loc.line("observation_operator"), "identity operator applies only to static problems");
  if (c.model == "doublewell" || c.is_static()) {
    if (c.prior_mean.size() != dim) fail(loc.line("prior_mean"), "prior_mean must have one entry per state component");
    if (c.prior_std.size() != dim) fail(loc.line("prior_std"), "prior_std must have one entry per state component");
    if (!(c.prior_std.array() > 0.0).all()) fail(loc.line("prior_std"), "prior_std must be positive");
  }
  if (c.is_static()) {
    const Eigen::Index m = c.observation_operator == "identity" ? dim : 1;
    if (c.observation.size() != m) fail(loc.line("observation"), "observation must have " + std::to_string(m) + " entries");
    if (c.grid_lower.size() != dim || c.grid_upper.size() != dim)
      fail(loc.line("grid_lower"), "grid bounds must have one entry per state component");
    if (!(c.grid_lower.array() < c.grid_upper.array()).all()) fail(loc.line("grid_upper"), "grid bounds must be increasing");
  } else {
    try {
      StochasticModel probe("probe", 1, [](const double*, double* o) { o[0] = 0.0; }, Vector::Zero(1), c.dt,
                            Integrator::rk4_additive);
      probe.steps_for(c.obs_interval);
    } catch (const std::exception&) {
      fail(loc.line("obs_interval"), "dt must divide obs_interval");
    }
  }

  if (root.contains("methods")) {
    const auto& ms = root.at("methods");
    if (!ms.is_array() || ms.empty()) fail(loc.line("methods"), "methods must be a nonempty array");
    std::size_t scope = loc.offset_of("methods", 0);
    for (const auto& m : ms) {
      c.methods.push_back(detail::parse_method(m, loc, scope));
      scope = loc.offset_of("method", scope + 1);
    }
  } else {
    MethodSpec enkf;
    enkf.filter.method = Method::enkf;
    enkf.label = enkf.filter.label();
    MethodSpec ep;
    ep.filter.method = Method::entranfp;
    ep.filter.transport.kernel = KernelKind::linear;
    ep.filter.transport.lambda = 1.0;
    ep.label = ep.filter.label();
    c.methods = {enkf, ep};
  }
  std::set<std::string> labels;
  for (const auto& m : c.methods)
    if (!labels.insert(m.label).second) fail(loc.line("methods"), "duplicate method label '" + m.label + "'");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline ModelSetup build_model(const ExperimentConfig& c) {
  const auto dim = c.state_dim();
  auto lik = [&](Eigen::Index m) { return LikelihoodSpec{Vector::Constant(m, c.obs_noise_std)}; };
  std::vector<Eigen::Index> idx(c.observed.begin(), c.observed.end());
  if (c.model == "doublewell") {
    return {make_double_well(c.gamma, c.dt), ObservationOperator::double_well(), lik(1)};
  }
  if (c.model == "lorenz63") {
    auto h = ObservationOperator::subset(3, idx);
    return {make_lorenz63(c.gamma, c.dt), h, lik(h.obs_dim())};
  }
  if (c.model == "lorenz96") {
    auto h = ObservationOperator::subset(dim, idx);
    return {make_lorenz96(dim, c.forcing, c.gamma, c.dt), h, lik(h.obs_dim())};
  }
  if (c.observation_operator == "identity") {
    return {make_static(dim, c.model), ObservationOperator::identity(dim), lik(dim)};
  }
  if (c.model == "static1d") {
    auto h = ObservationOperator::polynomial(1, {{PolynomialTerm{2.0, {3}}, PolynomialTerm{1.0, {1}}}});
    return {make_static(1, c.model), h, lik(1)};
  }
  auto h = ObservationOperator::polynomial(2, {{PolynomialTerm{1.0, {3, 0}}, PolynomialTerm{1.0, {0, 1}}}});
  return {make_static(2, c.model), h, lik(1)};
}

}  // namespace entranf::bench
