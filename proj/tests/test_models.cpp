#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace entranf;

namespace {

Vector v(std::initializer_list<double> xs) {
  Vector out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out[i++] = x;
  return out;
}

StochasticModel exponential(double gamma = 0.0, double dt = 0.01) {
  return StochasticModel("exp", 1, [](const double* x, double* o) { o[0] = x[0]; }, Vector::Constant(1, gamma), dt);
}

Vector rotate(const Vector& x, Eigen::Index r) {
  const auto n = x.size();
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[(i + r) % n] = x[i];
  return out;
}

}  // namespace

TEST(DoubleWell, DriftAndObservation) {
  EXPECT_EQ(double_well_drift(0.0), 0.0);
  EXPECT_EQ(double_well_drift(1.0), 0.0);
  EXPECT_EQ(double_well_drift(-1.0), 0.0);
  EXPECT_EQ(double_well_drift(2.0), -6.0);
  EXPECT_EQ(double_well_obs(0.0), 0.0);
  EXPECT_NEAR(double_well_obs(std::numbers::pi), 0.1 * std::numbers::pi * std::numbers::pi, 1e-15);
  EXPECT_NEAR(0.1 * std::numbers::pi * std::numbers::pi, 0.9870, 5e-5);
  for (double x : {0.3, 1.7, -2.2, 5.0}) EXPECT_NEAR(double_well_obs(x) + double_well_obs(-x), 0.2 * x * x, 1e-14);
}

TEST(Lorenz63, DriftExamples) {
  EXPECT_EQ(lorenz63_drift(Vector::Zero(3)), Vector::Zero(3));
  const Vector d = lorenz63_drift(v({1, 1, 1}));
  EXPECT_EQ(d[0], 0.0);
  EXPECT_EQ(d[1], 26.0);
  EXPECT_NEAR(d[2], -5.0 / 3.0, 1e-15);
  const double c = std::sqrt(8.0 / 3.0 * 27.0);
  EXPECT_LE(lorenz63_drift(v({c, c, 27.0})).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LE(lorenz63_drift(v({-c, -c, 27.0})).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Lorenz96, DriftExamples) {
  EXPECT_EQ(lorenz96_drift(Vector::Constant(20, 8.0), 8.0), Vector::Zero(20));
  EXPECT_EQ(lorenz96_drift(v({1, 2, 3, 4}), 0.0), v({-5, -3, 3, -7}));
  EXPECT_THROW(lorenz96_drift(v({1, 2, 3}), 8.0), std::invalid_argument);
  EXPECT_THROW(make_lorenz96(3), std::invalid_argument);
}

TEST(Lorenz96, CyclicEquivarianceIsExact) {
  RngStream rng(1, 1);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(rng.uniform() * 30);
    const Vector x = check::random_matrix(rng, n, 1, 5.0).col(0);
    const Eigen::Index r = static_cast<Eigen::Index>(rng.uniform() * static_cast<double>(n));
    EXPECT_EQ(lorenz96_drift(rotate(x, r), 8.0), rotate(lorenz96_drift(x, 8.0), r));
  }
}

TEST(ObservationOperators, Kinds) {
  const auto sub = ObservationOperator::subset(4, {0, 2});
  EXPECT_EQ(sub.apply(v({1, 2, 3, 4})), v({1, 3}));
  EXPECT_THROW(ObservationOperator::subset(3, {3}), std::invalid_argument);
  EXPECT_THROW(ObservationOperator::subset(3, {}), std::invalid_argument);
  const auto cubic = ObservationOperator::polynomial(1, {{{2.0, {3}}, {1.0, {1}}}});
  EXPECT_EQ(cubic.apply(v({2.0})), v({18.0}));
  const auto mixed = ObservationOperator::polynomial(2, {{{1.0, {3, 0}}, {1.0, {0, 1}}}});
  EXPECT_EQ(mixed.apply(v({-1.0, 0.5})), v({-0.5}));
  EXPECT_THROW(ObservationOperator::polynomial(2, {{{1.0, {3}}}}), std::invalid_argument);
  EXPECT_THROW(sub.apply(v({1, 2})), std::invalid_argument);
}

TEST(Rk4Additive, ExponentialStep) {
  RngStream rng(2, 1);
  const Vector out = step_rk4_additive(exponential(), v({1.0}), 0.01, rng);
  EXPECT_NEAR(out[0], std::exp(0.01), 1e-10);
}

TEST(Rk4Additive, GlobalOrderNearFour) {
  // Error after a unit horizon; the local one-step error is fifth order.
  auto error_at = [](int steps) {
    RngStream rng(3, 1);
    const double dt = 1.0 / steps;
    Vector x = v({1.0});
    for (int s = 0; s < steps; ++s) x = step_rk4_additive(exponential(), x, dt, rng);
    return std::abs(x[0] - std::exp(1.0));
  };
  const double order = std::log2(error_at(10) / error_at(20));
  EXPECT_GE(order, 3.7);
  EXPECT_LE(order, 4.3);
  RngStream rng(3, 1);
  const double one_step = std::log2(std::abs(step_rk4_additive(exponential(), v({1}), 0.1, rng)[0] - std::exp(0.1)) /
                                    std::abs(step_rk4_additive(exponential(), v({1}), 0.05, rng)[0] - std::exp(0.05)));
  EXPECT_NEAR(one_step, 5.0, 0.3);
}

TEST(Rk4Additive, NoiselessMatchesClassicalRk4Exactly) {
  const auto model = make_lorenz63(0.0);
  Vector x = v({1.0, -2.0, 20.0});
  const double h = 0.01;
  auto f = [](const Vector& s) { return lorenz63_drift(s); };
  const Vector k1 = f(x);
  const Vector k2 = f(x + 0.5 * h * k1);
  const Vector k3 = f(x + 0.5 * h * k2);
  const Vector k4 = f(x + h * k3);
  Vector expect(3);
  for (int c = 0; c < 3; ++c) expect[c] = x[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
  RngStream rng(4, 1);
  EXPECT_EQ(step_rk4_additive(model, x, h, rng), expect);
}

TEST(Rk4Additive, ZeroDriftAddsScaledNoise) {
  const auto model = make_static(2, "flat");
  const StochasticModel noisy("flat", 2, [](const double*, double* o) { o[0] = o[1] = 0.0; }, v({0.7, 0.3}), 1.0);
  RngStream a(5, 1), b(5, 1);
  const Vector out = step_rk4_additive(noisy, v({1.0, -1.0}), 1.0, a);
  const double xi0 = b.normal(), xi1 = b.normal();
  EXPECT_DOUBLE_EQ(out[0], 1.0 + 0.7 * xi0);
  EXPECT_DOUBLE_EQ(out[1], -1.0 + 0.3 * xi1);
  RngStream c(5, 1);
  EXPECT_EQ(step_rk4_additive(model, v({1.0, -1.0}), 1.0, c), v({1.0, -1.0}));
}

TEST(StochasticModel, IntervalMustBeMultipleOfStep) {
  const auto m = make_double_well(0.8, 0.01);
  EXPECT_EQ(m.steps_for(0.5), 50);
  EXPECT_EQ(m.steps_for(0.3), 30);
  EXPECT_THROW((void)m.steps_for(0.015), std::invalid_argument);
  EXPECT_THROW(StochasticModel("bad", 1, [](const double*, double* o) { o[0] = 0; }, v({-1.0}), 0.01),
               std::invalid_argument);
}

TEST(StochasticModel, EulerMaruyamaNoiseVariance) {
  const auto m = make_double_well(0.8, 0.01, Integrator::euler_maruyama);
  EXPECT_EQ(m.integrator(), Integrator::euler_maruyama);
  // Starting at the unstable point, a single tiny step is dominated by noise.
  RngStream rng(6, 1);
  Matrix x = Matrix::Zero(20000, 1);
  const Matrix out = m.advance_rows(x, 0.01, rng);
  const double var = out.squaredNorm() / 20000.0;
  EXPECT_NEAR(var, 0.64 * 0.01, 0.05 * 0.64 * 0.01);
}

TEST(StaticOracle, ConjugateGaussian) {
  const GaussianPrior prior{v({0.3}), v({1.2})};
  const double r = 0.25, p = 1.44, y = 1.0;
  const auto t = static_posterior_oracle(prior, ObservationOperator::identity(1), v({y}), v({0.5}),
                                         PosteriorGrid{v({-8.0}), v({8.0}), 4001});
  const double post_var = 1.0 / (1.0 / p + 1.0 / r);
  const double post_mean = post_var * (0.3 / p + y / r);
  EXPECT_NEAR(t.mean[0], post_mean, 1e-6);
  double var = 0.0;
  const double h = t.axes[0][1] - t.axes[0][0];
  for (Eigen::Index i = 0; i < t.density.size(); ++i)
    var += detail::trapezoid_weight(static_cast<int>(i), 4001, h) * std::pow(t.axes[0][i] - t.mean[0], 2) *
           t.density[i];
  EXPECT_NEAR(var, post_var, 1e-6);
  EXPECT_NEAR(integrate_table(t), 1.0, 1e-8);
  EXPECT_NEAR(t.map[0], post_mean, h);
}

TEST(StaticOracle, FlatLikelihoodReturnsPrior) {
  const GaussianPrior prior{v({-0.4, 0.9}), v({1.0, 0.5})};
  const auto h = ObservationOperator::polynomial(2, {{{1.0, {3, 0}}, {1.0, {0, 1}}}});
  const auto t = static_posterior_oracle(prior, h, v({1.0}), v({1e6}), PosteriorGrid{v({-7, -4}), v({7, 6}), 401});
  EXPECT_NEAR(t.mean[0], -0.4, 1e-6);
  EXPECT_NEAR(t.mean[1], 0.9, 1e-6);
  EXPECT_NEAR(integrate_table(t), 1.0, 1e-8);
}

TEST(StaticOracle, TwoDimensionalReferenceMean) {
  const auto h = ObservationOperator::polynomial(2, {{{1.0, {3, 0}}, {1.0, {0, 1}}}});
  const auto t = static_posterior_oracle(GaussianPrior{Vector::Zero(2), Vector::Ones(2)}, h, v({1.0922364}),
                                         v({0.6315019}), PosteriorGrid{v({-6, -6}), v({6, 6}), 401});
  EXPECT_NEAR(t.mean[0], 0.2434, 5e-4);
  EXPECT_NEAR(t.mean[1], 0.5816, 5e-4);
  EXPECT_NEAR(integrate_table(t), 1.0, 1e-8);
  EXPECT_NEAR(t.map[0], 0.0, 0.03 + 1e-12);
  EXPECT_NEAR(t.map[1], 0.78, 0.03 + 1e-12);
}

TEST(StaticOracle, RejectsCoarseGridAndBadShapes) {
  const GaussianPrior prior{v({0.0}), v({1.0})};
  const auto id = ObservationOperator::identity(1);
  EXPECT_THROW(static_posterior_oracle(prior, id, v({0.0}), v({0.01}), PosteriorGrid{v({-6}), v({6}), 7}),
               std::invalid_argument);
  EXPECT_THROW(static_posterior_oracle(prior, id, v({0.0}), v({1.0}), PosteriorGrid{v({-6}), v({6}), 400}),
               std::invalid_argument);
  EXPECT_THROW(static_posterior_oracle(GaussianPrior{Vector::Zero(3), Vector::Ones(3)},
                                       ObservationOperator::identity(3), Vector::Zero(3), Vector::Ones(3),
                                       PosteriorGrid{Vector::Constant(3, -1), Vector::Constant(3, 1), 5}),
               std::invalid_argument);
}
