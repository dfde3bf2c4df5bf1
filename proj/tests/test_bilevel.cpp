#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <sstream>

#include "bilopt/bilevel.hpp"
#include "support/bilevel_fixtures.hpp"
#include "support/oracles.hpp"

namespace ad = bilopt::autodiff;
using namespace bilopt::testing;
namespace bl = bilopt::bilevel;
using ad::Tensor;
using bl::TensorList;

namespace {

Tensor scalar_leaf(double x) { return Tensor::leaf({1}, {x}); }

}  // namespace

TEST(Optimizer, SgdStep) {
  TensorList p{Tensor::leaf({2}, {1.0, -1.0})};
  bl::Optimizer opt(bl::OptimizerKind::Sgd, 0.5);
  const std::vector<double> g{2.0, 4.0};
  opt.step_flat(p, g);
  EXPECT_EQ(p[0].values()[0], 0.0);
  EXPECT_EQ(p[0].values()[1], -3.0);
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  TensorList p{Tensor::leaf({2}, {0.0, 0.0})};
  bl::Optimizer opt(bl::OptimizerKind::Adam, 0.01);
  const std::vector<double> g{3.0, -0.2};
  opt.step_flat(p, g);
  EXPECT_NEAR(p[0].values()[0], -0.01, 1e-9);
  EXPECT_NEAR(p[0].values()[1], 0.01, 1e-9);
}

TEST(Optimizer, AdamSecondStepMatchesHandRecursion) {
  TensorList p{Tensor::leaf({1}, {0.0})};
  bl::Optimizer opt(bl::OptimizerKind::Adam, 0.1);
  const std::vector<double> g1{1.0}, g2{-2.0};
  opt.step_flat(p, g1);
  opt.step_flat(p, g2);
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0;
  const double v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0;
  const double first = -0.1 * 1.0 / (1.0 + 1e-8);
  const double expected = first - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p[0].values()[0], expected, 1e-12);
}

TEST(Optimizer, RejectsSizeMismatch) {
  TensorList p{Tensor::leaf({2}, {0.0, 0.0})};
  bl::Optimizer opt(bl::OptimizerKind::Sgd, 0.1);
  const std::vector<double> g{1.0};
  EXPECT_THROW(opt.step_flat(p, g), std::invalid_argument);
}

TEST(Config, Validation) {
  bl::HypergradConfig c;
  EXPECT_NO_THROW(bl::validate(c));
  c.K = 0;
  EXPECT_THROW(bl::validate(c), std::invalid_argument);
  c = {};
  c.gamma = 0.0;
  EXPECT_THROW(bl::validate(c), std::invalid_argument);
  c = {};
  c.eta_in = -1.0;
  EXPECT_THROW(bl::validate(c), std::invalid_argument);
  c = {};
  c.eta_out = 0.0;
  EXPECT_NO_THROW(bl::validate(c));
  EXPECT_EQ(bl::optimizer_from_name("adam"), bl::OptimizerKind::Adam);
  EXPECT_THROW(bl::optimizer_from_name("rmsprop"), std::invalid_argument);
}

TEST(InnerLoop, SingleStepClosedForm) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  bl::HypergradConfig c;
  c.K = 1;
  c.eta_in = 0.1;
  bl::Optimizer opt(c.inner_optimizer, c.eta_in);
  const auto r = bl::inner_loop(theta, phi, tracking_quadratic(), c, 0, opt);
  EXPECT_DOUBLE_EQ(theta[0].item(), 0.0 - 0.1 * (0.0 - 2.0));
  ASSERT_EQ(r.losses.size(), 1u);
  EXPECT_DOUBLE_EQ(r.losses[0], 2.0);
}

TEST(InnerLoop, ConvergesToClosedFormMinimizer) {
  const VectorFixture f = vector_fixture(3);
  const Eigen::VectorXd phi_v = Eigen::VectorXd::LinSpaced(4, -1.0, 1.0);
  TensorList theta{Tensor::leaf({3, 1}, {0.0, 0.0, 0.0})};
  TensorList phi{Tensor::leaf({4, 1}, {phi_v(0), phi_v(1), phi_v(2), phi_v(3)})};
  bl::HypergradConfig c;
  c.K = 500;
  c.eta_in = 0.3;  // below 2 / λmax with λmax ≤ 3
  bl::Optimizer opt(c.inner_optimizer, c.eta_in);
  bl::inner_loop(theta, phi, f.problem, c, 0, opt);
  const Eigen::VectorXd star = f.A.ldlt().solve(f.B * phi_v);
  double err = 0.0;
  for (int i = 0; i < 3; ++i) err += std::pow(theta[0].values()[i] - star(i), 2);
  EXPECT_LT(std::sqrt(err), 1e-6);
}

TEST(InnerLoop, LeavesPhiUntouched) {
  TensorList theta{scalar_leaf(0.3)}, phi{scalar_leaf(1.7)};
  const double before = phi[0].item();
  bl::HypergradConfig c;
  c.K = 25;
  bl::Optimizer opt(bl::OptimizerKind::Adam, 0.05);
  bl::inner_loop(theta, phi, scalar_quadratic(2.0, 1.0), c, 0, opt);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(phi[0].item()), std::bit_cast<std::uint64_t>(before));
}

TEST(InnerLoop, DivergenceNamesTheStep) {
  TensorList theta{scalar_leaf(1.0)}, phi{scalar_leaf(0.0)};
  bl::HypergradConfig c;
  c.K = 2000;
  c.eta_in = 3.0;  // |1 − η| = 2 doubles θ every step
  bl::Optimizer opt(c.inner_optimizer, c.eta_in);
  try {
    bl::inner_loop(theta, phi, tracking_quadratic(), c, 4, opt);
    FAIL() << "expected divergence";
  } catch (const bl::DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("outer step 4"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("inner step"), std::string::npos);
  }
}

TEST(OuterLoss, StationaryAtOptimum) {
  const auto p = tracking_quadratic();
  TensorList theta{scalar_leaf(0.0)};
  ad::Tape tape;
  const Tensor loss = p.outer_loss(theta, 0);
  const auto g = ad::grad(loss, theta);
  EXPECT_LE(std::abs(g[0].item()), 1e-8);
}

TEST(Neumann, ZeroOrderIsScaledInput) {
  const std::vector<double> v{1.5, -2.0, 0.25};
  const auto p = bl::neumann_inverse_hvp(v, matrix_hvp(Eigen::MatrixXd::Identity(3, 3) * 7.0), 0, 0.125);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(p[i], 0.125 * v[i]);
}

TEST(Neumann, ScalarGeometricSeries) {
  // Oracle: 0.25 · Σ_{m=0}^{10} 0.5^m.
  double oracle = 0.0;
  for (int m = 0; m <= 10; ++m) oracle += 0.25 * std::pow(0.5, m);
  EXPECT_NEAR(oracle, 0.49975586, 1e-8);
  const std::vector<double> v{1.0};
  const auto p = bl::neumann_inverse_hvp(v, matrix_hvp(Eigen::MatrixXd::Constant(1, 1, 2.0)), 10, 0.25);
  EXPECT_NEAR(p[0], 0.49975586, 1e-8);
}

TEST(Neumann, MatchesDenseInverseOnSpd) {
  std::mt19937_64 rng(11);
  const Eigen::MatrixXd h = random_spd(5, 0.5, 4.0, rng);
  const Eigen::VectorXd v = Eigen::VectorXd::Random(5);
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().maxCoeff();
  const auto p = bl::neumann_inverse_hvp({v.data(), 5}, matrix_hvp(h), 500, 0.5 / lmax);
  const Eigen::VectorXd exact = h.inverse() * v;
  const Eigen::VectorXd got = Eigen::Map<const Eigen::VectorXd>(p.data(), 5);
  EXPECT_LT((got - exact).norm() / exact.norm(), 1e-3);
}

TEST(Neumann, ErrorNonincreasingInM) {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd h = random_spd(6, 0.2, 5.0, rng);
  const Eigen::VectorXd v = Eigen::VectorXd::Random(6);
  const Eigen::VectorXd exact = h.inverse() * v;
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().maxCoeff();
  double prev = INFINITY;
  for (std::size_t m = 0; m <= 60; ++m) {
    const auto p = bl::neumann_inverse_hvp({v.data(), 6}, matrix_hvp(h), m, 0.9 / lmax);
    const double err = (Eigen::Map<const Eigen::VectorXd>(p.data(), 6) - exact).norm();
    EXPECT_LE(err, prev + 1e-15) << "M=" << m;
    prev = err;
  }
}

TEST(Neumann, NonFiniteTermIsReported) {
  const std::vector<double> v{1.0};
  try {
    bl::neumann_inverse_hvp(v, matrix_hvp(Eigen::MatrixXd::Constant(1, 1, 1e200)), 5, 1e200);
    FAIL() << "expected divergence";
  } catch (const bl::DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("term"), std::string::npos);
  }
}

TEST(PowerIteration, FindsLargestEigenvalue) {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd h = random_spd(4, 1.0, 2.0, rng) + 5.0 * Eigen::VectorXd::Unit(4, 0) * Eigen::RowVectorXd::Unit(4, 0);
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().maxCoeff();
  EXPECT_NEAR(bl::power_iteration(matrix_hvp(h), 4, 200, 9), lmax, 1e-6);
}

TEST(Hypergradient, IftOnTrackingFixture) {
  TensorList theta{scalar_leaf(2.0)}, phi{scalar_leaf(2.0)};  // θ at the inner optimum θ* = φ
  bl::HypergradConfig c;
  c.M = 60;
  c.gamma = 0.5;
  const auto hg = bl::hypergrad_ift_neumann(theta, phi, tracking_quadratic(), c, 0);
  EXPECT_NEAR(hg.grad[0], 2.0, 1e-4);
}

TEST(Hypergradient, IftOnScaledFixture) {
  TensorList theta{scalar_leaf(0.5)}, phi{scalar_leaf(1.0)};  // θ* = φ/2
  bl::HypergradConfig c;
  c.M = 100;
  c.gamma = 0.25;
  const auto hg = bl::hypergrad_ift_neumann(theta, phi, scalar_quadratic(2.0, 1.0), c, 0);
  EXPECT_NEAR(hg.grad[0], 0.25, 1e-4);
}

TEST(Hypergradient, ZeroOuterGradientGivesZero) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(0.0)};
  bl::HypergradConfig c;
  c.M = 10;
  c.gamma = 0.5;
  const auto hg = bl::hypergrad_ift_neumann(theta, phi, tracking_quadratic(), c, 0);
  EXPECT_EQ(hg.grad[0], 0.0);
}

TEST(Hypergradient, ContractionWarningFlag) {
  TensorList theta{scalar_leaf(2.0)}, phi{scalar_leaf(2.0)};
  bl::HypergradConfig c;
  c.M = 1;
  c.gamma = 3.0;  // H = 1, so γλ = 3
  const auto hg = bl::hypergrad_ift_neumann(theta, phi, tracking_quadratic(), c, 0, true);
  ASSERT_TRUE(hg.lambda_max.has_value());
  EXPECT_NEAR(*hg.lambda_max, 1.0, 1e-9);
  EXPECT_TRUE(hg.contraction_warning);
  c.gamma = 0.5;
  EXPECT_FALSE(bl::hypergrad_ift_neumann(theta, phi, tracking_quadratic(), c, 0, true).contraction_warning);
}

TEST(Hypergradient, UnrolledSingleStepSymbolic) {
  // θ1 = θ0 − η(aθ0 − bφ); L_out = ½θ1²; dL/dφ = θ1 · ηb.
  const double a = 1.5, b = 0.7, eta = 0.2, th0 = 0.4, ph = -1.3;
  TensorList theta{scalar_leaf(th0)}, phi{scalar_leaf(ph)};
  bl::HypergradConfig c;
  c.K = 1;
  c.eta_in = eta;
  const auto hg = bl::hypergrad_unrolled(theta, phi, scalar_quadratic(a, b), c, 0);
  const double th1 = th0 - eta * (a * th0 - b * ph);
  EXPECT_NEAR(hg.grad[0], th1 * eta * b, 1e-10);
  EXPECT_NEAR(hg.outer_loss, 0.5 * th1 * th1, 1e-12);
  EXPECT_EQ(theta[0].item(), th0);
}

TEST(Hypergradient, UnrolledCapsAndPreconditions) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(1.0)};
  bl::HypergradConfig c;
  c.K = 51;
  EXPECT_THROW(bl::hypergrad_unrolled(theta, phi, tracking_quadratic(), c, 0), std::invalid_argument);
  c.K = 5;
  c.inner_optimizer = bl::OptimizerKind::Adam;
  EXPECT_THROW(bl::hypergrad_unrolled(theta, phi, tracking_quadratic(), c, 0), std::invalid_argument);
}

TEST(Hypergradient, UnrolledZeroWhenPhiIsInert) {
  bl::BilevelProblem p = tracking_quadratic();
  p.inner_loss = [](const TensorList& th, const TensorList& ph, bl::BatchIndex) {
    return ad::add(half_square(ad::sub(th[0], Tensor::constant({1}, {1.0}))), ad::scale(ad::sum(ph[0]), 0.0));
  };
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(3.0)};
  bl::HypergradConfig c;
  c.K = 10;
  EXPECT_EQ(bl::hypergrad_unrolled(theta, phi, p, c, 0).grad[0], 0.0);
}

TEST(Hypergradient, FiniteDifferenceMatchesAnalytic) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(1.0)};
  bl::HypergradConfig c;
  c.K = 200;
  c.eta_in = 0.4;
  const auto hg = bl::hypergrad_finite_difference(theta, phi, scalar_quadratic(2.0, 1.0), c, 0, 1e-4);
  EXPECT_NEAR(hg.grad[0], 0.25, 1e-5);
}

TEST(Hypergradient, FiniteDifferenceRejectsBadInput) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(1.0)};
  bl::HypergradConfig c;
  EXPECT_THROW(bl::hypergrad_finite_difference(theta, phi, tracking_quadratic(), c, 0, 0.0), std::invalid_argument);
  TensorList big{Tensor::leaf({65}, std::vector<double>(65, 0.0))};
  EXPECT_THROW(bl::hypergrad_finite_difference(theta, big, tracking_quadratic(), c, 0, 1e-4), std::invalid_argument);
}

TEST(Hypergradient, ThreeRoutesAgreeOnVectorFixture) {
  const VectorFixture f = vector_fixture(17);
  const Eigen::VectorXd phi_v(Eigen::Vector4d(0.3, -0.8, 1.1, 0.5));
  TensorList theta0{Tensor::leaf({3, 1}, {0.0, 0.0, 0.0})};
  TensorList phi{Tensor::leaf({4, 1}, {phi_v(0), phi_v(1), phi_v(2), phi_v(3)})};
  bl::HypergradConfig c;
  c.K = 50;
  c.eta_in = 0.3;
  const auto unrolled = bl::hypergrad_unrolled(theta0, phi, f.problem, c, 0);
  const auto fd = bl::hypergrad_finite_difference(theta0, phi, f.problem, c, 0, 1e-5);
  TensorList theta = {theta0[0].clone_leaf()};
  bl::Optimizer opt(c.inner_optimizer, c.eta_in);
  bl::inner_loop(theta, phi, f.problem, c, 0, opt);
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(f.A).eigenvalues().maxCoeff();
  c.M = 200;
  c.gamma = 0.5 / lmax;
  const auto ift = bl::hypergrad_ift_neumann(theta, phi, f.problem, c, 0);
  const Eigen::VectorXd analytic = vector_fixture_hypergrad(f, phi_v);
  const std::vector<double> exact(analytic.data(), analytic.data() + 4);
  EXPECT_LT(bilopt::testing::relative_error(fd.grad, unrolled.grad), 1e-4);
  EXPECT_LT(bilopt::testing::relative_error(ift.grad, unrolled.grad), 1e-3);
  EXPECT_LT(bilopt::testing::relative_error(ift.grad, exact), 1e-3);
}

namespace {

bl::TrainResult run_tracking(double eta_out, std::uint64_t seed, TensorList& theta, TensorList& phi) {
  bl::HypergradConfig c;
  c.K = 5;
  c.M = 20;
  c.gamma = 0.5;
  c.eta_in = 0.3;
  c.eta_out = eta_out;
  c.seed = seed;
  bl::TrainOptions o;
  o.outer_steps = 15;
  return bl::bilevel_train(theta, phi, tracking_quadratic(), c, o);
}

}  // namespace

TEST(BilevelTrain, DrivesPhiTowardOuterOptimum) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  const auto r = run_tracking(0.5, 1, theta, phi);
  ASSERT_EQ(r.trace.size(), 15u);
  EXPECT_LT(std::abs(phi[0].item()), 0.2);
  EXPECT_LT(r.trace.back().outer_loss, r.trace.front().outer_loss);
}

TEST(BilevelTrain, ZeroOuterRateFreezesPhi) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  const double before = phi[0].item();
  run_tracking(0.0, 1, theta, phi);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(phi[0].item()), std::bit_cast<std::uint64_t>(before));
}

TEST(BilevelTrain, ZeroOuterRateMatchesSingleLevel) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  const auto r = run_tracking(0.0, 1, theta, phi);
  TensorList theta_ref{scalar_leaf(0.0)}, phi_ref{scalar_leaf(2.0)};
  bl::HypergradConfig c;
  c.K = 5;
  c.eta_in = 0.3;
  const auto losses = bl::single_level_train(theta_ref, phi_ref, tracking_quadratic(), c, 15);
  ASSERT_EQ(losses.size(), 75u);
  for (std::size_t s = 0; s < r.trace.size(); ++s) EXPECT_EQ(r.trace[s].inner_loss, losses[s * 5 + 4]);
  EXPECT_EQ(theta[0].item(), theta_ref[0].item());
}

TEST(BilevelTrain, TracesAreReproducible) {
  auto dump = [] {
    TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
    const auto r = run_tracking(0.5, 7, theta, phi);
    std::ostringstream out;
    for (const auto& rec : r.trace) bl::write_trace_line(out, rec);
    return out.str();
  };
  const std::string a = dump();
  EXPECT_EQ(a, dump());
  EXPECT_NE(a.find("\"selection_pct\":null"), std::string::npos);
  EXPECT_NE(a.find("\"wall_ms\":0.0"), std::string::npos);
}

TEST(BilevelTrain, TraceLineLayout) {
  std::ostringstream out;
  bl::write_trace_line(out, {3, 0.5, 0.25, 75.0, 0.0});
  EXPECT_EQ(out.str(), "{\"step\":3,\"inner_loss\":0.5,\"outer_loss\":0.25,\"selection_pct\":75.0,\"wall_ms\":0.0}\n");
}

TEST(BilevelTrain, SelectionCallbackRunsBeforeUpdate) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  bl::HypergradConfig c;
  c.K = 2;
  c.M = 5;
  c.gamma = 0.5;
  c.eta_out = 0.5;
  bl::TrainOptions o;
  o.outer_steps = 3;
  std::vector<double> seen;
  o.selection = [&seen](const TensorList&, const TensorList& ph) -> std::optional<double> {
    seen.push_back(ph[0].item());
    return ph[0].item();
  };
  const auto r = bl::bilevel_train(theta, phi, tracking_quadratic(), c, o);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(seen[0], 2.0);
  EXPECT_EQ(*r.trace[0].selection_pct, 2.0);
  EXPECT_NE(seen[1], 2.0);
}

TEST(BilevelTrain, PatienceStopsEarly) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(2.0)};
  bl::BilevelProblem p = tracking_quadratic();
  p.outer_loss = [](const TensorList& th, std::size_t) { return ad::scale(ad::sum(th[0]), 0.0); };
  bl::HypergradConfig c;
  c.K = 1;
  c.gamma = 0.5;
  bl::TrainOptions o;
  o.outer_steps = 50;
  o.patience = 3;
  EXPECT_EQ(bl::bilevel_train(theta, phi, p, c, o).trace.size(), 4u);
}

TEST(BilevelTrain, DivergenceCarriesTrace) {
  TensorList theta{scalar_leaf(1.0)}, phi{scalar_leaf(0.0)};
  bl::BilevelProblem p = tracking_quadratic();
  p.outer_loss = [](const TensorList& th, std::size_t outer) {
    if (outer == 2) return ad::scale(ad::sum(th[0]), std::numeric_limits<double>::infinity());
    return half_square(th[0]);
  };
  bl::HypergradConfig c;
  c.K = 1;
  c.gamma = 0.5;
  c.eta_out = 0.0;
  bl::TrainOptions o;
  o.outer_steps = 5;
  try {
    bl::bilevel_train(theta, phi, p, c, o);
    FAIL() << "expected divergence";
  } catch (const bl::DivergenceError& e) {
    EXPECT_EQ(e.trace.size(), 2u);
    EXPECT_NE(std::string(e.what()).find("outer step 2"), std::string::npos) << e.what();
  }
}

TEST(BilevelTrain, MinimumInnerSteps) {
  TensorList theta{scalar_leaf(0.0)}, phi{scalar_leaf(1.0)};
  bl::HypergradConfig c;
  c.K = 1;
  c.gamma = 0.5;
  bl::TrainOptions o;
  o.outer_steps = 4;
  EXPECT_EQ(bl::bilevel_train(theta, phi, tracking_quadratic(), c, o).trace.size(), 4u);
}
