#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../common/conjugate_instances.hpp"
#include "physs/error.hpp"
#include "physs/experiment.hpp"
#include "physs/infer.hpp"
#include "physs/oracle.hpp"

using namespace physs;
using namespace physs::infer;
using kernels::Family;

namespace {

ModelSpec grid_spec(Mode mode, Index n_inducing = 0) {
  ModelSpec spec;
  spec.mode = mode;
  spec.orders.temporal = 2;
  spec.orders.spatial = {{0}, {1}};
  stprior::LatentPrior lp;
  lp.temporal = {Family::Matern52, 0.8, 1.0};
  lp.spatial = {{Family::SquaredExponential, 0.5, 1.0, 1}};
  spec.latents = {lp};
  spec.noise.obs = {0.05};
  if (n_inducing > 0) {
    Matrix Z(n_inducing, 1);
    for (Index i = 0; i < n_inducing; ++i) Z(i, 0) = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n_inducing - 1);
    spec.inducing = Z;
  }
  return spec;
}

// Noisy observations of sin(t) cos(x) on an n_t x n_s grid.
Problem grid_problem(Index n_t, Index n_s, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0, 0.1);
  Problem pb;
  for (Index i = 0; i < n_t; ++i)
    for (Index j = 0; j < n_s; ++j) {
      Point p;
      p.t = 0.3 * static_cast<double>(i);
      p.x = Vector::Constant(1, -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(n_s - 1));
      pb.data.push_back({p, 0, std::sin(p.t) * std::cos(p.x(0)) + N(rng)});
    }
  return pb;
}

void expect_code(ErrorCode c, const auto& fn) {
  try {
    fn();
    ADD_FAILURE() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), c) << e.what();
  }
}

}  // namespace

TEST(Conjugate, OneFullStepMatchesDenseOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    auto in = test_support::random_conjugate_instance(rng);
    Engine e(in.spec, in.problem);
    EXPECT_TRUE(e.conjugate());
    e.natgrad_step(1.0);
    const auto d = oracle::dense_posterior(in.spec, in.problem);
    const auto gap = test_support::compare_with_oracle(e, d);
    EXPECT_LT(gap.mean_rel, 1e-6) << "trial " << trial;
    EXPECT_LT(gap.cov_rel, 1e-6) << "trial " << trial;
    EXPECT_LT(gap.elbo_abs, 1e-6) << "trial " << trial;
  }
}

TEST(Conjugate, SecondFullStepIsFixedPoint) {
  std::mt19937_64 rng(5);
  auto in = test_support::random_conjugate_instance(rng);
  Engine e(in.spec, in.problem);
  e.natgrad_step(1.0);
  const double first = e.elbo().total;
  const auto sites = e.sites();
  e.natgrad_step(1.0);
  EXPECT_NEAR(e.elbo().total, first, 1e-8 * std::max(1.0, std::abs(first)));
  for (std::size_t k = 0; k < sites.size(); ++k)
    EXPECT_LT((e.sites()[k].precision - sites[k].precision).norm(), 1e-8 * std::max(1.0, sites[k].precision.norm()));
}

TEST(Conjugate, PartialStepsConvergeToOracle) {
  std::mt19937_64 rng(11);
  auto in = test_support::random_conjugate_instance(rng);
  Engine e(in.spec, in.problem);
  for (int i = 0; i < 60; ++i) e.natgrad_step(0.5);
  const auto gap = test_support::compare_with_oracle(e, oracle::dense_posterior(in.spec, in.problem));
  EXPECT_LT(gap.mean_rel, 1e-6);
  EXPECT_LT(gap.elbo_abs, 1e-6);
}

TEST(Conjugate, ExtendedSmootherIsExactForLinearResiduals) {
  std::mt19937_64 rng(13);
  auto in = test_support::random_conjugate_instance(rng);
  Engine e(in.spec, in.problem);
  e.eks_solve();
  const auto gap = test_support::compare_with_oracle(e, oracle::dense_posterior(in.spec, in.problem));
  EXPECT_LT(gap.mean_rel, 1e-6);
  EXPECT_LT(gap.cov_rel, 1e-6);
}

TEST(Prediction, OffGridTimesMatchOracleWithQueries) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    auto in = test_support::random_conjugate_instance(rng);
    Engine e(in.spec, in.problem);
    e.natgrad_step(1.0);
    Problem with_queries = in.problem;
    std::uniform_real_distribution<double> U(-1.0, 4.0);
    for (int i = 0; i < 4; ++i) {
      Point p;
      p.t = U(rng);
      if (in.spec.spatial_dims() > 0) p.x = Vector::Constant(1, 0.37 * static_cast<double>(i) - 0.5);
      with_queries.queries.push_back(p);
    }
    const auto d = oracle::dense_posterior(in.spec, with_queries);
    for (const auto& q : with_queries.queries) {
      const auto a = e.latent_marginal(q);
      const auto b = d.at(d.find(q));
      EXPECT_LT((a.mean - b.mean).norm(), 1e-6 * std::max(1.0, b.mean.norm()));
      EXPECT_LT((a.cov - b.cov).norm(), 1e-6 * std::max(1.0, b.cov.norm()));
    }
    // Training-grid answers are unchanged by the extra smoothing pass.
    const auto gap = test_support::compare_with_oracle(e, oracle::dense_posterior(in.spec, in.problem));
    EXPECT_LT(gap.mean_rel, 1e-6);
  }
}

TEST(Prediction, BatchedMatchesSingle) {
  Engine e(grid_spec(Mode::Full), grid_problem(6, 4));
  e.natgrad_step(1.0);
  std::vector<Point> pts;
  for (int i = 0; i < 7; ++i) pts.push_back({0.25 * i, Vector::Constant(1, 0.1 * i - 0.3)});
  const auto batch = e.predict(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto one = e.predict(pts[i]);
    EXPECT_NEAR(batch[i].mean(0), one.mean(0), 1e-10);
    EXPECT_NEAR(batch[i].variance(0), one.variance(0), 1e-10);
    EXPECT_GE(one.variance(0), 0.0);
  }
}

TEST(Prediction, IntegratedWienerRejectsTimesBeforeAnchor) {
  ModelSpec spec = grid_spec(Mode::Full);
  spec.latents[0].temporal = {Family::IntegratedWiener, 1.0, 1.0};
  Engine e(spec, grid_problem(4, 3));
  e.natgrad_step(1.0);
  EXPECT_NO_THROW(e.predict(Point{0.45, Vector::Constant(1, 0.0)}));
  expect_code(ErrorCode::InvalidArgument, [&] { e.predict(Point{-1.0, Vector::Constant(1, 0.0)}); });
}

TEST(Sparse, InducingAtEveryLocationEqualsFull) {
  const auto pb = grid_problem(5, 4);
  Engine full(grid_spec(Mode::Full), pb), sparse(grid_spec(Mode::Sparse, 4), pb);
  full.natgrad_step(1.0);
  sparse.natgrad_step(1.0);
  EXPECT_NEAR(full.elbo().total, sparse.elbo().total, 1e-6);
  for (const auto& d : pb.data) EXPECT_NEAR(full.predict(d.at).mean(0), sparse.predict(d.at).mean(0), 1e-6);
}

TEST(Structured, ElboBoundedByFullLogMarginal) {
  const auto pb = grid_problem(4, 3);
  Engine full(grid_spec(Mode::Full), pb);
  full.natgrad_step(1.0);
  for (Index m : {2, 3}) {
    Engine s(grid_spec(Mode::Structured, m), pb);
    for (int i = 0; i < 5; ++i) s.natgrad_step(1.0);
    EXPECT_LE(s.elbo().total, full.elbo().total + 1e-8) << "M=" << m;
    Engine sp(grid_spec(Mode::Sparse, m), pb);
    for (int i = 0; i < 5; ++i) sp.natgrad_step(1.0);
    EXPECT_LE(sp.elbo().total, full.elbo().total + 1e-8) << "M=" << m;
  }
}

TEST(Structured, SmallerStateThanSparse) {
  const auto pb = grid_problem(3, 4);
  Engine s(grid_spec(Mode::Structured, 4), pb), sp(grid_spec(Mode::Sparse, 4), pb);
  EXPECT_EQ(s.state_dim() * 2, sp.state_dim());
}

TEST(Minibatch, MeanMatchesFullExpectedLogLik) {
  ModelSpec spec = grid_spec(Mode::Full);
  spec.orders.spatial = {{0}, {1}, {2}};
  spec.residual = physics::residual_allen_cahn(spec.orders, 1e-3, 5.0);
  Problem pb = grid_problem(5, 4);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 6; ++j) pb.collocation.push_back({0.3 * i, Vector::Constant(1, -0.9 + 0.35 * j)});
  Engine e(spec, pb);
  e.natgrad_step(0.5);
  const double full = e.ell();
  std::mt19937_64 rng(3);
  const int draws = 400;
  double s = 0, s2 = 0;
  for (int i = 0; i < draws; ++i) {
    const double v = e.minibatch_ell(3, rng).ell;
    s += v;
    s2 += v * v;
  }
  const double mean = s / draws;
  const double se = std::sqrt(std::max(0.0, s2 / draws - mean * mean) / draws);
  EXPECT_NEAR(mean, full, 3 * se + 1e-9);
  EXPECT_NEAR(e.minibatch_ell(1000, rng).ell, full, 1e-9 * std::max(1.0, std::abs(full)));
  expect_code(ErrorCode::InvalidArgument, [&] { e.minibatch_ell(0, rng); });
}

TEST(Sites, NonPsdPrecisionRejected) {
  Engine e(grid_spec(Mode::Full), grid_problem(3, 3));
  auto sites = e.sites();
  sites[1].precision = -Matrix::Identity(e.emitted_dim(), e.emitted_dim());
  expect_code(ErrorCode::SitePrecisionNotPSD, [&] { e.set_sites(sites); });
  sites.pop_back();
  expect_code(ErrorCode::ShapeMismatch, [&] { e.set_sites(sites); });
}

TEST(Sites, NatgradKeepsPrecisionsPsdUnderGaussNewton) {
  ModelSpec spec;
  spec.orders.temporal = 3;
  spec.latents = {{{Family::Matern72, 1.0, 1.0}, {}}};
  spec.residual = physics::residual_pendulum(0.2, spec.orders);
  spec.noise.obs = {0.01};
  spec.noise.colloc = 1e-3;
  Problem pb;
  for (int i = 0; i < 10; ++i) pb.data.push_back({{0.6 * i, Vector()}, 0, 2.0 * std::cos(0.6 * i)});
  for (int i = 0; i < 50; ++i) pb.collocation.push_back({0.2 * i, Vector()});
  Engine e(spec, pb);
  for (int i = 0; i < 30; ++i) e.natgrad_step(0.3);
  EXPECT_EQ(e.psd_failures(), 0u);
  for (const auto& s : e.sites()) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s.precision);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8 * std::max(1.0, s.precision.norm()));
  }
}

TEST(Quadrature, GaussHermiteMoments) {
  std::vector<double> x, w;
  gauss_hermite(20, x, w);
  ASSERT_EQ(x.size(), 20u);
  double m0 = 0, m2 = 0, m4 = 0, m6 = 0, m3 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m0 += w[i];
    m2 += w[i] * x[i] * x[i];
    m3 += w[i] * x[i] * x[i] * x[i];
    m4 += w[i] * std::pow(x[i], 4);
    m6 += w[i] * std::pow(x[i], 6);
  }
  EXPECT_NEAR(m0, 1.0, 1e-13);
  EXPECT_NEAR(m2, 1.0, 1e-12);
  EXPECT_NEAR(m3, 0.0, 1e-12);
  EXPECT_NEAR(m4, 3.0, 1e-11);
  EXPECT_NEAR(m6, 15.0, 1e-10);
}

TEST(Quadrature, ResidualExpectationMatchesMonteCarlo) {
  kernels::DerivativeOrders o;
  o.temporal = 3;
  const auto g = physics::residual_pendulum(0.2, o);
  const Vector m = (Vector(2) << 0.7, -0.3).finished();
  const Matrix C = (Matrix(2, 2) << 0.2, 0.05, 0.05, 0.1).finished();
  const auto q = expected_residual(g, m, C, 0.01, false, 20);
  const auto mc = oracle::mc_expectation(g, m, C, 0.01, 400000, 9);
  EXPECT_NEAR(q.ell, mc.ell, 4 * mc.ell_se);
  for (Index i = 0; i < 2; ++i) {
    EXPECT_NEAR(q.grad(i), mc.grad(i), 4 * mc.grad_se(i));
    for (Index j = 0; j < 2; ++j) EXPECT_NEAR(q.hess(i, j), mc.hess(i, j), 4 * mc.hess_se(i, j) + 1e-12);
  }
  const auto gn = expected_residual(g, m, C, 0.01, true, 20);
  Eigen::SelfAdjointEigenSolver<Matrix> es(gn.hess);
  EXPECT_LE(es.eigenvalues().maxCoeff(), 1e-12);
  EXPECT_NEAR(gn.ell, q.ell, 1e-12);
}

TEST(Quadrature, ProbitExpectationMatchesMonteCarlo) {
  const double m = 0.05, v = 0.04, scale = 0.1;
  const auto q = expected_probit(m, v, scale, 20);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(m, std::sqrt(v));
  const int n = 400000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double val = physics::log_ndtr(N(rng) / scale);
    s += val;
    s2 += val * val;
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_NEAR(q.ell, mean, 4 * se);
  EXPECT_LT(q.hess(0, 0), 0.0);
}

TEST(Quadrature, GaussNewtonCurvatureIsPsd) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> N(0, 1);
  kernels::DerivativeOrders o;
  o.temporal = 2;
  o.spatial = {{0}, {1}, {2}};
  const auto g = physics::residual_allen_cahn(o, 1e-3, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix B(2, 4), A(4, 4);
    for (Index i = 0; i < B.size(); ++i) B.data()[i] = N(rng);
    for (Index i = 0; i < A.size(); ++i) A.data()[i] = N(rng);
    Vector mu(4);
    for (Index i = 0; i < 4; ++i) mu(i) = N(rng);
    const Matrix R = 0.01 * Matrix::Identity(2, 2);
    const Matrix P = gauss_newton_curvature(B, R, g, mu, 0.1 * A * A.transpose(), 0.01, 20);
    Eigen::SelfAdjointEigenSolver<Matrix> es(P);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10 * std::max(1.0, P.norm()));
  }
}

TEST(Hyperparameters, NamesAndRoundTrip) {
  ModelSpec spec = grid_spec(Mode::Full);
  const auto h = Hyperparameters::from_spec(spec);
  const Index lt = h.find("latent0.temporal.lengthscale");
  const Index no = h.find("noise.obs0");
  ASSERT_GE(lt, 0);
  ASSERT_GE(no, 0);
  EXPECT_TRUE(h.is_noise(no));
  EXPECT_FALSE(h.is_noise(lt));
  EXPECT_EQ(h.find("missing"), -1);
  EXPECT_NEAR(std::exp(h.log_values(lt)), 0.8, 1e-14);
  Vector lv = h.log_values;
  lv(lt) = std::log(2.5);
  const auto applied = h.apply(spec, lv);
  EXPECT_NEAR(applied.latents[0].temporal.lengthscale, 2.5, 1e-14);
  EXPECT_NEAR(applied.noise.obs[0], 0.05, 1e-15);
}

TEST(Elbo, ElboAtCurrentValuesMatchesElbo) {
  Engine e(grid_spec(Mode::Full), grid_problem(4, 3));
  e.natgrad_step(1.0);
  EXPECT_NEAR(e.elbo_at(e.hyperparameters().log_values), e.elbo().total, 1e-9);
}

TEST(Elbo, NoiseOnlyChangeMatchesRebuild) {
  const auto spec = grid_spec(Mode::Full);
  const auto pb = grid_problem(4, 3);
  Engine e(spec, pb);
  e.natgrad_step(1.0);
  Vector lv = e.hyperparameters().log_values;
  const Index no = e.hyperparameters().find("noise.obs0");
  lv(no) = std::log(0.2);
  const double fast = e.elbo_at(lv);
  lv(e.hyperparameters().find("latent0.temporal.lengthscale")) += 1e-13;
  const double slow = e.elbo_at(lv);
  EXPECT_NEAR(fast, slow, 1e-7);
  ModelSpec other = spec;
  other.noise.obs = {0.2};
  Engine f(other, pb);
  f.set_sites(e.sites());
  EXPECT_NEAR(fast, f.elbo().total, 1e-9);
}

TEST(Elbo, LengthMismatchRejected) {
  Engine e(grid_spec(Mode::Full), grid_problem(3, 3));
  expect_code(ErrorCode::ShapeMismatch, [&] { e.elbo_at(Vector::Zero(1)); });
}

TEST(Constraints, CurlFreePosteriorMeanHasZeroCurl) {
  experiment::DipoleParams dp;
  dp.n_t = 8;
  dp.n_s = 6;
  const auto data = experiment::simulate_dipole(dp);
  ModelSpec spec;
  spec.orders.temporal = 2;
  spec.orders.spatial = {{0}, {1}};
  spec.latents = {{{Family::Matern52, 0.5, 1.0}, {{Family::SquaredExponential, 0.5, 1.0, 1}}}};
  spec.outputs = 2;
  spec.W = physics::curl_free_weights(spec.orders, 1);
  spec.noise.obs = {1e-3, 1e-3};
  Problem pb;
  const auto& g = data.train;
  for (Index i = 0; i < static_cast<Index>(g.times.size()); ++i)
    for (Index j = 0; j < g.spatial_locations.rows(); ++j)
      for (Index o = 0; o < 2; ++o) {
        const auto k = static_cast<std::size_t>(g.flat(i, j, o));
        if (g.mask[k]) pb.data.push_back({{g.times[static_cast<std::size_t>(i)], g.spatial_locations.row(j).transpose()}, o, g.values[k]});
      }
  Engine e(spec, pb);
  e.natgrad_step(1.0);
  const double h = 1e-3;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-0.8, 0.8);
  for (int k = 0; k < 10; ++k) {
    const double t = U(rng), s = U(rng);
    auto f = [&](double a, double b) { return e.predict(Point{a, Vector::Constant(1, b)}).mean; };
    const double curl = (f(t, s + h)(0) - f(t, s - h)(0)) / (2 * h) - (f(t + h, s)(1) - f(t - h, s)(1)) / (2 * h);
    EXPECT_NEAR(curl, 0.0, 1e-4 * std::max(1.0, f(t, s).norm()));
  }
}
