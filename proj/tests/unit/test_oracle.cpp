#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "physs/error.hpp"
#include "physs/kernels.hpp"
#include "physs/oracle.hpp"

using namespace physs;
using namespace physs::infer;
using kernels::Family;

namespace {

ModelSpec series_spec(int order, const kernels::KernelSpec& k, double noise) {
  ModelSpec spec;
  spec.orders.temporal = order;
  spec.latents = {{k, {}}};
  spec.noise.obs = {noise};
  return spec;
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

TEST(DenseOracle, SeriesRegressionMatchesTextbook) {
  const kernels::KernelSpec k{Family::Matern52, 0.8, 1.4};
  const auto spec = series_spec(1, k, 0.05);
  const std::vector<double> T{0.0, 0.3, 1.1, 1.9, 2.4};
  const Vector y = (Vector(5) << 0.2, 0.5, -0.1, 0.8, 0.3).finished();
  Problem pb;
  for (Index i = 0; i < 5; ++i) pb.data.push_back({{T[static_cast<std::size_t>(i)], Vector()}, 0, y(i)});
  const auto d = oracle::dense_posterior(spec, pb);

  Matrix K(5, 5);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) K(i, j) = kernels::kernel_eval(k, T[static_cast<std::size_t>(i)], T[static_cast<std::size_t>(j)]);
  Matrix Ky = K;
  Ky.diagonal().array() += 0.05;
  const Eigen::LLT<Matrix> llt(Ky);
  const Vector mean = K * llt.solve(y);
  const Matrix cov = K - K * llt.solve(K);
  const Matrix L = llt.matrixL();
  const double lml = -0.5 * y.dot(llt.solve(y)) - L.diagonal().array().log().sum() - 2.5 * std::log(2 * M_PI);
  EXPECT_LT((d.mean - mean).norm(), 1e-10);
  EXPECT_LT((d.cov - cov).norm(), 1e-10);
  EXPECT_NEAR(d.log_marginal, lml, 1e-10);
}

TEST(DenseOracle, PriorDerivativeBlockAtUnobservedNode) {
  const kernels::KernelSpec k{Family::Matern32, 0.5, 2.0};
  const auto spec = series_spec(2, k, 0.1);
  Problem pb;
  pb.data.push_back({{0.0, Vector()}, 0, 1.0});
  pb.queries.push_back({100.0, Vector()});
  const auto d = oracle::dense_posterior(spec, pb);
  const auto far = d.at(d.find({100.0, Vector()}));
  // Matern-3/2 slope variance is 3 sigma^2 / l^2.
  EXPECT_NEAR(far.cov(0, 0), 2.0, 1e-8);
  EXPECT_NEAR(far.cov(1, 1), 3.0 * 2.0 / 0.25, 1e-8);
  EXPECT_NEAR(far.cov(0, 1), 0.0, 1e-8);
  EXPECT_NEAR(far.mean.norm(), 0.0, 1e-8);
}

TEST(DenseOracle, NodesAreDeduplicatedAndFound) {
  const auto spec = series_spec(1, {Family::Matern32, 1.0, 1.0}, 0.1);
  Problem pb;
  pb.data.push_back({{0.5, Vector()}, 0, 1.0});
  pb.data.push_back({{0.5, Vector()}, 0, 1.2});
  pb.queries.push_back({0.5, Vector()});
  pb.queries.push_back({0.9, Vector()});
  const auto d = oracle::dense_posterior(spec, pb);
  EXPECT_EQ(d.nodes.size(), 2u);
  EXPECT_EQ(d.find({0.9, Vector()}), 1);
  EXPECT_EQ(d.find({0.7, Vector()}), -1);
  const auto j = d.joint({1, 0});
  EXPECT_DOUBLE_EQ(j.mean(0), d.mean(1));
  EXPECT_DOUBLE_EQ(j.cov(0, 1), d.cov(1, 0));
}

TEST(DenseOracle, RejectsUnsupportedProblems) {
  Problem pb;
  for (int i = 0; i < 700; ++i) pb.data.push_back({{0.01 * i, Vector()}, 0, 0.0});
  expect_code(ErrorCode::OracleTooLarge,
              [&] { oracle::dense_posterior(series_spec(3, {Family::Matern72, 1.0, 1.0}, 0.1), pb); });
  Problem small;
  small.data.push_back({{0.0, Vector()}, 0, 0.0});
  expect_code(ErrorCode::Unsupported,
              [&] { oracle::dense_posterior(series_spec(2, {Family::IntegratedWiener, 1.0, 1.0}, 0.1), small); });
  auto spec = series_spec(3, {Family::Matern72, 1.0, 1.0}, 0.1);
  spec.residual = physics::residual_pendulum(0.2, spec.orders);
  small.collocation.push_back({0.5, Vector()});
  expect_code(ErrorCode::Unsupported, [&] { oracle::dense_posterior(spec, small); });
}

TEST(MonteCarlo, LinearResidualMatchesClosedForm) {
  // Expectations are over the reduced input w = G F, here a scalar.
  const auto g = physics::ResidualFn::linear("linear", (Matrix(1, 2) << 1.0, -2.0).finished());
  const Vector m = Vector::Constant(1, 0.3);
  const Matrix C = Matrix::Constant(1, 1, 0.5);
  const double noise = 0.4;
  const double ell = -0.5 * (0.09 + 0.5) / noise - 0.5 * std::log(2 * M_PI * noise);
  const auto mc = oracle::mc_expectation(g, m, C, noise, 200000, 4);
  EXPECT_NEAR(mc.ell, ell, 4 * mc.ell_se);
  EXPECT_NEAR(mc.grad(0), -0.3 / noise, 4 * mc.grad_se(0));
  EXPECT_NEAR(mc.hess(0, 0), -1.0 / noise, 1e-12);
  expect_code(ErrorCode::InvalidArgument, [&] { oracle::mc_expectation(g, m, C, noise, 10, 4); });
}
