#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "physs/error.hpp"
#include "physs/stprior.hpp"

using namespace physs;
using namespace physs::stprior;
using kernels::Family;

namespace {

// Joint prior covariance of the state over all steps, by propagation.
Matrix joint_state_cov(const ssm::StateSpaceModel& m) {
  const Index n = m.state_dim(), N = m.size();
  Matrix C = Matrix::Zero(N * n, N * n);
  C.topLeftCorner(n, n) = m.init.cov;
  for (Index i = 1; i < N; ++i) {
    const Matrix A = m.steps[static_cast<std::size_t>(i)].A.to_dense();
    for (Index j = 0; j < i; ++j) {
      C.block(i * n, j * n, n, n) = A * C.block((i - 1) * n, j * n, n, n);
      C.block(j * n, i * n, n, n) = C.block(i * n, j * n, n, n).transpose();
    }
    C.block(i * n, i * n, n, n) =
        A * C.block((i - 1) * n, (i - 1) * n, n, n) * A.transpose() + m.steps[static_cast<std::size_t>(i)].Q;
  }
  return C;
}

// Dense K_t^D (x) K_s^D in latent-time-space layout, D index tau * d_s + j.
Matrix dense_kronecker(const LatentPrior& lp, const DerivativeOrders& o, const std::vector<double>& T,
                       const Matrix& X) {
  const Index dt = o.d_t(), ds = o.d_s(), D = o.D();
  const Index Nt = static_cast<Index>(T.size()), Ns = X.rows();
  std::vector<int> tord(static_cast<std::size_t>(dt));
  for (int i = 0; i < dt; ++i) tord[static_cast<std::size_t>(i)] = i;
  const Matrix Kt = kernels::derivative_gram(lp.temporal, T, T, tord, tord);
  const Matrix Ks = kernels::spatial_derivative_gram(lp.spatial, X, X, o.spatial, o.spatial);
  Matrix K(Nt * Ns * D, Nt * Ns * D);
  for (Index t1 = 0; t1 < Nt; ++t1)
    for (Index s1 = 0; s1 < Ns; ++s1)
      for (Index a1 = 0; a1 < dt; ++a1)
        for (Index j1 = 0; j1 < ds; ++j1)
          for (Index t2 = 0; t2 < Nt; ++t2)
            for (Index s2 = 0; s2 < Ns; ++s2)
              for (Index a2 = 0; a2 < dt; ++a2)
                for (Index j2 = 0; j2 < ds; ++j2)
                  K((t1 * Ns + s1) * D + a1 * ds + j1, (t2 * Ns + s2) * D + a2 * ds + j2) =
                      Kt(t1 * dt + a1, t2 * dt + a2) * Ks(s1 * ds + j1, s2 * ds + j2);
  return K;
}

Matrix state_derived_cov(const SpatioTemporalPrior& p, const std::vector<double>& T) {
  const auto m = p.state_space(T);
  const Matrix C = joint_state_cov(m);
  const auto& lay = p.layout();
  const Index Nt = static_cast<Index>(T.size()), Ns = lay.n_locations, D = p.D(), ds = p.orders().d_s();
  const Index n = lay.state_dim;
  IndexList idx;
  for (Index t = 0; t < Nt; ++t)
    for (Index s = 0; s < Ns; ++s)
      for (Index a = 0; a < lay.d_t; ++a)
        for (Index j = 0; j < ds; ++j) idx.push_back(t * n + lay.state_index(0, s, j, a));
  Matrix out(Nt * Ns * D, Nt * Ns * D);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t k = 0; k < idx.size(); ++k)
      out(static_cast<Index>(i), static_cast<Index>(k)) = C(idx[i], idx[k]);
  return out;
}

}  // namespace

TEST(AssemblePrior, TimeSeriesReducesToTemporalModel) {
  const kernels::KernelSpec k{Family::Matern52, 0.8, 1.3};
  DerivativeOrders o;
  o.temporal = 2;
  SpatioTemporalPrior p({{k, {}}}, o, Matrix(1, 0), false);
  const std::vector<double> T{0.0, 0.3, 1.0};
  const auto m = p.state_space(T);
  const auto c = kernels::state_space_form(k, 2);
  EXPECT_LT((m.init.cov - c.initial_cov).norm(), 1e-14);
  EXPECT_EQ(m.emission, c.emission);
  for (std::size_t i = 1; i < T.size(); ++i) {
    const auto d = kernels::discretize(c, T[i] - T[i - 1]);
    EXPECT_LT((m.steps[i].A.to_dense() - d.A).norm(), 1e-14);
    EXPECT_LT((m.steps[i].Q - d.Q).norm(), 1e-14);
  }
}

TEST(AssemblePrior, GridCovarianceIsKroneckerOfDerivativeGrams) {
  LatentPrior lp{{Family::Matern52, 0.9, 1.4}, {{Family::SquaredExponential, 0.6, 0.8, 1}}};
  DerivativeOrders o;
  o.temporal = 2;
  o.spatial = {{0}, {1}};
  Matrix X(2, 1);
  X << -0.3, 0.4;
  const std::vector<double> T{0.0, 0.5, 1.2};
  SpatioTemporalPrior p({lp}, o, X, false);
  const Matrix dense = dense_kronecker(lp, o, T, X);
  EXPECT_LT((state_derived_cov(p, T) - dense).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(AssemblePrior, KroneckerEquivalenceOnLargerGrids) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(-1, 1);
  for (Family f : {Family::Matern32, Family::Matern72}) {
    LatentPrior lp{{f, 0.7, 1.1}, {{Family::SquaredExponential, 0.5, 1.0, 1}, {Family::Matern52, 0.9, 1.3, 2}}};
    DerivativeOrders o;
    o.temporal = 2;
    o.spatial = {{0, 0}, {1, 0}, {0, 2}};
    Matrix X(4, 2);
    for (Index i = 0; i < X.size(); ++i) X.data()[i] = U(rng);
    const std::vector<double> T{0.0, 0.2, 0.45, 1.0, 1.6};
    SpatioTemporalPrior p({lp}, o, X, false);
    const Matrix dense = dense_kronecker(lp, o, T, X);
    EXPECT_LT((state_derived_cov(p, T) - dense).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, dense.cwiseAbs().maxCoeff()));
  }
}

TEST(AssemblePrior, TwoLatentsStackIndependently) {
  LatentPrior a{{Family::Matern32, 0.9, 1.4}, {{Family::SquaredExponential, 0.6, 0.8, 1}}};
  LatentPrior b{{Family::Matern32, 0.5, 2.0}, {{Family::SquaredExponential, 0.3, 1.2, 1}}};
  DerivativeOrders o;
  o.temporal = 2;
  o.spatial = {{0}};
  Matrix X(3, 1);
  X << -0.5, 0.0, 0.5;
  SpatioTemporalPrior one({a}, o, X, false), two({a, b}, o, X, false);
  EXPECT_EQ(two.layout().state_dim, 2 * one.layout().state_dim);
  const auto m = two.state_space({0.0, 0.7});
  const Index h = one.layout().state_dim;
  EXPECT_TRUE(m.init.cov.block(0, h, h, h).isZero(0.0));
  EXPECT_TRUE(m.steps[1].Q.block(h, 0, h, h).isZero(0.0));
}

TEST(AssemblePrior, DuplicateLocationsRejected) {
  Matrix X(2, 1);
  X << 0.1, 0.1;
  DerivativeOrders o;
  o.spatial = {{0}};
  try {
    SpatioTemporalPrior p({{{Family::Matern32, 1, 1}, {{Family::SquaredExponential, 1, 1, 1}}}}, o, X, false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateSpatialLocation);
  }
}

TEST(SparseConditional, InducingAtDataIsExact) {
  Matrix X(3, 1);
  X << -0.4, 0.1, 0.7;
  const std::vector<kernels::KernelSpec> ks{{Family::SquaredExponential, 0.5, 1.3, 1}};
  const std::vector<MultiIndex> o{{0}, {1}};
  const auto c = sparse_conditional(X, X, ks, o, 1e-13);
  EXPECT_LT((c.projector - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(c.residual_cov.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SparseConditional, FarPointKeepsPrior) {
  Matrix Z(2, 1), X(1, 1);
  Z << -0.1, 0.1;
  X << 50.0;
  const std::vector<kernels::KernelSpec> ks{{Family::SquaredExponential, 0.5, 1.3, 1}};
  const std::vector<MultiIndex> o{{0}, {1}};
  const auto c = sparse_conditional(X, Z, ks, o);
  const Matrix prior = kernels::spatial_derivative_gram(ks, X, X, o, o);
  EXPECT_LT((c.residual_cov - prior).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SparseConditional, NystromIdentity) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> U(-1, 1);
  Matrix X(6, 1), Z(3, 1);
  for (Index i = 0; i < 6; ++i) X(i, 0) = U(rng);
  for (Index i = 0; i < 3; ++i) Z(i, 0) = U(rng);
  const std::vector<kernels::KernelSpec> ks{{Family::Matern52, 0.7, 1.1, 1}};
  const std::vector<MultiIndex> o{{0}, {1}};
  const auto c = sparse_conditional(X, Z, ks, o, 0.0);
  const Matrix Kzz = kernels::spatial_derivative_gram(ks, Z, Z, o, o);
  const Matrix Kxx = kernels::spatial_derivative_gram(ks, X, X, o, o);
  EXPECT_LT((c.projector * Kzz * c.projector.transpose() + c.residual_cov - Kxx).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SparseConditional, MoreInducingPointsNeverAddVariance) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> U(-1, 1);
  const std::vector<kernels::KernelSpec> ks{{Family::SquaredExponential, 0.4, 1.0, 1}};
  const std::vector<MultiIndex> o{{0}, {1}};
  for (int trial = 0; trial < 20; ++trial) {
    Matrix X(5, 1), Z(4, 1);
    for (Index i = 0; i < 5; ++i) X(i, 0) = U(rng);
    for (Index i = 0; i < 4; ++i) Z(i, 0) = -0.9 + 0.6 * static_cast<double>(i) + 0.1 * U(rng);
    const auto small = sparse_conditional(X, Z.topRows(3), ks, o, 1e-12);
    const auto big = sparse_conditional(X, Z, ks, o, 1e-12);
    for (Index i = 0; i < small.residual_cov.rows(); ++i)
      EXPECT_LE(big.residual_cov(i, i), small.residual_cov(i, i) + 1e-9);
  }
}

TEST(StructuredConditional, ValueOnlyMatchesSparse) {
  Matrix X(3, 1), Z(2, 1);
  X << -0.4, 0.1, 0.7;
  Z << -0.2, 0.5;
  const std::vector<kernels::KernelSpec> ks{{Family::SquaredExponential, 0.5, 1.3, 1}};
  const std::vector<MultiIndex> o{{0}};
  const auto s = sparse_conditional(X, Z, ks, o);
  const auto h = structured_conditional(X, Z, ks, o);
  EXPECT_LT((s.projector - h.projector).norm(), 1e-12);
  EXPECT_LT((s.residual_cov - h.residual_cov).norm(), 1e-12);
  const auto hx = structured_conditional(X, X, ks, o, 1e-13);
  EXPECT_LT((hx.projector - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(StructuredConditional, StateIsSmallerThanSparse) {
  LatentPrior lp{{Family::Matern32, 0.9, 1.4}, {{Family::SquaredExponential, 0.6, 0.8, 1}}};
  DerivativeOrders o;
  o.temporal = 2;
  o.spatial = {{0}, {1}, {2}};
  Matrix Z(4, 1);
  Z << -0.6, -0.2, 0.2, 0.6;
  SpatioTemporalPrior sparse({lp}, o, Z, false), structured({lp}, o, Z, true);
  EXPECT_EQ(structured.layout().state_dim, 4 * 2);
  EXPECT_EQ(sparse.layout().state_dim, 4 * 3 * 2);
}

TEST(StructuredConditional, BasisResidualMatchesFreeFunction) {
  Matrix Z(3, 1);
  Z << -0.5, 0.0, 0.5;
  const std::vector<kernels::KernelSpec> ks{{Family::SquaredExponential, 0.4, 1.2, 1}};
  const std::vector<MultiIndex> o{{0}, {1}, {2}};
  SpatialBasis basis(ks, Z, o, true, 1e-8);
  Vector x(1);
  x << 0.23;
  const Matrix P = basis.projector(x);
  const auto c = structured_conditional(x.transpose(), Z, ks, o);
  EXPECT_LT((P - c.projector).norm(), 1e-10);
  // The free function subtracts P (K + jitter) P' where the basis uses P K P'.
  const Matrix jitter_term = 1e-8 * 1.2 * P * P.transpose();
  EXPECT_LT((basis.residual(x, P, x, P) - c.residual_cov - jitter_term).norm(), 1e-10);
  EXPECT_EQ(basis.projector(x), P);
}

TEST(Permute, IdentityAndHandExample) {
  const Vector v = (Vector(4) << 1, 2, 3, 4).finished();
  EXPECT_EQ(permute(v, Layout::LatentData, Layout::LatentData, 2, 1, 2, 1), v);
  // [f1(x1), f1(x2), f2(x1), f2(x2)] -> [f1(x1), f2(x1), f1(x2), f2(x2)]
  const Vector w = permute(v, Layout::LatentData, Layout::DataLatent, 2, 1, 2, 1);
  EXPECT_EQ(w, (Vector(4) << 1, 3, 2, 4).finished());
}

TEST(Permute, RoundTripAllLayouts) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(0, 1);
  const Layout all[] = {Layout::LatentData, Layout::DataLatent, Layout::LatentTimeSpace, Layout::TimeLatentSpace};
  Vector v(2 * 3 * 4 * 5);
  for (Index i = 0; i < v.size(); ++i) v(i) = N(rng);
  for (Layout a : all)
    for (Layout b : all) EXPECT_EQ(permute(permute(v, a, b, 2, 3, 4, 5), b, a, 2, 3, 4, 5), v);
  Vector u(3 * 4 * 5);
  for (Index i = 0; i < u.size(); ++i) u(i) = N(rng);
  for (Layout a : all)
    EXPECT_EQ(permute(permute(u, Layout::TimeSpace, a, 1, 3, 4, 5), a, Layout::TimeSpace, 1, 3, 4, 5), u);
}

TEST(Permute, ShapeMismatchThrows) {
  try {
    permute(Vector::Zero(5), Layout::LatentData, Layout::DataLatent, 2, 1, 2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Permute, IsABijection) {
  const auto g = permutation_indices(Layout::TimeLatentSpace, Layout::LatentData, 2, 3, 2, 4);
  std::vector<int> seen(g.size(), 0);
  for (Index i : g) ++seen[static_cast<std::size_t>(i)];
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(GridDataTest, ValidateRejectsUnsortedTimes) {
  GridData g;
  g.times = {0.0, 1.0, 0.5};
  g.spatial_locations = Matrix(1, 0);
  g.values.assign(3, 0.0);
  g.mask.assign(3, 1);
  EXPECT_THROW(g.validate(), Error);
  g.times = {0.0, 0.5, 1.0};
  EXPECT_NO_THROW(g.validate());
}
