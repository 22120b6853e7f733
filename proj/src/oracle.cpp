#include "physs/oracle.hpp"

#include <cmath>
#include <random>

namespace physs::oracle {
namespace {

bool same_point(const infer::Point& a, const infer::Point& b) {
  if (std::abs(a.t - b.t) > 1e-10 * std::max(1.0, std::abs(a.t))) return false;
  return a.x.size() == b.x.size() && (a.x.size() == 0 || (a.x - b.x).cwiseAbs().maxCoeff() <= 1e-12);
}

}  // namespace

Index DensePosterior::find(const infer::Point& p) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (same_point(nodes[i], p)) return static_cast<Index>(i);
  return -1;
}

infer::Marginal DensePosterior::at(Index node) const { return joint({node}); }

infer::Marginal DensePosterior::joint(const IndexList& which) const {
  IndexList idx;
  for (Index n : which)
    for (Index a = 0; a < QD; ++a) idx.push_back(n * QD + a);
  return {take(mean, idx), take(cov, idx, idx)};
}

DensePosterior dense_posterior(const infer::ModelSpec& spec, const infer::Problem& problem) {
  spec.validate();
  for (const auto& lp : spec.latents)
    if (!lp.temporal.stationary())
      throw Error(ErrorCode::Unsupported, "dense posterior needs stationary temporal kernels");
  if (spec.colloc_kind != physics::CollocationKind::Gaussian && !problem.collocation.empty())
    throw Error(ErrorCode::Unsupported, "dense posterior needs Gaussian collocation");
  if (!problem.collocation.empty() && (!spec.residual || !spec.residual->is_linear))
    throw Error(ErrorCode::Unsupported, "dense posterior needs a linear residual");

  const Index Q = spec.Q(), D = spec.D(), QD = Q * D;
  const Index dt = spec.orders.d_t(), ds = spec.orders.d_s();
  const Matrix W = spec.mixing();

  DensePosterior out;
  out.QD = QD;
  auto node = [&](const infer::Point& p) -> Index {
    const Index f = out.find(p);
    if (f >= 0) return f;
    out.nodes.push_back(p);
    return static_cast<Index>(out.nodes.size() - 1);
  };
  for (const auto& o : problem.data) node(o.at);
  for (const auto& c : problem.collocation) node(c);
  for (const auto& b : problem.boundary)
    for (const auto& x : b.x) node({b.t, x});
  for (const auto& q : problem.queries) node(q);
  const Index N = static_cast<Index>(out.nodes.size());
  if (N * QD > kMaxDenseSize)
    throw Error(ErrorCode::OracleTooLarge, "dense posterior limited to N*D*Q <= 2000");

  std::vector<double> T(static_cast<std::size_t>(N));
  Matrix X(N, spec.spatial_dims());
  for (Index i = 0; i < N; ++i) {
    T[static_cast<std::size_t>(i)] = out.nodes[static_cast<std::size_t>(i)].t;
    if (X.cols() > 0) X.row(i) = out.nodes[static_cast<std::size_t>(i)].x.transpose();
  }
  Matrix K = Matrix::Zero(N * QD, N * QD);
  for (Index q = 0; q < Q; ++q) {
    const auto& lp = spec.latents[static_cast<std::size_t>(q)];
    const Matrix Kt = kernels::temporal_derivative_gram(lp.temporal, T, T, dt);
    const Matrix Ks = kernels::spatial_derivative_gram(lp.spatial, X, X, spec.orders.spatial, spec.orders.spatial);
    for (Index i = 0; i < N; ++i)
      for (Index j = 0; j < N; ++j)
        for (Index t1 = 0; t1 < dt; ++t1)
          for (Index j1 = 0; j1 < ds; ++j1)
            for (Index t2 = 0; t2 < dt; ++t2)
              for (Index j2 = 0; j2 < ds; ++j2)
                K(i * QD + q * D + t1 * ds + j1, j * QD + q * D + t2 * ds + j2) =
                    Kt(i * dt + t1, j * dt + t2) * Ks(i * ds + j1, j * ds + j2);
  }

  std::vector<RowVector> rows;
  std::vector<double> ys, noise;
  auto add_row = [&](const RowVector& r, double y, double v) {
    rows.push_back(r);
    ys.push_back(y);
    noise.push_back(v);
  };
  for (const auto& o : problem.data) {
    if (!std::isfinite(o.y)) continue;
    RowVector r = RowVector::Zero(N * QD);
    r.segment(out.find(o.at) * QD, QD) = W.row(o.output * D);
    add_row(r, o.y, spec.noise.obs[static_cast<std::size_t>(o.output)]);
  }
  const double colloc_noise = std::max(spec.noise.colloc, spec.noise.colloc_floor);
  for (const auto& c : problem.collocation) {
    const Matrix GW = spec.residual->G * W;
    for (Index k = 0; k < GW.rows(); ++k) {
      RowVector r = RowVector::Zero(N * QD);
      r.segment(out.find(c) * QD, QD) = GW.row(k);
      add_row(r, 0.0, colloc_noise);
    }
  }
  for (const auto& b : problem.boundary) {
    RowVector r = RowVector::Zero(N * QD);
    for (std::size_t i = 0; i < b.x.size(); ++i)
      r.segment(out.find({b.t, b.x[i]}) * QD, QD) += b.rows[i] * W;
    add_row(r, b.value, spec.noise.boundary);
  }

  const Index M = static_cast<Index>(rows.size());
  out.mean = Vector::Zero(N * QD);
  out.cov = K;
  if (M == 0) return out;
  Matrix H(M, N * QD);
  Vector y(M), R(M);
  for (Index k = 0; k < M; ++k) {
    H.row(k) = rows[static_cast<std::size_t>(k)];
    y(k) = ys[static_cast<std::size_t>(k)];
    R(k) = noise[static_cast<std::size_t>(k)];
  }
  const Matrix KHt = K * H.transpose();
  Matrix Sy = H * KHt;
  Sy.diagonal() += R;
  symmetrize(Sy);
  const auto llt = robust_cholesky(Sy, 1e-14, ErrorCode::SingularGram);
  const Vector alpha = llt.solve(y);
  out.mean = KHt * alpha;
  out.cov = K - KHt * llt.solve(KHt.transpose());
  symmetrize(out.cov);
  out.log_marginal = -0.5 * y.dot(alpha) - 0.5 * log_det(llt) - 0.5 * static_cast<double>(M) * kLog2Pi;
  return out;
}

McEstimate mc_expectation(const physics::ResidualFn& g, const Vector& m, const Matrix& C,
                          double noise, std::size_t n_samples, std::uint64_t seed, bool gauss_newton) {
  if (n_samples < 10000) throw Error(ErrorCode::InvalidArgument, "at least 1e4 samples are required");
  const Index k = m.size();
  const Matrix L = psd_factor(C);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double s1 = 0, s2 = 0;
  Vector g1 = Vector::Zero(k), g2 = Vector::Zero(k);
  Matrix h1 = Matrix::Zero(k, k), h2 = Matrix::Zero(k, k);
  Vector z(k);
  for (std::size_t n = 0; n < n_samples; ++n) {
    for (Index i = 0; i < k; ++i) z(i) = normal(rng);
    const physics::LikEval e = physics::residual_loglik(g, m + L * z, noise, gauss_newton);
    s1 += e.value;
    s2 += e.value * e.value;
    g1 += e.gradient;
    g2 += e.gradient.cwiseProduct(e.gradient);
    h1 += e.hessian;
    h2 += e.hessian.cwiseProduct(e.hessian);
  }
  const double n = static_cast<double>(n_samples);
  auto se = [n](auto mean, auto sq) { return ((sq / n - mean.cwiseProduct(mean)).cwiseMax(0.0) / (n - 1)).cwiseSqrt(); };
  McEstimate out;
  out.ell = s1 / n;
  out.ell_se = std::sqrt(std::max(0.0, s2 / n - out.ell * out.ell) / (n - 1));
  out.grad = g1 / n;
  out.grad_se = se(out.grad, g2).eval();
  out.hess = h1 / n;
  out.hess_se = se(out.hess, h2).eval();
  return out;
}

}  // namespace physs::oracle
