#include "physs/ssm.hpp"

#include <cmath>

namespace physs::ssm {

SurrogateSite SurrogateSite::uninformative(Index dim, Index time_index) {
  return {Vector::Zero(dim), Matrix::Zero(dim, dim), time_index};
}

BlockDiagonal BlockDiagonal::dense(const Matrix& m) {
  BlockDiagonal b;
  b.dim = m.rows();
  b.blocks.emplace_back(0, m);
  return b;
}

Matrix BlockDiagonal::to_dense() const {
  Matrix out = Matrix::Zero(dim, dim);
  for (const auto& [off, blk] : blocks) out.block(off, off, blk.rows(), blk.cols()) = blk;
  return out;
}

Matrix BlockDiagonal::left(const Matrix& m) const {
  Matrix out = Matrix::Zero(dim, m.cols());
  for (const auto& [off, blk] : blocks)
    out.middleRows(off, blk.rows()).noalias() = blk * m.middleRows(off, blk.cols());
  return out;
}

Matrix BlockDiagonal::right_t(const Matrix& m) const {
  Matrix out = Matrix::Zero(m.rows(), dim);
  for (const auto& [off, blk] : blocks)
    out.middleCols(off, blk.rows()).noalias() = m.middleCols(off, blk.cols()) * blk.transpose();
  return out;
}

Vector BlockDiagonal::apply(const Vector& v) const {
  Vector out = Vector::Zero(dim);
  for (const auto& [off, blk] : blocks)
    out.segment(off, blk.rows()).noalias() = blk * v.segment(off, blk.cols());
  return out;
}

Observation site_observation(const SurrogateSite& site, double tol) {
  const Index E = site.shift.size();
  Observation obs;
  if (site.precision.size() == 0 || site.precision.isZero(0.0)) {
    obs.y = Vector(0);
    obs.H = Matrix(0, E);
    obs.noise = Vector(0);
    return obs;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (site.precision + site.precision.transpose()));
  const Vector& ev = es.eigenvalues();
  const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  if (ev.minCoeff() < -1e-8 * std::max(1.0, scale))
    throw Error(ErrorCode::SitePrecisionNotPSD, "site precision has a negative eigenvalue " +
                                                    std::to_string(ev.minCoeff()));
  IndexList keep;
  for (Index i = 0; i < E; ++i)
    if (ev(i) > tol * scale) keep.push_back(i);
  const Index r = static_cast<Index>(keep.size());
  obs.y.resize(r);
  obs.H.resize(r, E);
  obs.noise.resize(r);
  for (Index k = 0; k < r; ++k) {
    const Index i = keep[static_cast<std::size_t>(k)];
    const auto u = es.eigenvectors().col(i);
    obs.H.row(k) = u.transpose();
    obs.noise(k) = 1.0 / ev(i);
    obs.y(k) = u.dot(site.shift) / ev(i);
  }
  return obs;
}

GaussianBelief predict(const GaussianBelief& b, const StepModel& step) {
  GaussianBelief out;
  out.mean = step.A.apply(b.mean);
  out.cov = step.A.right_t(step.A.left(b.cov)) + step.Q;
  symmetrize(out.cov);
  return out;
}

GaussianBelief kalman_update(const GaussianBelief& b, const Matrix& H, const Vector& y,
                             const Matrix& R, double* log_lik) {
  if (H.rows() == 0) {
    if (log_lik) *log_lik = 0.0;
    return b;
  }
  const Matrix HP = H * b.cov;
  Matrix S = HP * H.transpose() + R;
  symmetrize(S);
  const auto llt = robust_cholesky(S, 1e-14, ErrorCode::InnovationNotPSD);
  const Vector innov = y - H * b.mean;
  const Matrix K = llt.solve(HP).transpose();
  GaussianBelief out;
  out.mean = b.mean + K * innov;
  // Joseph form (I-KH) P (I-KH)' + K R K', evaluated without forming I-KH.
  Matrix X = b.cov - K * HP;
  out.cov = X - (X * H.transpose()) * K.transpose() + K * R * K.transpose();
  symmetrize(out.cov);
  if (log_lik) {
    const Vector alpha = llt.solve(innov);
    *log_lik = -0.5 * (innov.dot(alpha) + log_det(llt) + static_cast<double>(y.size()) * kLog2Pi);
  }
  return out;
}

GaussianBelief ek_update(const GaussianBelief& belief, const LinearizableFn& g, const Vector& obs,
                         const Matrix& obs_noise, double* log_lik) {
  auto [value, J] = g(belief.mean);
  if (J.rows() != obs.size() || J.cols() != belief.mean.size() || value.size() != obs.size())
    throw Error(ErrorCode::ShapeMismatch, "ek_update: residual shape mismatch");
  // obs ~ g(m) + J (x - m): equivalent linear observation J x = obs - g(m) + J m.
  const Vector y = obs - value + J * belief.mean;
  return kalman_update(belief, J, y, obs_noise, log_lik);
}

FilterResult kalman_filter(const StateSpaceModel& model, const std::vector<Observation>& observations) {
  const Index N = model.size();
  if (static_cast<Index>(observations.size()) != N)
    throw Error(ErrorCode::ShapeMismatch, "one observation per time step is required");
  FilterResult out;
  out.predicted.reserve(static_cast<std::size_t>(N));
  out.filtered.reserve(static_cast<std::size_t>(N));
  GaussianBelief cur = model.init;
  for (Index k = 0; k < N; ++k) {
    if (k > 0) cur = predict(cur, model.steps[static_cast<std::size_t>(k)]);
    out.predicted.push_back(cur);
    const Observation& o = observations[static_cast<std::size_t>(k)];
    if (o.rank() > 0) {
      const Matrix H = o.H * model.emission;
      double ll = 0.0;
      cur = kalman_update(cur, H, o.y, o.noise.asDiagonal().toDenseMatrix(), &ll);
      out.log_marginal += ll;
    }
    out.filtered.push_back(cur);
  }
  return out;
}

FilterResult kalman_filter(const StateSpaceModel& model, const std::vector<SurrogateSite>& sites) {
  std::vector<Observation> obs;
  obs.reserve(sites.size());
  for (const auto& s : sites) obs.push_back(site_observation(s));
  return kalman_filter(model, obs);
}

SmoothingResult rts_smooth(const StateSpaceModel& model, const FilterResult& f,
                           bool cross_covariances) {
  const Index N = model.size();
  SmoothingResult out;
  out.log_marginal = f.log_marginal;
  out.marginals.resize(static_cast<std::size_t>(N));
  if (N == 0) return out;
  if (cross_covariances) out.pairwise_cross_cov.emplace(static_cast<std::size_t>(N - 1));
  out.marginals.back() = f.filtered.back();
  for (Index k = N - 2; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    const StepModel& step = model.steps[ku + 1];
    const GaussianBelief& filt = f.filtered[ku];
    const GaussianBelief& pred = f.predicted[ku + 1];
    const GaussianBelief& next = out.marginals[ku + 1];
    // G = P_f A' (P^-)^{-1}
    const Matrix APf = step.A.left(filt.cov);
    const auto llt = robust_cholesky(pred.cov, 1e-14, ErrorCode::InnovationNotPSD);
    const Matrix G = llt.solve(APf).transpose();
    GaussianBelief sm;
    sm.mean = filt.mean + G * (next.mean - pred.mean);
    sm.cov = filt.cov + G * (next.cov - pred.cov) * G.transpose();
    symmetrize(sm.cov);
    if (cross_covariances) (*out.pairwise_cross_cov)[ku] = next.cov * G.transpose();
    out.marginals[ku] = std::move(sm);
  }
  return out;
}

}  // namespace physs::ssm
