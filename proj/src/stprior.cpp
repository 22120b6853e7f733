#include "physs/stprior.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>

namespace physs::stprior {
namespace {

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Axis order (outer to inner) over (q, d, t, s) for each layout.
enum Axis { kQ = 0, kD = 1, kT = 2, kS = 3 };

std::array<Axis, 4> axes_of(Layout l) {
  switch (l) {
    case Layout::LatentData: return {kQ, kD, kT, kS};
    case Layout::DataLatent: return {kT, kS, kQ, kD};
    case Layout::TimeSpace: return {kQ, kT, kS, kD};  // Q must be 1
    case Layout::LatentTimeSpace: return {kQ, kT, kS, kD};
    case Layout::TimeLatentSpace: return {kT, kQ, kS, kD};
  }
  return {kQ, kD, kT, kS};
}

std::array<Index, 4> strides_of(Layout l, const std::array<Index, 4>& extent) {
  const auto ax = axes_of(l);
  std::array<Index, 4> stride{};
  Index s = 1;
  for (int i = 3; i >= 0; --i) {
    stride[ax[static_cast<std::size_t>(i)]] = s;
    s *= extent[ax[static_cast<std::size_t>(i)]];
  }
  return stride;
}

Matrix as_row(const Vector& x) { return x.transpose(); }

}  // namespace

void GridData::validate() const {
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1]))
      throw Error(ErrorCode::InvalidArgument, "grid times must be strictly increasing");
  const auto n = static_cast<std::size_t>(n_times() * n_space() * outputs);
  if (values.size() != n || mask.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "grid values/mask size does not match N_t*N_s*P");
}

Layout parse_layout(std::string_view name) {
  if (name == "latent-data") return Layout::LatentData;
  if (name == "data-latent") return Layout::DataLatent;
  if (name == "time-space") return Layout::TimeSpace;
  if (name == "latent-time-space") return Layout::LatentTimeSpace;
  if (name == "time-latent-space") return Layout::TimeLatentSpace;
  throw Error(ErrorCode::InvalidArgument, "unknown layout '" + std::string(name) + "'");
}

IndexList permutation_indices(Layout from, Layout to, Index Q, Index n_times, Index n_space, Index D) {
  if ((from == Layout::TimeSpace || to == Layout::TimeSpace) && Q != 1)
    throw Error(ErrorCode::ShapeMismatch, "time-space layout requires a single latent");
  const std::array<Index, 4> extent{Q, D, n_times, n_space};
  const auto sf = strides_of(from, extent);
  const auto st = strides_of(to, extent);
  IndexList g(static_cast<std::size_t>(Q * D * n_times * n_space));
  for (Index q = 0; q < Q; ++q)
    for (Index d = 0; d < D; ++d)
      for (Index t = 0; t < n_times; ++t)
        for (Index s = 0; s < n_space; ++s) {
          const Index dst = q * st[kQ] + d * st[kD] + t * st[kT] + s * st[kS];
          g[static_cast<std::size_t>(dst)] = q * sf[kQ] + d * sf[kD] + t * sf[kT] + s * sf[kS];
        }
  return g;
}

Vector permute(const Vector& values, Layout from, Layout to, Index Q, Index n_times, Index n_space,
               Index D) {
  if (values.size() != Q * n_times * n_space * D)
    throw Error(ErrorCode::ShapeMismatch, "permute: value count does not match Q*N_t*N_s*D");
  if (from == to) return values;
  return take(values, permutation_indices(from, to, Q, n_times, n_space, D));
}

void check_unique_locations(const Matrix& Z) {
  for (Index i = 0; i < Z.rows(); ++i)
    for (Index j = i + 1; j < Z.rows(); ++j)
      if ((Z.row(i) - Z.row(j)).cwiseAbs().maxCoeff() <= 0.0 && Z.cols() > 0)
        throw Error(ErrorCode::DuplicateSpatialLocation,
                    "spatial locations " + std::to_string(i) + " and " + std::to_string(j) +
                        " coincide");
  if (Z.cols() == 0 && Z.rows() > 1)
    throw Error(ErrorCode::DuplicateSpatialLocation, "time-series model takes one location");
}

SpatialConditional sparse_conditional(const Matrix& X, const Matrix& Z,
                                      const std::vector<KernelSpec>& spatial,
                                      const std::vector<MultiIndex>& orders, double jitter) {
  check_unique_locations(Z);
  const Matrix Kzz = kernels::spatial_derivative_gram(spatial, Z, Z, orders, orders);
  const Matrix Kxz = kernels::spatial_derivative_gram(spatial, X, Z, orders, orders);
  const Matrix Kxx = kernels::spatial_derivative_gram(spatial, X, X, orders, orders);
  double var = 1.0;
  for (const auto& k : spatial) var *= k.variance;
  Matrix Kj = Kzz;
  Kj.diagonal().array() += jitter * var;
  const auto llt = robust_cholesky(Kj, jitter, ErrorCode::GramNotPSD);
  SpatialConditional out;
  out.projector = llt.solve(Kxz.transpose()).transpose();
  out.residual_cov = Kxx - out.projector * Kxz.transpose();
  symmetrize(out.residual_cov);
  return out;
}

SpatialConditional structured_conditional(const Matrix& X, const Matrix& Z,
                                          const std::vector<KernelSpec>& spatial,
                                          const std::vector<MultiIndex>& orders, double jitter) {
  check_unique_locations(Z);
  const std::vector<MultiIndex> value{MultiIndex(spatial.size(), 0)};
  const Matrix Kzz = kernels::spatial_derivative_gram(spatial, Z, Z, value, value);
  const Matrix Kxz = kernels::spatial_derivative_gram(spatial, X, Z, orders, value);
  const Matrix Kxx = kernels::spatial_derivative_gram(spatial, X, X, orders, orders);
  double var = 1.0;
  for (const auto& k : spatial) var *= k.variance;
  Matrix Kj = Kzz;
  Kj.diagonal().array() += jitter * var;
  const auto llt = robust_cholesky(Kj, jitter, ErrorCode::GramNotPSD);
  SpatialConditional out;
  out.projector = llt.solve(Kxz.transpose()).transpose();
  out.residual_cov = Kxx - out.projector * Kxz.transpose();
  symmetrize(out.residual_cov);
  return out;
}

SpatialBasis::SpatialBasis(std::vector<KernelSpec> spatial, Matrix Z, std::vector<MultiIndex> orders,
                           bool structured, double jitter)
    : spatial_(std::move(spatial)), Z_(std::move(Z)), orders_(std::move(orders)), structured_(structured) {
  check_unique_locations(Z_);
  if (structured_) {
    const std::vector<MultiIndex> value{MultiIndex(spatial_.size(), 0)};
    gram_ = kernels::spatial_derivative_gram(spatial_, Z_, Z_, value, value);
  } else {
    gram_ = kernels::spatial_derivative_gram(spatial_, Z_, Z_, orders_, orders_);
  }
  double var = 1.0;
  for (const auto& k : spatial_) var *= k.variance;
  Matrix Kj = gram_;
  Kj.diagonal().array() += jitter * var;
  llt_ = robust_cholesky(Kj, jitter, ErrorCode::GramNotPSD);
}

Index SpatialBasis::match(const Vector& x) const {
  if (Z_.cols() == 0) return 0;
  for (Index m = 0; m < Z_.rows(); ++m)
    if ((Z_.row(m).transpose() - x).cwiseAbs().maxCoeff() <= 1e-12) return m;
  return -1;
}

Matrix SpatialBasis::projector(const Vector& x) const {
  const Index ds = d_s();
  const Index m = match(x);
  if (m >= 0 && !structured_) {
    Matrix P = Matrix::Zero(ds, columns());
    P.middleCols(m * ds, ds).setIdentity();
    return P;
  }
  const std::vector<MultiIndex> right =
      structured_ ? std::vector<MultiIndex>{MultiIndex(spatial_.size(), 0)} : orders_;
  const Matrix Kxz = kernels::spatial_derivative_gram(spatial_, as_row(x), Z_, orders_, right);
  Matrix P = llt_.solve(Kxz.transpose()).transpose();
  if (m >= 0) {
    P.row(0).setZero();
    P(0, m) = 1.0;
  }
  return P;
}

Matrix SpatialBasis::residual(const Vector& x1, const Matrix& proj1, const Vector& x2,
                              const Matrix& proj2) const {
  if (!structured_ && match(x1) >= 0 && match(x2) >= 0) return Matrix::Zero(d_s(), d_s());
  const Matrix K12 = kernels::spatial_derivative_gram(spatial_, as_row(x1), as_row(x2), orders_, orders_);
  return K12 - proj1 * gram_ * proj2.transpose();
}

SpatioTemporalPrior::SpatioTemporalPrior(std::vector<LatentPrior> latents, DerivativeOrders orders,
                                         Matrix Z, bool structured, double jitter,
                                         double diffuse_variance)
    : latents_(std::move(latents)),
      orders_(std::move(orders)),
      Z_(std::move(Z)),
      structured_(structured),
      jitter_(jitter),
      diffuse_variance_(diffuse_variance) {
  if (latents_.empty()) throw Error(ErrorCode::InvalidArgument, "at least one latent is required");
  const std::size_t S = static_cast<std::size_t>(Z_.cols());
  orders_.validate(S);
  if (Z_.rows() < 1) throw Error(ErrorCode::InvalidArgument, "at least one state location is required");
  check_unique_locations(Z_);
  layout_.Q = static_cast<Index>(latents_.size());
  layout_.n_locations = Z_.rows();
  layout_.d_s_state = structured_ ? 1 : orders_.d_s();
  layout_.d_t = orders_.d_t();
  Index off = 0, eoff = 0;
  for (const auto& lp : latents_) {
    if (lp.spatial.size() != S)
      throw Error(ErrorCode::ShapeMismatch, "each latent needs one spatial kernel per spatial axis");
    temporal_.push_back(kernels::state_space_form(lp.temporal, orders_.d_t(), diffuse_variance_));
    bases_.emplace_back(lp.spatial, Z_, orders_.spatial, structured_, jitter_);
    const Index dq = temporal_.back().state_dim();
    layout_.d_q.push_back(dq);
    layout_.state_offset.push_back(off);
    layout_.emit_offset.push_back(eoff);
    off += layout_.n_locations * layout_.d_s_state * dq;
    eoff += layout_.n_locations * layout_.d_s_state * layout_.d_t;
  }
  layout_.state_dim = off;
  layout_.emitted_dim = eoff;
}

ssm::StateSpaceModel SpatioTemporalPrior::state_space(const std::vector<double>& times) const {
  const Index n = layout_.state_dim;
  const Index Q = layout_.Q;
  const Index blocks = layout_.n_locations * layout_.d_s_state;
  ssm::StateSpaceModel model;
  model.init.mean = Vector::Zero(n);
  model.init.cov = Matrix::Zero(n, n);
  model.emission = Matrix::Zero(layout_.emitted_dim, n);
  for (Index q = 0; q < Q; ++q) {
    const auto qu = static_cast<std::size_t>(q);
    const Index dq = layout_.d_q[qu];
    const Index off = layout_.state_offset[qu];
    const Matrix& Ks = bases_[qu].state_gram();
    model.init.cov.block(off, off, blocks * dq, blocks * dq) = kron(Ks, temporal_[qu].initial_cov);
    for (Index b = 0; b < blocks; ++b)
      for (Index tau = 0; tau < layout_.d_t; ++tau)
        model.emission(layout_.emit_offset[qu] + b * layout_.d_t + tau, off + b * dq + tau) = 1.0;
  }
  symmetrize(model.init.cov);
  model.steps.resize(times.size());
  std::vector<std::map<double, kernels::DiscreteModel>> cache(static_cast<std::size_t>(Q));
  for (std::size_t k = 0; k < times.size(); ++k) {
    ssm::StepModel& step = model.steps[k];
    step.A.dim = n;
    if (k == 0) {
      step.A = ssm::BlockDiagonal::dense(Matrix::Identity(n, n));
      step.Q = Matrix::Zero(n, n);
      continue;
    }
    const double dt = times[k] - times[k - 1];
    if (!(dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "time grid must be strictly increasing");
    step.Q = Matrix::Zero(n, n);
    for (Index q = 0; q < Q; ++q) {
      const auto qu = static_cast<std::size_t>(q);
      auto it = cache[qu].find(dt);
      if (it == cache[qu].end()) it = cache[qu].emplace(dt, kernels::discretize(temporal_[qu], dt)).first;
      const kernels::DiscreteModel& dm = it->second;
      const Index dq = layout_.d_q[qu];
      const Index off = layout_.state_offset[qu];
      for (Index b = 0; b < blocks; ++b) step.A.blocks.emplace_back(off + b * dq, dm.A);
      step.Q.block(off, off, blocks * dq, blocks * dq) = kron(bases_[qu].state_gram(), dm.Q);
    }
    symmetrize(step.Q);
  }
  return model;
}

std::vector<Matrix> SpatioTemporalPrior::temporal_marginals(Index q, const std::vector<double>& times) const {
  const auto& tm = temporal_[static_cast<std::size_t>(q)];
  const Index dt_n = layout_.d_t;
  std::vector<Matrix> out;
  out.reserve(times.size());
  if (tm.stationary_cov) {
    const Matrix block = tm.stationary_cov->topLeftCorner(dt_n, dt_n);
    out.assign(times.size(), block);
    return out;
  }
  Matrix P = tm.initial_cov;
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (k > 0) {
      const auto dm = kernels::discretize(tm, times[k] - times[k - 1]);
      P = dm.A * P * dm.A.transpose() + dm.Q;
      symmetrize(P);
    }
    out.push_back(P.topLeftCorner(dt_n, dt_n));
  }
  return out;
}

}  // namespace physs::stprior
