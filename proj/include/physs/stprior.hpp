#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "physs/kernels.hpp"
#include "physs/ssm.hpp"

namespace physs::stprior {

using kernels::DerivativeOrders;
using kernels::KernelSpec;
using kernels::MultiIndex;

/// Observations on a time x space grid. values are stored (t, s, p)-major;
/// mask is 1 where a value is present.
struct GridData {
  std::vector<double> times;
  Matrix spatial_locations;  // N_s x S
  Index outputs = 1;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;

  Index n_times() const { return static_cast<Index>(times.size()); }
  Index n_space() const { return spatial_locations.rows(); }
  Index flat(Index t, Index s, Index p) const { return (t * n_space() + s) * outputs + p; }
  double value(Index t, Index s, Index p) const { return values[static_cast<std::size_t>(flat(t, s, p))]; }
  bool observed(Index t, Index s, Index p) const { return mask[static_cast<std::size_t>(flat(t, s, p))] != 0; }
  void validate() const;
};

enum class Layout { LatentData, DataLatent, TimeSpace, LatentTimeSpace, TimeLatentSpace };

Layout parse_layout(std::string_view name);

/// Reindexes a flat vector of Q * N_t * N_s * D values between layouts.
Vector permute(const Vector& values, Layout from, Layout to, Index Q, Index n_times, Index n_space,
               Index D);

/// Gather indices g such that permute(x, from, to)[i] = x[g[i]].
IndexList permutation_indices(Layout from, Layout to, Index Q, Index n_times, Index n_space, Index D);

struct SpatialConditional {
  Matrix projector;     // (|X| d_s) x (state columns)
  Matrix residual_cov;  // (|X| d_s) x (|X| d_s)
};

/// Inducing-point conditional of all spatial derivatives at X given all
/// spatial derivatives at Z.
SpatialConditional sparse_conditional(const Matrix& X, const Matrix& Z,
                                      const std::vector<KernelSpec>& spatial,
                                      const std::vector<MultiIndex>& orders, double jitter = 1e-8);

/// Conditional of all spatial derivatives at X given function values at Z.
SpatialConditional structured_conditional(const Matrix& X, const Matrix& Z,
                                          const std::vector<KernelSpec>& spatial,
                                          const std::vector<MultiIndex>& orders,
                                          double jitter = 1e-8);

/// Cached factorization of the spatial gram at the state locations of one
/// latent. Rebuild whenever hyperparameters change.
class SpatialBasis {
 public:
  SpatialBasis(std::vector<KernelSpec> spatial, Matrix Z, std::vector<MultiIndex> orders,
               bool structured, double jitter);

  Index n_locations() const { return Z_.rows(); }
  Index d_s() const { return static_cast<Index>(orders_.size()); }
  Index d_s_state() const { return structured_ ? 1 : d_s(); }
  Index columns() const { return n_locations() * d_s_state(); }
  /// Gram over state columns without jitter.
  const Matrix& state_gram() const { return gram_; }

  /// Projector rows (d_s x columns) for one location; an exact match with
  /// a state location yields selection rows.
  Matrix projector(const Vector& x) const;
  /// Conditional covariance (d_s x d_s) between two locations given the state.
  Matrix residual(const Vector& x1, const Matrix& proj1, const Vector& x2, const Matrix& proj2) const;
  /// Index of the state location equal to x, or -1.
  Index match(const Vector& x) const;

 private:
  std::vector<KernelSpec> spatial_;
  Matrix Z_;
  std::vector<MultiIndex> orders_;
  bool structured_;
  Matrix gram_;
  Eigen::LLT<Matrix> llt_;
};

struct LatentPrior {
  KernelSpec temporal;
  std::vector<KernelSpec> spatial;
};

/// Index bookkeeping of the stacked state. Per latent q the state is laid
/// out as (location m, spatial derivative j, temporal state tau), and the
/// emitted part keeps only tau < d_t.
struct StateLayout {
  Index Q = 1;
  Index n_locations = 1;
  Index d_s_state = 1;
  Index d_t = 1;
  std::vector<Index> d_q;           // temporal state dimension per latent
  std::vector<Index> state_offset;  // per latent
  std::vector<Index> emit_offset;   // per latent
  Index state_dim = 0;
  Index emitted_dim = 0;

  Index state_index(Index q, Index m, Index j, Index tau) const {
    return state_offset[q] + (m * d_s_state + j) * d_q[q] + tau;
  }
  Index emit_index(Index q, Index m, Index j, Index tau) const {
    return emit_offset[q] + (m * d_s_state + j) * d_t + tau;
  }
};

/// Kronecker-structured spatio-temporal derivative prior realized as a
/// state-space model over state locations Z.
class SpatioTemporalPrior {
 public:
  SpatioTemporalPrior(std::vector<LatentPrior> latents, DerivativeOrders orders, Matrix Z,
                      bool structured, double jitter = 1e-8,
                      double diffuse_variance = kernels::kDefaultDiffuseVariance);

  const StateLayout& layout() const { return layout_; }
  const DerivativeOrders& orders() const { return orders_; }
  const Matrix& locations() const { return Z_; }
  Index Q() const { return layout_.Q; }
  Index D() const { return orders_.D(); }
  bool structured() const { return structured_; }
  const SpatialBasis& basis(Index q) const { return bases_[static_cast<std::size_t>(q)]; }
  const std::vector<LatentPrior>& latents() const { return latents_; }

  ssm::StateSpaceModel state_space(const std::vector<double>& times) const;

  /// Prior covariance of the d_t temporal derivatives of latent q at each time.
  std::vector<Matrix> temporal_marginals(Index q, const std::vector<double>& times) const;

 private:
  std::vector<LatentPrior> latents_;
  DerivativeOrders orders_;
  Matrix Z_;
  bool structured_;
  double jitter_;
  double diffuse_variance_;
  std::vector<kernels::ContinuousStateModel> temporal_;
  std::vector<SpatialBasis> bases_;
  StateLayout layout_;
};

/// Rejects repeated rows.
void check_unique_locations(const Matrix& Z);

}  // namespace physs::stprior
