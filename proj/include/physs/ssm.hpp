#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "physs/linalg.hpp"

namespace physs::ssm {

struct GaussianBelief {
  Vector mean;
  Matrix cov;
};

/// Natural-form Gaussian pseudo-observation exp(shift' u - u' precision u / 2)
/// over the emitted part u of the state at one time step. Zero precision is
/// the uninformative site.
struct SurrogateSite {
  Vector shift;
  Matrix precision;
  Index time_index = 0;

  static SurrogateSite uninformative(Index dim, Index time_index);
  bool is_uninformative() const { return precision.size() == 0 || precision.isZero(0.0); }
};

/// Block-diagonal square matrix stored as (offset, block) pairs; anything
/// outside the blocks is zero.
struct BlockDiagonal {
  Index dim = 0;
  std::vector<std::pair<Index, Matrix>> blocks;

  static BlockDiagonal dense(const Matrix& m);
  Matrix to_dense() const;
  Matrix left(const Matrix& m) const;        // this * m
  Matrix right_t(const Matrix& m) const;     // m * this^T
  Vector apply(const Vector& v) const;
};

/// Transition into a step: x_k = A x_{k-1} + q, q ~ N(0, Q).
struct StepModel {
  BlockDiagonal A;
  Matrix Q;
};

/// Per-step model; steps[0] is ignored (the chain starts at `init`).
struct StateSpaceModel {
  std::vector<StepModel> steps;
  Matrix emission;  // E x n, maps the state to the space the sites live in
  GaussianBelief init;

  Index state_dim() const { return init.mean.size(); }
  Index size() const { return static_cast<Index>(steps.size()); }
};

/// Gaussian observation y = H x + e, e ~ N(0, diag(noise)).
struct Observation {
  Vector y;
  Matrix H;
  Vector noise;

  Index rank() const { return y.size(); }
};

/// Rewrites a site as an equivalent diagonal-noise observation of the emitted
/// state (eigen-directions with positive precision only).
/// Throws SitePrecisionNotPSD when a clearly negative eigenvalue is present.
Observation site_observation(const SurrogateSite& site, double tol = 1e-12);

struct FilterResult {
  std::vector<GaussianBelief> predicted;
  std::vector<GaussianBelief> filtered;
  double log_marginal = 0.0;
};

/// `observations` are expressed against the emitted space (H is r x E).
FilterResult kalman_filter(const StateSpaceModel& model, const std::vector<Observation>& observations);
FilterResult kalman_filter(const StateSpaceModel& model, const std::vector<SurrogateSite>& sites);

struct SmoothingResult {
  std::vector<GaussianBelief> marginals;
  double log_marginal = 0.0;
  std::optional<std::vector<Matrix>> pairwise_cross_cov;  // cov(x_{k+1}, x_k)
};

SmoothingResult rts_smooth(const StateSpaceModel& model, const FilterResult& filtered,
                           bool cross_covariances = false);

/// Joseph-form conditioning of `belief` on y = H x + N(0, R). If `log_lik`
/// is given it receives log N(y | H m, H P H' + R).
GaussianBelief kalman_update(const GaussianBelief& belief, const Matrix& H, const Vector& y,
                             const Matrix& R, double* log_lik = nullptr);

/// Residual value and Jacobian at a point.
using LinearizableFn = std::function<std::pair<Vector, Matrix>(const Vector&)>;

/// Extended update: linearizes g at the belief mean and conditions
/// obs = g(x) + N(0, obs_noise).
GaussianBelief ek_update(const GaussianBelief& belief, const LinearizableFn& g, const Vector& obs,
                         const Matrix& obs_noise, double* log_lik = nullptr);

/// Prediction step x_k = A x + q.
GaussianBelief predict(const GaussianBelief& belief, const StepModel& step);

}  // namespace physs::ssm
