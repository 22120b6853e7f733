#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "physs/linalg.hpp"

namespace physs::kernels {

enum class Family { Matern12, Matern32, Matern52, Matern72, SquaredExponential, IntegratedWiener };

std::string_view family_name(Family f) noexcept;
Family parse_family(std::string_view name);

/// Declarative one-dimensional kernel acting on input axis `active_dim`
/// (0 is time, 1.. are spatial axes).
struct KernelSpec {
  Family family = Family::Matern32;
  double lengthscale = 1.0;
  double variance = 1.0;
  int active_dim = 0;
  int order = 1;  // IntegratedWiener only: number of integrations

  bool stationary() const noexcept { return family != Family::IntegratedWiener; }
  void validate() const;
};

/// Largest derivative order per argument supported by the family
/// (Matern-(p+1/2) supports p).
int max_derivative_order(Family family) noexcept;

/// Multi-index of spatial derivative orders, one entry per spatial kernel.
using MultiIndex = std::vector<int>;

/// Derivative orders retained by the model: `temporal` is d_t (1 means the
/// function value only), `spatial` lists the d_s spatial multi-indices.
struct DerivativeOrders {
  int temporal = 1;
  std::vector<MultiIndex> spatial{MultiIndex{}};

  int d_t() const noexcept { return temporal; }
  int d_s() const noexcept { return static_cast<int>(spatial.size()); }
  int D() const noexcept { return d_t() * d_s(); }
  // Position of (temporal order, spatial multi-index slot) inside a D-vector.
  int index(int tau, int spatial_slot) const noexcept { return tau * d_s() + spatial_slot; }
  void validate(std::size_t spatial_dims) const;
};

double kernel_eval(const KernelSpec& spec, double x, double x2);

/// d^a/dx^a d^b/dx2^b k(x, x2) for a stationary family.
double kernel_derivative(const KernelSpec& spec, double x, double x2, int a, int b);

/// Block gram matrix with entry (i*|left| + a, j*|right| + b) equal to
/// d^{left[a]}_x d^{right[b]}_{x2} k(X_i, X2_j).
Matrix derivative_gram(const KernelSpec& spec, std::span<const double> X,
                       std::span<const double> X2, std::span<const int> orders_left,
                       std::span<const int> orders_right);

/// Product kernel over spatial axes with mixed partial derivatives. Rows of
/// X/X2 are spatial points (one column per kernel in `kernels`). Entry
/// (i*d_s + a, j*d_s + b) differentiates by orders[a] in the first argument
/// and orders[b] in the second.
Matrix spatial_derivative_gram(const std::vector<KernelSpec>& kernels, const Matrix& X,
                               const Matrix& X2, const std::vector<MultiIndex>& orders_left,
                               const std::vector<MultiIndex>& orders_right);

/// Temporal derivative gram over (time, temporal order) with entry
/// (k*d_t + tau, l*d_t + tau').
Matrix temporal_derivative_gram(const KernelSpec& spec, std::span<const double> T,
                                std::span<const double> T2, int d_t);

/// LTI-SDE  dx = F x dt + L dβ,  f = H x.
struct ContinuousStateModel {
  Matrix drift;
  Matrix dispersion;
  Matrix diffusion_density;
  Matrix emission;
  std::optional<Matrix> stationary_cov;
  Matrix initial_cov;

  Index state_dim() const noexcept { return drift.rows(); }
};

inline constexpr double kDefaultDiffuseVariance = 1e4;

/// Exact state-space realization of a temporal kernel whose first d_t state
/// components are the function value and its first d_t-1 time derivatives.
ContinuousStateModel state_space_form(const KernelSpec& spec, int d_t,
                                      double diffuse_variance = kDefaultDiffuseVariance);

struct DiscreteModel {
  Matrix A;
  Matrix Q;
};

DiscreteModel discretize(const ContinuousStateModel& model, double dt);

}  // namespace physs::kernels
