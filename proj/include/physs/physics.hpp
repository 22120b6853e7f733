#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "physs/kernels.hpp"
#include "physs/linalg.hpp"

namespace physs::physics {

using kernels::DerivativeOrders;
using kernels::MultiIndex;

/// Residual g(F) of a differential equation, written as a function of a few
/// linear combinations w = active * F of the mixed derivative vector F
/// (length P*D). Keeping w low-dimensional is what makes quadrature cheap.
struct ResidualFn {
  std::string name;
  Index input_dim = 0;
  Matrix active;  // k x input_dim
  std::function<Vector(const Vector&)> reduced;
  std::function<Matrix(const Vector&)> reduced_jacobian;                // R x k
  std::function<std::vector<Matrix>(const Vector&)> reduced_hessians;  // R blocks of k x k
  bool is_linear = false;
  Matrix G;  // R x input_dim, set when is_linear

  Index arity() const { return input_dim; }
  Index reduced_dim() const { return active.rows(); }
  Index outputs() const;
  Vector eval(const Vector& F) const;
  Matrix jacobian(const Vector& F) const;

  static ResidualFn linear(std::string name, Matrix G);
};

/// Position of output p, temporal order tau and spatial multi-index inside
/// the mixed vector F. Throws InsufficientDerivativeOrders when the
/// derivative is not part of the model.
Index component(const DerivativeOrders& orders, Index p, int tau, const MultiIndex& spatial);

/// theta'' + sin(theta) + b theta'
ResidualFn residual_pendulum(double damping, const DerivativeOrders& orders);
/// u_t - diffusion u_xx + reaction (u^3 - u) along spatial axis `axis`
ResidualFn residual_allen_cahn(const DerivativeOrders& orders, double diffusion = 1e-5,
                               double reaction = 5.0, Index axis = 0);
/// f1'' + f2 on two outputs
ResidualFn residual_latent_force(const DerivativeOrders& orders);

/// F = W v with a shape check.
Vector mix(const Matrix& W, const Vector& latent_stack);

/// Mixing for one latent potential over a two-dimensional domain. With one
/// spatial axis the domain is (time, space); with two or more it is the
/// first two spatial axes. Output 0/1 carry the two partial derivatives.
Matrix curl_free_weights(const DerivativeOrders& orders, Index spatial_dims);
/// Rotated gradient [d2 f, -d1 f].
Matrix div_free_weights(const DerivativeOrders& orders, Index spatial_dims);
/// [curl_free | div_free] over two latents.
Matrix helmholtz_weights(const DerivativeOrders& orders, Index spatial_dims);
/// Identity on value rows, zero elsewhere, for P = Q.
Matrix identity_weights(const DerivativeOrders& orders, Index Q);

enum class CollocationKind { Gaussian, Probit };

struct CatalogParams {
  double damping = 0.2;
  double diffusion = 1e-5;
  double reaction = 5.0;
  double probit_scale = 0.1;
};

/// Named model component: an optional collocation residual and/or a mixing
/// matrix preset together with the latent/output counts it implies.
struct CatalogEntry {
  std::string name;
  std::optional<ResidualFn> residual;
  CollocationKind kind = CollocationKind::Gaussian;
  double probit_scale = 0.1;
  std::optional<Matrix> mixing;
  Index latents = 1;
  Index outputs = 1;
};

const std::vector<std::string>& catalog_names();
CatalogEntry catalog_lookup(std::string_view name, const DerivativeOrders& orders,
                            Index spatial_dims, const CatalogParams& params = {});

enum class LikKind { GaussianObs, Collocation, Boundary, ProbitMonotonic };

struct LikSpec {
  Matrix select;                       // rows picking components of F (obs/boundary/probit)
  double noise = 1.0;                  // variance
  const ResidualFn* residual = nullptr;
  double probit_scale = 0.1;
};

struct LikEval {
  double value = 0.0;
  Vector gradient;
  Matrix hessian;
};

/// Log-likelihood of one location with gradient and Hessian in F.
LikEval log_lik(LikKind kind, const Vector& F, const Vector& y, const LikSpec& spec);

/// Log-likelihood of the collocation pseudo-observation 0 = g + noise as a
/// function of the reduced inputs w. `gauss_newton` replaces the Hessian
/// by -J'J/noise.
LikEval residual_loglik(const ResidualFn& g, const Vector& w, double noise, bool gauss_newton);

/// log Phi(w / scale) with derivatives in w.
LikEval probit_loglik(double w, double scale);

/// log of the standard normal CDF, accurate in both tails.
double log_ndtr(double z);

}  // namespace physs::physics
