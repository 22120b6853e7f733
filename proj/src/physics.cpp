#include "physs/physics.hpp"

#include <cmath>
#include <numbers>

namespace physs::physics {

Index ResidualFn::outputs() const {
  return reduced(Vector::Zero(reduced_dim())).size();
}

Vector ResidualFn::eval(const Vector& F) const {
  if (F.size() != input_dim) throw Error(ErrorCode::ShapeMismatch, name + ": wrong input length");
  return reduced(active * F);
}

Matrix ResidualFn::jacobian(const Vector& F) const {
  if (F.size() != input_dim) throw Error(ErrorCode::ShapeMismatch, name + ": wrong input length");
  return reduced_jacobian(active * F) * active;
}

ResidualFn ResidualFn::linear(std::string name, Matrix G) {
  ResidualFn r;
  r.name = std::move(name);
  r.input_dim = G.cols();
  r.active = G;
  const Index R = G.rows();
  r.reduced = [](const Vector& w) { return w; };
  r.reduced_jacobian = [R](const Vector&) { return Matrix::Identity(R, R); };
  r.reduced_hessians = [R](const Vector&) {
    return std::vector<Matrix>(static_cast<std::size_t>(R), Matrix::Zero(R, R));
  };
  r.is_linear = true;
  r.G = std::move(G);
  return r;
}

Index component(const DerivativeOrders& orders, Index p, int tau, const MultiIndex& spatial) {
  if (tau >= orders.d_t())
    throw Error(ErrorCode::InsufficientDerivativeOrders,
                "temporal derivative of order " + std::to_string(tau) + " is not modelled");
  for (int j = 0; j < orders.d_s(); ++j)
    if (orders.spatial[static_cast<std::size_t>(j)] == spatial)
      return p * orders.D() + orders.index(tau, j);
  throw Error(ErrorCode::InsufficientDerivativeOrders, "spatial derivative is not modelled");
}

namespace {

MultiIndex zeros_like(const DerivativeOrders& orders) {
  return MultiIndex(orders.spatial.front().size(), 0);
}

MultiIndex unit(const DerivativeOrders& orders, Index axis, int order) {
  MultiIndex mi = zeros_like(orders);
  if (axis >= static_cast<Index>(mi.size()))
    throw Error(ErrorCode::InsufficientDerivativeOrders, "spatial axis is not part of the model");
  mi[static_cast<std::size_t>(axis)] = order;
  return mi;
}

// Index of the first-order partial along a domain axis: -1 is time.
Index partial(const DerivativeOrders& orders, Index p, Index axis) {
  if (axis < 0) return component(orders, p, 1, zeros_like(orders));
  return component(orders, p, 0, unit(orders, axis, 1));
}

std::pair<Index, Index> domain_axes(Index spatial_dims) {
  if (spatial_dims >= 2) return {0, 1};
  if (spatial_dims == 1) return {-1, 0};
  throw Error(ErrorCode::InsufficientDerivativeOrders,
              "curl/divergence constraints need a two-dimensional domain");
}

}  // namespace

ResidualFn residual_pendulum(double damping, const DerivativeOrders& orders) {
  const MultiIndex z = zeros_like(orders);
  const Index th = component(orders, 0, 0, z);
  const Index dth = component(orders, 0, 1, z);
  const Index ddth = component(orders, 0, 2, z);
  ResidualFn r;
  r.name = "pendulum";
  r.input_dim = orders.D();
  // w = [theta, theta'' + b theta']
  r.active = Matrix::Zero(2, r.input_dim);
  r.active(0, th) = 1.0;
  r.active(1, ddth) = 1.0;
  r.active(1, dth) = damping;
  r.reduced = [](const Vector& w) { return Vector::Constant(1, std::sin(w(0)) + w(1)); };
  r.reduced_jacobian = [](const Vector& w) {
    Matrix J(1, 2);
    J << std::cos(w(0)), 1.0;
    return J;
  };
  r.reduced_hessians = [](const Vector& w) {
    Matrix H = Matrix::Zero(2, 2);
    H(0, 0) = -std::sin(w(0));
    return std::vector<Matrix>{H};
  };
  return r;
}

ResidualFn residual_allen_cahn(const DerivativeOrders& orders, double diffusion, double reaction,
                               Index axis) {
  const MultiIndex z = zeros_like(orders);
  const Index u = component(orders, 0, 0, z);
  const Index ut = component(orders, 0, 1, z);
  const Index uxx = component(orders, 0, 0, unit(orders, axis, 2));
  ResidualFn r;
  r.name = "allen_cahn";
  r.input_dim = orders.D();
  // w = [u, u_t - diffusion u_xx]
  r.active = Matrix::Zero(2, r.input_dim);
  r.active(0, u) = 1.0;
  r.active(1, ut) = 1.0;
  r.active(1, uxx) = -diffusion;
  r.reduced = [reaction](const Vector& w) {
    return Vector::Constant(1, w(1) + reaction * (w(0) * w(0) * w(0) - w(0)));
  };
  r.reduced_jacobian = [reaction](const Vector& w) {
    Matrix J(1, 2);
    J << reaction * (3.0 * w(0) * w(0) - 1.0), 1.0;
    return J;
  };
  r.reduced_hessians = [reaction](const Vector& w) {
    Matrix H = Matrix::Zero(2, 2);
    H(0, 0) = 6.0 * reaction * w(0);
    return std::vector<Matrix>{H};
  };
  return r;
}

ResidualFn residual_latent_force(const DerivativeOrders& orders) {
  const MultiIndex z = zeros_like(orders);
  Matrix G = Matrix::Zero(1, 2 * orders.D());
  G(0, component(orders, 0, 2, z)) = 1.0;
  G(0, component(orders, 1, 0, z)) = 1.0;
  return ResidualFn::linear("latent_force", G);
}

Vector mix(const Matrix& W, const Vector& latent_stack) {
  if (W.cols() != latent_stack.size())
    throw Error(ErrorCode::ShapeMismatch, "mixing matrix does not match latent stack length");
  return W * latent_stack;
}

Matrix curl_free_weights(const DerivativeOrders& orders, Index spatial_dims) {
  const auto [a1, a2] = domain_axes(spatial_dims);
  const Index D = orders.D();
  Matrix W = Matrix::Zero(2 * D, D);
  W(0, partial(orders, 0, a1)) = 1.0;
  W(D, partial(orders, 0, a2)) = 1.0;
  return W;
}

Matrix div_free_weights(const DerivativeOrders& orders, Index spatial_dims) {
  const auto [a1, a2] = domain_axes(spatial_dims);
  const Index D = orders.D();
  Matrix W = Matrix::Zero(2 * D, D);
  W(0, partial(orders, 0, a2)) = 1.0;
  W(D, partial(orders, 0, a1)) = -1.0;
  return W;
}

Matrix helmholtz_weights(const DerivativeOrders& orders, Index spatial_dims) {
  const Index D = orders.D();
  Matrix W(2 * D, 2 * D);
  W << curl_free_weights(orders, spatial_dims), div_free_weights(orders, spatial_dims);
  return W;
}

Matrix identity_weights(const DerivativeOrders& orders, Index Q) {
  return Matrix::Identity(Q * orders.D(), Q * orders.D());
}

const std::vector<std::string>& catalog_names() {
  static const std::vector<std::string> names{"pendulum", "allen_cahn", "latent_force", "monotonic",
                                              "curl_free", "div_free",   "helmholtz"};
  return names;
}

CatalogEntry catalog_lookup(std::string_view name, const DerivativeOrders& orders,
                            Index spatial_dims, const CatalogParams& params) {
  CatalogEntry e;
  e.name = std::string(name);
  if (name == "pendulum") {
    e.residual = residual_pendulum(params.damping, orders);
  } else if (name == "allen_cahn") {
    e.residual = residual_allen_cahn(orders, params.diffusion, params.reaction);
  } else if (name == "latent_force") {
    e.residual = residual_latent_force(orders);
    e.latents = 2;
    e.outputs = 2;
    e.mixing = identity_weights(orders, 2);
  } else if (name == "monotonic") {
    Matrix G = Matrix::Zero(1, orders.D());
    G(0, component(orders, 0, 1, zeros_like(orders))) = 1.0;
    e.residual = ResidualFn::linear("monotonic", G);
    e.kind = CollocationKind::Probit;
    e.probit_scale = params.probit_scale;
  } else if (name == "curl_free") {
    e.mixing = curl_free_weights(orders, spatial_dims);
    e.outputs = 2;
  } else if (name == "div_free") {
    e.mixing = div_free_weights(orders, spatial_dims);
    e.outputs = 2;
  } else if (name == "helmholtz") {
    e.mixing = helmholtz_weights(orders, spatial_dims);
    e.latents = 2;
    e.outputs = 2;
  } else {
    throw Error(ErrorCode::Config, "unknown residual '" + std::string(name) + "'");
  }
  return e;
}

double log_ndtr(double z) {
  if (z > 0.0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  if (z > -35.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  // Asymptotic series for the lower tail.
  const double u = 1.0 / (z * z);
  const double series = 1.0 + u * (-1.0 + u * (3.0 + u * (-15.0 + u * (105.0 - 945.0 * u))));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

LikEval probit_loglik(double w, double scale) {
  const double z = w / scale;
  const double lp = log_ndtr(z);
  const double log_phi = -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
  const double lambda = std::exp(log_phi - lp);  // inverse Mills ratio
  LikEval out;
  out.value = lp;
  out.gradient = Vector::Constant(1, lambda / scale);
  out.hessian = Matrix::Constant(1, 1, -lambda * (z + lambda) / (scale * scale));
  if (!std::isfinite(out.value) || !std::isfinite(out.hessian(0, 0)))
    throw Error(ErrorCode::NonFiniteLikelihood, "probit log-likelihood overflow");
  return out;
}

LikEval residual_loglik(const ResidualFn& g, const Vector& w, double noise, bool gauss_newton) {
  const Vector r = g.reduced(w);
  const Matrix J = g.reduced_jacobian(w);
  LikEval out;
  out.value = -0.5 * r.squaredNorm() / noise -
              0.5 * static_cast<double>(r.size()) * (kLog2Pi + std::log(noise));
  out.gradient = -J.transpose() * r / noise;
  out.hessian = -J.transpose() * J / noise;
  if (!gauss_newton) {
    const auto Hs = g.reduced_hessians(w);
    for (Index i = 0; i < r.size(); ++i) out.hessian -= r(i) * Hs[static_cast<std::size_t>(i)] / noise;
  }
  if (!std::isfinite(out.value))
    throw Error(ErrorCode::NonFiniteLikelihood, g.name + ": non-finite residual likelihood");
  return out;
}

LikEval log_lik(LikKind kind, const Vector& F, const Vector& y, const LikSpec& spec) {
  switch (kind) {
    case LikKind::GaussianObs:
    case LikKind::Boundary: {
      if (spec.select.cols() != F.size() || spec.select.rows() != y.size())
        throw Error(ErrorCode::ShapeMismatch, "selector does not match F / y");
      const Vector e = y - spec.select * F;
      LikEval out;
      out.value = -0.5 * e.squaredNorm() / spec.noise -
                  0.5 * static_cast<double>(y.size()) * (kLog2Pi + std::log(spec.noise));
      out.gradient = spec.select.transpose() * e / spec.noise;
      out.hessian = -spec.select.transpose() * spec.select / spec.noise;
      return out;
    }
    case LikKind::Collocation: {
      if (!spec.residual) throw Error(ErrorCode::InvalidArgument, "collocation needs a residual");
      const ResidualFn& g = *spec.residual;
      const Vector w = g.active * F;
      LikEval red = residual_loglik(g, w, spec.noise, false);
      red.gradient = g.active.transpose() * red.gradient;
      red.hessian = g.active.transpose() * red.hessian * g.active;
      return red;
    }
    case LikKind::ProbitMonotonic: {
      if (spec.select.rows() != 1 || spec.select.cols() != F.size())
        throw Error(ErrorCode::ShapeMismatch, "probit selector must be one row over F");
      LikEval red = probit_loglik(spec.select.row(0).dot(F), spec.probit_scale);
      red.gradient = spec.select.transpose() * red.gradient;
      red.hessian = spec.select.transpose() * red.hessian * spec.select;
      return red;
    }
  }
  return {};
}

}  // namespace physs::physics
