#pragma once

#include <cstdint>
#include <vector>

#include "physs/infer.hpp"

namespace physs::oracle {

/// Exact conjugate posterior over the latent derivative stacks at every node
/// (data, collocation, boundary and query points). Node-major layout: entry
/// (node i, latent q, derivative a) sits at i*Q*D + q*D + a.
struct DensePosterior {
  std::vector<infer::Point> nodes;
  Index QD = 0;
  Vector mean;
  Matrix cov;
  double log_marginal = 0.0;

  Index find(const infer::Point& p) const;  // -1 when absent
  infer::Marginal at(Index node) const;
  /// Joint marginal over several nodes in the given order.
  infer::Marginal joint(const IndexList& nodes) const;
};

inline constexpr Index kMaxDenseSize = 2000;

/// Brute-force GP regression with derivative kernels and mixing. Every
/// likelihood term must be Gaussian or a linear residual.
DensePosterior dense_posterior(const infer::ModelSpec& spec, const infer::Problem& problem);

struct McEstimate {
  double ell = 0.0;
  double ell_se = 0.0;
  Vector grad, grad_se;
  Matrix hess, hess_se;
};

/// Monte Carlo E over w ~ N(m, C) of the collocation log-likelihood and its
/// derivatives in w.
McEstimate mc_expectation(const physics::ResidualFn& g, const Vector& m, const Matrix& C,
                          double noise, std::size_t n_samples, std::uint64_t seed,
                          bool gauss_newton = false);

}  // namespace physs::oracle
