#include "physs/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace physs::kernels {
namespace {

// Coefficients (ascending powers of u = lambda*|r|) of the polynomial P in
// k(r) = variance * exp(-u) * P(u).
std::vector<double> matern_polynomial(Family f) {
  switch (f) {
    case Family::Matern12: return {1.0};
    case Family::Matern32: return {1.0, 1.0};
    case Family::Matern52: return {1.0, 1.0, 1.0 / 3.0};
    case Family::Matern72: return {1.0, 1.0, 2.0 / 5.0, 1.0 / 15.0};
    default: break;
  }
  throw Error(ErrorCode::Unsupported, "not a Matern family");
}

double matern_rate(const KernelSpec& s) {
  switch (s.family) {
    case Family::Matern12: return 1.0 / s.lengthscale;
    case Family::Matern32: return std::sqrt(3.0) / s.lengthscale;
    case Family::Matern52: return std::sqrt(5.0) / s.lengthscale;
    case Family::Matern72: return std::sqrt(7.0) / s.lengthscale;
    default: break;
  }
  throw Error(ErrorCode::Unsupported, "not a Matern family");
}

double poly_eval(const std::vector<double>& c, double u) {
  double acc = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * u + *it;
  return acc;
}

// n-th derivative of k(r) with respect to r.
double stationary_derivative(const KernelSpec& s, double r, int n) {
  if (s.family == Family::SquaredExponential) {
    const double x = r / s.lengthscale;
    // Probabilists' Hermite recursion He_{k+1} = x He_k - k He_{k-1}.
    double hm1 = 0.0, h = 1.0;
    for (int k = 0; k < n; ++k) {
      const double next = x * h - k * hm1;
      hm1 = h;
      h = next;
    }
    const double sign = (n % 2 == 0) ? 1.0 : -1.0;
    return s.variance * sign * std::pow(s.lengthscale, -n) * h * std::exp(-0.5 * x * x);
  }
  const double lam = matern_rate(s);
  std::vector<double> p = matern_polynomial(s.family);
  // d/du [e^{-u} P(u)] = e^{-u} (P'(u) - P(u))
  for (int k = 0; k < n; ++k) {
    std::vector<double> next(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) next[i] -= p[i];
    for (std::size_t i = 1; i < p.size(); ++i) next[i - 1] += static_cast<double>(i) * p[i];
    p = std::move(next);
  }
  const double ar = std::abs(r);
  if (ar == 0.0 && n % 2 == 1) return 0.0;
  const double u = lam * ar;
  const double sign = (r < 0.0 && n % 2 == 1) ? -1.0 : 1.0;
  return s.variance * sign * std::pow(lam, n) * std::exp(-u) * poly_eval(p, u);
}

void require_stationary(const KernelSpec& s, const char* op) {
  if (!s.stationary())
    throw Error(ErrorCode::Unsupported,
                std::string(op) + " is only defined for stationary kernel families");
}

void check_order(const KernelSpec& s, int a) {
  if (a < 0) throw Error(ErrorCode::InvalidArgument, "negative derivative order");
  if (a > max_derivative_order(s.family)) {
    std::ostringstream msg;
    msg << family_name(s.family) << " supports derivative orders up to "
        << max_derivative_order(s.family) << " per argument, requested " << a;
    throw Error(ErrorCode::OrderExceedsSmoothness, msg.str());
  }
}

double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Solves F P + P F^T + S = 0 through the vectorized Kronecker system.
Matrix solve_lyapunov(const Matrix& F, const Matrix& S) {
  const Index d = F.rows();
  const Matrix I = Matrix::Identity(d, d);
  Matrix K = Matrix::Zero(d * d, d * d);
  // vec(F P) = (I kron F) vec(P), vec(P F^T) = (F kron I) vec(P), column-major.
  for (Index j = 0; j < d; ++j) {
    K.block(j * d, j * d, d, d) += F;
    for (Index i = 0; i < d; ++i) K.block(i * d, j * d, d, d) += F(i, j) * I;
  }
  Vector rhs = -Eigen::Map<const Vector>(S.data(), d * d);
  Vector p = K.fullPivLu().solve(rhs);
  Matrix P = Eigen::Map<Matrix>(p.data(), d, d);
  symmetrize(P);
  return P;
}

}  // namespace

std::string_view family_name(Family f) noexcept {
  switch (f) {
    case Family::Matern12: return "matern12";
    case Family::Matern32: return "matern32";
    case Family::Matern52: return "matern52";
    case Family::Matern72: return "matern72";
    case Family::SquaredExponential: return "se";
    case Family::IntegratedWiener: return "iwp";
  }
  return "unknown";
}

Family parse_family(std::string_view name) {
  if (name == "matern12") return Family::Matern12;
  if (name == "matern32") return Family::Matern32;
  if (name == "matern52") return Family::Matern52;
  if (name == "matern72") return Family::Matern72;
  if (name == "se" || name == "rbf") return Family::SquaredExponential;
  if (name == "iwp") return Family::IntegratedWiener;
  throw Error(ErrorCode::Config, "unknown kernel family '" + std::string(name) + "'");
}

void KernelSpec::validate() const {
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw Error(ErrorCode::InvalidArgument, "kernel variance must be positive");
  if (stationary() && (!(lengthscale > 0.0) || !std::isfinite(lengthscale)))
    throw Error(ErrorCode::InvalidArgument, "kernel lengthscale must be positive");
  if (!stationary() && order < 1)
    throw Error(ErrorCode::InvalidArgument, "integrated Wiener order must be positive");
}

int max_derivative_order(Family family) noexcept {
  switch (family) {
    case Family::Matern12: return 0;
    case Family::Matern32: return 1;
    case Family::Matern52: return 2;
    case Family::Matern72: return 3;
    case Family::SquaredExponential: return 16;
    case Family::IntegratedWiener: return 0;
  }
  return 0;
}

void DerivativeOrders::validate(std::size_t spatial_dims) const {
  if (temporal < 1) throw Error(ErrorCode::InvalidArgument, "d_t must be at least 1");
  if (spatial.empty()) throw Error(ErrorCode::InvalidArgument, "d_s must be at least 1");
  for (const auto& mi : spatial) {
    if (mi.size() != spatial_dims)
      throw Error(ErrorCode::ShapeMismatch, "spatial multi-index length differs from spatial dims");
    for (int o : mi)
      if (o < 0) throw Error(ErrorCode::InvalidArgument, "negative spatial derivative order");
  }
  for (int o : spatial.front())
    if (o != 0)
      throw Error(ErrorCode::InvalidArgument, "first spatial multi-index must be the function value");
}

double kernel_eval(const KernelSpec& spec, double x, double x2) {
  require_stationary(spec, "kernel_eval");
  return stationary_derivative(spec, x - x2, 0);
}

double kernel_derivative(const KernelSpec& spec, double x, double x2, int a, int b) {
  require_stationary(spec, "kernel_derivative");
  check_order(spec, a);
  check_order(spec, b);
  const double sign = (b % 2 == 0) ? 1.0 : -1.0;
  return sign * stationary_derivative(spec, x - x2, a + b);
}

Matrix derivative_gram(const KernelSpec& spec, std::span<const double> X,
                       std::span<const double> X2, std::span<const int> orders_left,
                       std::span<const int> orders_right) {
  require_stationary(spec, "derivative_gram");
  for (int a : orders_left) check_order(spec, a);
  for (int b : orders_right) check_order(spec, b);
  const Index dl = static_cast<Index>(orders_left.size());
  const Index dr = static_cast<Index>(orders_right.size());
  Matrix K(static_cast<Index>(X.size()) * dl, static_cast<Index>(X2.size()) * dr);
  for (std::size_t i = 0; i < X.size(); ++i)
    for (std::size_t j = 0; j < X2.size(); ++j)
      for (Index a = 0; a < dl; ++a)
        for (Index b = 0; b < dr; ++b) {
          const int ob = orders_right[b];
          const double sign = (ob % 2 == 0) ? 1.0 : -1.0;
          K(static_cast<Index>(i) * dl + a, static_cast<Index>(j) * dr + b) =
              sign * stationary_derivative(spec, X[i] - X2[j], orders_left[a] + ob);
        }
  return K;
}

Matrix spatial_derivative_gram(const std::vector<KernelSpec>& kernels, const Matrix& X,
                               const Matrix& X2, const std::vector<MultiIndex>& orders_left,
                               const std::vector<MultiIndex>& orders_right) {
  const Index S = static_cast<Index>(kernels.size());
  if (X.cols() != S || X2.cols() != S)
    throw Error(ErrorCode::ShapeMismatch, "spatial locations have wrong number of columns");
  for (const auto& k : kernels) require_stationary(k, "spatial_derivative_gram");
  const Index dl = static_cast<Index>(orders_left.size());
  const Index dr = static_cast<Index>(orders_right.size());
  for (const auto& mi : orders_left)
    for (Index s = 0; s < S; ++s) check_order(kernels[s], mi[s]);
  for (const auto& mi : orders_right)
    for (Index s = 0; s < S; ++s) check_order(kernels[s], mi[s]);
  Matrix K = Matrix::Ones(X.rows() * dl, X2.rows() * dr);
  for (Index s = 0; s < S; ++s) {
    const KernelSpec& ks = kernels[s];
    for (Index i = 0; i < X.rows(); ++i)
      for (Index j = 0; j < X2.rows(); ++j) {
        const double r = X(i, s) - X2(j, s);
        for (Index a = 0; a < dl; ++a)
          for (Index b = 0; b < dr; ++b) {
            const int oa = orders_left[a][s], ob = orders_right[b][s];
            const double sign = (ob % 2 == 0) ? 1.0 : -1.0;
            K(i * dl + a, j * dr + b) *= sign * stationary_derivative(ks, r, oa + ob);
          }
      }
  }
  if (S == 0) K.setOnes();
  return K;
}

Matrix temporal_derivative_gram(const KernelSpec& spec, std::span<const double> T,
                                std::span<const double> T2, int d_t) {
  std::vector<int> orders(static_cast<std::size_t>(d_t));
  for (int i = 0; i < d_t; ++i) orders[static_cast<std::size_t>(i)] = i;
  return derivative_gram(spec, T, T2, orders, orders);
}

ContinuousStateModel state_space_form(const KernelSpec& spec, int d_t, double diffuse_variance) {
  spec.validate();
  if (d_t < 1) throw Error(ErrorCode::InvalidArgument, "d_t must be at least 1");
  ContinuousStateModel m;
  Index d = 0;
  if (spec.family == Family::IntegratedWiener) {
    d = spec.order + 1;
    if (d < d_t)
      throw Error(ErrorCode::OrderExceedsSmoothness,
                  "integrated Wiener order too small for the requested temporal derivatives");
    m.drift = Matrix::Zero(d, d);
    for (Index i = 0; i + 1 < d; ++i) m.drift(i, i + 1) = 1.0;
    m.dispersion = Matrix::Zero(d, 1);
    m.dispersion(d - 1, 0) = 1.0;
    m.diffusion_density = Matrix::Constant(1, 1, spec.variance);
    m.initial_cov = diffuse_variance * Matrix::Identity(d, d);
  } else if (spec.family == Family::SquaredExponential) {
    throw Error(ErrorCode::Unsupported,
                "squared exponential kernel has no finite state-space form; use a Matern family");
  } else {
    d = max_derivative_order(spec.family) + 1;
    if (d < d_t)
      throw Error(ErrorCode::OrderExceedsSmoothness,
                  std::string(family_name(spec.family)) +
                      " is not smooth enough for the requested temporal derivatives");
    const double lam = matern_rate(spec);
    m.drift = Matrix::Zero(d, d);
    for (Index i = 0; i + 1 < d; ++i) m.drift(i, i + 1) = 1.0;
    // Companion form of (s + lambda)^d.
    for (Index i = 0; i < d; ++i)
      m.drift(d - 1, i) = -binomial(static_cast<int>(d), static_cast<int>(i)) *
                          std::pow(lam, static_cast<double>(d - i));
    m.dispersion = Matrix::Zero(d, 1);
    m.dispersion(d - 1, 0) = 1.0;
    Matrix unit = solve_lyapunov(m.drift, m.dispersion * m.dispersion.transpose());
    const double scale = spec.variance / unit(0, 0);
    m.diffusion_density = Matrix::Constant(1, 1, scale);
    m.stationary_cov = unit * scale;
    m.initial_cov = *m.stationary_cov;
  }
  m.emission = Matrix::Zero(d_t, d);
  for (Index i = 0; i < d_t; ++i) m.emission(i, i) = 1.0;
  return m;
}

DiscreteModel discretize(const ContinuousStateModel& model, double dt) {
  if (dt < 0.0 || !std::isfinite(dt))
    throw Error(ErrorCode::InvalidArgument, "discretize requires dt >= 0");
  const Index d = model.state_dim();
  DiscreteModel out;
  if (dt == 0.0) {
    out.A = Matrix::Identity(d, d);
    out.Q = Matrix::Zero(d, d);
    return out;
  }
  if (model.stationary_cov) {
    out.A = expm(model.drift * dt);
    const Matrix& Pinf = *model.stationary_cov;
    out.Q = Pinf - out.A * Pinf * out.A.transpose();
  } else {
    // Van Loan: expm([[-F, G], [0, F^T]] dt) = [[., Phi12], [0, Phi22]],
    // A = Phi22^T, Q = Phi22^T Phi12.
    const Matrix G = model.dispersion * model.diffusion_density * model.dispersion.transpose();
    Matrix M = Matrix::Zero(2 * d, 2 * d);
    M.topLeftCorner(d, d) = -model.drift;
    M.topRightCorner(d, d) = G;
    M.bottomRightCorner(d, d) = model.drift.transpose();
    const Matrix E = expm(M * dt);
    out.A = E.bottomRightCorner(d, d).transpose();
    out.Q = out.A * E.topRightCorner(d, d);
  }
  symmetrize(out.Q);
  return out;
}

}  // namespace physs::kernels
