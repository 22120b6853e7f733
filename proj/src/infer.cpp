#include "physs/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <thread>

namespace physs::infer {
namespace {

constexpr double kTimeTol = 1e-10;

bool same_location(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.size() == 0 || (a - b).cwiseAbs().maxCoeff() <= 1e-12);
}

bool same_time(double a, double b) { return std::abs(a - b) <= kTimeTol * std::max(1.0, std::abs(a)); }

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PHYSS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(worker_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Matrix clip_negative_semidefinite(const Matrix& H) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (H + H.transpose()));
  const Vector ev = es.eigenvalues().cwiseMin(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// obs..., colloc, boundary
Vector noise_slots(const ModelSpec& s) {
  Vector v(s.outputs + 2);
  for (Index p = 0; p < s.outputs; ++p) v(p) = s.noise.obs[static_cast<std::size_t>(p)];
  v(s.outputs) = std::max(s.noise.colloc, s.noise.colloc_floor);
  v(s.outputs + 1) = s.noise.boundary;
  return v;
}

}  // namespace

std::string_view mode_name(Mode m) noexcept {
  switch (m) {
    case Mode::Full: return "full";
    case Mode::Sparse: return "sparse";
    case Mode::Structured: return "structured";
    case Mode::Eks: return "eks";
  }
  return "full";
}

Mode parse_mode(std::string_view name) {
  if (name == "full") return Mode::Full;
  if (name == "sparse") return Mode::Sparse;
  if (name == "structured") return Mode::Structured;
  if (name == "eks") return Mode::Eks;
  throw Error(ErrorCode::Config, "unknown mode '" + std::string(name) + "'");
}

Index ModelSpec::spatial_dims() const {
  return latents.empty() ? 0 : static_cast<Index>(latents.front().spatial.size());
}

Matrix ModelSpec::mixing() const {
  if (W.size() > 0) return W;
  return Matrix::Identity(Q() * D(), Q() * D());
}

void ModelSpec::validate() const {
  if (latents.empty()) throw Error(ErrorCode::Config, "model needs at least one latent");
  orders.validate(static_cast<std::size_t>(spatial_dims()));
  const Matrix Wm = mixing();
  if (Wm.rows() != outputs * D() || Wm.cols() != Q() * D())
    throw Error(ErrorCode::ShapeMismatch, "mixing matrix must be (P*D) x (Q*D)");
  if (static_cast<Index>(noise.obs.size()) != outputs)
    throw Error(ErrorCode::Config, "one observation noise per output is required");
  if (residual && residual->input_dim != outputs * D())
    throw Error(ErrorCode::ShapeMismatch, "residual arity must equal P*D");
  if ((mode == Mode::Sparse || mode == Mode::Structured) && !inducing)
    throw Error(ErrorCode::Config, "sparse and structured modes need inducing locations");
  for (double v : noise.obs)
    if (!(v > 0.0)) throw Error(ErrorCode::Config, "observation noise must be positive");
  if (!(noise.colloc >= 0.0) || !(noise.boundary > 0.0))
    throw Error(ErrorCode::Config, "noise variances must be nonnegative");
  if (quadrature_order < 1) throw Error(ErrorCode::Config, "quadrature order must be positive");
}

// ---------------------------------------------------------------- hyperparameters

Hyperparameters Hyperparameters::from_spec(const ModelSpec& spec) {
  Hyperparameters h;
  std::vector<double> vals;
  auto add = [&](std::string name, double v) {
    h.names.push_back(std::move(name));
    vals.push_back(std::log(v));
  };
  for (std::size_t q = 0; q < spec.latents.size(); ++q) {
    const auto& lp = spec.latents[q];
    const std::string base = "latent" + std::to_string(q);
    if (lp.temporal.stationary()) add(base + ".temporal.lengthscale", lp.temporal.lengthscale);
    add(base + ".temporal.variance", lp.temporal.variance);
    for (std::size_t j = 0; j < lp.spatial.size(); ++j) {
      add(base + ".spatial" + std::to_string(j) + ".lengthscale", lp.spatial[j].lengthscale);
      add(base + ".spatial" + std::to_string(j) + ".variance", lp.spatial[j].variance);
    }
  }
  for (std::size_t p = 0; p < spec.noise.obs.size(); ++p) add("noise.obs" + std::to_string(p), spec.noise.obs[p]);
  add("noise.colloc", std::max(spec.noise.colloc, spec.noise.colloc_floor));
  add("noise.boundary", spec.noise.boundary);
  h.log_values = Eigen::Map<Vector>(vals.data(), static_cast<Index>(vals.size()));
  return h;
}

Index Hyperparameters::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Index>(i);
  return -1;
}

bool Hyperparameters::is_noise(Index i) const {
  return names[static_cast<std::size_t>(i)].rfind("noise.", 0) == 0;
}

ModelSpec Hyperparameters::apply(const ModelSpec& base, const Vector& lv) const {
  if (lv.size() != static_cast<Index>(names.size()))
    throw Error(ErrorCode::ShapeMismatch, "hyperparameter vector has the wrong length");
  ModelSpec s = base;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string& n = names[i];
    const double v = std::exp(lv(static_cast<Index>(i)));
    if (n.rfind("noise.", 0) == 0) {
      if (n == "noise.colloc") s.noise.colloc = std::max(v, s.noise.colloc_floor);
      else if (n == "noise.boundary") s.noise.boundary = v;
      else s.noise.obs[static_cast<std::size_t>(std::stoul(n.substr(9)))] = v;
      continue;
    }
    const auto dot = n.find('.');
    const std::size_t q = std::stoul(n.substr(6, dot - 6));
    auto& lp = s.latents[q];
    const std::string rest = n.substr(dot + 1);
    if (rest == "temporal.lengthscale") lp.temporal.lengthscale = v;
    else if (rest == "temporal.variance") lp.temporal.variance = v;
    else {
      const auto dot2 = rest.find('.');
      const std::size_t j = std::stoul(rest.substr(7, dot2 - 7));
      if (rest.substr(dot2 + 1) == "lengthscale") lp.spatial[j].lengthscale = v;
      else lp.spatial[j].variance = v;
    }
  }
  return s;
}

// ---------------------------------------------------------------- quadrature

void gauss_hermite(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  // Golub-Welsch on the probabilists' Hermite recurrence.
  Matrix J = Matrix::Zero(order, order);
  for (int i = 1; i < order; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Matrix> es(J);
  nodes.resize(static_cast<std::size_t>(order));
  weights.resize(static_cast<std::size_t>(order));
  for (int i = 0; i < order; ++i) {
    nodes[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
    const double v = es.eigenvectors()(0, i);
    weights[static_cast<std::size_t>(i)] = v * v;
  }
}

namespace {

struct QuadRule {
  std::vector<double> nodes, weights;
};

const QuadRule& rule(int order) {
  thread_local std::vector<std::pair<int, QuadRule>> cache;
  for (const auto& [o, r] : cache)
    if (o == order) return r;
  QuadRule r;
  gauss_hermite(order, r.nodes, r.weights);
  cache.emplace_back(order, std::move(r));
  return cache.back().second;
}

template <class Fn>
TermMoments quadrature(const Vector& m, const Matrix& C, int order, Fn&& fn) {
  const Index k = m.size();
  if (k > 4 || std::pow(static_cast<double>(order), static_cast<double>(k)) > 2e5)
    throw Error(ErrorCode::QuadratureOverflow,
                "quadrature grid too large: reduce the residual to at most 4 active inputs");
  const QuadRule& q = rule(order);
  const Matrix L = psd_factor(C);
  TermMoments out;
  out.grad = Vector::Zero(k);
  out.hess = Matrix::Zero(k, k);
  std::vector<int> idx(static_cast<std::size_t>(k), 0);
  Vector xi(k);
  const long total = static_cast<long>(std::pow(order, k));
  for (long n = 0; n < total; ++n) {
    double wgt = 1.0;
    for (Index d = 0; d < k; ++d) {
      xi(d) = q.nodes[static_cast<std::size_t>(idx[static_cast<std::size_t>(d)])];
      wgt *= q.weights[static_cast<std::size_t>(idx[static_cast<std::size_t>(d)])];
    }
    const physics::LikEval e = fn(Vector(m + L * xi));
    out.ell += wgt * e.value;
    out.grad += wgt * e.gradient;
    out.hess += wgt * e.hessian;
    for (Index d = 0; d < k; ++d) {
      if (++idx[static_cast<std::size_t>(d)] < order) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  if (!std::isfinite(out.ell) || !out.grad.allFinite() || !out.hess.allFinite())
    throw Error(ErrorCode::QuadratureOverflow, "non-finite quadrature estimate");
  return out;
}

}  // namespace

TermMoments expected_residual(const physics::ResidualFn& g, const Vector& m, const Matrix& C,
                              double noise, bool gauss_newton, int order) {
  return quadrature(m, C, order, [&](const Vector& w) {
    return physics::residual_loglik(g, w, noise, gauss_newton);
  });
}

TermMoments expected_probit(double m, double v, double scale, int order) {
  return quadrature(Vector::Constant(1, m), Matrix::Constant(1, 1, v), order,
                    [&](const Vector& w) { return physics::probit_loglik(w(0), scale); });
}

Matrix gauss_newton_curvature(const Matrix& B, const Matrix& R, const physics::ResidualFn& g,
                              const Vector& mean_u, const Matrix& cov_u, double noise, int order) {
  const Vector mw = B * mean_u;
  Matrix Cw = B * cov_u * B.transpose();
  if (R.size() > 0) Cw += R;
  const TermMoments tm = expected_residual(g, mw, Cw, noise, true, order);
  Matrix out = -B.transpose() * tm.hess * B;
  symmetrize(out);
  return out;
}

// ---------------------------------------------------------------- engine internals

struct Engine::Term {
  enum class Kind { Gaussian, Residual, Probit } kind = Kind::Gaussian;
  Index time = 0;
  IndexList locs;
  Matrix A;
  Vector y;
  IndexList noise;
  Index group = 0;
};

struct Engine::Geometry {
  ModelSpec spec;
  std::optional<stprior::SpatioTemporalPrior> prior;
  ssm::StateSpaceModel model;
  IndexList emitted;
  std::vector<std::vector<Matrix>> kt;                // [time][q] d_t x d_t
  std::vector<std::vector<Matrix>> loc_spatial;       // [location][q] spatial projector
  std::vector<Matrix> loc_proj;                       // [location] QD x E
  std::vector<Matrix> term_B;
  std::vector<Matrix> term_R;                         // empty when zero
  Vector noise;                                       // obs..., colloc, boundary
  Matrix W;
};

struct Engine::Posterior {
  ssm::SmoothingResult smooth;
  std::vector<Vector> mE;
  std::vector<Matrix> SE;
};

struct Engine::PredictionGrid {
  std::vector<double> times;
  std::vector<std::vector<Matrix>> kt;  // [time][q]
  std::vector<Vector> mE;
  std::vector<Matrix> SE;

  Index find(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t - kTimeTol * std::max(1.0, std::abs(t)));
    if (it != times.end() && same_time(*it, t)) return static_cast<Index>(it - times.begin());
    return -1;
  }
};

namespace {

void merge_times(std::vector<double>& grid, std::vector<double> extra) {
  extra.insert(extra.end(), grid.begin(), grid.end());
  std::sort(extra.begin(), extra.end());
  grid.clear();
  for (double t : extra)
    if (grid.empty() || !same_time(grid.back(), t)) grid.push_back(t);
}

}  // namespace

Engine::~Engine() = default;
Engine::Engine(Engine&&) noexcept = default;
Engine& Engine::operator=(Engine&&) noexcept = default;

Engine::Engine(ModelSpec spec, Problem problem) : spec_(std::move(spec)) {
  spec_.validate();
  const Index S = spec_.spatial_dims();
  const Index P = spec_.outputs;
  const Index QD = spec_.Q() * spec_.D();
  const Matrix Wm = spec_.mixing();

  auto check_point = [&](const Point& p) {
    if (p.x.size() != S) throw Error(ErrorCode::ShapeMismatch, "point has the wrong number of spatial coordinates");
    if (!std::isfinite(p.t)) throw Error(ErrorCode::InvalidArgument, "non-finite time");
  };
  std::vector<double> ts, qs;
  for (const auto& o : problem.data) { check_point(o.at); ts.push_back(o.at.t); }
  for (const auto& c : problem.collocation) { check_point(c); ts.push_back(c.t); }
  for (const auto& b : problem.boundary) {
    if (!std::isfinite(b.t)) throw Error(ErrorCode::InvalidArgument, "non-finite time");
    ts.push_back(b.t);
  }
  for (const auto& q : problem.queries) { check_point(q); qs.push_back(q.t); }
  if (ts.empty() && qs.empty()) throw Error(ErrorCode::InvalidArgument, "problem has no time points");
  // The earliest known time anchors the prior on both grids.
  double anchor = std::numeric_limits<double>::infinity();
  for (double t : ts) anchor = std::min(anchor, t);
  for (double t : qs) anchor = std::min(anchor, t);
  ts.push_back(anchor);
  merge_times(times_, ts);
  prediction_times_ = times_;
  merge_times(prediction_times_, qs);

  std::vector<Vector> locs;
  auto intern = [&](const Vector& x) -> Index {
    for (std::size_t i = 0; i < locs.size(); ++i)
      if (same_location(locs[i], x)) return static_cast<Index>(i);
    locs.push_back(x);
    return static_cast<Index>(locs.size() - 1);
  };
  for (const auto& o : problem.data) intern(o.at.x);
  for (const auto& c : problem.collocation) intern(c.x);
  for (const auto& b : problem.boundary)
    for (const auto& x : b.x) {
      if (x.size() != S) throw Error(ErrorCode::ShapeMismatch, "boundary location has wrong dimension");
      intern(x);
    }
  const std::size_t n_model_locs = locs.size();
  for (const auto& q : problem.queries) intern(q.x);
  locations_.resize(static_cast<Index>(locs.size()), S);
  for (std::size_t i = 0; i < locs.size(); ++i)
    if (S > 0) locations_.row(static_cast<Index>(i)) = locs[i].transpose();

  if (spec_.state_locations) {
    state_locations_ = *spec_.state_locations;
  } else if (spec_.mode == Mode::Sparse || spec_.mode == Mode::Structured) {
    state_locations_ = *spec_.inducing;
  } else if (S == 0) {
    state_locations_ = Matrix(1, 0);
  } else {
    const std::size_t n = n_model_locs > 0 ? n_model_locs : locs.size();
    state_locations_.resize(static_cast<Index>(n), S);
    for (std::size_t i = 0; i < n; ++i) state_locations_.row(static_cast<Index>(i)) = locs[i].transpose();
  }
  if (state_locations_.cols() != S)
    throw Error(ErrorCode::ShapeMismatch, "state locations have the wrong number of columns");

  terms_by_time_.assign(times_.size(), {});
  auto add_term = [&](Term t) {
    terms_by_time_[static_cast<std::size_t>(t.time)].push_back(static_cast<Index>(terms_.size()));
    terms_.push_back(std::move(t));
  };
  for (const auto& o : problem.data) {
    if (o.output < 0 || o.output >= P) throw Error(ErrorCode::InvalidArgument, "observation output out of range");
    if (!std::isfinite(o.y)) continue;
    Term t;
    t.time = time_index(o.at.t);
    t.locs = {location_id(o.at.x)};
    t.A = Wm.row(o.output * spec_.D());
    t.y = Vector::Constant(1, o.y);
    t.noise = {o.output};
    t.group = t.locs.front();
    add_term(std::move(t));
  }
  if (!problem.collocation.empty() && !spec_.residual)
    throw Error(ErrorCode::Config, "collocation points given but the model has no residual");
  for (const auto& c : problem.collocation) {
    const physics::ResidualFn& g = *spec_.residual;
    Term t;
    t.time = time_index(c.t);
    t.locs = {location_id(c.x)};
    t.group = t.locs.front();
    if (spec_.colloc_kind == physics::CollocationKind::Probit) {
      if (!g.is_linear || g.G.rows() != 1)
        throw Error(ErrorCode::Config, "probit collocation needs a scalar linear residual");
      t.kind = Term::Kind::Probit;
      t.A = g.G * Wm;
    } else if (g.is_linear) {
      t.kind = Term::Kind::Gaussian;
      t.A = g.G * Wm;
      t.y = Vector::Zero(g.G.rows());
      t.noise.assign(static_cast<std::size_t>(g.G.rows()), P);
    } else {
      t.kind = Term::Kind::Residual;
      t.A = g.active * Wm;
      t.noise = {P};
    }
    add_term(std::move(t));
  }
  for (const auto& b : problem.boundary) {
    if (b.x.size() != b.rows.size() || b.x.empty())
      throw Error(ErrorCode::InvalidArgument, "boundary constraint needs one row per location");
    Term t;
    t.time = time_index(b.t);
    t.A = Matrix::Zero(1, static_cast<Index>(b.x.size()) * QD);
    for (std::size_t i = 0; i < b.x.size(); ++i) {
      if (b.rows[i].size() != P * spec_.D())
        throw Error(ErrorCode::ShapeMismatch, "boundary row must span P*D");
      t.locs.push_back(location_id(b.x[i]));
      t.A.middleCols(static_cast<Index>(i) * QD, QD) = b.rows[i] * Wm;
    }
    t.y = Vector::Constant(1, b.value);
    t.noise = {P + 1};
    t.group = t.locs.front();
    add_term(std::move(t));
  }
  conjugate_ = std::all_of(terms_.begin(), terms_.end(),
                           [](const Term& t) { return t.kind == Term::Kind::Gaussian; });

  hyper_ = Hyperparameters::from_spec(spec_);
  geometry_ = build_geometry(hyper_.log_values);
  reset_sites();
}

Index Engine::time_index(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t - kTimeTol * std::max(1.0, std::abs(t)));
  if (it != times_.end() && same_time(*it, t)) return static_cast<Index>(it - times_.begin());
  return -1;
}

Index Engine::location_id(const Vector& x) const {
  for (Index i = 0; i < locations_.rows(); ++i)
    if (same_location(locations_.row(i).transpose(), x)) return i;
  return -1;
}

Index Engine::emitted_dim() const { return geometry_->prior->layout().emitted_dim; }
Index Engine::state_dim() const { return geometry_->prior->layout().state_dim; }

ModelSpec Engine::current_spec() const { return hyper_.apply(spec_, hyper_.log_values); }

Vector Engine::observation_noise() const { return geometry_->noise.head(spec_.outputs); }

Matrix Engine::location_projector(const Geometry& g, const Vector& x) const {
  const auto& prior = *g.prior;
  const auto& lay = prior.layout();
  const Index D = prior.D();
  const Index ds = prior.orders().d_s();
  Matrix P = Matrix::Zero(prior.Q() * D, lay.emitted_dim);
  for (Index q = 0; q < prior.Q(); ++q) {
    const Matrix sp = prior.basis(q).projector(x);
    for (Index tau = 0; tau < lay.d_t; ++tau)
      for (Index j = 0; j < ds; ++j) {
        const Index row = q * D + tau * ds + j;
        for (Index m = 0; m < lay.n_locations; ++m)
          for (Index jj = 0; jj < lay.d_s_state; ++jj) {
            const double c = sp(j, m * lay.d_s_state + jj);
            if (c != 0.0) P(row, lay.emit_index(q, m, jj, tau)) = c;
          }
      }
  }
  return P;
}

Matrix Engine::location_residual(const Geometry& g, const std::vector<Matrix>& kt, const std::vector<Vector>& xs,
                                 const std::vector<Matrix>& projs) const {
  // projs[i * Q + q] is the spatial projector of location i for latent q.
  const auto& prior = *g.prior;
  const Index Q = prior.Q(), D = prior.D(), ds = prior.orders().d_s(), dt = prior.orders().d_t();
  const Index n = static_cast<Index>(xs.size());
  Matrix R = Matrix::Zero(n * Q * D, n * Q * D);
  bool any = false;
  for (Index q = 0; q < Q; ++q) {
    const Matrix& Kt = kt[static_cast<std::size_t>(q)];
    for (Index a = 0; a < n; ++a)
      for (Index b = a; b < n; ++b) {
        const Matrix Rs = prior.basis(q).residual(xs[static_cast<std::size_t>(a)],
                                                  projs[static_cast<std::size_t>(a * Q + q)],
                                                  xs[static_cast<std::size_t>(b)],
                                                  projs[static_cast<std::size_t>(b * Q + q)]);
        if (Rs.isZero(0.0)) continue;
        any = true;
        for (Index t1 = 0; t1 < dt; ++t1)
          for (Index t2 = 0; t2 < dt; ++t2)
            for (Index j1 = 0; j1 < ds; ++j1)
              for (Index j2 = 0; j2 < ds; ++j2) {
                const double v = Kt(t1, t2) * Rs(j1, j2);
                const Index r = a * Q * D + q * D + t1 * ds + j1;
                const Index c = b * Q * D + q * D + t2 * ds + j2;
                R(r, c) = v;
                R(c, r) = v;
              }
      }
  }
  if (!any) return Matrix();
  return R;
}

std::unique_ptr<Engine::Geometry> Engine::build_geometry(const Vector& lv) const {
  auto g = std::make_unique<Geometry>();
  g->spec = hyper_.names.empty() ? spec_ : hyper_.apply(spec_, lv);
  const ModelSpec& s = g->spec;
  g->prior.emplace(s.latents, s.orders, state_locations_, s.mode == Mode::Structured, s.jitter,
                   s.diffuse_variance);
  const auto& prior = *g->prior;
  g->model = prior.state_space(times_);
  const auto& lay = prior.layout();
  g->emitted.resize(static_cast<std::size_t>(lay.emitted_dim));
  for (Index e = 0; e < lay.emitted_dim; ++e)
    for (Index c = 0; c < lay.state_dim; ++c)
      if (g->model.emission(e, c) != 0.0) g->emitted[static_cast<std::size_t>(e)] = c;
  g->kt.assign(times_.size(), {});
  for (Index q = 0; q < prior.Q(); ++q) {
    auto m = prior.temporal_marginals(q, times_);
    for (std::size_t k = 0; k < times_.size(); ++k) g->kt[k].push_back(std::move(m[k]));
  }
  g->W = s.mixing();
  g->noise = noise_slots(s);

  const Index L = locations_.rows();
  g->loc_spatial.resize(static_cast<std::size_t>(L));
  g->loc_proj.resize(static_cast<std::size_t>(L));
  std::vector<bool> needed(static_cast<std::size_t>(L), false);
  for (const auto& t : terms_)
    for (Index l : t.locs) needed[static_cast<std::size_t>(l)] = true;
  for (Index l = 0; l < L; ++l) {
    if (!needed[static_cast<std::size_t>(l)]) continue;
    const Vector x = locations_.row(l).transpose();
    for (Index q = 0; q < prior.Q(); ++q) g->loc_spatial[static_cast<std::size_t>(l)].push_back(prior.basis(q).projector(x));
    g->loc_proj[static_cast<std::size_t>(l)] = location_projector(*g, x);
  }
  const Index QD = prior.Q() * prior.D();
  g->term_B.resize(terms_.size());
  g->term_R.resize(terms_.size());
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    const Term& t = terms_[i];
    Matrix B = Matrix::Zero(t.A.rows(), lay.emitted_dim);
    std::vector<Vector> xs;
    std::vector<Matrix> projs;
    for (std::size_t a = 0; a < t.locs.size(); ++a) {
      const auto l = static_cast<std::size_t>(t.locs[a]);
      B.noalias() += t.A.middleCols(static_cast<Index>(a) * QD, QD) * g->loc_proj[l];
      xs.push_back(locations_.row(t.locs[a]).transpose());
      for (const auto& sp : g->loc_spatial[l]) projs.push_back(sp);
    }
    g->term_B[i] = std::move(B);
    const Matrix R = location_residual(*g, g->kt[static_cast<std::size_t>(t.time)], xs, projs);
    if (R.size() > 0) {
      Matrix Rw = t.A * R * t.A.transpose();
      symmetrize(Rw);
      g->term_R[i] = std::move(Rw);
    }
  }
  return g;
}

void Engine::ensure_site_observations() const {
  if (site_obs_) return;
  std::vector<ssm::Observation> obs;
  obs.reserve(sites_.size());
  for (const auto& s : sites_) obs.push_back(ssm::site_observation(s));
  site_obs_ = std::move(obs);
}

std::unique_ptr<Engine::Posterior> Engine::run_smoother(const Geometry& g) const {
  ensure_site_observations();
  auto post = std::make_unique<Posterior>();
  const auto filt = ssm::kalman_filter(g.model, *site_obs_);
  post->smooth = ssm::rts_smooth(g.model, filt);
  post->mE.reserve(times_.size());
  post->SE.reserve(times_.size());
  for (const auto& m : post->smooth.marginals) {
    post->mE.push_back(take(m.mean, g.emitted));
    post->SE.push_back(take(m.cov, g.emitted, g.emitted));
  }
  return post;
}

void Engine::posterior_changed(bool sites_changed) {
  if (sites_changed) site_obs_.reset();
  posterior_ = run_smoother(*geometry_);
  prediction_.reset();
}

void Engine::refresh() {
  geometry_ = build_geometry(hyper_.log_values);
  posterior_changed(false);
}

const Engine::PredictionGrid& Engine::prediction_grid(const std::vector<double>& needed) const {
  std::vector<double> extra;
  for (double t : needed) {
    if (!std::isfinite(t)) throw Error(ErrorCode::InvalidArgument, "non-finite query time");
    auto it = std::lower_bound(prediction_times_.begin(), prediction_times_.end(),
                               t - kTimeTol * std::max(1.0, std::abs(t)));
    if (it == prediction_times_.end() || !same_time(*it, t)) extra.push_back(t);
  }
  const Geometry& g = *geometry_;
  const auto& prior = *g.prior;
  if (!extra.empty()) {
    const double lo = *std::min_element(extra.begin(), extra.end());
    if (lo < times_.front() && !same_time(lo, times_.front()))
      for (Index q = 0; q < prior.Q(); ++q)
        if (!prior.latents()[static_cast<std::size_t>(q)].temporal.stationary())
          throw Error(ErrorCode::InvalidArgument,
                      "query time precedes the start of a non-stationary prior; pass it as a query up front");
    merge_times(prediction_times_, std::move(extra));
    prediction_.reset();
  }
  if (prediction_) return *prediction_;

  auto pg = std::make_unique<PredictionGrid>();
  pg->times = prediction_times_;
  if (pg->times.size() == times_.size()) {
    pg->kt = g.kt;
    pg->mE = posterior_->mE;
    pg->SE = posterior_->SE;
  } else {
    ensure_site_observations();
    const ssm::StateSpaceModel model = prior.state_space(pg->times);
    std::vector<ssm::Observation> obs(pg->times.size());
    const Index E = prior.layout().emitted_dim;
    for (std::size_t i = 0; i < pg->times.size(); ++i) {
      const Index k = time_index(pg->times[i]);
      if (k >= 0) {
        obs[i] = (*site_obs_)[static_cast<std::size_t>(k)];
      } else {
        obs[i].y.resize(0);
        obs[i].noise.resize(0);
        obs[i].H.resize(0, E);
      }
    }
    const auto smooth = ssm::rts_smooth(model, ssm::kalman_filter(model, obs));
    for (const auto& m : smooth.marginals) {
      pg->mE.push_back(take(m.mean, g.emitted));
      pg->SE.push_back(take(m.cov, g.emitted, g.emitted));
    }
    pg->kt.assign(pg->times.size(), {});
    for (Index q = 0; q < prior.Q(); ++q) {
      auto m = prior.temporal_marginals(q, pg->times);
      for (std::size_t i = 0; i < pg->times.size(); ++i) pg->kt[i].push_back(std::move(m[i]));
    }
  }
  prediction_ = std::move(pg);
  return *prediction_;
}

void Engine::set_log_hyperparameters(const Vector& lv) {
  if (lv.size() != hyper_.log_values.size())
    throw Error(ErrorCode::ShapeMismatch, "hyperparameter vector has the wrong length");
  hyper_.log_values = lv;
  refresh();
}

void Engine::reset_sites() {
  const Index E = emitted_dim();
  sites_.clear();
  for (std::size_t k = 0; k < times_.size(); ++k)
    sites_.push_back(ssm::SurrogateSite::uninformative(E, static_cast<Index>(k)));
  posterior_changed();
}

void Engine::set_sites(std::vector<ssm::SurrogateSite> sites) {
  if (sites.size() != times_.size()) throw Error(ErrorCode::ShapeMismatch, "one site per time step is required");
  for (const auto& s : sites)
    if (s.shift.size() != emitted_dim() || s.precision.rows() != emitted_dim())
      throw Error(ErrorCode::ShapeMismatch, "site dimension does not match the emitted state");
  sites_ = std::move(sites);
  posterior_changed();
}

const ssm::SmoothingResult& Engine::posterior() const { return posterior_->smooth; }

double Engine::term_ell(const Term& t, const Geometry& g, const Posterior& post, Index k,
                        const Vector& noise) const {
  const auto i = static_cast<std::size_t>(&t - terms_.data());
  const Matrix& B = g.term_B[i];
  const Vector mw = B * post.mE[static_cast<std::size_t>(k)];
  Matrix Cw = B * post.SE[static_cast<std::size_t>(k)] * B.transpose();
  if (g.term_R[i].size() > 0) Cw += g.term_R[i];
  switch (t.kind) {
    case Term::Kind::Gaussian: {
      double v = 0.0;
      for (Index r = 0; r < mw.size(); ++r) {
        const double s2 = noise(t.noise[static_cast<std::size_t>(r)]);
        const double e = t.y(r) - mw(r);
        v += -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * (e * e + Cw(r, r)) / s2;
      }
      return v;
    }
    case Term::Kind::Residual:
      return expected_residual(*g.spec.residual, mw, Cw, noise(t.noise.front()), true,
                               g.spec.quadrature_order).ell;
    case Term::Kind::Probit:
      return expected_probit(mw(0), Cw(0, 0), g.spec.probit_scale, g.spec.quadrature_order).ell;
  }
  return 0.0;
}

MinibatchEstimate Engine::gradients(const Geometry& g, const Posterior& post, Index batch_size,
                                    std::mt19937_64* rng) const {
  const Index E = g.prior->layout().emitted_dim;
  MinibatchEstimate out;
  out.gradient.reserve(times_.size());
  for (std::size_t k = 0; k < times_.size(); ++k) {
    const auto& ids = terms_by_time_[k];
    Matrix Lam = Matrix::Zero(E, E);
    Vector g1 = Vector::Zero(E);
    // Spatial mini-batching: sample location groups without replacement.
    std::vector<Index> groups;
    for (Index id : ids) {
      const Index gr = terms_[static_cast<std::size_t>(id)].group;
      if (std::find(groups.begin(), groups.end(), gr) == groups.end()) groups.push_back(gr);
    }
    double weight = 1.0;
    std::vector<Index> chosen = groups;
    if (batch_size > 0 && static_cast<Index>(groups.size()) > batch_size && rng) {
      chosen.clear();
      std::vector<Index> pool = groups;
      for (Index b = 0; b < batch_size; ++b) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(b), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(b)], pool[pick(*rng)]);
        chosen.push_back(pool[static_cast<std::size_t>(b)]);
      }
      weight = static_cast<double>(groups.size()) / static_cast<double>(batch_size);
    }
    for (Index id : ids) {
      const Term& t = terms_[static_cast<std::size_t>(id)];
      if (std::find(chosen.begin(), chosen.end(), t.group) == chosen.end()) continue;
      const auto i = static_cast<std::size_t>(id);
      const Matrix& B = g.term_B[i];
      const Vector mw = B * post.mE[k];
      Matrix Cw = B * post.SE[k] * B.transpose();
      if (g.term_R[i].size() > 0) Cw += g.term_R[i];
      Vector gbar;
      Matrix hbar;
      double ell = 0.0;
      switch (t.kind) {
        case Term::Kind::Gaussian: {
          gbar.resize(mw.size());
          hbar = Matrix::Zero(mw.size(), mw.size());
          for (Index r = 0; r < mw.size(); ++r) {
            const double s2 = g.noise(t.noise[static_cast<std::size_t>(r)]);
            const double e = t.y(r) - mw(r);
            gbar(r) = e / s2;
            hbar(r, r) = -1.0 / s2;
            ell += -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * (e * e + Cw(r, r)) / s2;
          }
          break;
        }
        case Term::Kind::Residual: {
          TermMoments tm = expected_residual(*g.spec.residual, mw, Cw, g.noise(t.noise.front()),
                                             g.spec.gauss_newton, g.spec.quadrature_order);
          if (!g.spec.gauss_newton && g.spec.clip_curvature) tm.hess = clip_negative_semidefinite(tm.hess);
          gbar = tm.grad;
          hbar = tm.hess;
          ell = tm.ell;
          break;
        }
        case Term::Kind::Probit: {
          TermMoments tm = expected_probit(mw(0), Cw(0, 0), g.spec.probit_scale, g.spec.quadrature_order);
          gbar = tm.grad;
          hbar = tm.hess;
          ell = tm.ell;
          break;
        }
      }
      out.ell += weight * ell;
      g1.noalias() += weight * B.transpose() * gbar;
      Lam.noalias() -= weight * B.transpose() * hbar * B;
    }
    symmetrize(Lam);
    if (g.spec.mean_field) {
      const auto& lay = g.prior->layout();
      for (Index q = 0; q < lay.Q; ++q)
        for (Index r = 0; r < lay.Q; ++r) {
          if (q == r) continue;
          const Index eq = (q + 1 < lay.Q ? lay.emit_offset[static_cast<std::size_t>(q + 1)] : E) -
                           lay.emit_offset[static_cast<std::size_t>(q)];
          const Index er = (r + 1 < lay.Q ? lay.emit_offset[static_cast<std::size_t>(r + 1)] : E) -
                           lay.emit_offset[static_cast<std::size_t>(r)];
          Lam.block(lay.emit_offset[static_cast<std::size_t>(q)], lay.emit_offset[static_cast<std::size_t>(r)], eq, er).setZero();
        }
    }
    ssm::SurrogateSite s;
    s.time_index = static_cast<Index>(k);
    s.precision = std::move(Lam);
    s.shift = g1 + s.precision * post.mE[k];
    out.gradient.push_back(std::move(s));
  }
  return out;
}

MinibatchEstimate Engine::ell_gradients() const { return gradients(*geometry_, *posterior_, 0, nullptr); }

MinibatchEstimate Engine::minibatch_ell(Index batch_size, std::mt19937_64& rng) const {
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be at least 1");
  return gradients(*geometry_, *posterior_, batch_size, &rng);
}

double Engine::ell() const {
  double v = 0.0;
  for (std::size_t k = 0; k < times_.size(); ++k)
    for (Index id : terms_by_time_[k])
      v += term_ell(terms_[static_cast<std::size_t>(id)], *geometry_, *posterior_, static_cast<Index>(k),
                    geometry_->noise);
  return v;
}

void Engine::check_sites_psd(const std::vector<ssm::SurrogateSite>& sites) {
  for (const auto& s : sites) {
    if (s.is_uninformative()) continue;
    Matrix m = s.precision;
    symmetrize(m);
    const double scale = std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
    m.diagonal().array() += 1e-10 * scale;
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) {
      ++psd_failures_;
      throw Error(ErrorCode::SitePrecisionNotPSD,
                  "site precision at step " + std::to_string(s.time_index) + " is not PSD");
    }
  }
}

void Engine::natgrad_step(double beta, std::mt19937_64* rng, Index batch_size) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta must lie in [0, 1]");
  if (beta == 0.0) return;
  MinibatchEstimate est = gradients(*geometry_, *posterior_, batch_size, rng);
  std::vector<ssm::SurrogateSite> next = sites_;
  for (std::size_t k = 0; k < next.size(); ++k) {
    next[k].precision = (1.0 - beta) * next[k].precision + beta * est.gradient[k].precision;
    next[k].shift = (1.0 - beta) * next[k].shift + beta * est.gradient[k].shift;
    symmetrize(next[k].precision);
  }
  check_sites_psd(next);
  sites_ = std::move(next);
  posterior_changed();
}

ElboReport Engine::elbo_of(const Geometry& g, const Posterior& post, const Vector* noise) const {
  ElboReport r;
  const Vector& nz = noise ? *noise : g.noise;
  for (std::size_t k = 0; k < times_.size(); ++k)
    for (Index id : terms_by_time_[k])
      r.ell += term_ell(terms_[static_cast<std::size_t>(id)], g, post, static_cast<Index>(k), nz);
  for (std::size_t k = 0; k < times_.size(); ++k) {
    const ssm::Observation& o = (*site_obs_)[k];
    if (o.rank() == 0) continue;
    const Vector hm = o.H * post.mE[k];
    const Matrix HS = o.H * post.SE[k];
    for (Index i = 0; i < o.rank(); ++i) {
      const double e = o.y(i) - hm(i);
      const double v = HS.row(i).dot(o.H.row(i));
      r.site_correction += -0.5 * (kLog2Pi + std::log(o.noise(i))) - 0.5 * (e * e + v) / o.noise(i);
    }
  }
  r.surrogate_log_marginal = post.smooth.log_marginal;
  r.total = r.ell - r.site_correction + r.surrogate_log_marginal;
  return r;
}

ElboReport Engine::elbo() const {
  ensure_site_observations();
  return elbo_of(*geometry_, *posterior_);
}

double Engine::elbo_at(const Vector& lv) const {
  ensure_site_observations();
  if (lv.size() != hyper_.log_values.size())
    throw Error(ErrorCode::ShapeMismatch, "hyperparameter vector has the wrong length");
  // Noise leaves the prior and the smoothed posterior untouched.
  bool noise_only = true;
  for (Index i = 0; i < lv.size() && noise_only; ++i)
    if (lv(i) != hyper_.log_values(i) && !hyper_.is_noise(i)) noise_only = false;
  if (noise_only) {
    const Vector nz = noise_slots(hyper_.apply(spec_, lv));
    return elbo_of(*geometry_, *posterior_, &nz).total;
  }
  const auto g = build_geometry(lv);
  const auto post = run_smoother(*g);
  return elbo_of(*g, *post).total;
}

ssm::SmoothingResult Engine::eks_solve() {
  const Geometry& g = *geometry_;
  const Index E = g.prior->layout().emitted_dim;
  const Index n = g.prior->layout().state_dim;
  std::vector<ssm::SurrogateSite> sites;
  ssm::GaussianBelief cur = g.model.init;
  for (std::size_t k = 0; k < times_.size(); ++k) {
    if (k > 0) cur = ssm::predict(cur, g.model.steps[k]);
    const Vector mE = take(cur.mean, g.emitted);
    std::vector<Matrix> Hs;
    std::vector<Vector> ys;
    std::vector<Matrix> Rs;
    for (Index id : terms_by_time_[k]) {
      const Term& t = terms_[static_cast<std::size_t>(id)];
      const auto i = static_cast<std::size_t>(id);
      const Matrix& B = g.term_B[i];
      const Matrix& Rw = g.term_R[i];
      switch (t.kind) {
        case Term::Kind::Gaussian: {
          Matrix R = Matrix::Zero(B.rows(), B.rows());
          for (Index r = 0; r < B.rows(); ++r) R(r, r) = g.noise(t.noise[static_cast<std::size_t>(r)]);
          if (Rw.size() > 0) R += Rw;
          Hs.push_back(B);
          ys.push_back(t.y);
          Rs.push_back(R);
          break;
        }
        case Term::Kind::Residual: {
          const physics::ResidualFn& res = *g.spec.residual;
          const Vector mw = B * mE;
          const Vector r = res.reduced(mw);
          const Matrix J = res.reduced_jacobian(mw);
          Matrix R = g.noise(t.noise.front()) * Matrix::Identity(r.size(), r.size());
          if (Rw.size() > 0) R += J * Rw * J.transpose();
          Hs.push_back(J * B);
          ys.push_back(J * mw - r);
          Rs.push_back(R);
          break;
        }
        case Term::Kind::Probit:
          throw Error(ErrorCode::Unsupported, "the extended Kalman smoother needs Gaussian collocation");
      }
    }
    ssm::SurrogateSite site = ssm::SurrogateSite::uninformative(E, static_cast<Index>(k));
    if (!Hs.empty()) {
      Index rows = 0;
      for (const auto& h : Hs) rows += h.rows();
      Matrix H(rows, E);
      Vector y(rows);
      Matrix R = Matrix::Zero(rows, rows);
      Index off = 0;
      for (std::size_t a = 0; a < Hs.size(); ++a) {
        H.middleRows(off, Hs[a].rows()) = Hs[a];
        y.segment(off, ys[a].size()) = ys[a];
        R.block(off, off, Rs[a].rows(), Rs[a].cols()) = Rs[a];
        off += Hs[a].rows();
      }
      Matrix Hx = Matrix::Zero(rows, n);
      for (Index e = 0; e < E; ++e) Hx.col(g.emitted[static_cast<std::size_t>(e)]) = H.col(e);
      cur = ssm::kalman_update(cur, Hx, y, R);
      const auto llt = robust_cholesky(R, 1e-14, ErrorCode::InnovationNotPSD);
      const Matrix RiH = llt.solve(H);
      site.precision = H.transpose() * RiH;
      symmetrize(site.precision);
      site.shift = RiH.transpose() * y;
    }
    sites.push_back(std::move(site));
  }
  check_sites_psd(sites);
  sites_ = std::move(sites);
  posterior_changed();
  return posterior_->smooth;
}

Marginal Engine::joint_marginal(double t, const std::vector<Vector>& xs, bool exact) const {
  const PredictionGrid& pg = prediction_grid({t});
  const auto k = static_cast<std::size_t>(pg.find(t));
  const Geometry& g = *geometry_;
  const auto& prior = *g.prior;
  const Index QD = prior.Q() * prior.D();
  const Index n = static_cast<Index>(xs.size());
  Matrix P(n * QD, prior.layout().emitted_dim);
  std::vector<Matrix> projs;
  for (Index i = 0; i < n; ++i) {
    const Vector& x = xs[static_cast<std::size_t>(i)];
    if (x.size() != spec_.spatial_dims()) throw Error(ErrorCode::ShapeMismatch, "query has wrong spatial dimension");
    if (exact && spec_.mode != Mode::Full && spec_.mode != Mode::Eks) {
      if (spec_.mode == Mode::Structured || prior.basis(0).match(x) < 0)
        throw Error(ErrorCode::QueryOutsideSpatialModel,
                    "exact marginals are only available at the inducing locations of a sparse model");
    }
    P.middleRows(i * QD, QD) = location_projector(g, x);
    for (Index q = 0; q < prior.Q(); ++q) projs.push_back(prior.basis(q).projector(x));
  }
  Marginal out;
  out.mean = P * pg.mE[k];
  out.cov = P * pg.SE[k] * P.transpose();
  const Matrix R = location_residual(g, pg.kt[k], xs, projs);
  if (R.size() > 0) out.cov += R;
  symmetrize(out.cov);
  return out;
}

Marginal Engine::latent_marginal(const Point& p, bool exact) const {
  return joint_marginal(p.t, {p.x}, exact);
}

OutputPrediction Engine::predict(const Point& p) const {
  const Marginal m = latent_marginal(p);
  const Matrix& W = geometry_->W;
  const Index D = spec_.D();
  OutputPrediction out;
  out.mean.resize(spec_.outputs);
  out.variance.resize(spec_.outputs);
  for (Index o = 0; o < spec_.outputs; ++o) {
    const RowVector w = W.row(o * D);
    out.mean(o) = w.dot(m.mean);
    out.variance(o) = std::max(0.0, (w * m.cov * w.transpose())(0, 0));
  }
  return out;
}

std::vector<OutputPrediction> Engine::predict(const std::vector<Point>& points) const {
  const Geometry& g = *geometry_;
  const auto& prior = *g.prior;
  const Index D = spec_.D();
  struct Cached {
    Matrix P;
    std::vector<Matrix> spatial;
  };
  std::vector<std::optional<Cached>> cache(static_cast<std::size_t>(locations_.rows()));
  std::vector<double> ts;
  ts.reserve(points.size());
  for (const Point& p : points) ts.push_back(p.t);
  const PredictionGrid& pg = prediction_grid(ts);
  std::vector<OutputPrediction> out;
  out.reserve(points.size());
  for (const Point& p : points) {
    const auto k = static_cast<std::size_t>(pg.find(p.t));
    if (p.x.size() != spec_.spatial_dims()) throw Error(ErrorCode::ShapeMismatch, "query has wrong spatial dimension");
    const Index id = location_id(p.x);
    Cached local;
    const Cached* c = nullptr;
    if (id >= 0 && cache[static_cast<std::size_t>(id)]) {
      c = &*cache[static_cast<std::size_t>(id)];
    } else {
      local.P = location_projector(g, p.x);
      for (Index q = 0; q < prior.Q(); ++q) local.spatial.push_back(prior.basis(q).projector(p.x));
      if (id >= 0) {
        cache[static_cast<std::size_t>(id)] = std::move(local);
        c = &*cache[static_cast<std::size_t>(id)];
      } else {
        c = &local;
      }
    }
    // Only the value rows of the outputs are needed: project W rows first.
    Matrix WP(spec_.outputs, c->P.cols());
    for (Index o = 0; o < spec_.outputs; ++o) WP.row(o) = g.W.row(o * D) * c->P;
    const Matrix& SE = pg.SE[k];
    OutputPrediction op;
    op.mean = WP * pg.mE[k];
    op.variance = (WP * SE).cwiseProduct(WP).rowwise().sum();
    const Matrix R = location_residual(g, pg.kt[k], {p.x}, c->spatial);
    for (Index o = 0; o < spec_.outputs; ++o) {
      if (R.size() > 0) {
        const RowVector w = g.W.row(o * D);
        op.variance(o) += (w * R * w.transpose())(0, 0);
      }
      op.variance(o) = std::max(0.0, op.variance(o));
    }
    out.push_back(std::move(op));
  }
  return out;
}

FitResult Engine::fit(const TrainConfig& cfg, const HeldOutFn& held_out) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  if (cfg.epochs < 0 || cfg.inner_steps < 1) throw Error(ErrorCode::Config, "invalid training schedule");
  std::mt19937_64 rng(cfg.seed);
  const Index H = hyper_.log_values.size();

  // Hyperparameters that influence the objective at all.
  std::vector<bool> relevant(static_cast<std::size_t>(H), true);
  std::vector<bool> used_slot(static_cast<std::size_t>(spec_.outputs + 2), false);
  for (const auto& t : terms_)
    for (Index s : t.noise) used_slot[static_cast<std::size_t>(s)] = true;
  for (Index i = 0; i < H; ++i) {
    const std::string& n = hyper_.names[static_cast<std::size_t>(i)];
    if (n == "noise.colloc") relevant[static_cast<std::size_t>(i)] = used_slot[static_cast<std::size_t>(spec_.outputs)];
    else if (n == "noise.boundary") relevant[static_cast<std::size_t>(i)] = used_slot[static_cast<std::size_t>(spec_.outputs + 1)];
    else if (n.rfind("noise.obs", 0) == 0) relevant[static_cast<std::size_t>(i)] = used_slot[std::stoul(n.substr(9))];
  }
  std::vector<bool> trainable(static_cast<std::size_t>(H), false);
  for (Index i = 0; i < H; ++i) {
    const std::string& n = hyper_.names[static_cast<std::size_t>(i)];
    bool on;
    if (!cfg.trainable) on = !(n.find(".spatial") != std::string::npos && n.ends_with(".variance"));
    else on = std::find(cfg.trainable->begin(), cfg.trainable->end(), n) != cfg.trainable->end();
    trainable[static_cast<std::size_t>(i)] = on && relevant[static_cast<std::size_t>(i)];
  }
  for (const auto& n : cfg.trainable.value_or(std::vector<std::string>{}))
    if (hyper_.find(n) < 0) throw Error(ErrorCode::Config, "unknown trainable hyperparameter '" + n + "'");

  Vector adam_m = Vector::Zero(H), adam_v = Vector::Zero(H);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int adam_t = 0;
  const int freeze_until = static_cast<int>(std::ceil(cfg.freeze_fraction * cfg.epochs));

  Vector good_hyper = hyper_.log_values;
  std::vector<ssm::SurrogateSite> good_sites = sites_;
  FitResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double beta = conjugate_ ? 1.0 : (epoch < cfg.warmup_epochs ? cfg.beta_warmup : cfg.beta);
    for (int s = 0; s < cfg.inner_steps; ++s) natgrad_step(beta, &rng, cfg.batch_size);
    const ElboReport rep = elbo();
    if (!std::isfinite(rep.total)) {
      hyper_.log_values = good_hyper;
      refresh();
      set_sites(good_sites);
      throw Error(ErrorCode::Diverged, "ELBO became non-finite at epoch " + std::to_string(epoch));
    }
    good_hyper = hyper_.log_values;
    good_sites = sites_;

    TraceRow row;
    row.epoch = epoch;
    row.elbo = rep.total;
    row.ell = rep.ell;
    row.rmse = row.nlpd = std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch + 1 == cfg.epochs;
    if (held_out && (last || cfg.trace_every <= 1 || epoch % cfg.trace_every == 0)) {
      const HeldOutMetrics hm = held_out(*this);
      row.rmse = hm.rmse;
      row.nlpd = hm.nlpd;
    }

    std::vector<Index> active;
    for (Index i = 0; i < H; ++i)
      if (trainable[static_cast<std::size_t>(i)] && !(hyper_.is_noise(i) && epoch < freeze_until))
        active.push_back(i);
    if (!active.empty() && !last) {
      ensure_site_observations();
      std::vector<double> fplus(active.size()), fminus(active.size());
      const Vector base = hyper_.log_values;
      parallel_for(2 * active.size(), [&](std::size_t job) {
        const std::size_t a = job / 2;
        Vector lv = base;
        lv(active[a]) += (job % 2 == 0 ? cfg.fd_step : -cfg.fd_step);
        const double f = elbo_at(lv);
        (job % 2 == 0 ? fplus : fminus)[a] = f;
      });
      ++adam_t;
      Vector next = base;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const Index i = active[a];
        const double grad = (fplus[a] - fminus[a]) / (2.0 * cfg.fd_step);
        if (!std::isfinite(grad)) continue;
        adam_m(i) = b1 * adam_m(i) + (1 - b1) * grad;
        adam_v(i) = b2 * adam_v(i) + (1 - b2) * grad * grad;
        const double mhat = adam_m(i) / (1 - std::pow(b1, adam_t));
        const double vhat = adam_v(i) / (1 - std::pow(b2, adam_t));
        next(i) += cfg.adam_lr * mhat / (std::sqrt(vhat) + eps);
      }
      set_log_hyperparameters(next);
    }
    row.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    result.trace.push_back(row);
  }
  result.epochs = cfg.epochs;
  result.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return result;
}

}  // namespace physs::infer
