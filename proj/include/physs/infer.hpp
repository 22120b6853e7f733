#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "physs/physics.hpp"
#include "physs/ssm.hpp"
#include "physs/stprior.hpp"

namespace physs::infer {

using kernels::DerivativeOrders;

enum class Mode { Full, Sparse, Structured, Eks };

std::string_view mode_name(Mode m) noexcept;
Mode parse_mode(std::string_view name);

struct NoiseSpec {
  std::vector<double> obs{0.01};  // variance per output
  double colloc = 1e-3;
  double boundary = 1e-4;
  double colloc_floor = 1e-6;
};

struct ModelSpec {
  Mode mode = Mode::Full;
  std::vector<stprior::LatentPrior> latents;
  DerivativeOrders orders;
  Index outputs = 1;
  Matrix W;  // (P*D) x (Q*D); empty means identity (P = Q)
  std::optional<physics::ResidualFn> residual;
  physics::CollocationKind colloc_kind = physics::CollocationKind::Gaussian;
  double probit_scale = 0.1;
  NoiseSpec noise;
  std::optional<Matrix> inducing;         // state locations for sparse/structured
  std::optional<Matrix> state_locations;  // overrides the full-mode default
  double jitter = 1e-8;
  double diffuse_variance = kernels::kDefaultDiffuseVariance;
  bool gauss_newton = true;
  bool clip_curvature = false;  // only used when gauss_newton is off
  bool mean_field = false;
  int quadrature_order = 20;

  Index Q() const { return static_cast<Index>(latents.size()); }
  Index D() const { return orders.D(); }
  Index spatial_dims() const;
  Matrix mixing() const;
  void validate() const;
};

struct Point {
  double t = 0.0;
  Vector x;  // spatial coordinates (empty for time series)
};

struct ScalarObservation {
  Point at;
  Index output = 0;
  double y = 0.0;
};

/// sum_i rows[i] . F(t, x[i]) = value, observed with the boundary noise.
struct BoundaryConstraint {
  double t = 0.0;
  std::vector<Vector> x;
  std::vector<RowVector> rows;  // each over P*D
  double value = 0.0;
};

struct Problem {
  std::vector<ScalarObservation> data;
  std::vector<Point> collocation;
  std::vector<BoundaryConstraint> boundary;
  std::vector<Point> queries;
};

/// Log-space hyperparameters with stable names such as
/// "latent0.temporal.lengthscale" or "noise.obs0".
struct Hyperparameters {
  std::vector<std::string> names;
  Vector log_values;

  static Hyperparameters from_spec(const ModelSpec& spec);
  ModelSpec apply(const ModelSpec& base, const Vector& log_values) const;
  Index find(const std::string& name) const;  // -1 when absent
  bool is_noise(Index i) const;
};

struct ElboReport {
  double ell = 0.0;
  double site_correction = 0.0;
  double surrogate_log_marginal = 0.0;
  double total = 0.0;
};

/// Gaussian over the Q*D latent derivative stack at one or more locations.
struct Marginal {
  Vector mean;
  Matrix cov;
};

struct OutputPrediction {
  Vector mean;      // per output
  Vector variance;  // latent variance per output (no observation noise)
};

/// Expected log-likelihood of one term and its expected gradient and
/// curvature in the reduced inputs.
struct TermMoments {
  double ell = 0.0;
  Vector grad;
  Matrix hess;
};

/// Gauss-Hermite nodes and weights for E[f(x)], x ~ N(0, 1).
void gauss_hermite(int order, std::vector<double>& nodes, std::vector<double>& weights);

/// E over w ~ N(m, C) of the collocation log-likelihood (tensor quadrature).
TermMoments expected_residual(const physics::ResidualFn& g, const Vector& m, const Matrix& C,
                              double noise, bool gauss_newton, int order);
/// E over w ~ N(m, v) of log Phi(w / scale).
TermMoments expected_probit(double m, double v, double scale, int order);

/// Precision increment B' E[J' J] B / noise of a collocation term whose
/// reduced inputs are w = B u + e, e ~ N(0, R). Always PSD.
Matrix gauss_newton_curvature(const Matrix& B, const Matrix& R, const physics::ResidualFn& g,
                              const Vector& mean_u, const Matrix& cov_u, double noise, int order);

struct MinibatchEstimate {
  double ell = 0.0;
  std::vector<ssm::SurrogateSite> gradient;  // natural-parameter gradient per time step
};

struct TrainConfig {
  int epochs = 100;
  double adam_lr = 0.01;
  double beta_warmup = 0.01;
  double beta = 0.1;
  int warmup_epochs = 0;
  int inner_steps = 1;
  double freeze_fraction = 0.4;
  Index batch_size = 0;  // 0 means every location
  std::uint64_t seed = 0;
  // Unset means every hyperparameter except spatial variances; empty freezes all.
  std::optional<std::vector<std::string>> trainable;
  double fd_step = 1e-4;
  int trace_every = 1;
};

struct TraceRow {
  int epoch = 0;
  double elbo = 0.0;
  double ell = 0.0;
  double rmse = 0.0;
  double nlpd = 0.0;
  double seconds = 0.0;
};

struct HeldOutMetrics {
  double rmse = 0.0;
  double nlpd = 0.0;
};

class Engine;
using HeldOutFn = std::function<HeldOutMetrics(const Engine&)>;

struct FitResult {
  std::vector<TraceRow> trace;
  int epochs = 0;
  double seconds = 0.0;
};

/// Physics-informed state-space GP. Training runs on the data, collocation
/// and boundary times; other times are smoothed in on demand at prediction.
/// Sites live on the emitted part of the state. Prediction methods share a
/// lazily built cache and must not be called concurrently.
class Engine {
 public:
  Engine(ModelSpec spec, Problem problem);
  ~Engine();
  Engine(Engine&&) noexcept;
  Engine& operator=(Engine&&) noexcept;

  const ModelSpec& base_spec() const { return spec_; }
  ModelSpec current_spec() const;
  const std::vector<double>& times() const { return times_; }
  Index time_index(double t) const;  // -1 when t is not on the training grid
  const Matrix& state_locations() const { return state_locations_; }
  Index emitted_dim() const;
  Index state_dim() const;
  bool conjugate() const { return conjugate_; }

  const Hyperparameters& hyperparameters() const { return hyper_; }
  void set_log_hyperparameters(const Vector& log_values);

  const std::vector<ssm::SurrogateSite>& sites() const { return sites_; }
  void set_sites(std::vector<ssm::SurrogateSite> sites);
  void reset_sites();

  /// One CVI update: site <- (1 - beta) site + beta * gradient, then smooth.
  void natgrad_step(double beta, std::mt19937_64* rng = nullptr, Index batch_size = 0);
  /// Natural-parameter ELL gradients at the current posterior.
  MinibatchEstimate ell_gradients() const;
  MinibatchEstimate minibatch_ell(Index batch_size, std::mt19937_64& rng) const;
  double ell() const;
  ElboReport elbo() const;
  /// ELBO with different hyperparameters and the current sites.
  double elbo_at(const Vector& log_values) const;

  /// Single-pass extended Kalman smoother; leaves the equivalent sites set.
  ssm::SmoothingResult eks_solve();

  const ssm::SmoothingResult& posterior() const;
  /// Joint marginal of the latent derivative stacks at locations sharing time t.
  Marginal joint_marginal(double t, const std::vector<Vector>& xs, bool exact = false) const;
  Marginal latent_marginal(const Point& p, bool exact = false) const;
  OutputPrediction predict(const Point& p) const;
  /// Batched predict; reuses spatial projectors across repeated locations.
  std::vector<OutputPrediction> predict(const std::vector<Point>& points) const;
  /// Current observation noise variance per output.
  Vector observation_noise() const;

  FitResult fit(const TrainConfig& config, const HeldOutFn& held_out = {});

  /// Number of site precision blocks that failed a Cholesky check.
  std::size_t psd_failures() const { return psd_failures_; }

 private:
  struct Term;
  struct Geometry;
  struct Posterior;

  std::unique_ptr<Geometry> build_geometry(const Vector& log_values) const;
  std::unique_ptr<Posterior> run_smoother(const Geometry& g) const;
  double term_ell(const Term& term, const Geometry& g, const Posterior& post, Index k,
                  const Vector& noise) const;
  ElboReport elbo_of(const Geometry& g, const Posterior& post, const Vector* noise = nullptr) const;
  MinibatchEstimate gradients(const Geometry& g, const Posterior& post, Index batch_size,
                              std::mt19937_64* rng) const;
  Matrix location_projector(const Geometry& g, const Vector& x) const;
  Matrix location_residual(const Geometry& g, const std::vector<Matrix>& kt, const std::vector<Vector>& xs,
                           const std::vector<Matrix>& projs) const;
  void refresh();
  void ensure_site_observations() const;
  Index location_id(const Vector& x) const;
  struct PredictionGrid;
  const PredictionGrid& prediction_grid(const std::vector<double>& times) const;
  void posterior_changed(bool sites_changed = true);
  void check_sites_psd(const std::vector<ssm::SurrogateSite>& sites);

  ModelSpec spec_;
  Hyperparameters hyper_;
  std::vector<double> times_;
  Matrix locations_;  // unique spatial locations referenced by the problem
  Matrix state_locations_;
  std::vector<Term> terms_;
  std::vector<std::vector<Index>> terms_by_time_;
  bool conjugate_ = true;
  std::vector<ssm::SurrogateSite> sites_;
  mutable std::optional<std::vector<ssm::Observation>> site_obs_;
  std::unique_ptr<Geometry> geometry_;
  std::unique_ptr<Posterior> posterior_;
  mutable std::vector<double> prediction_times_;
  mutable std::unique_ptr<PredictionGrid> prediction_;
  std::size_t psd_failures_ = 0;
};

}  // namespace physs::infer
