#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "physs/infer.hpp"
#include "physs/stprior.hpp"

namespace physs::experiment {

using stprior::GridData;

struct SplitData {
  GridData train;
  GridData test;
};

// ---------------------------------------------------------------- simulators

struct PendulumParams {
  double damping = 0.2;
  double theta0 = 2.0;
  double omega0 = 0.0;
  double step = 1e-4;
  int n_train = 20;
  double train_start = 0.0, train_end = 6.0;
  int n_test = 200;
  double test_start = 6.0, test_end = 30.0;
  double noise_var = 0.01;
  std::uint64_t seed = 0;
};

/// Semi-implicit Euler solution of theta'' + damping theta' + sin(theta) = 0
/// sampled at increasing times. Fills `velocity` when given.
std::vector<double> pendulum_trajectory(const PendulumParams& p, const std::vector<double>& times,
                                        std::vector<double>* velocity = nullptr);
/// Noisy training series and noise-free test series.
SplitData simulate_pendulum(const PendulumParams& p);

struct DipoleParams {
  int n_t = 50;
  int n_s = 10;
  double lo = -1.0, hi = 1.0;
  double z = 1.0;
  std::array<double, 3> moment{0.0, 1.0, 0.0};
  double train_fraction = 0.8;
  double noise_var = 0.0;
  std::uint64_t seed = 0;
};

/// Scalar potential m.r / |r|^3.
double dipole_potential(const std::array<double, 3>& r, const std::array<double, 3>& moment);
/// Field -grad(potential) at (t, s, z): components along t and s.
std::array<double, 2> dipole_field(double t, double s, const DipoleParams& p);
/// Two-output field on the (time, space) grid split by node.
SplitData simulate_dipole(const DipoleParams& p);

struct LatentForceParams {
  double theta0 = 2.0;
  double omega0 = 0.0;
  double step = 1e-4;
  double end = 30.0;
  int n_train = 300;
  int n_test = 1000;
  double noise_var = 0.01;
  std::uint64_t seed = 0;
};

/// Undamped pendulum; train observes output 0 (theta), test holds theta and
/// the hidden force sin(theta) as output 1.
SplitData simulate_latent_force(const LatentForceParams& p);

struct MonotonicParams {
  int n_train = 100;
  int n_test = 500;
  double start = 0.0, end = 10.0;
  double noise_var = 0.01;
  std::uint64_t seed = 0;
};

double monotonic_truth(double t);
SplitData simulate_monotonic(const MonotonicParams& p);

// ---------------------------------------------------------------- csv

/// Columns: t, then spatial columns (names starting with s or x), then one
/// column per output. Empty or nan fields are masked.
GridData load_csv(const std::filesystem::path& path);
/// Writes observed rows with 17 significant digits.
void save_csv(const GridData& data, const std::filesystem::path& path,
              const std::vector<std::string>& output_names = {});

// ---------------------------------------------------------------- metrics

struct MetricsReport {
  double rmse = 0.0;
  double nlpd = 0.0;
  double crps = 0.0;
  double r_squared = 0.0;
  double wall_seconds = 0.0;
  int epochs = 0;
};

/// Gaussian predictive scores. Rows are points, columns outputs; entries
/// with a zero mask are skipped. R^2 uses the first column only.
MetricsReport compute_metrics(const Matrix& mean, const Matrix& stddev, const Matrix& truth,
                              const Matrix& mask);
double gaussian_crps(double y, double mu, double sigma);

// ---------------------------------------------------------------- runs

struct Predictions {
  std::vector<infer::Point> points;
  Matrix mean;    // points x outputs
  Matrix stddev;  // includes observation noise
};

/// Config-driven experiment: data, model, training and artifacts.
class Experiment {
 public:
  static Experiment from_file(const std::filesystem::path& path);
  /// `base_dir` resolves relative data paths.
  static Experiment from_json(const std::string& text, const std::filesystem::path& base_dir = ".");

  ~Experiment();
  Experiment(Experiment&&) noexcept;
  Experiment& operator=(Experiment&&) noexcept;

  const SplitData& data() const;
  const infer::ModelSpec& spec() const;
  const infer::Problem& problem() const;
  infer::Engine& engine();
  const infer::Engine& engine() const;
  const infer::TrainConfig& train_config() const;
  const std::vector<infer::TraceRow>& trace() const;
  std::filesystem::path output_dir() const;
  void set_output_dir(const std::filesystem::path& dir);

  /// Trains (or runs the extended smoother) and scores the test split.
  MetricsReport fit();
  /// fit() plus metrics.json, predictions.csv, trace.csv and state.json.
  MetricsReport run();

  Predictions predict(const std::vector<infer::Point>& points) const;
  MetricsReport evaluate() const;
  void save_state(const std::filesystem::path& dir) const;
  /// Restores config, hyperparameters and sites saved by save_state.
  static Experiment load_state(const std::filesystem::path& state_json);

 private:
  struct Impl;
  explicit Experiment(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

void write_predictions(const Predictions& p, const std::filesystem::path& path);
void write_trace(const std::vector<infer::TraceRow>& trace, const std::filesystem::path& path);
void write_metrics(const MetricsReport& m, const std::filesystem::path& path);
/// Points (t, spatial...) from a grid CSV; value columns are ignored.
std::vector<infer::Point> load_points(const std::filesystem::path& path);
/// Scores a predictions CSV against a truth CSV, matching rows by location.
MetricsReport evaluate_files(const std::filesystem::path& predictions, const std::filesystem::path& truth);

/// Writes train.csv and test.csv of a named simulator with default parameters.
void simulate_to_dir(const std::string& name, const std::filesystem::path& dir, std::uint64_t seed = 0);

}  // namespace physs::experiment
