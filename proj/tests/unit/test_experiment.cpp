#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "physs/error.hpp"
#include "physs/experiment.hpp"

using namespace physs;
using namespace physs::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("physs_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void expect_code(ErrorCode c, const auto& fn) {
  try {
    fn();
    ADD_FAILURE() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), c) << e.what();
  }
}

// Classical fourth-order Runge-Kutta with a small step.
std::vector<double> rk4_pendulum(double damping, double theta0, const std::vector<double>& times) {
  double th = theta0, om = 0.0, t = 0.0;
  const double h = 1e-3;
  auto f = [&](double a, double b) { return std::pair{b, -std::sin(a) - damping * b}; };
  std::vector<double> out;
  for (double target : times) {
    while (t < target - 1e-12) {
      const double dt = std::min(h, target - t);
      const auto [k1a, k1b] = f(th, om);
      const auto [k2a, k2b] = f(th + 0.5 * dt * k1a, om + 0.5 * dt * k1b);
      const auto [k3a, k3b] = f(th + 0.5 * dt * k2a, om + 0.5 * dt * k2b);
      const auto [k4a, k4b] = f(th + dt * k3a, om + dt * k3b);
      th += dt / 6 * (k1a + 2 * k2a + 2 * k3a + k4a);
      om += dt / 6 * (k1b + 2 * k2b + 2 * k3b + k4b);
      t += dt;
    }
    out.push_back(th);
  }
  return out;
}

const char* kSmallPendulum = R"({
  "name": "pendulum_small",
  "model": {
    "mode": "full",
    "latent": {"temporal": {"kernel": "matern72", "lengthscale": 1.0, "variance": 1.0}},
    "temporal_order": 3,
    "residual": "pendulum",
    "physics": {"damping": 0.2},
    "noise": {"obs": 0.01, "colloc": 0.001}
  },
  "data": {
    "source": "pendulum",
    "params": {"n_train": 15, "n_test": 40, "test_end": 12.0, "seed": 1},
    "collocation": {"time": {"count": 40, "range": [0, 12]}}
  },
  "train": {"epochs": 10, "beta": 0.5, "beta_warmup": 0.5, "trainable": [], "seed": 0}
})";

}  // namespace

// CRPS(0; N(0, 1)) = 2 phi(0) - 1 / sqrt(pi).
TEST(Metrics, StandardNormalAtMean) {
  const Matrix z = Matrix::Zero(1, 1), one = Matrix::Ones(1, 1);
  const auto m = compute_metrics(z, one, z, one);
  EXPECT_NEAR(m.rmse, 0.0, 1e-15);
  EXPECT_NEAR(m.nlpd, 0.9189385332046727, 1e-12);
  EXPECT_NEAR(m.crps, 0.2336949772551091, 1e-12);
  EXPECT_NEAR(gaussian_crps(0.0, 0.0, 1.0), 0.2336949772551091, 1e-12);
}

TEST(Metrics, CrpsMatchesNumericalIntegral) {
  const double y = 0.7, mu = -0.2, s = 1.3;
  // CRPS = integral (F(x) - 1{x >= y})^2 dx.
  double integral = 0.0;
  const double h = 1e-4;
  for (double x = mu - 12 * s; x < mu + 12 * s; x += h) {
    const double xm = x + 0.5 * h;
    const double F = 0.5 * std::erfc(-(xm - mu) / (s * std::sqrt(2.0)));
    const double step = xm >= y ? 1.0 : 0.0;
    integral += (F - step) * (F - step) * h;
  }
  EXPECT_NEAR(gaussian_crps(y, mu, s), integral, 1e-6);
}

TEST(Metrics, MaskAndRSquared) {
  Matrix mean(3, 1), sd = Matrix::Ones(3, 1), truth(3, 1), mask = Matrix::Ones(3, 1);
  mean << 1, 2, 100;
  truth << 1, 3, 0;
  mask(2, 0) = 0;
  const auto m = compute_metrics(mean, sd, truth, mask);
  EXPECT_NEAR(m.rmse, std::sqrt(0.5), 1e-14);
  EXPECT_NEAR(m.r_squared, 1.0 - 1.0 / 2.0, 1e-14);
  expect_code(ErrorCode::ZeroVariancePrediction, [&] { compute_metrics(mean, Matrix::Zero(3, 1), truth, mask); });
  expect_code(ErrorCode::InvalidArgument, [&] { compute_metrics(mean, sd, truth, Matrix::Zero(3, 1)); });
}

TEST(Csv, RoundTripKeepsValuesAndMask) {
  GridData g;
  g.times = {0.0, 0.5, 1.25};
  g.spatial_locations = (Matrix(2, 1) << -0.3, 0.4).finished();
  g.outputs = 2;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N;
  for (int i = 0; i < 12; ++i) {
    g.values.push_back(N(rng));
    g.mask.push_back(i % 5 == 3 ? 0 : 1);
  }
  for (std::size_t i = 0; i < g.values.size(); ++i)
    if (!g.mask[i]) g.values[i] = 0.0;
  const auto dir = scratch_dir("csv");
  save_csv(g, dir / "g.csv", {"u", "v"});
  const auto back = load_csv(dir / "g.csv");
  EXPECT_EQ(back.times, g.times);
  EXPECT_EQ(back.spatial_locations, g.spatial_locations);
  EXPECT_EQ(back.outputs, 2);
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    EXPECT_EQ(back.mask[i], g.mask[i]);
    if (g.mask[i]) EXPECT_EQ(back.values[i], g.values[i]);
  }
}

TEST(Csv, MalformedRowsRejected) {
  const auto dir = scratch_dir("csv_bad");
  {
    std::ofstream(dir / "bad.csv") << "t,x,y\n0.0,0.1,1.0\n0.5,abc,2.0\n";
  }
  expect_code(ErrorCode::MalformedRow, [&] { load_csv(dir / "bad.csv"); });
  expect_code(ErrorCode::Io, [&] { load_csv(dir / "missing.csv"); });
}

TEST(Simulators, PendulumMatchesRungeKutta) {
  PendulumParams p;
  std::vector<double> times;
  for (int i = 1; i <= 30; ++i) times.push_back(0.5 * i);
  const auto euler = pendulum_trajectory(p, times);
  const auto rk = rk4_pendulum(p.damping, p.theta0, times);
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_NEAR(euler[i], rk[i], 2e-3) << times[i];
}

TEST(Simulators, PendulumSplitShapes) {
  PendulumParams p;
  const auto d = simulate_pendulum(p);
  EXPECT_EQ(d.train.n_times(), p.n_train);
  EXPECT_EQ(d.test.n_times(), p.n_test);
  EXPECT_GE(d.test.times.front(), p.test_start);
  const auto again = simulate_pendulum(p);
  EXPECT_EQ(again.train.values, d.train.values);
}

TEST(Simulators, LatentForceHoldsSineOfAngle) {
  LatentForceParams p;
  p.n_test = 50;
  const auto d = simulate_latent_force(p);
  ASSERT_EQ(d.test.outputs, 2);
  for (Index i = 0; i < d.test.n_times(); ++i)
    EXPECT_NEAR(d.test.value(i, 0, 1), std::sin(d.test.value(i, 0, 0)), 1e-12);
  for (Index i = 0; i < d.train.n_times(); ++i) EXPECT_FALSE(d.train.observed(i, 0, 1));
}

TEST(Simulators, MonotonicTruthIncreases) {
  for (double t = 0.0; t < 10.0; t += 0.01) EXPECT_GT(monotonic_truth(t + 0.01), monotonic_truth(t));
  const auto d = simulate_monotonic({});
  EXPECT_EQ(d.train.n_times(), 100);
}

TEST(Simulators, WriteToDirectory) {
  const auto dir = scratch_dir("sim");
  simulate_to_dir("dipole", dir, 3);
  EXPECT_TRUE(fs::exists(dir / "train.csv"));
  EXPECT_TRUE(fs::exists(dir / "test.csv"));
  const auto tr = load_csv(dir / "train.csv");
  EXPECT_EQ(tr.outputs, 2);
  expect_code(ErrorCode::InvalidArgument, [&] { simulate_to_dir("nonexistent", dir, 0); });
}

TEST(Config, UnknownKeysAndMissingSectionsRejected) {
  expect_code(ErrorCode::Config, [] { Experiment::from_json(R"({"model": {}})"); });
  expect_code(ErrorCode::Config, [] {
    Experiment::from_json(R"({"model": {"latent": {"temporal": {}}, "colour": 1}, "data": {"source": "monotonic"}})");
  });
  expect_code(ErrorCode::Config, [] {
    Experiment::from_json(R"({"model": {"latent": {"temporal": {}}}, "data": {"source": "nowhere"}})");
  });
  expect_code(ErrorCode::Config, [] {
    Experiment::from_json(R"({"model": {"latent": {"temporal": {}}}, "data": {"source": "monotonic"}, "train": {"beta": 2}})");
  });
}

TEST(Config, PendulumCatalogWiring) {
  auto e = Experiment::from_json(kSmallPendulum);
  EXPECT_EQ(e.spec().orders.d_t(), 3);
  ASSERT_TRUE(e.spec().residual.has_value());
  EXPECT_EQ(e.spec().residual->name, "pendulum");
  EXPECT_EQ(e.problem().collocation.size(), 40u);
  EXPECT_EQ(e.problem().data.size(), 15u);
}

TEST(Run, FitSaveLoadPredictRoundTrip) {
  auto e = Experiment::from_json(kSmallPendulum);
  const auto dir = scratch_dir("run");
  e.set_output_dir(dir);
  const auto m = e.run();
  EXPECT_TRUE(std::isfinite(m.rmse));
  EXPECT_TRUE(std::isfinite(m.nlpd));
  EXPECT_EQ(m.epochs, 10);
  for (const char* f : {"metrics.json", "predictions.csv", "trace.csv", "state.json", "sites.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const auto loaded = Experiment::load_state(dir / "state.json");
  std::vector<infer::Point> pts;
  for (double t : {0.3, 2.71, 7.5, 11.9}) pts.push_back({t, Vector()});
  const auto a = e.predict(pts), b = loaded.predict(pts);
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((a.stddev - b.stddev).cwiseAbs().maxCoeff(), 1e-9);

  save_csv(e.data().test, dir / "truth.csv");
  const auto scored = evaluate_files(dir / "predictions.csv", dir / "truth.csv");
  EXPECT_NEAR(scored.rmse, m.rmse, 1e-9);
}

TEST(Run, PredictionsIncludeObservationNoise) {
  auto e = Experiment::from_json(kSmallPendulum);
  e.fit();
  const infer::Point p{3.3, Vector()};
  const auto pr = e.predict({p});
  const double latent = e.engine().predict(p).variance(0);
  EXPECT_NEAR(pr.stddev(0, 0) * pr.stddev(0, 0), latent + e.engine().observation_noise()(0), 1e-12);
}
