#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "physs/physs.h"

namespace fs = std::filesystem;

namespace {

const char* kConfig = R"({
  "model": {
    "latent": {"temporal": {"kernel": "matern52", "lengthscale": 2.0, "variance": 1.0}},
    "temporal_order": 2,
    "residual": "monotonic",
    "noise": {"obs": 0.01, "colloc": 1.0}
  },
  "data": {
    "source": "monotonic",
    "params": {"n_train": 30, "n_test": 40, "seed": 2},
    "collocation": {"time": {"count": 20, "range": [0, 10]}}
  },
  "train": {"epochs": 5, "beta": 0.5, "beta_warmup": 0.5, "trainable": []}
})";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("physs_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(CApi, VersionAndStatusNames) {
  EXPECT_STREQ(physs_version(), "1.0.0");
  EXPECT_STREQ(physs_status_name(PHYSS_OK), "Ok");
  EXPECT_STREQ(physs_status_name(PHYSS_E_SITE_PRECISION_NOT_PSD), "SitePrecisionNotPSD");
  EXPECT_STREQ(physs_status_name(PHYSS_E_CONFIG), "Config");
  EXPECT_STREQ(physs_status_name(PHYSS_E_IO), "Io");
  EXPECT_STREQ(physs_status_name(PHYSS_E_INTERNAL), "Internal");
  EXPECT_STREQ(physs_status_name(static_cast<physs_status>(77)), "Unknown");
}

TEST(CApi, NullArgumentsReportInvalidArgument) {
  physs_experiment* exp = nullptr;
  EXPECT_EQ(physs_experiment_open(nullptr, &exp), PHYSS_E_INVALID_ARGUMENT);
  EXPECT_NE(std::string(physs_last_error()), "");
  EXPECT_EQ(physs_experiment_fit(nullptr, nullptr), PHYSS_E_INVALID_ARGUMENT);
  EXPECT_EQ(physs_simulate(nullptr, "x", 0), PHYSS_E_INVALID_ARGUMENT);
  physs_experiment_close(nullptr);
}

TEST(CApi, ErrorsMapToStatusCodes) {
  physs_experiment* exp = nullptr;
  EXPECT_EQ(physs_experiment_open_json("{\"model\": {}}", nullptr, &exp), PHYSS_E_CONFIG);
  EXPECT_EQ(exp, nullptr);
  EXPECT_EQ(physs_experiment_open("/nonexistent/config.json", &exp), PHYSS_E_IO);
  EXPECT_EQ(physs_simulate("unknown", scratch_dir("bad").c_str(), 0), PHYSS_E_INVALID_ARGUMENT);
  EXPECT_EQ(physs_experiment_open_json("{not json", nullptr, &exp), PHYSS_E_CONFIG);
}

TEST(CApi, OpenFitPredictAndReload) {
  physs_experiment* exp = nullptr;
  ASSERT_EQ(physs_experiment_open_json(kConfig, nullptr, &exp), PHYSS_OK) << physs_last_error();
  size_t S = 9, P = 9;
  ASSERT_EQ(physs_experiment_dims(exp, &S, &P), PHYSS_OK);
  EXPECT_EQ(S, 0u);
  EXPECT_EQ(P, 1u);
  const auto dir = scratch_dir("run");
  ASSERT_EQ(physs_experiment_set_output_dir(exp, dir.c_str()), PHYSS_OK);
  physs_metrics m{};
  ASSERT_EQ(physs_experiment_run(exp, &m), PHYSS_OK) << physs_last_error();
  EXPECT_EQ(m.epochs, 5);
  EXPECT_TRUE(std::isfinite(m.rmse));
  EXPECT_TRUE(fs::exists(dir / "state.json"));

  const std::vector<double> t{0.5, 5.0, 9.5};
  std::vector<double> mean(3), sd(3);
  ASSERT_EQ(physs_experiment_predict(exp, 3, t.data(), nullptr, mean.data(), sd.data()), PHYSS_OK);
  for (double s : sd) EXPECT_GT(s, 0.0);

  physs_experiment* back = nullptr;
  ASSERT_EQ(physs_experiment_load_state((dir / "state.json").c_str(), &back), PHYSS_OK) << physs_last_error();
  std::vector<double> mean2(3), sd2(3);
  ASSERT_EQ(physs_experiment_predict(back, 3, t.data(), nullptr, mean2.data(), sd2.data()), PHYSS_OK);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(mean[i], mean2[i], 1e-9);
    EXPECT_NEAR(sd[i], sd2[i], 1e-9);
  }
  physs_experiment_close(back);
  physs_experiment_close(exp);
}

TEST(CApi, SimulateEvaluateAndWriteMetrics) {
  const auto dir = scratch_dir("sim");
  ASSERT_EQ(physs_simulate("pendulum", dir.c_str(), 4), PHYSS_OK) << physs_last_error();
  ASSERT_TRUE(fs::exists(dir / "test.csv"));
  physs_metrics m{};
  // A truth file scored against itself is not a prediction file.
  EXPECT_EQ(physs_evaluate((dir / "test.csv").c_str(), (dir / "test.csv").c_str(), &m), PHYSS_E_SHAPE_MISMATCH);
  m.rmse = 0.5;
  m.epochs = 3;
  ASSERT_EQ(physs_write_metrics(&m, (dir / "metrics.json").c_str()), PHYSS_OK);
  EXPECT_TRUE(fs::exists(dir / "metrics.json"));
  EXPECT_EQ(physs_write_metrics(&m, "/nonexistent/dir/metrics.json"), PHYSS_E_IO);
}
