#include "physs/physs.h"

#include <exception>
#include <new>
#include <string>

#include "physs/error.hpp"
#include "physs/experiment.hpp"

struct physs_experiment {
  physs::experiment::Experiment exp;
};

namespace {

thread_local std::string g_last_error;

physs_status to_status(physs::ErrorCode c) { return static_cast<physs_status>(static_cast<int>(c) + 1); }

template <class Fn>
physs_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return PHYSS_OK;
  } catch (const physs::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown failure";
  }
  return PHYSS_E_INTERNAL;
}

void require(bool ok, const char* what) {
  if (!ok) throw physs::Error(physs::ErrorCode::InvalidArgument, what);
}

void copy_metrics(const physs::experiment::MetricsReport& m, physs_metrics* out) {
  out->rmse = m.rmse;
  out->nlpd = m.nlpd;
  out->crps = m.crps;
  out->r_squared = m.r_squared;
  out->wall_seconds = m.wall_seconds;
  out->epochs = m.epochs;
}

}  // namespace

extern "C" {

const char* physs_version(void) { return "1.0.0"; }

const char* physs_status_name(physs_status status) {
  if (status == PHYSS_OK) return "Ok";
  if (status == PHYSS_E_INTERNAL) return "Internal";
  const int c = static_cast<int>(status) - 1;
  if (c < 0 || c > static_cast<int>(physs::ErrorCode::Io)) return "Unknown";
  static thread_local std::string name;
  name = std::string(physs::error_code_name(static_cast<physs::ErrorCode>(c)));
  return name.c_str();
}

const char* physs_last_error(void) { return g_last_error.c_str(); }

physs_status physs_simulate(const char* name, const char* out_dir, uint64_t seed) {
  return guarded([&] {
    require(name && out_dir, "name and out_dir are required");
    physs::experiment::simulate_to_dir(name, out_dir, seed);
  });
}

physs_status physs_experiment_open(const char* config_path, physs_experiment** out) {
  return guarded([&] {
    require(config_path && out, "config_path and out are required");
    *out = nullptr;
    *out = new physs_experiment{physs::experiment::Experiment::from_file(config_path)};
  });
}

physs_status physs_experiment_open_json(const char* config_json, const char* base_dir, physs_experiment** out) {
  return guarded([&] {
    require(config_json && out, "config_json and out are required");
    *out = nullptr;
    *out = new physs_experiment{physs::experiment::Experiment::from_json(config_json, base_dir ? base_dir : ".")};
  });
}

physs_status physs_experiment_load_state(const char* state_path, physs_experiment** out) {
  return guarded([&] {
    require(state_path && out, "state_path and out are required");
    *out = nullptr;
    *out = new physs_experiment{physs::experiment::Experiment::load_state(state_path)};
  });
}

void physs_experiment_close(physs_experiment* exp) { delete exp; }

physs_status physs_experiment_set_output_dir(physs_experiment* exp, const char* dir) {
  return guarded([&] {
    require(exp && dir, "experiment and dir are required");
    exp->exp.set_output_dir(dir);
  });
}

physs_status physs_experiment_dims(const physs_experiment* exp, size_t* spatial_dims, size_t* outputs) {
  return guarded([&] {
    require(exp, "experiment is required");
    if (spatial_dims) *spatial_dims = static_cast<size_t>(exp->exp.spec().spatial_dims());
    if (outputs) *outputs = static_cast<size_t>(exp->exp.spec().outputs);
  });
}

physs_status physs_experiment_fit(physs_experiment* exp, physs_metrics* metrics) {
  return guarded([&] {
    require(exp, "experiment is required");
    const auto m = exp->exp.fit();
    if (metrics) copy_metrics(m, metrics);
  });
}

physs_status physs_experiment_run(physs_experiment* exp, physs_metrics* metrics) {
  return guarded([&] {
    require(exp, "experiment is required");
    const auto m = exp->exp.run();
    if (metrics) copy_metrics(m, metrics);
  });
}

physs_status physs_experiment_predict(physs_experiment* exp, size_t n, const double* t, const double* x,
                                      double* mean, double* stddev) {
  return guarded([&] {
    require(exp && mean && stddev && (n == 0 || t), "experiment, t, mean and stddev are required");
    const auto S = static_cast<size_t>(exp->exp.spec().spatial_dims());
    const auto P = static_cast<size_t>(exp->exp.spec().outputs);
    require(S == 0 || n == 0 || x, "x is required for spatial models");
    std::vector<physs::infer::Point> pts(n);
    for (size_t i = 0; i < n; ++i) {
      pts[i].t = t[i];
      pts[i].x.resize(static_cast<physs::Index>(S));
      for (size_t j = 0; j < S; ++j) pts[i].x(static_cast<physs::Index>(j)) = x[i * S + j];
    }
    const auto pred = exp->exp.predict(pts);
    for (size_t i = 0; i < n; ++i)
      for (size_t p = 0; p < P; ++p) {
        mean[i * P + p] = pred.mean(static_cast<physs::Index>(i), static_cast<physs::Index>(p));
        stddev[i * P + p] = pred.stddev(static_cast<physs::Index>(i), static_cast<physs::Index>(p));
      }
  });
}

physs_status physs_experiment_predict_csv(physs_experiment* exp, const char* grid_csv, const char* out_csv) {
  return guarded([&] {
    require(exp && grid_csv && out_csv, "experiment, grid_csv and out_csv are required");
    const auto pts = physs::experiment::load_points(grid_csv);
    physs::experiment::write_predictions(exp->exp.predict(pts), out_csv);
  });
}

physs_status physs_evaluate(const char* pred_csv, const char* truth_csv, physs_metrics* metrics) {
  return guarded([&] {
    require(pred_csv && truth_csv && metrics, "pred_csv, truth_csv and metrics are required");
    copy_metrics(physs::experiment::evaluate_files(pred_csv, truth_csv), metrics);
  });
}

physs_status physs_write_metrics(const physs_metrics* metrics, const char* path) {
  return guarded([&] {
    require(metrics && path, "metrics and path are required");
    physs::experiment::MetricsReport m;
    m.rmse = metrics->rmse;
    m.nlpd = metrics->nlpd;
    m.crps = metrics->crps;
    m.r_squared = metrics->r_squared;
    m.wall_seconds = metrics->wall_seconds;
    m.epochs = metrics->epochs;
    physs::experiment::write_metrics(m, path);
  });
}

}  // extern "C"
