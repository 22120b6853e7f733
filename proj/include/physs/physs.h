#ifndef PHYSS_PHYSS_H
#define PHYSS_PHYSS_H

#include <stddef.h>
#include <stdint.h>

#if defined(PHYSS_BUILDING)
#define PHYSS_API __attribute__((visibility("default")))
#else
#define PHYSS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum physs_status {
  PHYSS_OK = 0,
  PHYSS_E_INVALID_ARGUMENT = 1,
  PHYSS_E_SHAPE_MISMATCH = 2,
  PHYSS_E_UNSUPPORTED = 3,
  PHYSS_E_ORDER_EXCEEDS_SMOOTHNESS = 4,
  PHYSS_E_INSUFFICIENT_DERIVATIVE_ORDERS = 5,
  PHYSS_E_DUPLICATE_SPATIAL_LOCATION = 6,
  PHYSS_E_GRAM_NOT_PSD = 7,
  PHYSS_E_INNOVATION_NOT_PSD = 8,
  PHYSS_E_SITE_PRECISION_NOT_PSD = 9,
  PHYSS_E_SINGULAR_GRAM = 10,
  PHYSS_E_QUADRATURE_OVERFLOW = 11,
  PHYSS_E_NON_FINITE_LIKELIHOOD = 12,
  PHYSS_E_ORACLE_TOO_LARGE = 13,
  PHYSS_E_QUERY_OUTSIDE_SPATIAL_MODEL = 14,
  PHYSS_E_DIVERGED = 15,
  PHYSS_E_MALFORMED_ROW = 16,
  PHYSS_E_NON_GRIDDABLE_DATA = 17,
  PHYSS_E_SINGULAR_POINT = 18,
  PHYSS_E_ZERO_VARIANCE_PREDICTION = 19,
  PHYSS_E_CONFIG = 20,
  PHYSS_E_IO = 21,
  PHYSS_E_INTERNAL = 100
} physs_status;

typedef struct physs_metrics {
  double rmse;
  double nlpd;
  double crps;
  double r_squared;
  double wall_seconds;
  int epochs;
} physs_metrics;

/* Opaque experiment: data, model, posterior state. */
typedef struct physs_experiment physs_experiment;

PHYSS_API const char* physs_version(void);
/* Stable identifier such as "SitePrecisionNotPSD". */
PHYSS_API const char* physs_status_name(physs_status status);
/* Message of the most recent failure on the calling thread ("" if none). */
PHYSS_API const char* physs_last_error(void);

/* Writes train.csv and test.csv for "pendulum", "dipole", "latent_force",
 * "monotonic". */
PHYSS_API physs_status physs_simulate(const char* name, const char* out_dir, uint64_t seed);

PHYSS_API physs_status physs_experiment_open(const char* config_path, physs_experiment** out);
/* Relative data paths resolve against base_dir (NULL means "."). */
PHYSS_API physs_status physs_experiment_open_json(const char* config_json, const char* base_dir,
                                                  physs_experiment** out);
/* Restores an experiment from the state.json written by run. */
PHYSS_API physs_status physs_experiment_load_state(const char* state_path, physs_experiment** out);
PHYSS_API void physs_experiment_close(physs_experiment* exp);

PHYSS_API physs_status physs_experiment_set_output_dir(physs_experiment* exp, const char* dir);
PHYSS_API physs_status physs_experiment_dims(const physs_experiment* exp, size_t* spatial_dims,
                                             size_t* outputs);

/* Trains and scores the test split without writing anything. */
PHYSS_API physs_status physs_experiment_fit(physs_experiment* exp, physs_metrics* metrics);
/* Trains, scores and writes metrics.json, predictions.csv, trace.csv and
 * state.json to the output directory. */
PHYSS_API physs_status physs_experiment_run(physs_experiment* exp, physs_metrics* metrics);

/* x is n x spatial_dims row-major (NULL when spatial_dims is 0); mean and
 * stddev receive n x outputs row-major. */
PHYSS_API physs_status physs_experiment_predict(physs_experiment* exp, size_t n, const double* t,
                                                const double* x, double* mean, double* stddev);
/* Predicts at the (t, s...) rows of a CSV and writes a predictions CSV. */
PHYSS_API physs_status physs_experiment_predict_csv(physs_experiment* exp, const char* grid_csv,
                                                    const char* out_csv);

/* Scores a predictions CSV (mean, std per output) against a truth CSV. */
PHYSS_API physs_status physs_evaluate(const char* pred_csv, const char* truth_csv, physs_metrics* metrics);
PHYSS_API physs_status physs_write_metrics(const physs_metrics* metrics, const char* path);

#ifdef __cplusplus
}
#endif

#endif
