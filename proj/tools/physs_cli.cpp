#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "physs/physs.h"

namespace {

int fail(physs_status s) {
  nlohmann::json j;
  j["error"] = physs_status_name(s);
  j["status"] = static_cast<int>(s);
  j["message"] = physs_last_error();
  std::cerr << j.dump() << std::endl;
  return static_cast<int>(s) > 0 && static_cast<int>(s) < 126 ? static_cast<int>(s) : 1;
}

void print_metrics(const physs_metrics& m) {
  nlohmann::json j;
  j["rmse"] = m.rmse;
  j["nlpd"] = m.nlpd;
  j["crps"] = m.crps;
  j["r_squared"] = m.r_squared;
  j["wall_seconds"] = m.wall_seconds;
  j["epochs"] = m.epochs;
  std::cout << j.dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-informed state-space Gaussian processes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(physs_version()));

  std::string sim_name, sim_out;
  std::uint64_t sim_seed = 0;
  auto* sim = app.add_subcommand("simulate", "Write train.csv and test.csv for a built-in system");
  sim->add_option("name", sim_name, "pendulum | dipole | latent_force | monotonic")->required();
  sim->add_option("--out", sim_out, "Output directory")->required();
  sim->add_option("--seed", sim_seed, "Noise seed");

  std::string fit_config, fit_out;
  auto* fit = app.add_subcommand("fit", "Train from a config and write metrics, predictions, trace and state");
  fit->add_option("--config", fit_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", fit_out, "Output directory (overrides the config)");

  std::string pred_state, pred_grid, pred_out = "predictions.csv";
  auto* pred = app.add_subcommand("predict", "Predict at grid points from a saved state");
  pred->add_option("--state", pred_state, "state.json written by fit")->required()->check(CLI::ExistingFile);
  pred->add_option("--grid", pred_grid, "CSV whose leading columns are t and the spatial coordinates")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "Predictions CSV")->capture_default_str();

  std::string eval_pred, eval_truth, eval_out;
  auto* eval = app.add_subcommand("eval", "Score a predictions CSV against a truth CSV");
  eval->add_option("--pred", eval_pred, "Predictions CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--truth", eval_truth, "Truth CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Optional metrics.json path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    nlohmann::json j;
    j["error"] = "Usage";
    j["status"] = e.get_exit_code();
    j["message"] = e.what();
    std::cerr << j.dump() << std::endl;
    return 2;
  }

  physs_status s = PHYSS_OK;
  if (*sim) {
    s = physs_simulate(sim_name.c_str(), sim_out.c_str(), sim_seed);
    if (s != PHYSS_OK) return fail(s);
    return 0;
  }
  if (*fit) {
    physs_experiment* exp = nullptr;
    s = physs_experiment_open(fit_config.c_str(), &exp);
    if (s != PHYSS_OK) return fail(s);
    if (!fit_out.empty()) s = physs_experiment_set_output_dir(exp, fit_out.c_str());
    physs_metrics m{};
    if (s == PHYSS_OK) s = physs_experiment_run(exp, &m);
    physs_experiment_close(exp);
    if (s != PHYSS_OK) return fail(s);
    print_metrics(m);
    return 0;
  }
  if (*pred) {
    physs_experiment* exp = nullptr;
    s = physs_experiment_load_state(pred_state.c_str(), &exp);
    if (s != PHYSS_OK) return fail(s);
    s = physs_experiment_predict_csv(exp, pred_grid.c_str(), pred_out.c_str());
    physs_experiment_close(exp);
    if (s != PHYSS_OK) return fail(s);
    return 0;
  }
  physs_metrics m{};
  s = physs_evaluate(eval_pred.c_str(), eval_truth.c_str(), &m);
  if (s == PHYSS_OK && !eval_out.empty()) s = physs_write_metrics(&m, eval_out.c_str());
  if (s != PHYSS_OK) return fail(s);
  print_metrics(m);
  return 0;
}
