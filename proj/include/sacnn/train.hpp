#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sacnn/metrics.hpp"
#include "sacnn/model.hpp"
#include "sacnn/synth.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Per-neuron supervised training (MSE + Adam) and the three-stage incremental
// freeze-and-train pipeline.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  int max_epochs = 50;
  int patience = 5;          // validation evaluations without improvement
  std::uint64_t seed = 0;
  double fraction = 1.0;     // of the train split (seeded shuffle prefix)
  bool standardize_input = true;

  void validate() const;
};

struct StageReport {
  std::string stage;
  std::string model;
  int neuron = -1;
  std::uint64_t seed = 0;
  int epochs_run = 0;
  int train_samples = 0;
  double final_train_loss = 0.0;
  std::optional<double> val_corr;  // of the returned (best) parameters
  std::string checkpoint_path;     // filled by callers that save
};

// Trains the unfrozen parameters of `model` against neuron `neuron`.
// The model keeps the parameters of the best-validation-correlation epoch.
// Deterministic given (model, dataset, config).
StageReport train(Model& model, const Dataset& data, int neuron, const TrainConfig& cfg);

// Validation-split predictions, in validation order.
std::vector<float> predict_validation(const Model& model, const Dataset& data);
// Validation-split real responses for one neuron.
std::vector<float> validation_targets(const Dataset& data, int neuron);

// ---------------------------------------------------------------------------
// Incremental pipeline (stage names double as provenance tags):
//   stage 1: rf-CNN from scratch
//   stage 2: rf+sa-CNN* with stage-1 alpha weights loaded and frozen
//   stage 3a (FC1): ff+sa-CNN*, trunk + FCL center weights frozen
//   stage 3b (FC2): ff+sa-CNN*, trunk frozen, whole FCL learnable
// Stage-3 FCLs start at the stage-2 function: center weights = CTL weights,
// surround weights = 0, bias = CTL bias.
// ---------------------------------------------------------------------------

struct PipelineResult {
  Model rf, incr, fc1, fc2;
  StageReport rep_rf, rep_incr, rep_fc1, rep_fc2;
};

PipelineResult incremental_pipeline(const Dataset& data, int neuron, const TrainConfig& cfg);

// One-stage training of a preset (the Simul. counterparts).
struct SimulResult {
  Model model;
  StageReport report;
};
SimulResult simultaneous(const std::string& preset_name, const Dataset& data, int neuron,
                         const TrainConfig& cfg);

// Copies parameters `names` from src into dst and freezes them there.
void load_and_freeze(Model& dst, const Model& src, const std::vector<std::string>& names);

// Initializes dst's FCL from src's CTL: center hypercolumn weights and bias
// copied, surround weights zeroed. When freeze_center is set, the center
// weights additionally receive a freeze mask.
void init_fcl_from_ctl(Model& dst, const Model& src, bool freeze_center);

// ---------------------------------------------------------------------------
// Population harness: one independent model per neuron on a bounded worker
// pool, per-neuron seed = mix(base seed, neuron index).
// ---------------------------------------------------------------------------

struct PopulationRun {
  std::vector<Model> models;  // by neuron
  std::vector<StageReport> reports;
  MetricsReport metrics;
};

PopulationRun train_population(const std::string& preset_name, const Dataset& data,
                               const TrainConfig& cfg, int n_jobs = 0);

struct PopulationPipelineRun {
  std::vector<PipelineResult> by_neuron;
  MetricsReport metrics_rf, metrics_incr, metrics_fc1, metrics_fc2;
};

PopulationPipelineRun run_pipeline_population(const Dataset& data, const TrainConfig& cfg,
                                              int n_jobs = 0);

// A.7-style data-efficiency harness: per fraction, per preset, a population
// run on the reduced train split (validation untouched).
struct FractionRunResult {
  double fraction = 1.0;
  std::string model;
  MetricsReport metrics;
};

std::vector<FractionRunResult> data_fraction_run(const std::vector<std::string>& presets,
                                                 const Dataset& data,
                                                 const std::vector<double>& fractions,
                                                 const TrainConfig& cfg, int n_jobs = 0);

}  // namespace sacnn
