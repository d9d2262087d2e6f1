#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sacnn {

// ---------------------------------------------------------------------------
// Evaluation mathematics: Pearson correlation, top-k peak attainment in the
// jointly and separately rank-ordered variants, peak-tuning percentages, and
// population aggregation. All functions are pure.
// ---------------------------------------------------------------------------

// Centered cross-moment over the product of centered norms. Returns nullopt
// when either series is constant (the coefficient is undefined there); never
// silently zero. Requires n >= 2 and equal lengths.
std::optional<double> pearson(std::span<const float> y, std::span<const float> yhat);

// Fraction of the k predictions paired with the k largest real responses that
// clear the k-th largest real response. Ties in y keep input order (stable).
double lambda_jro(std::span<const float> y, std::span<const float> yhat, int k);

// Fraction of the k largest predictions that clear the k-th largest real
// response.
double lambda_sro(std::span<const float> y, std::span<const float> yhat, int k);

// Top-1% of N, at least 1.
int peak_k(std::size_t n);

struct PeakTuning {
  double pt_j = 0.0;  // 100 * lambda_jro at k = peak_k(N)
  double pt_s = 0.0;  // 100 * lambda_sro at k = peak_k(N)
  int k = 0;
};

PeakTuning peak_tuning(std::span<const float> y, std::span<const float> yhat);

struct MeanSem {
  double mean = 0.0;
  double sem = 0.0;  // sample std (n-1) / sqrt(n)
  int n = 0;
};

MeanSem population_aggregate(std::span<const double> values);

// Descending tuning curves for plotting: real responses sorted descending,
// predictions carried along by the real ordering (jro), and predictions
// sorted descending on their own (sro).
struct RankOrderCurves {
  std::vector<float> real_sorted;
  std::vector<float> pred_jro;
  std::vector<float> pred_sro;
};

RankOrderCurves rank_order_curves(std::span<const float> y, std::span<const float> yhat);

// Per-rank average of per-neuron curves (rank first, then average).
RankOrderCurves population_rank_curves(const std::vector<RankOrderCurves>& per_neuron);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct NeuronMetrics {
  int neuron = -1;
  std::optional<double> corr;
  double pt_j = 0.0;
  double pt_s = 0.0;
  double lambda_j = 0.0;
  double lambda_s = 0.0;
};

struct MetricsReport {
  std::string model;
  int n_images = 0;
  int k = 0;
  std::vector<NeuronMetrics> neurons;
  MeanSem corr, pt_j, pt_s;

  // Recomputes the population rows from the per-neuron rows. Neurons with an
  // undefined correlation are excluded from the correlation aggregate.
  void aggregate();
};

MetricsReport make_report(const std::string& model_name,
                          const std::vector<std::vector<float>>& real_per_neuron,
                          const std::vector<std::vector<float>>& pred_per_neuron,
                          std::optional<int> k_override = {});

std::string report_to_json(const MetricsReport& report);
std::string report_to_csv(const MetricsReport& report);
MetricsReport report_from_json(const std::string& json_text);

}  // namespace sacnn
