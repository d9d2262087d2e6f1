#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sacnn/metrics.hpp"
#include "sacnn/model.hpp"
#include "sacnn/synth.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Interpretability tooling: additive readout decomposition, per-hypercolumn
// contribution maps, attention-row overlays, and empirical receptive-field
// measurement. Everything here is read-only over models.
// ---------------------------------------------------------------------------

struct DecompositionResult {
  int h = 0, w = 0;
  std::vector<float> grid;  // h*w, sum of weight*activation over channels
  float bias = 0.0f;
  float center = 0.0f;
  float surround = 0.0f;  // sum of grid minus center
  float prediction = 0.0f;
  int center_row = 0, center_col = 0;
};

// Exact additive split of the linear readout. For a CTL model the grid is
// zero away from the center and the surround is identically zero.
DecompositionResult fcl_decompose(const Model& model, const Tensor& image);

// Rank-ordered (by prediction, descending) center/surround/prediction curves
// over the validation split.
struct DecompositionCurves {
  std::vector<float> prediction, center, surround;
};

DecompositionCurves decomposition_curves(const Model& model, const Dataset& data);
DecompositionCurves average_decomposition_curves(const std::vector<DecompositionCurves>& per_neuron);

// Mean |contribution| per hypercolumn over the validation split.
struct Heatmap {
  int h = 0, w = 0;
  std::vector<double> values;  // h*w raw values (contrast normalization is a plotting step)
  int center_row = 0, center_col = 0;
};

Heatmap hypercolumn_heatmap(const Model& model, const Dataset& data);

// Attention row of the (last) SA block for one query token, reshaped and
// nearest-neighbor upsampled to image resolution with mass preserved.
struct AttentionOverlay {
  int h = 0, w = 0;               // token grid
  int query_row = 0, query_col = 0;
  std::vector<float> row;         // h*w, sums to 1
  std::vector<float> overlay;     // image_h*image_w, sums to 1
  int image_h = 0, image_w = 0;
  double entropy = 0.0;           // Shannon entropy of `row`, nats
};

AttentionOverlay attention_overlay(const Model& model, const Tensor& image,
                                   std::optional<std::pair<int, int>> query = {});

double shannon_entropy(std::span<const float> probabilities);

// Union over probes of input pixels with a non-zero prediction gradient.
struct RFMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> mask;
  int row_min = -1, row_max = -1, col_min = -1, col_max = -1;

  int area() const;
  bool full() const;
};

RFMask empirical_rf(const Model& model, const std::vector<Tensor>& probes);

// CSV emitters (plotting interface).
std::string tuning_curves_csv(const RankOrderCurves& curves);
std::string decomposition_csv(const DecompositionCurves& curves);
std::string heatmap_csv(const Heatmap& hm);
std::string overlay_csv(const AttentionOverlay& ov);
std::string rf_mask_csv(const RFMask& rf);

}  // namespace sacnn
