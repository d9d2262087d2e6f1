#include "sacnn/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace sacnn {

DecompositionResult fcl_decompose(const Model& model, const Tensor& image) {
  const auto shape = readout_input_shape(model.spec());
  const int c = shape[0], h = shape[1], w = shape[2];
  auto [cy, cx] = center_position(h, w);

  ForwardTaps taps;
  Tensor pred = model.forward(nullptr, image, &taps);
  const Tensor& act = taps.pre_readout;

  DecompositionResult res;
  res.h = h;
  res.w = w;
  res.center_row = cy;
  res.center_col = cx;
  res.grid.assign(static_cast<std::size_t>(h) * w, 0.0f);
  res.prediction = pred.item();

  const NamedParam* wp = model.find_param("readout.w");
  const NamedParam* bp = model.find_param("readout.b");
  res.bias = bp->tensor.data()[0];
  const int hw = h * w;
  auto wdata = wp->tensor.data();
  auto adata = act.data();
  if (model.spec().readout == ReadoutKind::kFCL) {
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        res.grid[static_cast<std::size_t>(p)] +=
            wdata[static_cast<std::size_t>(ch) * hw + p] * adata[static_cast<std::size_t>(ch) * hw + p];
  } else {
    // CTL: only the center hypercolumn contributes.
    float acc = 0.0f;
    for (int ch = 0; ch < c; ++ch)
      acc += wdata[static_cast<std::size_t>(ch)] *
             adata[static_cast<std::size_t>(ch) * hw + (cy * w + cx)];
    res.grid[static_cast<std::size_t>(cy) * w + cx] = acc;
  }
  res.center = res.grid[static_cast<std::size_t>(cy) * w + cx];
  double sur = 0.0;
  for (int p = 0; p < hw; ++p)
    if (p != cy * w + cx) sur += res.grid[static_cast<std::size_t>(p)];
  res.surround = static_cast<float>(sur);
  return res;
}

DecompositionCurves decomposition_curves(const Model& model, const Dataset& data) {
  DecompositionCurves out;
  const int n = data.n_val;
  if (n < 1) throw ConfigError("decomposition_curves: empty validation split");
  std::vector<DecompositionResult> res(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) res[static_cast<std::size_t>(i)] = fcl_decompose(model, data.image(data.val_index(i)));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return res[static_cast<std::size_t>(a)].prediction > res[static_cast<std::size_t>(b)].prediction;
  });
  for (int i : idx) {
    const auto& r = res[static_cast<std::size_t>(i)];
    out.prediction.push_back(r.prediction);
    out.center.push_back(r.center);
    out.surround.push_back(r.surround);
  }
  return out;
}

DecompositionCurves average_decomposition_curves(const std::vector<DecompositionCurves>& per_neuron) {
  if (per_neuron.empty()) throw ConfigError("average_decomposition_curves: no neurons");
  const std::size_t n = per_neuron.front().prediction.size();
  for (const auto& c : per_neuron)
    if (c.prediction.size() != n) throw ShapeError("decomposition curves have different lengths");
  DecompositionCurves avg;
  avg.prediction.assign(n, 0.0f);
  avg.center.assign(n, 0.0f);
  avg.surround.assign(n, 0.0f);
  const float inv = 1.0f / static_cast<float>(per_neuron.size());
  for (const auto& c : per_neuron)
    for (std::size_t i = 0; i < n; ++i) {
      avg.prediction[i] += c.prediction[i] * inv;
      avg.center[i] += c.center[i] * inv;
      avg.surround[i] += c.surround[i] * inv;
    }
  return avg;
}

Heatmap hypercolumn_heatmap(const Model& model, const Dataset& data) {
  const auto shape = readout_input_shape(model.spec());
  Heatmap hm;
  hm.h = shape[1];
  hm.w = shape[2];
  auto [cy, cx] = center_position(hm.h, hm.w);
  hm.center_row = cy;
  hm.center_col = cx;
  hm.values.assign(static_cast<std::size_t>(hm.h) * hm.w, 0.0);
  const int n = data.n_val;
  if (n < 1) throw ConfigError("hypercolumn_heatmap: empty validation split");
  for (int i = 0; i < n; ++i) {
    DecompositionResult r = fcl_decompose(model, data.image(data.val_index(i)));
    for (std::size_t p = 0; p < hm.values.size(); ++p) hm.values[p] += std::abs(r.grid[p]);
  }
  for (auto& v : hm.values) v /= static_cast<double>(n);
  return hm;
}

double shannon_entropy(std::span<const float> probabilities) {
  double e = 0.0;
  for (float p : probabilities)
    if (p > 0.0f) e -= static_cast<double>(p) * std::log(static_cast<double>(p));
  return e;
}

AttentionOverlay attention_overlay(const Model& model, const Tensor& image,
                                   std::optional<std::pair<int, int>> query) {
  int sa_index = -1;
  for (std::size_t b = 0; b < model.spec().blocks.size(); ++b)
    if (model.spec().blocks[b].kind == BlockKind::kSelfAttention) sa_index = static_cast<int>(b);
  if (sa_index < 0) throw ConfigError("attention_overlay: model has no self-attention block");

  ForwardTaps taps;
  (void)model.forward(nullptr, image, &taps);
  const Tensor& attn = taps.attention.back();  // last SA block

  // Token grid dims come from the SA block's input shape.
  auto shapes = chain_shapes(model.spec());
  const std::array<int, 3> in_shape =
      sa_index == 0 ? model.spec().input_shape : shapes[static_cast<std::size_t>(sa_index - 1)];
  AttentionOverlay ov;
  ov.h = in_shape[1];
  ov.w = in_shape[2];
  const int tokens = ov.h * ov.w;
  if (attn.dim(0) != tokens) throw ShapeError("attention matrix does not match token grid");

  int qr, qc;
  if (query) {
    qr = query->first;
    qc = query->second;
    if (qr < 0 || qr >= ov.h || qc < 0 || qc >= ov.w)
      throw ConfigError("attention_overlay: query position out of range");
  } else {
    std::tie(qr, qc) = center_position(ov.h, ov.w);
  }
  ov.query_row = qr;
  ov.query_col = qc;
  const int qtok = qr * ov.w + qc;
  ov.row.assign(attn.data().begin() + static_cast<std::ptrdiff_t>(qtok) * tokens,
                attn.data().begin() + static_cast<std::ptrdiff_t>(qtok + 1) * tokens);
  ov.entropy = shannon_entropy(ov.row);

  // Mass-preserving nearest-neighbor fill: pixel -> token floor(p * h / H).
  ov.image_h = model.spec().input_shape[1];
  ov.image_w = model.spec().input_shape[2];
  ov.overlay.assign(static_cast<std::size_t>(ov.image_h) * ov.image_w, 0.0f);
  std::vector<int> cell_count(static_cast<std::size_t>(tokens), 0);
  auto pixel_token = [&](int py, int px) {
    const int ty = std::min(ov.h - 1, py * ov.h / ov.image_h);
    const int tx = std::min(ov.w - 1, px * ov.w / ov.image_w);
    return ty * ov.w + tx;
  };
  for (int py = 0; py < ov.image_h; ++py)
    for (int px = 0; px < ov.image_w; ++px) ++cell_count[static_cast<std::size_t>(pixel_token(py, px))];
  for (int py = 0; py < ov.image_h; ++py)
    for (int px = 0; px < ov.image_w; ++px) {
      const int t = pixel_token(py, px);
      ov.overlay[static_cast<std::size_t>(py) * ov.image_w + px] =
          ov.row[static_cast<std::size_t>(t)] / static_cast<float>(cell_count[static_cast<std::size_t>(t)]);
    }
  return ov;
}

int RFMask::area() const {
  int a = 0;
  for (auto b : mask) a += b ? 1 : 0;
  return a;
}

bool RFMask::full() const { return area() == h * w; }

RFMask empirical_rf(const Model& model, const std::vector<Tensor>& probes) {
  if (probes.empty()) throw ConfigError("empirical_rf: need at least one probe image");
  RFMask rf;
  rf.h = model.spec().input_shape[1];
  rf.w = model.spec().input_shape[2];
  rf.mask.assign(static_cast<std::size_t>(rf.h) * rf.w, 0);

  for (const Tensor& probe : probes) {
    // Gradient w.r.t. the standardized input; the transform is per-pixel
    // affine so the support is the same as w.r.t. raw pixels.
    Tensor x = model.transform_input(probe).clone();
    x.set_requires_grad(true);
    Tape tape;
    Tensor pred = model.forward_chain(&tape, x, 0);
    tape.backward(pred);
    if (!x.has_grad()) continue;
    auto g = x.grad_view();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (g[i] != 0.0f) rf.mask[i] = 1;
  }
  for (int y = 0; y < rf.h; ++y)
    for (int x = 0; x < rf.w; ++x)
      if (rf.mask[static_cast<std::size_t>(y) * rf.w + x]) {
        if (rf.row_min < 0 || y < rf.row_min) rf.row_min = y;
        if (y > rf.row_max) rf.row_max = y;
        if (rf.col_min < 0 || x < rf.col_min) rf.col_min = x;
        if (x > rf.col_max) rf.col_max = x;
      }
  return rf;
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

namespace {
void append_row(std::string& out, const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  out += buf;
}
}  // namespace

std::string tuning_curves_csv(const RankOrderCurves& curves) {
  std::string out = "rank,real,pred_jro,pred_sro\n";
  for (std::size_t i = 0; i < curves.real_sorted.size(); ++i)
    append_row(out, "%zu,%.9g,%.9g,%.9g\n", i, static_cast<double>(curves.real_sorted[i]),
               static_cast<double>(curves.pred_jro[i]), static_cast<double>(curves.pred_sro[i]));
  return out;
}

std::string decomposition_csv(const DecompositionCurves& curves) {
  std::string out = "rank,center,surround,prediction\n";
  for (std::size_t i = 0; i < curves.prediction.size(); ++i)
    append_row(out, "%zu,%.9g,%.9g,%.9g\n", i, static_cast<double>(curves.center[i]),
               static_cast<double>(curves.surround[i]), static_cast<double>(curves.prediction[i]));
  return out;
}

std::string heatmap_csv(const Heatmap& hm) {
  std::string out =
      "# raw mean |contribution| per hypercolumn; contrast normalization is a plotting-side "
      "transform\nrow,col,value,is_center\n";
  for (int y = 0; y < hm.h; ++y)
    for (int x = 0; x < hm.w; ++x)
      append_row(out, "%d,%d,%.9g,%d\n", y, x, hm.values[static_cast<std::size_t>(y) * hm.w + x],
                 (y == hm.center_row && x == hm.center_col) ? 1 : 0);
  return out;
}

std::string overlay_csv(const AttentionOverlay& ov) {
  std::string out = "row,col,weight\n";
  for (int y = 0; y < ov.image_h; ++y)
    for (int x = 0; x < ov.image_w; ++x)
      append_row(out, "%d,%d,%.9g\n", y, x,
                 static_cast<double>(ov.overlay[static_cast<std::size_t>(y) * ov.image_w + x]));
  return out;
}

std::string rf_mask_csv(const RFMask& rf) {
  std::string out = "row,col,in_support\n";
  for (int y = 0; y < rf.h; ++y)
    for (int x = 0; x < rf.w; ++x)
      append_row(out, "%d,%d,%d\n", y, x,
                 rf.mask[static_cast<std::size_t>(y) * rf.w + x] ? 1 : 0);
  return out;
}

}  // namespace sacnn
