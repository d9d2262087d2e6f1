#include "sacnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sacnn/common.hpp"

#include <nlohmann/json.hpp>

namespace sacnn {

namespace {

void check_pair(std::span<const float> y, std::span<const float> yhat) {
  if (y.size() != yhat.size())
    throw ShapeError("response pair length mismatch: " + std::to_string(y.size()) + " vs " +
                     std::to_string(yhat.size()));
  for (float v : y)
    if (!is_finite(v)) throw NumericError("non-finite real response");
  for (float v : yhat)
    if (!is_finite(v)) throw NumericError("non-finite predicted response");
}

// Indices of y sorted descending, stable (ties keep input order).
std::vector<std::size_t> order_desc(std::span<const float> y) {
  std::vector<std::size_t> idx(y.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });
  return idx;
}

void check_k(std::size_t n, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > n)
    throw ConfigError("k=" + std::to_string(k) + " out of range for N=" + std::to_string(n));
}

}  // namespace

std::optional<double> pearson(std::span<const float> y, std::span<const float> yhat) {
  check_pair(y, yhat);
  const std::size_t n = y.size();
  if (n < 2) throw ConfigError("pearson requires at least two samples");
  double my = 0, mp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    my += y[i];
    mp += yhat[i];
  }
  my /= static_cast<double>(n);
  mp /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dy = y[i] - my;
    const double dp = yhat[i] - mp;
    sxy += dp * dy;
    sxx += dp * dp;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

double lambda_jro(std::span<const float> y, std::span<const float> yhat, int k) {
  check_pair(y, yhat);
  check_k(y.size(), k);
  const auto idx = order_desc(y);
  const float threshold = y[idx[static_cast<std::size_t>(k - 1)]];
  int hits = 0;
  for (int j = 0; j < k; ++j)
    if (yhat[idx[static_cast<std::size_t>(j)]] >= threshold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

double lambda_sro(std::span<const float> y, std::span<const float> yhat, int k) {
  check_pair(y, yhat);
  check_k(y.size(), k);
  const auto yidx = order_desc(y);
  const float threshold = y[yidx[static_cast<std::size_t>(k - 1)]];
  std::vector<float> preds(yhat.begin(), yhat.end());
  std::nth_element(preds.begin(), preds.begin() + (k - 1), preds.end(), std::greater<float>());
  int hits = 0;
  for (int j = 0; j < k; ++j)
    if (preds[static_cast<std::size_t>(j)] >= threshold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

int peak_k(std::size_t n) {
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(n) / 100.0)));
}

PeakTuning peak_tuning(std::span<const float> y, std::span<const float> yhat) {
  PeakTuning pt;
  pt.k = peak_k(y.size());
  pt.pt_j = 100.0 * lambda_jro(y, yhat, pt.k);
  pt.pt_s = 100.0 * lambda_sro(y, yhat, pt.k);
  return pt;
}

MeanSem population_aggregate(std::span<const double> values) {
  if (values.size() < 2) throw ConfigError("population aggregate requires at least two values");
  MeanSem ms;
  ms.n = static_cast<int>(values.size());
  double sum = 0;
  for (double v : values) sum += v;
  ms.mean = sum / static_cast<double>(ms.n);
  double ss = 0;
  for (double v : values) ss += (v - ms.mean) * (v - ms.mean);
  const double sample_std = std::sqrt(ss / static_cast<double>(ms.n - 1));
  ms.sem = sample_std / std::sqrt(static_cast<double>(ms.n));
  return ms;
}

RankOrderCurves rank_order_curves(std::span<const float> y, std::span<const float> yhat) {
  check_pair(y, yhat);
  if (y.empty()) throw ConfigError("rank_order_curves requires at least one sample");
  RankOrderCurves rc;
  const auto idx = order_desc(y);
  rc.real_sorted.reserve(y.size());
  rc.pred_jro.reserve(y.size());
  for (std::size_t i : idx) {
    rc.real_sorted.push_back(y[i]);
    rc.pred_jro.push_back(yhat[i]);
  }
  rc.pred_sro.assign(yhat.begin(), yhat.end());
  std::stable_sort(rc.pred_sro.begin(), rc.pred_sro.end(), std::greater<float>());
  return rc;
}

RankOrderCurves population_rank_curves(const std::vector<RankOrderCurves>& per_neuron) {
  if (per_neuron.empty()) throw ConfigError("population_rank_curves: no neurons");
  const std::size_t n = per_neuron.front().real_sorted.size();
  for (const auto& rc : per_neuron)
    if (rc.real_sorted.size() != n)
      throw ShapeError("population_rank_curves: neurons have different lengths");
  RankOrderCurves avg;
  avg.real_sorted.assign(n, 0.0f);
  avg.pred_jro.assign(n, 0.0f);
  avg.pred_sro.assign(n, 0.0f);
  const float inv = 1.0f / static_cast<float>(per_neuron.size());
  for (const auto& rc : per_neuron) {
    for (std::size_t i = 0; i < n; ++i) {
      avg.real_sorted[i] += rc.real_sorted[i] * inv;
      avg.pred_jro[i] += rc.pred_jro[i] * inv;
      avg.pred_sro[i] += rc.pred_sro[i] * inv;
    }
  }
  return avg;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void MetricsReport::aggregate() {
  std::vector<double> corrs, ptjs, ptss;
  for (const auto& nm : neurons) {
    if (nm.corr) corrs.push_back(*nm.corr);
    ptjs.push_back(nm.pt_j);
    ptss.push_back(nm.pt_s);
  }
  if (corrs.size() >= 2) corr = population_aggregate(corrs);
  if (ptjs.size() >= 2) {
    pt_j = population_aggregate(ptjs);
    pt_s = population_aggregate(ptss);
  }
}

MetricsReport make_report(const std::string& model_name,
                          const std::vector<std::vector<float>>& real_per_neuron,
                          const std::vector<std::vector<float>>& pred_per_neuron,
                          std::optional<int> k_override) {
  if (real_per_neuron.size() != pred_per_neuron.size())
    throw ShapeError("make_report: neuron count mismatch");
  MetricsReport rep;
  rep.model = model_name;
  if (!real_per_neuron.empty()) {
    rep.n_images = static_cast<int>(real_per_neuron.front().size());
    rep.k = k_override ? *k_override : peak_k(real_per_neuron.front().size());
  }
  for (std::size_t m = 0; m < real_per_neuron.size(); ++m) {
    const auto& y = real_per_neuron[m];
    const auto& p = pred_per_neuron[m];
    NeuronMetrics nm;
    nm.neuron = static_cast<int>(m);
    nm.corr = pearson(y, p);
    nm.lambda_j = lambda_jro(y, p, rep.k);
    nm.lambda_s = lambda_sro(y, p, rep.k);
    nm.pt_j = 100.0 * nm.lambda_j;
    nm.pt_s = 100.0 * nm.lambda_s;
    rep.neurons.push_back(nm);
  }
  rep.aggregate();
  return rep;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["model"] = report.model;
  j["n_images"] = report.n_images;
  j["k"] = report.k;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& nm : report.neurons) {
    nlohmann::ordered_json e;
    e["neuron"] = nm.neuron;
    if (nm.corr) e["corr"] = *nm.corr;
    else e["corr"] = "undefined";
    e["pt_j"] = nm.pt_j;
    e["pt_s"] = nm.pt_s;
    e["lambda_jro"] = nm.lambda_j;
    e["lambda_sro"] = nm.lambda_s;
    arr.push_back(e);
  }
  j["neurons"] = arr;
  auto ms = [](const MeanSem& m) {
    return nlohmann::ordered_json{{"mean", m.mean}, {"sem", m.sem}, {"n", m.n}};
  };
  j["population"] = {{"corr", ms(report.corr)}, {"pt_j", ms(report.pt_j)}, {"pt_s", ms(report.pt_s)}};
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  MetricsReport rep;
  rep.model = j.at("model").get<std::string>();
  rep.n_images = j.at("n_images").get<int>();
  rep.k = j.at("k").get<int>();
  for (const auto& e : j.at("neurons")) {
    NeuronMetrics nm;
    nm.neuron = e.at("neuron").get<int>();
    if (e.at("corr").is_number()) nm.corr = e.at("corr").get<double>();
    nm.pt_j = e.at("pt_j").get<double>();
    nm.pt_s = e.at("pt_s").get<double>();
    nm.lambda_j = e.at("lambda_jro").get<double>();
    nm.lambda_s = e.at("lambda_sro").get<double>();
    rep.neurons.push_back(nm);
  }
  rep.aggregate();
  return rep;
}

std::string report_to_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "neuron,corr,pt_j,pt_s,lambda_jro,lambda_sro\n";
  char buf[256];
  for (const auto& nm : report.neurons) {
    if (nm.corr)
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", nm.neuron, *nm.corr,
                    nm.pt_j, nm.pt_s, nm.lambda_j, nm.lambda_s);
    else
      std::snprintf(buf, sizeof(buf), "%d,undefined,%.9g,%.9g,%.9g,%.9g\n", nm.neuron, nm.pt_j,
                    nm.pt_s, nm.lambda_j, nm.lambda_s);
    os << buf;
  }
  return os.str();
}

}  // namespace sacnn
