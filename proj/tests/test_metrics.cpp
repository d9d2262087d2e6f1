#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "sacnn/common.hpp"
#include "sacnn/metrics.hpp"

using namespace sacnn;

namespace {

// Independent references, deliberately structured differently from the
// library implementations.

// Single-pass moment accumulation (the library centers first).
double oracle_pearson(const std::vector<float>& y, const std::vector<float>& p) {
  long double sy = 0, sp = 0, syy = 0, spp = 0, syp = 0;
  const auto n = static_cast<long double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    sy += y[i];
    sp += p[i];
    syy += static_cast<long double>(y[i]) * y[i];
    spp += static_cast<long double>(p[i]) * p[i];
    syp += static_cast<long double>(y[i]) * p[i];
  }
  const long double cov = syp - sy * sp / n;
  const long double vy = syy - sy * sy / n;
  const long double vp = spp - sp * sp / n;
  return static_cast<double>(cov / std::sqrt(vy * vp));
}

// Repeated max extraction (earliest index wins ties) instead of a sort.
double oracle_jro(const std::vector<float>& y, const std::vector<float>& p, int k) {
  const std::size_t n = y.size();
  std::vector<char> used(n, 0);
  std::vector<std::size_t> top;
  for (int j = 0; j < k; ++j) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!used[i] && (best == n || y[i] > y[best])) best = i;
    used[best] = 1;
    top.push_back(best);
  }
  const float t = y[top.back()];
  int hits = 0;
  for (std::size_t i : top)
    if (p[i] >= t) ++hits;
  return static_cast<double>(hits) / k;
}

// Counting form: predictions >= t are exactly the largest ones >= t.
double oracle_sro(const std::vector<float>& y, const std::vector<float>& p, int k) {
  std::vector<float> ys(y);
  std::sort(ys.begin(), ys.end(), std::greater<float>());
  const float t = ys[static_cast<std::size_t>(k - 1)];
  int count = 0;
  for (float v : p)
    if (v >= t) ++count;
  return static_cast<double>(std::min(count, k)) / k;
}

std::vector<float> rand_vec(Rng& rng, int n, double lo = 0.0, double hi = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

}  // namespace

TEST_CASE("pearson basics") {
  std::vector<float> y{1, 2, 3, 4};
  std::vector<float> self(y);
  CHECK(*pearson(y, self) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<float> neg{-1, -2, -3, -4};
  CHECK(*pearson(y, neg) == doctest::Approx(-1.0).epsilon(1e-12));

  // Hand-checked values (also matched against the one-pass oracle below):
  // (2,3,5,4) gives exactly 0.8, (2,4,5,4) gives 3.5/sqrt(23.75).
  std::vector<float> p08{2, 3, 5, 4};
  CHECK(*pearson(y, p08) == doctest::Approx(0.8).epsilon(1e-12));
  std::vector<float> p2{2, 4, 5, 4};
  CHECK(*pearson(y, p2) == doctest::Approx(3.5 / std::sqrt(23.75)).epsilon(1e-12));
  CHECK(*pearson(y, p2) == doctest::Approx(oracle_pearson(y, p2)).epsilon(1e-9));

  // Constant series are an explicit error value, never a silent zero.
  std::vector<float> flat{2, 2, 2, 2};
  CHECK_FALSE(pearson(y, flat).has_value());
  CHECK_FALSE(pearson(flat, y).has_value());
  CHECK_THROWS_AS(pearson(std::vector<float>{1.0f}, std::vector<float>{1.0f}), ConfigError);
}

TEST_CASE("pearson affine invariance and antisymmetry") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto y = rand_vec(rng, 40, -2.0, 2.0);
    auto p = rand_vec(rng, 40, -2.0, 2.0);
    const double base = *pearson(y, p);
    CHECK(base == doctest::Approx(oracle_pearson(y, p)).epsilon(1e-9));

    const float a = static_cast<float>(rng.uniform(0.1, 5.0));
    const float b = static_cast<float>(rng.uniform(-3.0, 3.0));
    auto ps = p;
    for (auto& v : ps) v = a * v + b;
    CHECK(*pearson(y, ps) == doctest::Approx(base).epsilon(1e-6));

    auto pn = p;
    for (auto& v : pn) v = -v;
    CHECK(*pearson(y, pn) == doctest::Approx(-base).epsilon(1e-6));
  }
}

TEST_CASE("lambda_jro worked example") {
  std::vector<float> y{5, 4, 3, 2, 1};
  std::vector<float> p{1, 5, 4, 0, 0};
  // k=2: threshold is the 2nd real response (4); predictions paired with the
  // top-2 real responses are [1, 5]; one clears the threshold.
  CHECK(lambda_jro(y, p, 2) == doctest::Approx(0.5));
  CHECK(lambda_sro(y, p, 2) == doctest::Approx(1.0));  // top-2 preds are [5, 4]

  std::vector<float> self(y);
  CHECK(lambda_jro(y, self, 3) == doctest::Approx(1.0));
  std::vector<float> low(5, -10.0f);
  CHECK(lambda_jro(y, low, 2) == doctest::Approx(0.0));
  CHECK_THROWS_AS(lambda_jro(y, p, 0), ConfigError);
  CHECK_THROWS_AS(lambda_jro(y, p, 6), ConfigError);
}

TEST_CASE("lambda_sro shift leniency") {
  Rng rng(77);
  auto y = rand_vec(rng, 60);
  auto p = rand_vec(rng, 60);
  auto lifted = p;
  for (auto& v : lifted) v += 1000.0f;
  CHECK(lambda_sro(y, lifted, 5) == doctest::Approx(1.0));
}

TEST_CASE("oracle equivalence and SRO >= JRO on random instances") {
  Rng rng(2718);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(60));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    // Mix continuous and heavily tied discrete values.
    std::vector<float> y(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
    const bool discrete = rng.below(2) == 0;
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] =
          discrete ? static_cast<float>(rng.below(5)) : static_cast<float>(rng.uniform());
      p[static_cast<std::size_t>(i)] =
          discrete ? static_cast<float>(rng.below(5)) : static_cast<float>(rng.uniform());
    }
    const double j = lambda_jro(y, p, k);
    const double s = lambda_sro(y, p, k);
    CHECK(j == oracle_jro(y, p, k));
    CHECK(s == oracle_sro(y, p, k));
    CHECK(s >= j);
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("permuting identical entries never changes a metric") {
  // Equal (y, yhat) pairs carry no order information.
  std::vector<float> y{3, 3, 3, 2, 2, 1};
  std::vector<float> p{7, 5, 5, 4, 4, 0};
  const double j = lambda_jro(y, p, 3);
  const double s = lambda_sro(y, p, 3);
  // Swap the two identical (3,5) pairs and the two identical (2,4) pairs.
  std::vector<float> y2{3, 3, 3, 2, 2, 1};
  std::vector<float> p2{7, 5, 5, 4, 4, 0};
  std::swap(y2[1], y2[2]);
  std::swap(p2[1], p2[2]);
  std::swap(y2[3], y2[4]);
  std::swap(p2[3], p2[4]);
  CHECK(lambda_jro(y2, p2, 3) == j);
  CHECK(lambda_sro(y2, p2, 3) == s);
}

TEST_CASE("peak_tuning uses the top 1% (k=10 at N=1000)") {
  CHECK(peak_k(1000) == 10);
  CHECK(peak_k(150) == 2);  // round(1.5)
  CHECK(peak_k(30) == 1);   // floor at 1

  Rng rng(5);
  auto y = rand_vec(rng, 1000);
  auto self(y);
  auto pt = peak_tuning(y, self);
  CHECK(pt.k == 10);
  CHECK(pt.pt_j == doctest::Approx(100.0));
  CHECK(pt.pt_s == doctest::Approx(100.0));
}

TEST_CASE("random independent predictions score PT_J near 1 at N=1000") {
  // Monte-Carlo: predictions paired with the top-10 real responses are 10
  // independent draws, each clearing the 10th-largest real value with
  // probability ~10/1001, so E[PT_J] ~ 1 (in percent units).
  Rng rng(99);
  double acc = 0.0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto y = rand_vec(rng, 1000);
    auto p = rand_vec(rng, 1000);
    acc += 100.0 * lambda_jro(y, p, 10);
  }
  const double mean_ptj = acc / trials;
  CHECK(std::abs(mean_ptj - 1.0) < 0.5);
}

TEST_CASE("population aggregate") {
  std::vector<double> same{0.4, 0.4, 0.4};
  auto ms = population_aggregate(same);
  CHECK(ms.mean == doctest::Approx(0.4));
  CHECK(ms.sem == doctest::Approx(0.0));

  std::vector<double> two{0.0, 1.0};
  auto m2 = population_aggregate(two);
  CHECK(m2.mean == doctest::Approx(0.5));
  CHECK(m2.sem == doctest::Approx(0.5));  // sample std sqrt(0.5), / sqrt(2)

  std::vector<double> perm{1.0, 0.0};
  auto m3 = population_aggregate(perm);
  CHECK(m3.mean == m2.mean);
  CHECK(m3.sem == m2.sem);

  CHECK_THROWS_AS(population_aggregate(std::vector<double>{1.0}), ConfigError);
}

TEST_CASE("rank order curves") {
  std::vector<float> y{1, 3, 2};
  std::vector<float> p{10, 30, 20};
  auto rc = rank_order_curves(y, p);
  CHECK(rc.real_sorted == std::vector<float>{3, 2, 1});
  CHECK(rc.pred_jro == std::vector<float>{30, 20, 10});
  CHECK(rc.pred_sro == std::vector<float>{30, 20, 10});

  std::vector<float> flat{2, 2, 2};
  auto rf = rank_order_curves(flat, flat);
  CHECK(rf.real_sorted == std::vector<float>{2, 2, 2});

  // Population averaging must rank per neuron first. With y1=[1,0] and
  // y2=[0,1] the rank-then-average curve is [1,0]; averaging first would
  // give the flat [0.5, 0.5].
  auto c1 = rank_order_curves(std::vector<float>{1, 0}, std::vector<float>{1, 0});
  auto c2 = rank_order_curves(std::vector<float>{0, 1}, std::vector<float>{0, 1});
  auto avg = population_rank_curves({c1, c2});
  CHECK(avg.real_sorted == std::vector<float>{1, 0});

  // Averaging identical neurons reproduces the single-neuron curve.
  auto same = population_rank_curves({c1, c1});
  CHECK(same.real_sorted == c1.real_sorted);
  CHECK(same.pred_jro == c1.pred_jro);
}

TEST_CASE("report JSON/CSV round-trip") {
  Rng rng(4);
  std::vector<std::vector<float>> real, pred;
  for (int m = 0; m < 3; ++m) {
    real.push_back(rand_vec(rng, 200));
    pred.push_back(rand_vec(rng, 200));
  }
  auto rep = make_report("unit-model", real, pred);
  CHECK(rep.k == 2);
  CHECK(rep.neurons.size() == 3);

  const std::string json = report_to_json(rep);
  auto back = report_from_json(json);
  CHECK(back.model == rep.model);
  CHECK(back.neurons.size() == rep.neurons.size());
  for (std::size_t i = 0; i < rep.neurons.size(); ++i) {
    CHECK(*back.neurons[i].corr == doctest::Approx(*rep.neurons[i].corr).epsilon(1e-12));
    CHECK(back.neurons[i].pt_j == rep.neurons[i].pt_j);
  }
  CHECK(back.corr.mean == doctest::Approx(rep.corr.mean).epsilon(1e-12));

  const std::string csv = report_to_csv(rep);
  CHECK(csv.find("neuron,corr,pt_j,pt_s") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 neurons
}
