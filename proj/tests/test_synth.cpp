#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sacnn/synth.hpp"

using namespace sacnn;

TEST_CASE("neuron generation is deterministic and honors the gain fraction") {
  SynthConfig cfg;
  auto a = generate_neurons(12, cfg, 5);
  auto b = generate_neurons(12, cfg, 5);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].gabor.theta == b[i].gabor.theta);
    CHECK(a[i].surround_gain == b[i].surround_gain);
    CHECK(a[i].scale == b[i].scale);
  }
  int gained = 0;
  for (const auto& n : a)
    if (n.surround_gain != 0.0) ++gained;
  CHECK(gained == static_cast<int>(std::lround(0.65 * 12)));

  SynthConfig pure = cfg;
  pure.surround_fraction = 0.0;
  for (const auto& n : generate_neurons(6, pure, 5)) CHECK(n.surround_gain == 0.0);

  // Default envelope (4 sigma) averages ~11 px.
  double env = 0;
  auto many = generate_neurons(64, cfg, 9);
  for (const auto& n : many) env += 4.0 * n.gabor.sigma;
  env /= static_cast<double>(many.size());
  CHECK(env > 10.0);
  CHECK(env < 12.0);
}

TEST_CASE("blank image elicits the offset-level response") {
  SynthConfig cfg;
  auto neurons = generate_neurons(3, cfg, 2);
  std::vector<float> blank(2500, 0.37f);
  for (const auto& n : neurons) {
    const double r = neuron_response(n, blank);
    // Zero-DC kernels see nothing in a uniform field.
    CHECK(r == doctest::Approx(n.offset).epsilon(1e-4));
  }
}

TEST_CASE("the preferred patch maximizes the response over a probe grid") {
  SynthConfig cfg;
  auto neurons = generate_neurons(4, cfg, 31);
  for (const auto& n : neurons) {
    NeuronEvaluator ev(n);
    GaborParams pref = n.gabor;
    std::vector<float> own = gabor_patch_image(50, pref, 0.5);
    const double own_resp = ev.noise_free(own);
    // Orientation x frequency grid at the same position/envelope.
    for (int oi = 0; oi < 8; ++oi) {
      for (int fi = 0; fi < 5; ++fi) {
        GaborParams g = pref;
        g.theta = 3.141592653589793 * oi / 8.0;
        g.freq = 0.08 + 0.03 * fi;
        // Skip probes that nearly coincide with the preferred one.
        if (std::abs(g.theta - pref.theta) < 0.2 && std::abs(g.freq - pref.freq) < 0.015) continue;
        const double r = ev.noise_free(gabor_patch_image(50, g, 0.5));
        CHECK(r <= own_resp * 1.0001);
      }
    }
  }
}

TEST_CASE("pure-RF neurons ignore the surround term") {
  SynthConfig cfg;
  cfg.surround_fraction = 0.0;
  auto neurons = generate_neurons(2, cfg, 7);
  Rng rng(123);
  for (const auto& n : neurons) {
    REQUIRE(n.surround_gain == 0.0);
    NeuronEvaluator ev(n);
    for (int i = 0; i < 10; ++i) {
      auto img = make_image(cfg, rng);
      const double full = ev.noise_free(img);
      const double rf_only = n.scale * std::max(0.0, ev.center_energy(img)) + n.offset;
      CHECK(full == doctest::Approx(rf_only).epsilon(1e-9));
    }
  }
}

TEST_CASE("responses are sparse: <1% of 50k images above half peak") {
  SynthConfig cfg;
  auto neurons = generate_neurons(3, cfg, 12);
  std::vector<NeuronEvaluator> evals;
  for (const auto& n : neurons) evals.emplace_back(n);
  const int n_img = 50000;
  std::vector<std::vector<double>> responses(evals.size());
  Rng rng(999);
  for (int i = 0; i < n_img; ++i) {
    auto img = make_image(cfg, rng);
    for (std::size_t m = 0; m < evals.size(); ++m) responses[m].push_back(evals[m].noise_free(img));
  }
  for (auto& rs : responses) {
    const double peak = *std::max_element(rs.begin(), rs.end());
    int above = 0;
    for (double r : rs)
      if (r > 0.5 * peak) ++above;
    CHECK(static_cast<double>(above) / n_img < 0.01);
  }
}

TEST_CASE("dataset generation, shapes, determinism, and container round-trip") {
  SynthConfig cfg;
  cfg.calibration_probes = 64;
  auto neurons = generate_neurons(3, cfg, 4);
  Dataset d = generate_dataset(120, 40, cfg, neurons, 4);
  CHECK(d.n_train == 120);
  CHECK(d.n_val == 40);
  CHECK(d.n_neurons == 3);
  CHECK(d.images.size() == 160u * 2500u);
  CHECK(d.responses.size() == 160u * 3u);
  d.validate();

  // Train and validation blocks are distinct images.
  bool differ = false;
  for (int p = 0; p < 2500; ++p)
    if (d.images[static_cast<std::size_t>(p)] !=
        d.images[static_cast<std::size_t>(120 * 2500 + p)])
      differ = true;
  CHECK(differ);

  Dataset d2 = generate_dataset(120, 40, cfg, neurons, 4);
  CHECK(d.images == d2.images);  // bit-identical regeneration
  CHECK(d.responses == d2.responses);

  const std::string dir = "synth_roundtrip_ds";
  save_dataset(d, dir);
  Dataset r = load_dataset(dir);
  CHECK(r.images == d.images);
  CHECK(r.responses == d.responses);
  CHECK(r.n_neurons == 3);
  REQUIRE(r.neurons.size() == 3);
  CHECK(r.neurons[1].surround_gain == doctest::Approx(neurons[1].surround_gain));
  CHECK(r.neurons[1].scale == doctest::Approx(neurons[1].scale));

  // Truncating a data file breaks the checksum/shape validation.
  std::filesystem::resize_file(dir + "/images.f32", 1000);
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("noise applies to the train split only") {
  SynthConfig cfg;
  cfg.calibration_probes = 64;
  cfg.noise_frac = 0.3;
  auto neurons = generate_neurons(2, cfg, 8);
  Dataset d = generate_dataset(60, 30, cfg, neurons, 8);
  std::vector<NeuronEvaluator> evals;
  for (const auto& n : neurons) evals.emplace_back(n);
  // Validation responses match the closed-form noise-free values exactly.
  const std::size_t px = 2500;
  for (int i = 0; i < d.n_val; ++i) {
    const int idx = d.val_index(i);
    std::span<const float> img{d.images.data() + px * static_cast<std::size_t>(idx), px};
    for (int m = 0; m < 2; ++m)
      CHECK(d.response(idx, m) ==
            doctest::Approx(evals[static_cast<std::size_t>(m)].noise_free(img)).epsilon(1e-5));
  }
  // Train responses differ from noise-free for most images under heavy noise.
  int hits = 0;
  for (int i = 0; i < d.n_train; ++i) {
    std::span<const float> img{d.images.data() + px * static_cast<std::size_t>(i), px};
    if (std::abs(d.response(i, 0) - evals[0].noise_free(img)) > 1e-7) ++hits;
  }
  CHECK(hits > d.n_train / 2);
}

TEST_CASE("user image directory source") {
  namespace fs = std::filesystem;
  const std::string dir = "user_images_src";
  fs::create_directories(dir);
  Rng rng(5);
  SynthConfig cfg;
  for (int i = 0; i < 8; ++i) {
    auto img = make_image(cfg, rng);
    char name[64];
    std::snprintf(name, sizeof(name), "%s/img_%03d.f32", dir.c_str(), i);
    std::ofstream f(name, std::ios::binary);
    f.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(float)));
  }
  cfg.calibration_probes = 32;
  auto neurons = generate_neurons(2, cfg, 3);
  Dataset d = generate_dataset_from_images(6, 2, dir, neurons, 3);
  CHECK(d.n_train == 6);
  CHECK(d.n_val == 2);
  // Asking for more images than exist is an explicit data error.
  CHECK_THROWS_AS(generate_dataset_from_images(20, 5, dir, neurons, 3), DataError);
  fs::remove_all(dir);
}
