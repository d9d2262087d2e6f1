#include "sacnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sacnn/parallel.hpp"

namespace sacnn {

namespace {

constexpr double kTwoPi = 6.283185307179586;

struct Window {
  int row0, col0, rows, cols;
};

Window clip_window(double cr, double cc, double radius, int size) {
  int r0 = std::max(0, static_cast<int>(std::floor(cr - radius)));
  int r1 = std::min(size - 1, static_cast<int>(std::ceil(cr + radius)));
  int c0 = std::max(0, static_cast<int>(std::floor(cc - radius)));
  int c1 = std::min(size - 1, static_cast<int>(std::ceil(cc + radius)));
  if (r1 < r0 || c1 < c0) return {0, 0, 0, 0};
  return {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

}  // namespace

// ---------------------------------------------------------------------------
// NeuronEvaluator
// ---------------------------------------------------------------------------

double NeuronEvaluator::Probe::energy(std::span<const float> image, int stride) const {
  double e = 0.0, o = 0.0;
  for (int y = 0; y < rows; ++y) {
    const float* irow = image.data() + static_cast<std::size_t>(row0 + y) * stride + col0;
    const float* erow = even.data() + static_cast<std::size_t>(y) * cols;
    const float* orow = odd.data() + static_cast<std::size_t>(y) * cols;
    for (int x = 0; x < cols; ++x) {
      e += irow[x] * erow[x];
      o += irow[x] * orow[x];
    }
  }
  return e * e + o * o;
}

NeuronEvaluator::NeuronEvaluator(const SyntheticNeuron& neuron, int image_size)
    : neuron_(neuron), size_(image_size) {
  center_ = build_probe(neuron.gabor.center_row, neuron.gabor.center_col, neuron.gabor, size_);
  const double r_mid = 0.5 * (neuron.annulus_inner + neuron.annulus_outer);
  const int n_ring = 12;
  for (int k = 0; k < n_ring; ++k) {
    const double phi = kTwoPi * k / n_ring;
    const double pr = neuron.gabor.center_row + r_mid * std::sin(phi);
    const double pc = neuron.gabor.center_col + r_mid * std::cos(phi);
    GaborParams pg = neuron.gabor;
    pg.center_row = pr;
    pg.center_col = pc;
    Probe p = build_probe(pr, pc, pg, size_);
    if (p.rows > 0 && p.cols > 0) ring_.push_back(std::move(p));
  }
}

NeuronEvaluator::Probe NeuronEvaluator::build_probe(double cr, double cc, const GaborParams& g,
                                                    int size) {
  NeuronEvaluator::Probe p;
  const double radius = std::max(2.0, 2.5 * g.sigma);
  const Window w = clip_window(cr, cc, radius, size);
  p.row0 = w.row0;
  p.col0 = w.col0;
  p.rows = w.rows;
  p.cols = w.cols;
  if (w.rows <= 0 || w.cols <= 0) return p;
  p.even.resize(static_cast<std::size_t>(w.rows) * w.cols);
  p.odd.resize(p.even.size());
  std::vector<double> env(p.even.size());
  const double ct = std::cos(g.theta), st = std::sin(g.theta);
  double env_sum = 0.0, even_sum = 0.0, odd_sum = 0.0;
  for (int y = 0; y < w.rows; ++y) {
    for (int x = 0; x < w.cols; ++x) {
      const double dy = (w.row0 + y) - cr;
      const double dx = (w.col0 + x) - cc;
      const double u = dx * ct + dy * st;
      const double v = -dx * st + dy * ct;
      const double e = std::exp(-(u * u + v * v) / (2.0 * g.sigma * g.sigma));
      const double arg = kTwoPi * g.freq * u + g.phase;
      const std::size_t idx = static_cast<std::size_t>(y) * w.cols + x;
      env[idx] = e;
      p.even[idx] = static_cast<float>(e * std::cos(arg));
      p.odd[idx] = static_cast<float>(e * std::sin(arg));
      env_sum += e;
      even_sum += p.even[idx];
      odd_sum += p.odd[idx];
    }
  }
  // Zero-DC correction so a blank image yields zero energy, then L2 scaling.
  if (env_sum > 0) {
    const double ke = even_sum / env_sum, ko = odd_sum / env_sum;
    for (std::size_t i = 0; i < env.size(); ++i) {
      p.even[i] -= static_cast<float>(ke * env[i]);
      p.odd[i] -= static_cast<float>(ko * env[i]);
    }
  }
  double ne = 0, no = 0;
  for (std::size_t i = 0; i < p.even.size(); ++i) {
    ne += static_cast<double>(p.even[i]) * p.even[i];
    no += static_cast<double>(p.odd[i]) * p.odd[i];
  }
  ne = std::sqrt(ne);
  no = std::sqrt(no);
  if (ne > 1e-12)
    for (auto& v : p.even) v = static_cast<float>(v / ne);
  if (no > 1e-12)
    for (auto& v : p.odd) v = static_cast<float>(v / no);
  return p;
}

double NeuronEvaluator::center_energy(std::span<const float> image) const {
  return center_.energy(image, size_);
}

double NeuronEvaluator::surround_similarity(std::span<const float> image) const {
  if (ring_.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& p : ring_) acc += p.energy(image, size_);
  return (acc / static_cast<double>(ring_.size())) / neuron_.surround_norm;
}

double NeuronEvaluator::noise_free(std::span<const float> image) const {
  const double e = center_energy(image);
  const double mod = 1.0 + neuron_.surround_gain * surround_similarity(image);
  const double driven = e * mod;
  return neuron_.scale * std::max(0.0, driven) + neuron_.offset;
}

double neuron_response(const SyntheticNeuron& n, std::span<const float> image) {
  return NeuronEvaluator(n).noise_free(image);
}

double neuron_response_noisy(const SyntheticNeuron& n, std::span<const float> image, Rng& rng) {
  const double r = neuron_response(n, image) + n.noise_sigma * rng.normal();
  return std::max(0.0, r);
}

// ---------------------------------------------------------------------------
// Procedural images
// ---------------------------------------------------------------------------

namespace {

// Adds amplitude * gabor(theta, freq, phase, sigma) centered at (cr, cc).
void add_patch(std::vector<float>& img, int size, double cr, double cc, const GaborParams& g,
               double amplitude) {
  const Window w = clip_window(cr, cc, 2.5 * g.sigma, size);
  const double ct = std::cos(g.theta), st = std::sin(g.theta);
  for (int y = 0; y < w.rows; ++y) {
    for (int x = 0; x < w.cols; ++x) {
      const double dy = (w.row0 + y) - cr;
      const double dx = (w.col0 + x) - cc;
      const double u = dx * ct + dy * st;
      const double v = -dx * st + dy * ct;
      const double e = std::exp(-(u * u + v * v) / (2.0 * g.sigma * g.sigma));
      img[static_cast<std::size_t>(w.row0 + y) * size + (w.col0 + x)] +=
          static_cast<float>(amplitude * e * std::cos(kTwoPi * g.freq * u + g.phase));
    }
  }
}

}  // namespace

std::vector<float> make_image(const SynthConfig& cfg, Rng& rng) {
  const int n = cfg.image_size;
  std::vector<double> acc(static_cast<std::size_t>(n) * n, 0.0);

  // 1/f-style base: octaves of bilinearly upsampled white noise, coarse
  // octaves weighted sqrt(2) more per level.
  for (int oct = 0; oct < 5; ++oct) {
    const int step = 1 << oct;
    const int gn = n / step + 2;
    std::vector<double> grid(static_cast<std::size_t>(gn) * gn);
    for (auto& v : grid) v = rng.normal();
    const double weight = std::pow(2.0, 0.5 * oct);
    for (int y = 0; y < n; ++y) {
      const double gy = static_cast<double>(y) / step;
      const int y0 = static_cast<int>(gy);
      const double fy = gy - y0;
      for (int x = 0; x < n; ++x) {
        const double gx = static_cast<double>(x) / step;
        const int x0 = static_cast<int>(gx);
        const double fx = gx - x0;
        const double v00 = grid[static_cast<std::size_t>(y0) * gn + x0];
        const double v01 = grid[static_cast<std::size_t>(y0) * gn + x0 + 1];
        const double v10 = grid[static_cast<std::size_t>(y0 + 1) * gn + x0];
        const double v11 = grid[static_cast<std::size_t>(y0 + 1) * gn + x0 + 1];
        const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        acc[static_cast<std::size_t>(y) * n + x] += weight * v;
      }
    }
  }
  double mean = 0;
  for (double v : acc) mean += v;
  mean /= static_cast<double>(acc.size());
  double var = 0;
  for (double v : acc) var += (v - mean) * (v - mean);
  var /= static_cast<double>(acc.size());
  const double inv_std = var > 0 ? 1.0 / std::sqrt(var) : 1.0;

  std::vector<float> img(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i)
    img[i] = static_cast<float>(0.5 + 0.16 * (acc[i] - mean) * inv_std);

  const double draw = rng.uniform();
  if (draw < cfg.contour_prob) {
    // Collinear chain through the central region: one patch near the center
    // plus segments displaced along the stripe axis, all same orientation.
    GaborParams g;
    g.theta = rng.uniform(0.0, 3.141592653589793);
    g.freq = rng.uniform(cfg.freq_lo, cfg.freq_hi);
    g.phase = rng.uniform(0.0, kTwoPi);
    g.sigma = rng.uniform(2.0, 3.2);
    const double cr = rng.uniform(20.0, 29.0);
    const double cc = rng.uniform(20.0, 29.0);
    const double amp = rng.uniform(0.35, 0.6);
    const double dist = rng.uniform(7.0, 11.0);
    const int extra = 1 + static_cast<int>(rng.below(3));  // 1..3 per side
    const double dy = std::cos(g.theta), dx = -std::sin(g.theta);
    add_patch(img, n, cr, cc, g, amp);
    for (int j = 1; j <= extra; ++j) {
      add_patch(img, n, cr + j * dist * dy, cc + j * dist * dx, g, amp);
      add_patch(img, n, cr - j * dist * dy, cc - j * dist * dx, g, amp);
    }
  } else if (draw < cfg.contour_prob + cfg.patch_prob) {
    const int count = 1 + static_cast<int>(rng.below(2));
    for (int p = 0; p < count; ++p) {
      GaborParams g;
      g.theta = rng.uniform(0.0, 3.141592653589793);
      g.freq = rng.uniform(cfg.freq_lo, cfg.freq_hi);
      g.phase = rng.uniform(0.0, kTwoPi);
      g.sigma = rng.uniform(2.0, 3.4);
      add_patch(img, n, rng.uniform(6.0, 43.0), rng.uniform(6.0, 43.0), g,
                rng.uniform(0.3, 0.6));
    }
  }
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

std::vector<float> gabor_patch_image(int size, const GaborParams& g, double amplitude) {
  std::vector<float> img(static_cast<std::size_t>(size) * size, 0.5f);
  add_patch(img, size, g.center_row, g.center_col, g, amplitude);
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

// ---------------------------------------------------------------------------
// Neuron generation with closed-loop calibration
// ---------------------------------------------------------------------------

std::vector<SyntheticNeuron> generate_neurons(int m, const SynthConfig& cfg, std::uint64_t seed) {
  if (m < 1) throw ConfigError("generate_neurons: need at least one neuron");
  if (cfg.surround_fraction < 0.0 || cfg.surround_fraction > 1.0)
    throw ConfigError("generate_neurons: surround_fraction must be in [0, 1]");

  std::vector<SyntheticNeuron> neurons(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    SyntheticNeuron& n = neurons[static_cast<std::size_t>(i)];
    n.gabor.theta = rng.uniform(0.0, 3.141592653589793);
    n.gabor.freq = rng.uniform(cfg.freq_lo, cfg.freq_hi);
    n.gabor.phase = rng.uniform(0.0, kTwoPi);
    n.gabor.sigma = rng.uniform(cfg.sigma_lo, cfg.sigma_hi);
    const double half = (cfg.image_size - 1) / 2.0;
    n.gabor.center_row = half + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
    n.gabor.center_col = half + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
    n.annulus_inner = 2.5 * n.gabor.sigma + 1.0;
    n.annulus_outer = n.annulus_inner + 6.0;
    n.surround_gain = rng.uniform(cfg.gain_lo, cfg.gain_hi);  // sign applied below
  }

  // Exactly round(m * fraction) neurons keep a surround gain.
  const int n_gain = static_cast<int>(std::lround(cfg.surround_fraction * m));
  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  Rng pick(mix_seed(seed, 0x9a12));
  pick.shuffle(order);
  for (int i = n_gain; i < m; ++i) neurons[static_cast<std::size_t>(order[i])].surround_gain = 0.0;

  // Calibration probes: set the surround normalizer so the surround term
  // averages 1, then the output scale so noise-free responses have unit std.
  const int n_probe = std::max(32, cfg.calibration_probes);
  std::vector<std::vector<float>> probes;
  probes.reserve(static_cast<std::size_t>(n_probe));
  Rng prng(mix_seed(seed, 0xca11b));
  for (int i = 0; i < n_probe; ++i) probes.push_back(make_image(cfg, prng));

  for (auto& n : neurons) {
    NeuronEvaluator ev(n, cfg.image_size);
    std::vector<double> energy(probes.size()), surround(probes.size());
    double s_mean = 0.0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      energy[i] = ev.center_energy(probes[i]);
      surround[i] = ev.surround_similarity(probes[i]);  // still un-normalized (norm=1)
      s_mean += surround[i];
    }
    s_mean /= static_cast<double>(probes.size());
    n.surround_norm = s_mean > 1e-12 ? s_mean : 1.0;

    double r_mean = 0.0;
    std::vector<double> raw(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
      const double s = surround[i] / n.surround_norm;
      raw[i] = std::max(0.0, energy[i] * (1.0 + n.surround_gain * s));
      r_mean += raw[i];
    }
    r_mean /= static_cast<double>(raw.size());
    double r_var = 0.0;
    for (double r : raw) r_var += (r - r_mean) * (r - r_mean);
    r_var /= static_cast<double>(raw.size());
    const double r_std = std::sqrt(r_var);
    n.scale = r_std > 1e-9 ? 1.0 / r_std : 1.0;
    n.offset = cfg.offset_frac;
    n.noise_sigma = cfg.noise_frac;
  }
  return neurons;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Tensor Dataset::image(int index) const {
  if (index < 0 || index >= n_total()) throw ConfigError("image index out of range");
  const std::size_t px = static_cast<std::size_t>(height) * width;
  std::vector<float> buf(images.begin() + static_cast<std::ptrdiff_t>(px) * index,
                         images.begin() + static_cast<std::ptrdiff_t>(px) * (index + 1));
  return Tensor::from({1, height, width}, std::move(buf));
}

void Dataset::validate() const {
  const std::size_t px = static_cast<std::size_t>(height) * width;
  if (images.size() != px * static_cast<std::size_t>(n_total()))
    throw DataError("dataset image buffer has wrong size");
  if (responses.size() != static_cast<std::size_t>(n_total()) * n_neurons)
    throw DataError("dataset response buffer has wrong size");
  if (n_train < 1 || n_val < 1) throw DataError("dataset needs non-empty train and val splits");
  for (float v : responses)
    if (!is_finite(v) || v < 0.0f) throw DataError("dataset responses must be finite and nonnegative");
  for (float v : images)
    if (!is_finite(v)) throw DataError("dataset images must be finite");
}

Dataset generate_dataset(int n_train, int n_val, const SynthConfig& cfg,
                         const std::vector<SyntheticNeuron>& neurons, std::uint64_t seed,
                         int n_jobs) {
  if (n_train < 1 || n_val < 1) throw ConfigError("generate_dataset: splits must be non-empty");
  if (neurons.empty()) throw ConfigError("generate_dataset: no neurons");
  Dataset d;
  d.n_train = n_train;
  d.n_val = n_val;
  d.n_neurons = static_cast<int>(neurons.size());
  d.height = d.width = cfg.image_size;
  d.seed = seed;
  d.neurons = neurons;
  const std::size_t px = static_cast<std::size_t>(d.height) * d.width;
  d.images.resize(px * static_cast<std::size_t>(d.n_total()));
  d.responses.resize(static_cast<std::size_t>(d.n_total()) * d.n_neurons);

  std::vector<NeuronEvaluator> evals;
  evals.reserve(neurons.size());
  for (const auto& n : neurons) evals.emplace_back(n, cfg.image_size);

  parallel_for(n_jobs, d.n_total(), [&](int i) {
    Rng rng(mix_seed(seed, 1000003ull + static_cast<std::uint64_t>(i)));
    std::vector<float> img = make_image(cfg, rng);
    std::copy(img.begin(), img.end(), d.images.begin() + static_cast<std::ptrdiff_t>(px) * i);
    for (int m = 0; m < d.n_neurons; ++m) {
      const double nf = evals[static_cast<std::size_t>(m)].noise_free(img);
      double r = nf;
      if (i < n_train) r = std::max(0.0, nf + neurons[static_cast<std::size_t>(m)].noise_sigma * rng.normal());
      d.responses[static_cast<std::size_t>(i) * d.n_neurons + m] = static_cast<float>(r);
    }
  });
  d.validate();
  return d;
}

Dataset generate_dataset_from_images(int n_train, int n_val, const std::string& image_dir,
                                     const std::vector<SyntheticNeuron>& neurons,
                                     std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (!fs::is_directory(image_dir)) throw DataError("image directory '" + image_dir + "' not found");
  for (const auto& e : fs::directory_iterator(image_dir))
    if (e.is_regular_file() && e.path().extension() == ".f32") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  const int total = n_train + n_val;
  if (static_cast<int>(files.size()) < total)
    throw DataError("need " + std::to_string(total) + " images, found " +
                    std::to_string(files.size()) + " in '" + image_dir + "'");

  Dataset d;
  d.n_train = n_train;
  d.n_val = n_val;
  d.n_neurons = static_cast<int>(neurons.size());
  d.seed = seed;
  d.neurons = neurons;
  const std::size_t px = static_cast<std::size_t>(d.height) * d.width;
  d.images.resize(px * static_cast<std::size_t>(total));
  d.responses.resize(static_cast<std::size_t>(total) * d.n_neurons);

  for (int i = 0; i < total; ++i) {
    std::ifstream f(files[static_cast<std::size_t>(i)], std::ios::binary);
    f.read(reinterpret_cast<char*>(d.images.data() + px * static_cast<std::size_t>(i)),
           static_cast<std::streamsize>(px * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(px * sizeof(float)))
      throw DataError("image file '" + files[static_cast<std::size_t>(i)].string() +
                      "' is not a 50x50 float32 raster");
  }
  std::vector<NeuronEvaluator> evals;
  for (const auto& n : neurons) evals.emplace_back(n, d.height);
  for (int i = 0; i < total; ++i) {
    Rng rng(mix_seed(seed, 1000003ull + static_cast<std::uint64_t>(i)));
    std::span<const float> img{d.images.data() + px * static_cast<std::size_t>(i), px};
    for (int m = 0; m < d.n_neurons; ++m) {
      const double nf = evals[static_cast<std::size_t>(m)].noise_free(img);
      double r = nf;
      if (i < n_train) r = std::max(0.0, nf + neurons[static_cast<std::size_t>(m)].noise_sigma * rng.normal());
      d.responses[static_cast<std::size_t>(i) * d.n_neurons + m] = static_cast<float>(r);
    }
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Container IO
// ---------------------------------------------------------------------------

namespace {

void write_file(const std::string& path, const void* data, std::size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw DataError("short write on '" + path + "'");
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open '" + path + "'");
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  f.read(buf.data(), n);
  if (f.gcount() != n) throw DataError("short read on '" + path + "'");
  return buf;
}

std::string neuron_line(const SyntheticNeuron& n) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "theta=%.17g freq=%.17g phase=%.17g sigma=%.17g row=%.17g col=%.17g gain=%.17g "
                "ann_in=%.17g ann_out=%.17g noise=%.17g scale=%.17g offset=%.17g snorm=%.17g",
                n.gabor.theta, n.gabor.freq, n.gabor.phase, n.gabor.sigma, n.gabor.center_row,
                n.gabor.center_col, n.surround_gain, n.annulus_inner, n.annulus_outer,
                n.noise_sigma, n.scale, n.offset, n.surround_norm);
  return buf;
}

SyntheticNeuron parse_neuron_line(const std::string& line) {
  SyntheticNeuron n;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw DataError("bad neuron entry '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const double v = std::stod(tok.substr(eq + 1));
    if (key == "theta") n.gabor.theta = v;
    else if (key == "freq") n.gabor.freq = v;
    else if (key == "phase") n.gabor.phase = v;
    else if (key == "sigma") n.gabor.sigma = v;
    else if (key == "row") n.gabor.center_row = v;
    else if (key == "col") n.gabor.center_col = v;
    else if (key == "gain") n.surround_gain = v;
    else if (key == "ann_in") n.annulus_inner = v;
    else if (key == "ann_out") n.annulus_outer = v;
    else if (key == "noise") n.noise_sigma = v;
    else if (key == "scale") n.scale = v;
    else if (key == "offset") n.offset = v;
    else if (key == "snorm") n.surround_norm = v;
    else throw DataError("unknown neuron field '" + key + "'");
  }
  return n;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& dir) {
  data.validate();
  std::filesystem::create_directories(dir);
  const std::string img_path = dir + "/images.f32";
  const std::string resp_path = dir + "/responses.f32";
  write_file(img_path, data.images.data(), data.images.size() * sizeof(float));
  write_file(resp_path, data.responses.data(), data.responses.size() * sizeof(float));

  std::ostringstream meta;
  meta << "format_version = 1\n";
  meta << "n_train = " << data.n_train << "\n";
  meta << "n_val = " << data.n_val << "\n";
  meta << "n_neurons = " << data.n_neurons << "\n";
  meta << "height = " << data.height << "\n";
  meta << "width = " << data.width << "\n";
  meta << "seed = " << data.seed << "\n";
  meta << "val_noise_free = 1\n";
  meta << "images_crc32 = " << crc32(data.images.data(), data.images.size() * sizeof(float))
       << "\n";
  meta << "responses_crc32 = "
       << crc32(data.responses.data(), data.responses.size() * sizeof(float)) << "\n";
  for (std::size_t i = 0; i < data.neurons.size(); ++i)
    meta << "neuron_" << i << " = " << neuron_line(data.neurons[i]) << "\n";
  const std::string m = meta.str();
  write_file(dir + "/meta", m.data(), m.size());
}

Dataset load_dataset(const std::string& dir) {
  const auto meta_raw = read_file(dir + "/meta");
  Dataset d;
  std::uint32_t img_crc = 0, resp_crc = 0;
  bool have_img_crc = false, have_resp_crc = false;
  std::istringstream is(std::string(meta_raw.begin(), meta_raw.end()));
  std::string line;
  std::vector<std::pair<std::size_t, SyntheticNeuron>> neuron_entries;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad meta line: " + line);
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!value.empty() && value.front() == ' ') value.erase(value.begin());
    if (key == "format_version") {
      if (std::stoi(value) != 1) throw DataError("unsupported dataset format version " + value);
    } else if (key == "n_train") d.n_train = std::stoi(value);
    else if (key == "n_val") d.n_val = std::stoi(value);
    else if (key == "n_neurons") d.n_neurons = std::stoi(value);
    else if (key == "height") d.height = std::stoi(value);
    else if (key == "width") d.width = std::stoi(value);
    else if (key == "seed") d.seed = std::stoull(value);
    else if (key == "images_crc32") { img_crc = static_cast<std::uint32_t>(std::stoul(value)); have_img_crc = true; }
    else if (key == "responses_crc32") { resp_crc = static_cast<std::uint32_t>(std::stoul(value)); have_resp_crc = true; }
    else if (key.rfind("neuron_", 0) == 0)
      neuron_entries.emplace_back(std::stoul(key.substr(7)), parse_neuron_line(value));
    else if (key == "val_noise_free") { /* informational */ }
    else throw DataError("unknown meta key '" + key + "'");
  }
  if (!have_img_crc || !have_resp_crc) throw DataError("dataset meta is missing checksums");

  const auto img_raw = read_file(dir + "/images.f32");
  const auto resp_raw = read_file(dir + "/responses.f32");
  const std::size_t px = static_cast<std::size_t>(d.height) * d.width;
  if (img_raw.size() != px * static_cast<std::size_t>(d.n_total()) * sizeof(float))
    throw DataError("images.f32 size does not match meta shapes");
  if (resp_raw.size() != static_cast<std::size_t>(d.n_total()) * d.n_neurons * sizeof(float))
    throw DataError("responses.f32 size does not match meta shapes");
  if (crc32(img_raw.data(), img_raw.size()) != img_crc)
    throw DataError("images.f32 checksum mismatch");
  if (crc32(resp_raw.data(), resp_raw.size()) != resp_crc)
    throw DataError("responses.f32 checksum mismatch");

  d.images.resize(img_raw.size() / sizeof(float));
  std::memcpy(d.images.data(), img_raw.data(), img_raw.size());
  d.responses.resize(resp_raw.size() / sizeof(float));
  std::memcpy(d.responses.data(), resp_raw.data(), resp_raw.size());

  std::sort(neuron_entries.begin(), neuron_entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [idx, n] : neuron_entries) d.neurons.push_back(n);
  d.validate();
  return d;
}

}  // namespace sacnn
