#pragma once

#include <span>
#include <string>
#include <vector>

#include "sacnn/common.hpp"
#include "sacnn/tensor.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Ground-truth synthetic neurons and the on-disk dataset container.
//
// A neuron is an oriented quadrature Gabor energy unit at a fixed retinal
// position whose output is multiplicatively modulated by how much same-
// orientation energy appears in an annulus around its envelope:
//
//   response = scale * relu(E_center * (1 + gain * surround)) + offset (+noise)
//
// Images are 1/f-style filtered noise with embedded oriented patches; a
// fraction of embeds are collinear chains so that surround-facilitated peaks
// actually occur.
// ---------------------------------------------------------------------------

struct GaborParams {
  double theta = 0.0;       // orientation, radians
  double freq = 0.12;       // cycles / pixel
  double phase = 0.0;       // radians
  double sigma = 2.6;       // envelope std, pixels
  double center_row = 24.5;
  double center_col = 24.5;
};

struct SyntheticNeuron {
  GaborParams gabor;
  double surround_gain = 0.0;    // signed; 0 = classical-RF-only neuron
  double annulus_inner = 7.0;    // pixels from center
  double annulus_outer = 13.0;
  double noise_sigma = 0.0;      // additive response noise (train split only)
  double scale = 1.0;            // > 0
  double offset = 0.0;
  double surround_norm = 1.0;    // calibration divisor for the surround term
};

struct SynthConfig {
  double surround_fraction = 0.65;  // fraction of neurons with gain > 0
  double gain_lo = 0.9, gain_hi = 1.8;
  double sigma_lo = 2.2, sigma_hi = 3.1;
  double freq_lo = 0.09, freq_hi = 0.18;
  double center_jitter = 2.0;       // uniform offset of the RF center, pixels
  double noise_frac = 0.08;         // response noise as a fraction of response std
  double offset_frac = 0.05;        // baseline response as a fraction of std
  // image model
  int image_size = 50;
  double patch_prob = 0.45;         // chance an image carries 1-2 oriented patches
  double contour_prob = 0.25;       // chance of a collinear patch chain near center
  int calibration_probes = 256;     // images used to set scale / surround_norm
};

// Deterministic in (config, seed); exactly round(m * surround_fraction)
// neurons receive a non-zero surround gain.
std::vector<SyntheticNeuron> generate_neurons(int m, const SynthConfig& cfg, std::uint64_t seed);

// One procedural image, values in [0, 1], row-major 50x50.
std::vector<float> make_image(const SynthConfig& cfg, Rng& rng);
// Renders a pure Gabor patch image (for probe/oracle use).
std::vector<float> gabor_patch_image(int size, const GaborParams& g, double amplitude);

// Precomputed kernels for fast repeated evaluation of one neuron.
class NeuronEvaluator {
 public:
  NeuronEvaluator(const SyntheticNeuron& neuron, int image_size = 50);

  double center_energy(std::span<const float> image) const;
  double surround_similarity(std::span<const float> image) const;  // calibrated
  double noise_free(std::span<const float> image) const;

  const SyntheticNeuron& neuron() const { return neuron_; }

 private:
  struct Probe {
    int row0 = 0, col0 = 0, rows = 0, cols = 0;
    std::vector<float> even, odd;
    double energy(std::span<const float> image, int stride) const;
  };
  static Probe build_probe(double cr, double cc, const GaborParams& g, int size);

  SyntheticNeuron neuron_;
  int size_;
  Probe center_;
  std::vector<Probe> ring_;
};

// One-off helpers (build an evaluator internally).
double neuron_response(const SyntheticNeuron& n, std::span<const float> image);
double neuron_response_noisy(const SyntheticNeuron& n, std::span<const float> image, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Dataset {
  int n_train = 0, n_val = 0, n_neurons = 0;
  int height = 50, width = 50;
  std::uint64_t seed = 0;
  // Train block first, then validation block.
  std::vector<float> images;     // (n_train + n_val) * height * width
  std::vector<float> responses;  // (n_train + n_val) * n_neurons
  std::vector<SyntheticNeuron> neurons;  // empty when not synthetic

  int n_total() const { return n_train + n_val; }
  Tensor image(int index) const;  // 1 x H x W
  float response(int index, int neuron) const {
    return responses[static_cast<std::size_t>(index) * n_neurons + neuron];
  }
  int val_index(int i) const { return n_train + i; }

  void validate() const;
};

// Train responses carry the configured noise; validation responses are stored
// as noise-free ground truth means.
Dataset generate_dataset(int n_train, int n_val, const SynthConfig& cfg,
                         const std::vector<SyntheticNeuron>& neurons, std::uint64_t seed,
                         int n_jobs = 0);

// Same, but images come from a directory of raw 50x50 float32 files (*.f32),
// taken in lexicographic order. Throws DataError when too few are present.
Dataset generate_dataset_from_images(int n_train, int n_val, const std::string& image_dir,
                                     const std::vector<SyntheticNeuron>& neurons,
                                     std::uint64_t seed);

// Directory container: meta (key=value text, with checksums) + images.f32 +
// responses.f32, little-endian row-major float32.
void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace sacnn
