#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sacnn/blocks.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Declarative model construction: block-list specs, the named presets, exact
// parameter counting, and checkpoint serialization.
// ---------------------------------------------------------------------------

enum class BlockKind { kAlpha, kBeta, kSelfAttention };

struct BlockSpec {
  BlockKind kind = BlockKind::kAlpha;
  int channels = 0;  // output channels (alpha/beta); ignored for SA
  int kernel = 0;    // beta kernel size; alpha is fixed at 5
  bool gamma = false;
  bool channel_norm = true;
  bool residual = false;

  bool operator==(const BlockSpec&) const = default;
};

struct ModelSpec {
  std::vector<BlockSpec> blocks;
  ReadoutKind readout = ReadoutKind::kFCL;
  std::array<int, 3> input_shape{1, 50, 50};
  Activation activation = Activation::kReLU;
  std::uint64_t seed = 0;

  bool operator==(const ModelSpec&) const = default;
};

// Output shape of every block in order, validating the chain. Throws
// ShapeError naming the first offending block.
std::vector<std::array<int, 3>> chain_shapes(const ModelSpec& spec);

// The activation shape fed to the readout.
std::array<int, 3> readout_input_shape(const ModelSpec& spec);

// Named presets: ff-CNN, ff+sa-CNN, rf-CNN, rf+sa-CNN, rf+sa-CNN*,
// ff+sa-CNN*, rf+sa-CNN-c375, nobeta-sa, k1-FCL, k3-CTL.
ModelSpec preset(const std::string& name);
std::vector<std::string> preset_names();

// Human-editable spec config (line-based key=value with a block list).
ModelSpec parse_spec_config(const std::string& text);
std::string format_spec_config(const ModelSpec& spec);

// ---------------------------------------------------------------------------

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool frozen = false;
  std::vector<std::uint8_t> freeze_mask;  // empty, or one byte per element

  bool fully_trainable() const { return !frozen && freeze_mask.empty(); }
};

// How training preprocessed inputs, plus where the parameters came from.
// Carried in checkpoints so evaluation applies the same input transform.
struct Provenance {
  std::string stage = "untrained";
  std::uint64_t seed = 0;
  int epochs = 0;
  int neuron = -1;
  bool standardize_input = false;
  float input_mean = 0.0f;
  float input_std = 1.0f;
};

struct ForwardTaps {
  std::vector<Tensor> block_outputs;  // one per block
  std::vector<Tensor> attention;      // one per SA block, (h*w) x (h*w)
  Tensor pre_readout;                 // activation entering the readout
};

struct ParamCountEntry {
  std::string component;
  long count = 0;
};

struct ParamCount {
  long total = 0;
  std::vector<ParamCountEntry> breakdown;
};

class Model {
 public:
  // Deterministic fan-in-scaled uniform initialization from the spec seed
  // (or the override).
  static Model build(const ModelSpec& spec, std::optional<std::uint64_t> seed = {});

  // Raw-image entry points; applies the provenance input transform.
  float predict(const Tensor& image) const;
  Tensor forward(Tape* tape, const Tensor& image, ForwardTaps* taps = nullptr) const;

  // Chain entry points on already-transformed activations. `first_block`
  // skips blocks [0, first_block) and treats `x` as that prefix's output.
  Tensor forward_chain(Tape* tape, const Tensor& x, int first_block,
                       ForwardTaps* taps = nullptr) const;
  // Output of blocks [0, n_blocks) on a transformed input.
  Tensor forward_prefix(const Tensor& x, int n_blocks) const;

  Tensor transform_input(const Tensor& image) const;

  const ModelSpec& spec() const { return spec_; }
  Provenance& provenance() { return provenance_; }
  const Provenance& provenance() const { return provenance_; }

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  NamedParam* find_param(const std::string& name);
  const NamedParam* find_param(const std::string& name) const;

  // Parameter names owned by block `index` ("readout" via readout_param_names).
  std::vector<std::string> block_param_names(int index) const;
  std::vector<std::string> readout_param_names() const;

  ParamCount param_count() const;

  // Optimizer view: every not-fully-frozen parameter, with its mask.
  std::vector<ParamRef<float>> trainable_params();
  void zero_grads();

  // Maintains the frozen flag and the tensor's requires_grad together.
  void set_param_frozen(const std::string& name, bool frozen);
  // Partial freeze: masked elements are never updated; requires_grad stays on.
  void set_param_mask(const std::string& name, std::vector<std::uint8_t> mask);

  ParamCount expected_param_count() const;  // from spec arithmetic alone

 private:
  ModelSpec spec_;
  Provenance provenance_;
  std::vector<NamedParam> params_;
  std::vector<std::array<int, 3>> shapes_;  // per-block output shapes
  // params_ index ranges per block, then readout as the last range.
  std::vector<std::pair<int, int>> ranges_;
};

// Runs the block chain with an arbitrary scalar type using converted copies
// of the model parameters (the gradient checker uses T = double).
template <class T>
std::vector<TensorT<T>> params_as(const Model& m);

template <class T>
TensorT<T> forward_with_params(const ModelSpec& spec, const std::vector<TensorT<T>>& params,
                               TapeT<T>* tape, const TensorT<T>& x);

// ---------------------------------------------------------------------------
// Checkpoints: one binary file per model. Little-endian 32-bit floats,
// length-prefixed names, version + CRC-32 in the header.
// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace sacnn
