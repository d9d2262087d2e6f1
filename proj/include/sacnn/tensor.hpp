#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sacnn/common.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Dense row-major tensor with reverse-mode automatic differentiation.
//
// TensorT is a cheap value handle onto shared storage; ops return new tensors
// and, when a Tape is supplied and any input requires gradients, record a
// backward closure. Tape::backward replays closures in reverse, accumulating
// gradients additively into every reachable requires-grad leaf.
//
// The library trains in float; the gradient-check harness instantiates the
// same ops at double precision.
// ---------------------------------------------------------------------------

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorT full(std::vector<int> shape, T value, bool requires_grad = false);
  static TensorT from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false);
  static TensorT scalar(T value, bool requires_grad = false);

  bool defined() const { return p_ != nullptr; }
  const std::vector<int>& shape() const { return p_->shape; }
  int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  std::size_t size() const { return p_->values.size(); }

  std::span<T> data() { return {p_->values.data(), p_->values.size()}; }
  std::span<const T> data() const { return {p_->values.data(), p_->values.size()}; }
  T* raw() { return p_->values.data(); }
  const T* raw() const { return p_->values.data(); }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  bool has_grad() const { return !p_->grad.empty(); }
  // Allocates the gradient buffer (zero-filled) on first use.
  std::span<T> grad();
  std::span<const T> grad_view() const { return {p_->grad.data(), p_->grad.size()}; }
  void zero_grad();
  void drop_grad() { p_->grad.clear(); p_->grad.shrink_to_fit(); }

  // Value of a one-element tensor.
  T item() const;

  // Deep copy of values only (fresh storage, no grad, same requires_grad).
  TensorT clone() const;
  // Copies values from src (shapes must match) without touching identity.
  void copy_values_from(const TensorT& src);

  bool all_finite() const;
  // Throws NumericError naming `what` if any stored value is non-finite.
  void check_finite(const std::string& what) const;

  bool same_storage(const TensorT& other) const { return p_ == other.p_; }

 private:
  struct Payload {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Payload> p_;

  static TensorT wrap(std::shared_ptr<Payload> p) {
    TensorT t;
    t.p_ = std::move(p);
    return t;
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Ordered log of backward closures; recording order is a topological order of
// the computation, so one reverse sweep settles every gradient.
template <class T>
class TapeT {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  // `loss` must be a scalar; a tape backs propagate only once.
  void backward(TensorT<T> loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;

// ---------------------------------------------------------------------------
// Ops. `tape` may be null for inference; a closure is recorded only when a
// tape is given and some input requires gradients.
// ---------------------------------------------------------------------------

enum class Activation { kReLU, kIdentity };

// Valid (no padding) stride-1 cross-correlation.
//   x: C_in x H x W, w: C_out x C_in x k x k, b: C_out
//   -> C_out x (H-k+1) x (W-k+1)
// Any k >= 1; the processing blocks restrict themselves to odd k.
template <class T>
TensorT<T> conv2d_valid(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                        const TensorT<T>& b);

// 2x2 max pooling, stride 2; a trailing odd row/column is dropped. Gradient
// routes to the first maximal element in row-major window order.
template <class T>
TensorT<T> maxpool2x2(TapeT<T>* tape, const TensorT<T>& x);

template <class T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x);

template <class T>
TensorT<T> activate(TapeT<T>* tape, const TensorT<T>& x, Activation act);

// w: m x n, x: n, b: m  ->  w.x + b
template <class T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& b);

// Row-wise affine map: X: n x d_in, w: d_out x d_in, b: d_out -> n x d_out.
template <class T>
TensorT<T> affine_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                       const TensorT<T>& b);

// A: m x k, B: k x n -> m x n
template <class T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

template <class T>
TensorT<T> transpose2d(TapeT<T>* tape, const TensorT<T>& x);

// Row-stabilized softmax over the last of two dims.
template <class T>
TensorT<T> softmax_rows(TapeT<T>* tape, const TensorT<T>& x);

template <class T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor);

template <class T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

// Per-position normalization of the channel vector of x: c x h x w to zero
// mean / unit variance, then learnable per-channel gain and bias.
template <class T>
TensorT<T> channel_norm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain,
                        const TensorT<T>& bias, T eps = T(1e-5));

// Channel vector at spatial position (row, col) of x: c x h x w -> c.
template <class T>
TensorT<T> take_hypercolumn(TapeT<T>* tape, const TensorT<T>& x, int row, int col);

// Same data, new shape (element count preserved).
template <class T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, std::vector<int> shape);

template <class T>
TensorT<T> sum_all(TapeT<T>* tape, const TensorT<T>& x);

template <class T>
TensorT<T> mse_loss(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target);

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One first/second-moment slot per parameter, in registration order.
template <class T>
struct AdamStateT {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;
  std::int64_t step_count = 0;
  AdamConfig config;
};

using AdamState = AdamStateT<float>;

// A parameter as the optimizer sees it: the tensor plus an optional
// per-element freeze mask (non-zero mask byte = element never updated).
// Fully frozen tensors are simply not handed to the optimizer.
template <class T>
struct ParamRef {
  TensorT<T> tensor;
  const std::uint8_t* freeze_mask = nullptr;  // length == tensor.size() when set
};

// Standard bias-corrected Adam update over `params`, in order. Every
// parameter must carry a gradient buffer. Updated values are checked finite.
template <class T>
void adam_step(std::vector<ParamRef<T>>& params, AdamStateT<T>& state);

// ---------------------------------------------------------------------------
// Test hook: region signature capture.
//
// When a sink is installed on the current thread, relu and maxpool record
// their activation pattern (sign mask / argmax choices) into it. The
// gradient-check harness compares signatures at x+eps and x-eps to detect and
// skip coordinates that straddle a kink.
// ---------------------------------------------------------------------------
struct RegionSignature {
  std::vector<std::uint8_t> bits;
  bool operator==(const RegionSignature&) const = default;
};

class SignatureScope {
 public:
  explicit SignatureScope(RegionSignature* sink);
  ~SignatureScope();
  SignatureScope(const SignatureScope&) = delete;
  SignatureScope& operator=(const SignatureScope&) = delete;
};

}  // namespace sacnn
