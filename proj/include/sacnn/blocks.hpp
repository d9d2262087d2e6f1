#pragma once

#include <optional>

#include "sacnn/tensor.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// The four building blocks. Each forward is a free function over parameter
// tensors so the float training path and the double gradient-check path run
// the exact same code.
// ---------------------------------------------------------------------------

inline constexpr int kAlphaKernel = 5;    // alpha conv kernel, fixed
inline constexpr int kAttentionDim = 5;   // query/key/value map width

// Parameters of one alpha block: 5x5 conv + bias, then activation, then 2x2
// max pooling (stride 2).
template <class T>
struct AlphaParamsT {
  TensorT<T> conv_w;  // c_out x c_in x 5 x 5
  TensorT<T> conv_b;  // c_out
};

// Parameters of one beta block: k x k conv + bias, then activation; no pool.
template <class T>
struct BetaParamsT {
  TensorT<T> conv_w;  // c_out x c_in x k x k
  TensorT<T> conv_b;  // c_out
};

// Single-head self-attention over the h*w hypercolumns of a c x h x w map.
// gamma=false omits the value/output maps: attention weights act directly on
// the input, one shared spatial operator applied to every channel.
template <class T>
struct SelfAttentionParamsT {
  TensorT<T> wq, bq;  // 5 x c, 5
  TensorT<T> wk, bk;  // 5 x c, 5
  TensorT<T> wv, bv;  // 5 x c, 5        (gamma only)
  TensorT<T> wo, bo;  // c x 5, c        (gamma only)
  TensorT<T> norm_gain, norm_bias;  // c, c (channel norm only)
};

struct SelfAttentionConfig {
  bool gamma = false;
  bool channel_norm = true;  // per-hypercolumn zero-mean/unit-variance + affine
  bool residual = false;
};

enum class ReadoutKind { kFCL, kCTL };

// FCL: weight over all c*h*w activations. CTL: weight over the c channels of
// the center hypercolumn; strictly linear either way.
template <class T>
struct ReadoutParamsT {
  TensorT<T> w;  // FCL: 1 x (c*h*w); CTL: 1 x c
  TensorT<T> b;  // 1
};

using AlphaParams = AlphaParamsT<float>;
using BetaParams = BetaParamsT<float>;
using SelfAttentionParams = SelfAttentionParamsT<float>;
using ReadoutParams = ReadoutParamsT<float>;

// conv(5x5) -> activation -> maxpool(2,2).
// c_in x H x W -> c_out x floor((H-4)/2) x floor((W-4)/2)
template <class T>
TensorT<T> alpha_forward(TapeT<T>* tape, const AlphaParamsT<T>& p, const TensorT<T>& x,
                         Activation act = Activation::kReLU);

// conv(kxk) -> activation. k=1 keeps spatial dims: pure channel mixing.
template <class T>
TensorT<T> beta_forward(TapeT<T>* tape, const BetaParamsT<T>& p, const TensorT<T>& x,
                        Activation act = Activation::kReLU);

// Returns the normalized (and optionally residual) output; if `attention` is
// non-null it receives the (h*w) x (h*w) row-stochastic attention matrix.
template <class T>
TensorT<T> sa_forward(TapeT<T>* tape, const SelfAttentionParamsT<T>& p,
                      const SelfAttentionConfig& cfg, const TensorT<T>& x,
                      TensorT<T>* attention = nullptr);

// Scalar readout of a c x h x w activation. CTL requires odd h and w; the
// center hypercolumn is (h/2, w/2).
template <class T>
TensorT<T> readout_forward(TapeT<T>* tape, const ReadoutParamsT<T>& p, ReadoutKind kind,
                           const TensorT<T>& x);

// Center position of an odd spatial grid; throws ShapeError on even dims.
std::pair<int, int> center_position(int h, int w);

}  // namespace sacnn
