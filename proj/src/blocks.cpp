#include "sacnn/blocks.hpp"

#include <cmath>

namespace sacnn {

std::pair<int, int> center_position(int h, int w) {
  if (h % 2 == 0 || w % 2 == 0)
    throw ShapeError("center hypercolumn undefined for even spatial dims " +
                     std::to_string(h) + "x" + std::to_string(w));
  return {h / 2, w / 2};
}

template <class T>
TensorT<T> alpha_forward(TapeT<T>* tape, const AlphaParamsT<T>& p, const TensorT<T>& x,
                         Activation act) {
  if (p.conv_w.dim(2) != kAlphaKernel)
    throw ShapeError("alpha block requires a 5x5 kernel, got " + shape_str(p.conv_w.shape()));
  auto y = conv2d_valid(tape, x, p.conv_w, p.conv_b);
  y = activate(tape, y, act);
  return maxpool2x2(tape, y);
}

template <class T>
TensorT<T> beta_forward(TapeT<T>* tape, const BetaParamsT<T>& p, const TensorT<T>& x,
                        Activation act) {
  auto y = conv2d_valid(tape, x, p.conv_w, p.conv_b);
  return activate(tape, y, act);
}

template <class T>
TensorT<T> sa_forward(TapeT<T>* tape, const SelfAttentionParamsT<T>& p,
                      const SelfAttentionConfig& cfg, const TensorT<T>& x,
                      TensorT<T>* attention) {
  if (x.ndim() != 3) throw ShapeError("sa_forward: input must be C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (c < 1) throw ShapeError("sa_forward: need at least one channel");
  const int tokens = h * w;

  // c x h x w -> tokens x c (one row per hypercolumn).
  auto xt = transpose2d(tape, reshape(tape, x, {c, tokens}));

  auto q = affine_rows(tape, xt, p.wq, p.bq);  // tokens x 5
  auto k = affine_rows(tape, xt, p.wk, p.bk);
  auto scores = scale(tape, matmul(tape, q, transpose2d(tape, k)),
                      static_cast<T>(1.0 / std::sqrt(double(kAttentionDim))));
  auto attn = softmax_rows(tape, scores);  // tokens x tokens
  if (attention) *attention = attn;

  TensorT<T> mixed;
  if (cfg.gamma) {
    auto v = affine_rows(tape, xt, p.wv, p.bv);       // tokens x 5
    auto av = matmul(tape, attn, v);                  // tokens x 5
    mixed = affine_rows(tape, av, p.wo, p.bo);        // tokens x c
  } else {
    // Attention applied directly to the input: every channel is transformed
    // by the same spatial operator, no inter-channel mixing.
    mixed = matmul(tape, attn, xt);  // tokens x c
  }

  auto y = reshape(tape, transpose2d(tape, mixed), {c, h, w});
  if (cfg.residual) y = add(tape, x, y);
  if (cfg.channel_norm) y = channel_norm(tape, y, p.norm_gain, p.norm_bias);
  return y;
}

template <class T>
TensorT<T> readout_forward(TapeT<T>* tape, const ReadoutParamsT<T>& p, ReadoutKind kind,
                           const TensorT<T>& x) {
  if (x.ndim() != 3) throw ShapeError("readout: input must be C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kind == ReadoutKind::kFCL) {
    auto flat = reshape(tape, x, {c * h * w});
    return linear(tape, flat, p.w, p.b);
  }
  auto [cy, cx] = center_position(h, w);
  auto col = take_hypercolumn(tape, x, cy, cx);
  return linear(tape, col, p.w, p.b);
}

#define SACNN_INSTANTIATE_BLOCKS(T)                                                           \
  template TensorT<T> alpha_forward<T>(TapeT<T>*, const AlphaParamsT<T>&, const TensorT<T>&, \
                                       Activation);                                          \
  template TensorT<T> beta_forward<T>(TapeT<T>*, const BetaParamsT<T>&, const TensorT<T>&,   \
                                      Activation);                                           \
  template TensorT<T> sa_forward<T>(TapeT<T>*, const SelfAttentionParamsT<T>&,               \
                                    const SelfAttentionConfig&, const TensorT<T>&,           \
                                    TensorT<T>*);                                            \
  template TensorT<T> readout_forward<T>(TapeT<T>*, const ReadoutParamsT<T>&, ReadoutKind,   \
                                         const TensorT<T>&);

SACNN_INSTANTIATE_BLOCKS(float)
SACNN_INSTANTIATE_BLOCKS(double)

#undef SACNN_INSTANTIATE_BLOCKS

}  // namespace sacnn
