#include "sacnn/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sacnn {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int j = 0; j < 8; ++j) c = (c & 1) ? (0xedb88320u ^ (c >> 1)) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

// ---------------------------------------------------------------------------
// TensorT
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::zeros(std::vector<int> shape, bool requires_grad) {
  auto p = std::make_shared<Payload>();
  p->values.assign(shape_numel(shape), T(0));
  p->shape = std::move(shape);
  p->requires_grad = requires_grad;
  return wrap(std::move(p));
}

template <class T>
TensorT<T> TensorT<T>::full(std::vector<int> shape, T value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

template <class T>
TensorT<T> TensorT<T>::from(std::vector<int> shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  auto p = std::make_shared<Payload>();
  p->shape = std::move(shape);
  p->values = std::move(values);
  p->requires_grad = requires_grad;
  return wrap(std::move(p));
}

template <class T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
std::span<T> TensorT<T>::grad() {
  if (p_->grad.empty()) p_->grad.assign(p_->values.size(), T(0));
  return {p_->grad.data(), p_->grad.size()};
}

template <class T>
void TensorT<T>::zero_grad() {
  if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), T(0));
}

template <class T>
T TensorT<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return p_->values[0];
}

template <class T>
TensorT<T> TensorT<T>::clone() const {
  auto p = std::make_shared<Payload>();
  p->shape = p_->shape;
  p->values = p_->values;
  p->requires_grad = p_->requires_grad;
  return wrap(std::move(p));
}

template <class T>
void TensorT<T>::copy_values_from(const TensorT& src) {
  if (src.shape() != shape())
    throw ShapeError("copy_values_from shape mismatch " + shape_str(src.shape()) + " vs " +
                     shape_str(shape()));
  p_->values = src.p_->values;
}

template <class T>
bool TensorT<T>::all_finite() const {
  for (T v : p_->values)
    if (!is_finite(v)) return false;
  return true;
}

template <class T>
void TensorT<T>::check_finite(const std::string& what) const {
  if (!all_finite()) throw NumericError("non-finite values in " + what);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
void TapeT<T>::backward(TensorT<T> loss) {
  if (consumed_) throw NumericError("tape already consumed by a previous backward pass");
  if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  consumed_ = true;
  loss.grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Signature sink (kink detection hook for the gradient checker)
// ---------------------------------------------------------------------------

namespace {
thread_local RegionSignature* g_signature_sink = nullptr;

inline void sig_push(std::uint8_t b) {
  if (g_signature_sink) g_signature_sink->bits.push_back(b);
}
inline bool sig_active() { return g_signature_sink != nullptr; }
}  // namespace

SignatureScope::SignatureScope(RegionSignature* sink) { g_signature_sink = sink; }
SignatureScope::~SignatureScope() { g_signature_sink = nullptr; }

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace {

template <class T>
bool want_tape(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

void expect(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d_valid
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> conv2d_valid(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                        const TensorT<T>& b) {
  expect(x.ndim() == 3, "conv2d_valid: input must be C x H x W, got " + shape_str(x.shape()));
  expect(w.ndim() == 4, "conv2d_valid: weight must be Cout x Cin x k x k, got " + shape_str(w.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  expect(w.dim(1) == cin, "conv2d_valid: channel mismatch, input " + shape_str(x.shape()) +
                              " vs weight " + shape_str(w.shape()));
  expect(w.dim(3) == k, "conv2d_valid: kernel must be square, got " + shape_str(w.shape()));
  expect(k >= 1, "conv2d_valid: kernel size must be positive");
  expect(h >= k && wd >= k, "conv2d_valid: input " + shape_str(x.shape()) +
                                " smaller than kernel " + std::to_string(k));
  expect(b.ndim() == 1 && b.dim(0) == cout,
         "conv2d_valid: bias must have " + std::to_string(cout) + " entries");

  const int ho = h - k + 1, wo = wd - k + 1;
  auto out = TensorT<T>::zeros({cout, ho, wo});

  const T* xp = x.raw();
  const T* wp = w.raw();
  const T* bp = b.raw();
  T* op = out.raw();
  for (int oc = 0; oc < cout; ++oc) {
    T* oplane = op + static_cast<std::size_t>(oc) * ho * wo;
    std::fill(oplane, oplane + static_cast<std::size_t>(ho) * wo, bp[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      const T* xplane = xp + static_cast<std::size_t>(ic) * h * wd;
      const T* wk = wp + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          const T wv = wk[dy * k + dx];
          for (int y = 0; y < ho; ++y) {
            const T* row = xplane + static_cast<std::size_t>(y + dy) * wd + dx;
            T* orow = oplane + static_cast<std::size_t>(y) * wo;
            for (int c = 0; c < wo; ++c) orow[c] += wv * row[c];
          }
        }
      }
    }
  }

  if (want_tape(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, wc = w, bc = b, oc_ = out;
    tape->record([xc, wc, bc, oc_, cin, h, wd, cout, k, ho, wo]() mutable {
      if (!oc_.has_grad()) return;
      std::span<const T> go = oc_.grad_view();
      const T* xp = xc.raw();
      const T* wp = wc.raw();
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        for (int oc = 0; oc < cout; ++oc) {
          T acc = 0;
          const T* gplane = go.data() + static_cast<std::size_t>(oc) * ho * wo;
          for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
          gb[oc] += acc;
        }
      }
      if (wc.requires_grad()) {
        auto gw = wc.grad();
        for (int oc = 0; oc < cout; ++oc) {
          const T* gplane = go.data() + static_cast<std::size_t>(oc) * ho * wo;
          for (int ic = 0; ic < cin; ++ic) {
            const T* xplane = xp + static_cast<std::size_t>(ic) * h * wd;
            T* gwk = gw.data() + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) {
                T acc = 0;
                for (int y = 0; y < ho; ++y) {
                  const T* row = xplane + static_cast<std::size_t>(y + dy) * wd + dx;
                  const T* grow = gplane + static_cast<std::size_t>(y) * wo;
                  for (int c = 0; c < wo; ++c) acc += row[c] * grow[c];
                }
                gwk[dy * k + dx] += acc;
              }
            }
          }
        }
      }
      if (xc.requires_grad()) {
        auto gx = xc.grad();
        for (int oc = 0; oc < cout; ++oc) {
          const T* gplane = go.data() + static_cast<std::size_t>(oc) * ho * wo;
          for (int ic = 0; ic < cin; ++ic) {
            T* gxplane = gx.data() + static_cast<std::size_t>(ic) * h * wd;
            const T* wk = wp + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) {
                const T wv = wk[dy * k + dx];
                for (int y = 0; y < ho; ++y) {
                  T* gxrow = gxplane + static_cast<std::size_t>(y + dy) * wd + dx;
                  const T* grow = gplane + static_cast<std::size_t>(y) * wo;
                  for (int c = 0; c < wo; ++c) gxrow[c] += wv * grow[c];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2x2
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> maxpool2x2(TapeT<T>* tape, const TensorT<T>& x) {
  expect(x.ndim() == 3, "maxpool2x2: input must be C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(h >= 2 && w >= 2, "maxpool2x2: spatial dims must be >= 2, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  auto out = TensorT<T>::zeros({c, ho, wo});

  const bool record = want_tape(tape, {&x});
  std::vector<std::uint8_t> argmax;
  const bool track = record || sig_active();
  if (track) argmax.resize(static_cast<std::size_t>(c) * ho * wo);

  const T* xp = x.raw();
  T* op = out.raw();
  for (int ch = 0; ch < c; ++ch) {
    const T* xplane = xp + static_cast<std::size_t>(ch) * h * w;
    T* oplane = op + static_cast<std::size_t>(ch) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      for (int xcol = 0; xcol < wo; ++xcol) {
        const T* win = xplane + static_cast<std::size_t>(2 * y) * w + 2 * xcol;
        // First maximal element in row-major window order wins ties.
        T best = win[0];
        std::uint8_t bi = 0;
        if (win[1] > best) { best = win[1]; bi = 1; }
        if (win[w] > best) { best = win[w]; bi = 2; }
        if (win[w + 1] > best) { best = win[w + 1]; bi = 3; }
        oplane[static_cast<std::size_t>(y) * wo + xcol] = best;
        if (track) argmax[(static_cast<std::size_t>(ch) * ho + y) * wo + xcol] = bi;
      }
    }
  }
  if (sig_active())
    for (std::uint8_t bi : argmax) sig_push(bi);

  if (record) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, am = std::move(argmax), c, h, w, ho, wo]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      auto gx = xc.grad();
      for (int ch = 0; ch < c; ++ch) {
        T* gxplane = gx.data() + static_cast<std::size_t>(ch) * h * w;
        const T* gplane = go.data() + static_cast<std::size_t>(ch) * ho * wo;
        const std::uint8_t* aplane = am.data() + static_cast<std::size_t>(ch) * ho * wo;
        for (int y = 0; y < ho; ++y) {
          for (int xcol = 0; xcol < wo; ++xcol) {
            const std::uint8_t bi = aplane[static_cast<std::size_t>(y) * wo + xcol];
            const int ry = 2 * y + (bi >> 1), rx = 2 * xcol + (bi & 1);
            gxplane[static_cast<std::size_t>(ry) * w + rx] +=
                gplane[static_cast<std::size_t>(y) * wo + xcol];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// relu / activate
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
  auto out = TensorT<T>::zeros(x.shape());
  const T* xp = x.raw();
  T* op = out.raw();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (sig_active())
    for (std::size_t i = 0; i < n; ++i) sig_push(xp[i] > T(0) ? 1 : 0);

  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      std::span<const T> ov = oc.data();
      auto gx = xc.grad();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (ov[i] > T(0)) gx[i] += go[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> activate(TapeT<T>* tape, const TensorT<T>& x, Activation act) {
  switch (act) {
    case Activation::kReLU: return relu(tape, x);
    case Activation::kIdentity: return x;
  }
  throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// linear / affine_rows / matmul / transpose2d
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& b) {
  expect(x.ndim() == 1, "linear: input must be a vector, got " + shape_str(x.shape()));
  expect(w.ndim() == 2 && w.dim(1) == x.dim(0),
         "linear: weight " + shape_str(w.shape()) + " does not accept input " + shape_str(x.shape()));
  expect(b.ndim() == 1 && b.dim(0) == w.dim(0), "linear: bias/weight mismatch");
  const int m = w.dim(0), n = w.dim(1);
  auto out = TensorT<T>::zeros({m});
  const T* xp = x.raw();
  const T* wp = w.raw();
  T* op = out.raw();
  for (int i = 0; i < m; ++i) {
    const T* wrow = wp + static_cast<std::size_t>(i) * n;
    T acc = b.raw()[i];
    for (int j = 0; j < n; ++j) acc += wrow[j] * xp[j];
    op[i] = acc;
  }
  if (want_tape(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, wc = w, bc = b, oc = out;
    tape->record([xc, wc, bc, oc, m, n]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        for (int i = 0; i < m; ++i) gb[i] += go[i];
      }
      if (wc.requires_grad()) {
        auto gw = wc.grad();
        const T* xp = xc.raw();
        for (int i = 0; i < m; ++i) {
          T* grow = gw.data() + static_cast<std::size_t>(i) * n;
          const T g = go[i];
          for (int j = 0; j < n; ++j) grow[j] += g * xp[j];
        }
      }
      if (xc.requires_grad()) {
        auto gx = xc.grad();
        const T* wp = wc.raw();
        for (int i = 0; i < m; ++i) {
          const T* wrow = wp + static_cast<std::size_t>(i) * n;
          const T g = go[i];
          for (int j = 0; j < n; ++j) gx[j] += g * wrow[j];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> affine_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                       const TensorT<T>& b) {
  expect(x.ndim() == 2, "affine_rows: input must be a matrix, got " + shape_str(x.shape()));
  expect(w.ndim() == 2 && w.dim(1) == x.dim(1),
         "affine_rows: weight " + shape_str(w.shape()) + " does not accept rows of " +
             shape_str(x.shape()));
  expect(b.ndim() == 1 && b.dim(0) == w.dim(0), "affine_rows: bias/weight mismatch");
  const int rows = x.dim(0), din = x.dim(1), dout = w.dim(0);
  auto out = TensorT<T>::zeros({rows, dout});
  const T* xp = x.raw();
  const T* wp = w.raw();
  const T* bp = b.raw();
  T* op = out.raw();
  for (int r = 0; r < rows; ++r) {
    const T* xrow = xp + static_cast<std::size_t>(r) * din;
    T* orow = op + static_cast<std::size_t>(r) * dout;
    for (int i = 0; i < dout; ++i) {
      const T* wrow = wp + static_cast<std::size_t>(i) * din;
      T acc = bp[i];
      for (int j = 0; j < din; ++j) acc += wrow[j] * xrow[j];
      orow[i] = acc;
    }
  }
  if (want_tape(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, wc = w, bc = b, oc = out;
    tape->record([xc, wc, bc, oc, rows, din, dout]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        for (int r = 0; r < rows; ++r) {
          const T* grow = go.data() + static_cast<std::size_t>(r) * dout;
          for (int i = 0; i < dout; ++i) gb[i] += grow[i];
        }
      }
      if (wc.requires_grad()) {
        auto gw = wc.grad();
        const T* xp = xc.raw();
        for (int r = 0; r < rows; ++r) {
          const T* grow = go.data() + static_cast<std::size_t>(r) * dout;
          const T* xrow = xp + static_cast<std::size_t>(r) * din;
          for (int i = 0; i < dout; ++i) {
            T* gwrow = gw.data() + static_cast<std::size_t>(i) * din;
            const T g = grow[i];
            for (int j = 0; j < din; ++j) gwrow[j] += g * xrow[j];
          }
        }
      }
      if (xc.requires_grad()) {
        auto gx = xc.grad();
        const T* wp = wc.raw();
        for (int r = 0; r < rows; ++r) {
          const T* grow = go.data() + static_cast<std::size_t>(r) * dout;
          T* gxrow = gx.data() + static_cast<std::size_t>(r) * din;
          for (int i = 0; i < dout; ++i) {
            const T* wrow = wp + static_cast<std::size_t>(i) * din;
            const T g = grow[i];
            for (int j = 0; j < din; ++j) gxrow[j] += g * wrow[j];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  expect(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
         "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorT<T>::zeros({m, n});
  const T* ap = a.raw();
  const T* bp = b.raw();
  T* cp = out.raw();
  for (int i = 0; i < m; ++i) {
    T* crow = cp + static_cast<std::size_t>(i) * n;
    const T* arow = ap + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = bp + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      if (ac.requires_grad()) {
        auto ga = ac.grad();
        const T* bp = bc.raw();
        for (int i = 0; i < m; ++i) {
          const T* grow = go.data() + static_cast<std::size_t>(i) * n;
          T* garow = ga.data() + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T* brow = bp + static_cast<std::size_t>(p) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[p] += acc;
          }
        }
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        const T* ap = ac.raw();
        for (int i = 0; i < m; ++i) {
          const T* grow = go.data() + static_cast<std::size_t>(i) * n;
          const T* arow = ap + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            T* gbrow = gb.data() + static_cast<std::size_t>(p) * n;
            const T av = arow[p];
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(TapeT<T>* tape, const TensorT<T>& x) {
  expect(x.ndim() == 2, "transpose2d: input must be a matrix, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  auto out = TensorT<T>::zeros({n, m});
  const T* xp = x.raw();
  T* op = out.raw();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) op[static_cast<std::size_t>(j) * m + i] = xp[static_cast<std::size_t>(i) * n + j];
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, m, n]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      auto gx = xc.grad();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          gx[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax_rows
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> softmax_rows(TapeT<T>* tape, const TensorT<T>& x) {
  expect(x.ndim() == 2, "softmax_rows: input must be a matrix, got " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  auto out = TensorT<T>::zeros({rows, cols});
  const T* xp = x.raw();
  T* op = out.raw();
  for (int r = 0; r < rows; ++r) {
    const T* xrow = xp + static_cast<std::size_t>(r) * cols;
    T* orow = op + static_cast<std::size_t>(r) * cols;
    T mx = xrow[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xrow[j]);
    T sum = 0;
    for (int j = 0; j < cols; ++j) {
      orow[j] = std::exp(xrow[j] - mx);
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < cols; ++j) orow[j] *= inv;
  }
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, rows, cols]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      std::span<const T> y = oc.data();
      auto gx = xc.grad();
      for (int r = 0; r < rows; ++r) {
        const T* yrow = y.data() + static_cast<std::size_t>(r) * cols;
        const T* grow = go.data() + static_cast<std::size_t>(r) * cols;
        T dot = 0;
        for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
        T* gxrow = gx.data() + static_cast<std::size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// scale / add / reshape / sum_all / take_hypercolumn
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor) {
  auto out = TensorT<T>::zeros(x.shape());
  const T* xp = x.raw();
  T* op = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) op[i] = factor * xp[i];
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, factor]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      auto gx = xc.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * go[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  expect(a.shape() == b.shape(),
         "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<T>::zeros(a.shape());
  const T* ap = a.raw();
  const T* bp = b.raw();
  T* op = out.raw();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] + bp[i];
  if (want_tape(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      if (ac.requires_grad()) {
        auto ga = ac.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, std::vector<int> shape) {
  expect(shape_numel(shape) == x.size(), "reshape: element count mismatch, " +
                                             shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = TensorT<T>::from(std::move(shape), {x.data().begin(), x.data().end()});
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      auto gx = xc.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> sum_all(TapeT<T>* tape, const TensorT<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto out = TensorT<T>::scalar(acc);
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const T g = oc.grad_view()[0];
      auto gx = xc.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
TensorT<T> take_hypercolumn(TapeT<T>* tape, const TensorT<T>& x, int row, int col) {
  expect(x.ndim() == 3, "take_hypercolumn: input must be C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(row >= 0 && row < h && col >= 0 && col < w,
         "take_hypercolumn: position out of range for " + shape_str(x.shape()));
  auto out = TensorT<T>::zeros({c});
  const T* xp = x.raw();
  T* op = out.raw();
  const std::size_t off = static_cast<std::size_t>(row) * w + col;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) op[ch] = xp[static_cast<std::size_t>(ch) * plane + off];
  if (want_tape(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, c, plane, off]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      auto gx = xc.grad();
      for (int ch = 0; ch < c; ++ch) gx[static_cast<std::size_t>(ch) * plane + off] += go[ch];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel_norm
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> channel_norm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain,
                        const TensorT<T>& bias, T eps) {
  expect(x.ndim() == 3, "channel_norm: input must be C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(gain.ndim() == 1 && gain.dim(0) == c && bias.ndim() == 1 && bias.dim(0) == c,
         "channel_norm: gain/bias must have one entry per channel");
  const int hw = h * w;
  auto out = TensorT<T>::zeros({c, h, w});
  std::vector<T> xhat(static_cast<std::size_t>(c) * hw);
  std::vector<T> inv_std(static_cast<std::size_t>(hw));

  const T* xp = x.raw();
  const T* gp = gain.raw();
  const T* bp = bias.raw();
  T* op = out.raw();
  for (int p = 0; p < hw; ++p) {
    T mean = 0;
    for (int ch = 0; ch < c; ++ch) mean += xp[static_cast<std::size_t>(ch) * hw + p];
    mean /= static_cast<T>(c);
    T var = 0;
    for (int ch = 0; ch < c; ++ch) {
      const T d = xp[static_cast<std::size_t>(ch) * hw + p] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(p)] = inv;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t idx = static_cast<std::size_t>(ch) * hw + p;
      const T xh = (xp[idx] - mean) * inv;
      xhat[idx] = xh;
      op[idx] = xh * gp[ch] + bp[ch];
    }
  }

  if (want_tape(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, gc = gain, bc = bias, oc = out;
    tape->record([xc, gc, bc, oc, xh = std::move(xhat), inv = std::move(inv_std), c,
                  hw]() mutable {
      if (!oc.has_grad()) return;
      std::span<const T> go = oc.grad_view();
      if (bc.requires_grad()) {
        auto gb = bc.grad();
        for (int ch = 0; ch < c; ++ch) {
          T acc = 0;
          const T* grow = go.data() + static_cast<std::size_t>(ch) * hw;
          for (int p = 0; p < hw; ++p) acc += grow[p];
          gb[ch] += acc;
        }
      }
      if (gc.requires_grad()) {
        auto gg = gc.grad();
        for (int ch = 0; ch < c; ++ch) {
          T acc = 0;
          const T* grow = go.data() + static_cast<std::size_t>(ch) * hw;
          const T* xrow = xh.data() + static_cast<std::size_t>(ch) * hw;
          for (int p = 0; p < hw; ++p) acc += grow[p] * xrow[p];
          gg[ch] += acc;
        }
      }
      if (xc.requires_grad()) {
        auto gx = xc.grad();
        const T* gp = gc.raw();
        for (int p = 0; p < hw; ++p) {
          T mean_h = 0, mean_hx = 0;
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t idx = static_cast<std::size_t>(ch) * hw + p;
            const T hval = go[idx] * gp[ch];
            mean_h += hval;
            mean_hx += hval * xh[idx];
          }
          mean_h /= static_cast<T>(c);
          mean_hx /= static_cast<T>(c);
          const T iv = inv[static_cast<std::size_t>(p)];
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t idx = static_cast<std::size_t>(ch) * hw + p;
            const T hval = go[idx] * gp[ch];
            gx[idx] += iv * (hval - mean_h - xh[idx] * mean_hx);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// mse_loss
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> mse_loss(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target) {
  expect(pred.ndim() == 1 && target.ndim() == 1 && pred.dim(0) == target.dim(0),
         "mse_loss: length mismatch " + shape_str(pred.shape()) + " vs " +
             shape_str(target.shape()));
  const int n = pred.dim(0);
  expect(n >= 1, "mse_loss: empty input");
  T acc = 0;
  const T* pp = pred.raw();
  const T* tp = target.raw();
  for (int i = 0; i < n; ++i) {
    const T d = pp[i] - tp[i];
    acc += d * d;
  }
  auto out = TensorT<T>::scalar(acc / static_cast<T>(n));
  if (want_tape(tape, {&pred, &target})) {
    out.set_requires_grad(true);
    TensorT<T> pc = pred, tc = target, oc = out;
    tape->record([pc, tc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const T g = oc.grad_view()[0];
      const T factor = g * T(2) / static_cast<T>(n);
      const T* pp = pc.raw();
      const T* tp = tc.raw();
      if (pc.requires_grad()) {
        auto gp = pc.grad();
        for (int i = 0; i < n; ++i) gp[i] += factor * (pp[i] - tp[i]);
      }
      if (tc.requires_grad()) {
        auto gt = tc.grad();
        for (int i = 0; i < n; ++i) gt[i] -= factor * (pp[i] - tp[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// adam_step
// ---------------------------------------------------------------------------

template <class T>
void adam_step(std::vector<ParamRef<T>>& params, AdamStateT<T>& state) {
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].tensor.size(), T(0));
      state.slots[i].v.assign(params[i].tensor.size(), T(0));
    }
  }
  if (state.slots.size() != params.size())
    throw ShapeError("adam_step: parameter list does not match optimizer state");
  state.step_count += 1;
  const T lr = static_cast<T>(state.config.lr);
  const T b1 = static_cast<T>(state.config.beta1);
  const T b2 = static_cast<T>(state.config.beta2);
  const T eps = static_cast<T>(state.config.eps);
  const T bc1 = T(1) - static_cast<T>(std::pow(state.config.beta1, static_cast<double>(state.step_count)));
  const T bc2 = T(1) - static_cast<T>(std::pow(state.config.beta2, static_cast<double>(state.step_count)));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad())
      throw NumericError("adam_step: missing gradient for learnable parameter " + std::to_string(i));
    if (p.tensor.size() != state.slots[i].m.size())
      throw ShapeError("adam_step: parameter/state shape mismatch");
    auto val = p.tensor.data();
    auto g = p.tensor.grad_view();
    T* m = state.slots[i].m.data();
    T* v = state.slots[i].v.data();
    const std::uint8_t* mask = p.freeze_mask;
    for (std::size_t j = 0; j < val.size(); ++j) {
      if (mask && mask[j]) continue;
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      val[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      if (!is_finite(val[j]))
        throw NumericError("adam_step: non-finite parameter after update (parameter " +
                           std::to_string(i) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define SACNN_INSTANTIATE(T)                                                                    \
  template class TensorT<T>;                                                                    \
  template class TapeT<T>;                                                                      \
  template TensorT<T> conv2d_valid<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,         \
                                      const TensorT<T>&);                                       \
  template TensorT<T> maxpool2x2<T>(TapeT<T>*, const TensorT<T>&);                             \
  template TensorT<T> relu<T>(TapeT<T>*, const TensorT<T>&);                                   \
  template TensorT<T> activate<T>(TapeT<T>*, const TensorT<T>&, Activation);                   \
  template TensorT<T> linear<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,               \
                                const TensorT<T>&);                                            \
  template TensorT<T> affine_rows<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,          \
                                     const TensorT<T>&);                                       \
  template TensorT<T> matmul<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> transpose2d<T>(TapeT<T>*, const TensorT<T>&);                            \
  template TensorT<T> softmax_rows<T>(TapeT<T>*, const TensorT<T>&);                           \
  template TensorT<T> scale<T>(TapeT<T>*, const TensorT<T>&, T);                               \
  template TensorT<T> add<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> channel_norm<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,         \
                                      const TensorT<T>&, T);                                   \
  template TensorT<T> take_hypercolumn<T>(TapeT<T>*, const TensorT<T>&, int, int);             \
  template TensorT<T> reshape<T>(TapeT<T>*, const TensorT<T>&, std::vector<int>);              \
  template TensorT<T> sum_all<T>(TapeT<T>*, const TensorT<T>&);                                \
  template TensorT<T> mse_loss<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);            \
  template void adam_step<T>(std::vector<ParamRef<T>>&, AdamStateT<T>&);

SACNN_INSTANTIATE(float)
SACNN_INSTANTIATE(double)

#undef SACNN_INSTANTIATE

}  // namespace sacnn
