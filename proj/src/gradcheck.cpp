#include "sacnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sacnn {

namespace {

double eval_with_signature(const ScalarFn& fn, std::vector<DTensor>& inputs,
                           RegionSignature* sig) {
  SignatureScope scope(sig);
  DTape tape;  // unused by pure forward but keeps the fn signature uniform
  // Inputs are evaluated without gradient recording: strip requires_grad on
  // clones so the closure cost is not paid per probe.
  std::vector<DTensor> plain;
  plain.reserve(inputs.size());
  for (auto& t : inputs) {
    DTensor c = t.clone();
    c.set_requires_grad(false);
    plain.push_back(c);
  }
  DTensor out = fn(tape, plain);
  const double v = out.item();
  if (!is_finite(v)) throw NumericError("grad_check: non-finite loss during probe");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, std::vector<DTensor> inputs,
                           const GradCheckOptions& opts) {
  // Reference gradients from one taped pass.
  DTape tape;
  DTensor loss = fn(tape, inputs);
  if (!is_finite(loss.item())) throw NumericError("grad_check: non-finite loss");
  tape.backward(loss);

  GradCheckResult res;
  Rng rng(opts.seed);
  for (auto& input : inputs) {
    if (!input.requires_grad()) continue;
    const std::size_t n = input.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (opts.max_coords_per_input > 0 &&
        n > static_cast<std::size_t>(opts.max_coords_per_input)) {
      rng.shuffle(coords);
      coords.resize(static_cast<std::size_t>(opts.max_coords_per_input));
    }
    std::span<const double> g = input.grad_view();
    for (std::size_t ci : coords) {
      auto vals = input.data();
      const double x0 = vals[ci];
      const double eps = opts.eps * std::max(1.0, std::abs(x0));

      RegionSignature sig_plus, sig_minus;
      vals[ci] = x0 + eps;
      const double fplus = eval_with_signature(fn, inputs, &sig_plus);
      vals[ci] = x0 - eps;
      const double fminus = eval_with_signature(fn, inputs, &sig_minus);
      vals[ci] = x0;

      if (!(sig_plus == sig_minus)) {
        ++res.coords_skipped_kink;
        continue;
      }
      const double fd = (fplus - fminus) / (2.0 * eps);
      const double ad = g.empty() ? 0.0 : g[ci];
      const double denom = std::max({std::abs(fd), std::abs(ad), opts.rel_floor});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(fd - ad) / denom);
      ++res.coords_checked;
    }
  }
  return res;
}

}  // namespace sacnn
