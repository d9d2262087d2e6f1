#include "sacnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sacnn {

namespace {

std::string block_label(const BlockSpec& b, int index) {
  std::string kind = b.kind == BlockKind::kAlpha  ? "alpha"
                     : b.kind == BlockKind::kBeta ? "beta"
                                                  : "sa";
  return "b" + std::to_string(index) + "." + kind;
}

struct TensorInit {
  std::string name;
  std::vector<int> shape;
  double bound = 0.0;  // uniform in [-bound, bound] when random
  double fill = 0.0;
  bool random = true;
};

struct Layout {
  std::vector<TensorInit> tensors;
  std::vector<std::pair<int, int>> ranges;  // per block, then readout
};

Layout compute_layout(const ModelSpec& spec) {
  const auto shapes = chain_shapes(spec);
  Layout lay;
  std::array<int, 3> cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const BlockSpec& b = spec.blocks[i];
    const std::string label = block_label(b, static_cast<int>(i));
    const int begin = static_cast<int>(lay.tensors.size());
    const int cin = cur[0];
    switch (b.kind) {
      case BlockKind::kAlpha: {
        const double bound = std::sqrt(1.0 / (cin * kAlphaKernel * kAlphaKernel));
        lay.tensors.push_back({label + ".w", {b.channels, cin, kAlphaKernel, kAlphaKernel}, bound});
        lay.tensors.push_back({label + ".b", {b.channels}, bound});
        break;
      }
      case BlockKind::kBeta: {
        const double bound = std::sqrt(1.0 / (cin * b.kernel * b.kernel));
        lay.tensors.push_back({label + ".w", {b.channels, cin, b.kernel, b.kernel}, bound});
        lay.tensors.push_back({label + ".b", {b.channels}, bound});
        break;
      }
      case BlockKind::kSelfAttention: {
        const double bound = std::sqrt(1.0 / cin);
        lay.tensors.push_back({label + ".wq", {kAttentionDim, cin}, bound});
        lay.tensors.push_back({label + ".bq", {kAttentionDim}, bound});
        lay.tensors.push_back({label + ".wk", {kAttentionDim, cin}, bound});
        lay.tensors.push_back({label + ".bk", {kAttentionDim}, bound});
        if (b.gamma) {
          const double obound = std::sqrt(1.0 / kAttentionDim);
          lay.tensors.push_back({label + ".wv", {kAttentionDim, cin}, bound});
          lay.tensors.push_back({label + ".bv", {kAttentionDim}, bound});
          lay.tensors.push_back({label + ".wo", {cin, kAttentionDim}, obound});
          lay.tensors.push_back({label + ".bo", {cin}, obound});
        }
        if (b.channel_norm) {
          lay.tensors.push_back({label + ".norm.gain", {cin}, 0.0, 1.0, false});
          lay.tensors.push_back({label + ".norm.bias", {cin}, 0.0, 0.0, false});
        }
        break;
      }
    }
    lay.ranges.emplace_back(begin, static_cast<int>(lay.tensors.size()));
    cur = shapes[i];
  }
  const int begin = static_cast<int>(lay.tensors.size());
  const int fcl_in = cur[0] * cur[1] * cur[2];
  if (spec.readout == ReadoutKind::kFCL) {
    const double bound = std::sqrt(1.0 / fcl_in);
    lay.tensors.push_back({"readout.w", {1, fcl_in}, bound});
    lay.tensors.push_back({"readout.b", {1}, bound});
  } else {
    const double bound = std::sqrt(1.0 / cur[0]);
    lay.tensors.push_back({"readout.w", {1, cur[0]}, bound});
    lay.tensors.push_back({"readout.b", {1}, bound});
  }
  lay.ranges.emplace_back(begin, static_cast<int>(lay.tensors.size()));
  return lay;
}

}  // namespace

std::vector<std::array<int, 3>> chain_shapes(const ModelSpec& spec) {
  std::vector<std::array<int, 3>> out;
  std::array<int, 3> cur = spec.input_shape;
  if (cur[0] < 1 || cur[1] < 1 || cur[2] < 1)
    throw ShapeError("illegal input shape");
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const BlockSpec& b = spec.blocks[i];
    const std::string where = "block " + std::to_string(i);
    switch (b.kind) {
      case BlockKind::kAlpha: {
        if (b.channels < 1) throw ShapeError(where + " (alpha): channels must be positive");
        if (cur[1] < kAlphaKernel + 1 || cur[2] < kAlphaKernel + 1)
          throw ShapeError(where + " (alpha): spatial input " + std::to_string(cur[1]) + "x" +
                           std::to_string(cur[2]) + " too small for conv 5 + pool 2");
        cur = {b.channels, (cur[1] - kAlphaKernel + 1) / 2, (cur[2] - kAlphaKernel + 1) / 2};
        break;
      }
      case BlockKind::kBeta: {
        if (b.channels < 1) throw ShapeError(where + " (beta): channels must be positive");
        if (b.kernel < 1 || b.kernel % 2 == 0)
          throw ShapeError(where + " (beta): kernel must be odd and positive, got " +
                           std::to_string(b.kernel));
        if (cur[1] < b.kernel || cur[2] < b.kernel)
          throw ShapeError(where + " (beta): spatial input smaller than kernel " +
                           std::to_string(b.kernel));
        cur = {b.channels, cur[1] - b.kernel + 1, cur[2] - b.kernel + 1};
        break;
      }
      case BlockKind::kSelfAttention: {
        if (cur[0] < 1) throw ShapeError(where + " (sa): needs at least one channel");
        break;  // shape preserved
      }
    }
    out.push_back(cur);
  }
  if (spec.readout == ReadoutKind::kCTL && (cur[1] % 2 == 0 || cur[2] % 2 == 0))
    throw ShapeError("readout (ctl): center hypercolumn undefined on even grid " +
                     std::to_string(cur[1]) + "x" + std::to_string(cur[2]));
  return out;
}

std::array<int, 3> readout_input_shape(const ModelSpec& spec) {
  auto shapes = chain_shapes(spec);
  return shapes.empty() ? spec.input_shape : shapes.back();
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace {

BlockSpec alpha_block(int c) { return {BlockKind::kAlpha, c, kAlphaKernel, false, true, false}; }
BlockSpec beta_block(int c, int k) { return {BlockKind::kBeta, c, k, false, true, false}; }
BlockSpec sa_block(bool gamma) { return {BlockKind::kSelfAttention, 0, 0, gamma, true, false}; }

ModelSpec make_preset(const std::string& name) {
  ModelSpec s;
  if (name == "ff-CNN") {
    s.blocks = {alpha_block(32), alpha_block(32), beta_block(32, 3), beta_block(32, 3)};
    s.readout = ReadoutKind::kFCL;
  } else if (name == "ff+sa-CNN") {
    s.blocks = {alpha_block(30), alpha_block(30), sa_block(true), beta_block(30, 3),
                beta_block(30, 3)};
    s.readout = ReadoutKind::kFCL;
  } else if (name == "rf-CNN") {
    s.blocks = {alpha_block(32), alpha_block(32), beta_block(32, 1), beta_block(32, 1)};
    s.readout = ReadoutKind::kCTL;
  } else if (name == "rf+sa-CNN") {
    s.blocks = {alpha_block(30), alpha_block(30), sa_block(false), beta_block(30, 1),
                beta_block(30, 1)};
    s.readout = ReadoutKind::kCTL;
  } else if (name == "rf+sa-CNN*") {
    s = make_preset("rf+sa-CNN");
    s.blocks[2].gamma = true;
  } else if (name == "ff+sa-CNN*" || name == "k1-FCL") {
    s.blocks = {alpha_block(30), alpha_block(30), sa_block(true), beta_block(30, 1),
                beta_block(30, 1)};
    s.readout = ReadoutKind::kFCL;
  } else if (name == "rf+sa-CNN-c375") {
    s.blocks = {alpha_block(375), alpha_block(375), sa_block(false), beta_block(375, 1),
                beta_block(375, 1)};
    s.readout = ReadoutKind::kCTL;
  } else if (name == "nobeta-sa") {
    s.blocks = {alpha_block(30), alpha_block(30), sa_block(true)};
    s.readout = ReadoutKind::kFCL;
  } else if (name == "k3-CTL") {
    s.blocks = {alpha_block(30), alpha_block(30), sa_block(true), beta_block(30, 3),
                beta_block(30, 3)};
    s.readout = ReadoutKind::kCTL;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return s;
}

}  // namespace

ModelSpec preset(const std::string& name) { return make_preset(name); }

std::vector<std::string> preset_names() {
  return {"ff-CNN",     "ff+sa-CNN", "rf-CNN",        "rf+sa-CNN", "rf+sa-CNN*",
          "ff+sa-CNN*", "k1-FCL",    "rf+sa-CNN-c375", "nobeta-sa", "k3-CTL"};
}

// ---------------------------------------------------------------------------
// Spec config text format
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::map<std::string, std::string> parse_kv_list(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected boolean, got '" + v + "'");
}

}  // namespace

ModelSpec parse_spec_config(const std::string& text) {
  ModelSpec spec;
  spec.blocks.clear();
  bool saw_readout = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("spec config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "input") {
      int c, h, w;
      char x1, x2;
      std::istringstream vs(value);
      if (!(vs >> c >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x')
        throw ConfigError("spec config line " + std::to_string(lineno) + ": input must be CxHxW");
      spec.input_shape = {c, h, w};
    } else if (key == "seed") {
      spec.seed = std::stoull(value);
    } else if (key == "activation") {
      if (value == "relu") spec.activation = Activation::kReLU;
      else if (value == "identity") spec.activation = Activation::kIdentity;
      else throw ConfigError("unknown activation '" + value + "'");
    } else if (key == "preset") {
      spec = preset(value);
    } else if (key == "block") {
      auto sp = value.find(' ');
      const std::string kind = sp == std::string::npos ? value : value.substr(0, sp);
      auto kv = parse_kv_list(sp == std::string::npos ? "" : value.substr(sp + 1));
      BlockSpec b;
      if (kind == "alpha") {
        b = alpha_block(kv.count("c") ? std::stoi(kv["c"]) : 0);
      } else if (kind == "beta") {
        b = beta_block(kv.count("c") ? std::stoi(kv["c"]) : 0,
                       kv.count("k") ? std::stoi(kv["k"]) : 0);
      } else if (kind == "sa") {
        b = sa_block(kv.count("gamma") ? parse_bool(kv["gamma"]) : false);
        if (kv.count("norm")) b.channel_norm = parse_bool(kv["norm"]);
        if (kv.count("residual")) b.residual = parse_bool(kv["residual"]);
      } else {
        throw ConfigError("spec config line " + std::to_string(lineno) + ": unknown block kind '" +
                          kind + "'");
      }
      spec.blocks.push_back(b);
    } else if (key == "readout") {
      if (value == "fcl") spec.readout = ReadoutKind::kFCL;
      else if (value == "ctl") spec.readout = ReadoutKind::kCTL;
      else throw ConfigError("unknown readout '" + value + "'");
      saw_readout = true;
    } else {
      throw ConfigError("spec config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (!saw_readout && spec.blocks.empty())
    throw ConfigError("spec config: no blocks and no readout given");
  chain_shapes(spec);  // validate
  return spec;
}

std::string format_spec_config(const ModelSpec& spec) {
  std::ostringstream os;
  os << "input = " << spec.input_shape[0] << "x" << spec.input_shape[1] << "x"
     << spec.input_shape[2] << "\n";
  os << "activation = " << (spec.activation == Activation::kReLU ? "relu" : "identity") << "\n";
  os << "seed = " << spec.seed << "\n";
  for (const auto& b : spec.blocks) {
    switch (b.kind) {
      case BlockKind::kAlpha:
        os << "block = alpha c=" << b.channels << "\n";
        break;
      case BlockKind::kBeta:
        os << "block = beta c=" << b.channels << " k=" << b.kernel << "\n";
        break;
      case BlockKind::kSelfAttention:
        os << "block = sa gamma=" << (b.gamma ? "true" : "false")
           << " norm=" << (b.channel_norm ? "true" : "false")
           << " residual=" << (b.residual ? "true" : "false") << "\n";
        break;
    }
  }
  os << "readout = " << (spec.readout == ReadoutKind::kFCL ? "fcl" : "ctl") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model Model::build(const ModelSpec& spec, std::optional<std::uint64_t> seed) {
  Model m;
  m.spec_ = spec;
  if (seed) m.spec_.seed = *seed;
  m.shapes_ = chain_shapes(m.spec_);
  Layout lay = compute_layout(m.spec_);
  m.ranges_ = lay.ranges;
  m.params_.reserve(lay.tensors.size());
  for (std::size_t i = 0; i < lay.tensors.size(); ++i) {
    const TensorInit& ti = lay.tensors[i];
    Tensor t = Tensor::zeros(ti.shape, /*requires_grad=*/true);
    if (ti.random) {
      Rng rng(mix_seed(m.spec_.seed, i));
      for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-ti.bound, ti.bound));
    } else if (ti.fill != 0.0) {
      std::fill(t.data().begin(), t.data().end(), static_cast<float>(ti.fill));
    }
    m.params_.push_back(NamedParam{ti.name, t, false, {}});
  }
  m.provenance_.seed = m.spec_.seed;
  return m;
}

NamedParam* Model::find_param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const NamedParam* Model::find_param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<std::string> Model::block_param_names(int index) const {
  std::vector<std::string> names;
  const auto [b, e] = ranges_[static_cast<std::size_t>(index)];
  for (int i = b; i < e; ++i) names.push_back(params_[static_cast<std::size_t>(i)].name);
  return names;
}

std::vector<std::string> Model::readout_param_names() const {
  std::vector<std::string> names;
  const auto [b, e] = ranges_.back();
  for (int i = b; i < e; ++i) names.push_back(params_[static_cast<std::size_t>(i)].name);
  return names;
}

Tensor Model::transform_input(const Tensor& image) const {
  if (!provenance_.standardize_input) return image;
  Tensor out = Tensor::zeros(image.shape());
  const float mu = provenance_.input_mean;
  const float inv = 1.0f / provenance_.input_std;
  const float* src = image.raw();
  float* dst = out.raw();
  for (std::size_t i = 0; i < image.size(); ++i) dst[i] = (src[i] - mu) * inv;
  out.set_requires_grad(image.requires_grad());
  return out;
}

// Shared chain walk for both scalar types.
namespace {

template <class T>
TensorT<T> run_chain(const ModelSpec& spec, std::span<const TensorT<T>> params,
                     const std::vector<std::pair<int, int>>& ranges, TapeT<T>* tape,
                     const TensorT<T>& x0, int first_block, std::vector<TensorT<T>>* act_out,
                     std::vector<TensorT<T>>* attn_out, TensorT<T>* pre_readout) {
  TensorT<T> x = x0;
  for (std::size_t i = static_cast<std::size_t>(first_block); i < spec.blocks.size(); ++i) {
    const BlockSpec& b = spec.blocks[i];
    const int pi = ranges[i].first;
    switch (b.kind) {
      case BlockKind::kAlpha: {
        AlphaParamsT<T> ap{params[pi], params[pi + 1]};
        x = alpha_forward(tape, ap, x, spec.activation);
        break;
      }
      case BlockKind::kBeta: {
        BetaParamsT<T> bp{params[pi], params[pi + 1]};
        x = beta_forward(tape, bp, x, spec.activation);
        break;
      }
      case BlockKind::kSelfAttention: {
        SelfAttentionParamsT<T> sp;
        int j = pi;
        sp.wq = params[j++];
        sp.bq = params[j++];
        sp.wk = params[j++];
        sp.bk = params[j++];
        if (b.gamma) {
          sp.wv = params[j++];
          sp.bv = params[j++];
          sp.wo = params[j++];
          sp.bo = params[j++];
        }
        if (b.channel_norm) {
          sp.norm_gain = params[j++];
          sp.norm_bias = params[j++];
        }
        SelfAttentionConfig cfg{b.gamma, b.channel_norm, b.residual};
        TensorT<T> attn;
        x = sa_forward(tape, sp, cfg, x, &attn);
        if (attn_out) attn_out->push_back(attn);
        break;
      }
    }
    if (act_out) act_out->push_back(x);
  }
  if (pre_readout) *pre_readout = x;
  const int pi = ranges.back().first;
  ReadoutParamsT<T> rp{params[pi], params[pi + 1]};
  return readout_forward(tape, rp, spec.readout, x);
}

}  // namespace

Tensor Model::forward_chain(Tape* tape, const Tensor& x, int first_block,
                            ForwardTaps* taps) const {
  std::vector<Tensor> own;
  own.reserve(params_.size());
  for (const auto& p : params_) own.push_back(p.tensor);
  std::vector<Tensor>* acts = taps ? &taps->block_outputs : nullptr;
  std::vector<Tensor>* attn = taps ? &taps->attention : nullptr;
  Tensor* pre = taps ? &taps->pre_readout : nullptr;
  return run_chain<float>(spec_, {own.data(), own.size()}, ranges_, tape, x, first_block, acts,
                          attn, pre);
}

Tensor Model::forward(Tape* tape, const Tensor& image, ForwardTaps* taps) const {
  if (image.ndim() != 3 || image.dim(0) != spec_.input_shape[0] ||
      image.dim(1) != spec_.input_shape[1] || image.dim(2) != spec_.input_shape[2])
    throw ShapeError("forward: expected input " +
                     shape_str({spec_.input_shape[0], spec_.input_shape[1], spec_.input_shape[2]}) +
                     ", got " + shape_str(image.shape()));
  return forward_chain(tape, transform_input(image), 0, taps);
}

float Model::predict(const Tensor& image) const { return forward(nullptr, image).item(); }

Tensor Model::forward_prefix(const Tensor& x, int n_blocks) const {
  std::vector<Tensor> own;
  own.reserve(params_.size());
  for (const auto& p : params_) own.push_back(p.tensor);
  TensorT<float> cur = x;
  for (int i = 0; i < n_blocks; ++i) {
    const BlockSpec& b = spec_.blocks[static_cast<std::size_t>(i)];
    const int pi = ranges_[static_cast<std::size_t>(i)].first;
    switch (b.kind) {
      case BlockKind::kAlpha: {
        AlphaParams ap{own[pi], own[pi + 1]};
        cur = alpha_forward<float>(nullptr, ap, cur, spec_.activation);
        break;
      }
      case BlockKind::kBeta: {
        BetaParams bp{own[pi], own[pi + 1]};
        cur = beta_forward<float>(nullptr, bp, cur, spec_.activation);
        break;
      }
      case BlockKind::kSelfAttention: {
        SelfAttentionParams sp;
        int j = pi;
        sp.wq = own[j++];
        sp.bq = own[j++];
        sp.wk = own[j++];
        sp.bk = own[j++];
        if (b.gamma) {
          sp.wv = own[j++];
          sp.bv = own[j++];
          sp.wo = own[j++];
          sp.bo = own[j++];
        }
        if (b.channel_norm) {
          sp.norm_gain = own[j++];
          sp.norm_bias = own[j++];
        }
        SelfAttentionConfig cfg{b.gamma, b.channel_norm, b.residual};
        cur = sa_forward<float>(nullptr, sp, cfg, cur, nullptr);
        break;
      }
    }
  }
  return cur;
}

ParamCount Model::param_count() const {
  ParamCount pc;
  // Group per block; SA maps and SA norm reported as separate components.
  std::vector<std::pair<std::string, long>> groups;
  auto bump = [&groups](const std::string& key, long n) {
    for (auto& g : groups)
      if (g.first == key) {
        g.second += n;
        return;
      }
    groups.emplace_back(key, n);
  };
  for (const auto& p : params_) {
    std::string key = p.name.substr(0, p.name.rfind('.'));
    // b2.sa.norm.gain -> component b2.sa.norm; b2.sa.wq -> b2.sa.maps
    if (key.size() >= 3 && key.substr(key.size() - 3) == ".sa") key += ".maps";
    bump(key, static_cast<long>(p.tensor.size()));
  }
  for (auto& [k, n] : groups) {
    pc.breakdown.push_back({k, n});
    pc.total += n;
  }
  return pc;
}

ParamCount Model::expected_param_count() const {
  // Independent arithmetic from the spec shapes (no tensor access).
  ParamCount pc;
  std::array<int, 3> cur = spec_.input_shape;
  const auto shapes = shapes_;
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    const BlockSpec& b = spec_.blocks[i];
    const std::string label = block_label(b, static_cast<int>(i));
    const long cin = cur[0];
    switch (b.kind) {
      case BlockKind::kAlpha:
        pc.breakdown.push_back({label, b.channels * (cin * 25 + 1)});
        break;
      case BlockKind::kBeta:
        pc.breakdown.push_back({label, b.channels * (cin * b.kernel * b.kernel + 1)});
        break;
      case BlockKind::kSelfAttention: {
        long maps = 2 * (cin * kAttentionDim + kAttentionDim);
        if (b.gamma) maps += (cin * kAttentionDim + kAttentionDim) + (kAttentionDim * cin + cin);
        pc.breakdown.push_back({label + ".maps", maps});
        if (b.channel_norm) pc.breakdown.push_back({label + ".norm", 2 * cin});
        break;
      }
    }
    cur = shapes[i];
  }
  if (spec_.readout == ReadoutKind::kFCL)
    pc.breakdown.push_back({"readout", static_cast<long>(cur[0]) * cur[1] * cur[2] + 1});
  else
    pc.breakdown.push_back({"readout", static_cast<long>(cur[0]) + 1});
  for (const auto& e : pc.breakdown) pc.total += e.count;
  return pc;
}

std::vector<ParamRef<float>> Model::trainable_params() {
  std::vector<ParamRef<float>> out;
  for (auto& p : params_) {
    if (p.frozen) continue;
    out.push_back({p.tensor, p.freeze_mask.empty() ? nullptr : p.freeze_mask.data()});
  }
  return out;
}

void Model::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Model::set_param_frozen(const std::string& name, bool frozen) {
  NamedParam* p = find_param(name);
  if (!p) throw ConfigError("no parameter named '" + name + "'");
  p->frozen = frozen;
  p->tensor.set_requires_grad(!frozen);
  if (frozen) p->tensor.drop_grad();
}

void Model::set_param_mask(const std::string& name, std::vector<std::uint8_t> mask) {
  NamedParam* p = find_param(name);
  if (!p) throw ConfigError("no parameter named '" + name + "'");
  if (!mask.empty() && mask.size() != p->tensor.size())
    throw ShapeError("freeze mask size does not match parameter '" + name + "'");
  p->freeze_mask = std::move(mask);
}

template <class T>
std::vector<TensorT<T>> params_as(const Model& m) {
  std::vector<TensorT<T>> out;
  out.reserve(m.params().size());
  for (const auto& p : m.params()) {
    auto t = TensorT<T>::zeros(p.tensor.shape(), !p.frozen);
    auto src = p.tensor.data();
    auto dst = t.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    out.push_back(t);
  }
  return out;
}

template <class T>
TensorT<T> forward_with_params(const ModelSpec& spec, const std::vector<TensorT<T>>& params,
                               TapeT<T>* tape, const TensorT<T>& x) {
  Layout lay = compute_layout(spec);
  if (params.size() != lay.tensors.size())
    throw ShapeError("forward_with_params: wrong parameter count");
  return run_chain<T>(spec, {params.data(), params.size()}, lay.ranges, tape, x, 0, nullptr,
                      nullptr, nullptr);
}

template std::vector<TensorT<float>> params_as<float>(const Model&);
template std::vector<TensorT<double>> params_as<double>(const Model&);
template TensorT<float> forward_with_params<float>(const ModelSpec&,
                                                   const std::vector<TensorT<float>>&,
                                                   TapeT<float>*, const TensorT<float>&);
template TensorT<double> forward_with_params<double>(const ModelSpec&,
                                                     const std::vector<TensorT<double>>&,
                                                     TapeT<double>*, const TensorT<double>&);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'A', 'C', 'N', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u8(std::string& s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }
void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_i32(std::string& s, std::int32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }
void put_f32(std::string& s, float v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_str(std::string& s, const std::string& v) {
  put_u32(s, static_cast<std::uint32_t>(v.size()));
  s.append(v);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
  }
  std::uint8_t u8() { need(1); return static_cast<std::uint8_t>(buf[pos++]); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::int32_t i32() {
    need(4);
    std::int32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  float f32() {
    need(4);
    float v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string v = buf.substr(pos, n);
    pos += n;
    return v;
  }
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::string payload;
  const ModelSpec& spec = model.spec();
  put_u32(payload, static_cast<std::uint32_t>(spec.blocks.size()));
  for (const auto& b : spec.blocks) {
    put_u8(payload, static_cast<std::uint8_t>(b.kind));
    put_i32(payload, b.channels);
    put_i32(payload, b.kernel);
    put_u8(payload, b.gamma);
    put_u8(payload, b.channel_norm);
    put_u8(payload, b.residual);
  }
  put_u8(payload, static_cast<std::uint8_t>(spec.readout));
  for (int d : spec.input_shape) put_i32(payload, d);
  put_u8(payload, static_cast<std::uint8_t>(spec.activation));
  put_u64(payload, spec.seed);

  const Provenance& prov = model.provenance();
  put_str(payload, prov.stage);
  put_u64(payload, prov.seed);
  put_i32(payload, prov.epochs);
  put_i32(payload, prov.neuron);
  put_u8(payload, prov.standardize_input);
  put_f32(payload, prov.input_mean);
  put_f32(payload, prov.input_std);

  put_u32(payload, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put_str(payload, p.name);
    put_u32(payload, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (int d : p.tensor.shape()) put_i32(payload, d);
    put_u8(payload, p.frozen);
    put_u8(payload, !p.freeze_mask.empty());
    if (!p.freeze_mask.empty())
      payload.append(reinterpret_cast<const char*>(p.freeze_mask.data()), p.freeze_mask.size());
    for (float v : p.tensor.data()) put_f32(payload, v);
  }

  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, crc32(payload.data(), payload.size()));
  put_u64(out, payload.size());
  out.append(payload);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write on checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string raw = ss.str();
  if (raw.size() < 24 || std::memcmp(raw.data(), kMagic, 8) != 0)
    throw DataError("'" + path + "' is not a checkpoint file");
  Reader hdr{raw, 8};
  const std::uint32_t version = hdr.u32();
  if (version != kVersion)
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                    std::to_string(kVersion) + ")");
  const std::uint32_t want_crc = hdr.u32();
  const std::uint64_t len = hdr.u64();
  if (raw.size() != 24 + len) throw DataError("checkpoint length mismatch in '" + path + "'");
  const std::string payload = raw.substr(24);
  if (crc32(payload.data(), payload.size()) != want_crc)
    throw DataError("checkpoint checksum mismatch in '" + path + "'");

  Reader r{payload, 0};
  ModelSpec spec;
  spec.blocks.resize(r.u32());
  for (auto& b : spec.blocks) {
    b.kind = static_cast<BlockKind>(r.u8());
    b.channels = r.i32();
    b.kernel = r.i32();
    b.gamma = r.u8();
    b.channel_norm = r.u8();
    b.residual = r.u8();
  }
  spec.readout = static_cast<ReadoutKind>(r.u8());
  for (auto& d : spec.input_shape) d = r.i32();
  spec.activation = static_cast<Activation>(r.u8());
  spec.seed = r.u64();

  Provenance prov;
  prov.stage = r.str();
  prov.seed = r.u64();
  prov.epochs = r.i32();
  prov.neuron = r.i32();
  prov.standardize_input = r.u8();
  prov.input_mean = r.f32();
  prov.input_std = r.f32();

  Model m = Model::build(spec);
  m.provenance() = prov;
  const std::uint32_t n_params = r.u32();
  if (n_params != m.params().size())
    throw DataError("checkpoint parameter count does not match its own spec");
  for (auto& p : m.params()) {
    const std::string name = r.str();
    if (name != p.name) throw DataError("checkpoint parameter order mismatch at '" + name + "'");
    const std::uint32_t nd = r.u32();
    std::vector<int> shape(nd);
    for (auto& d : shape) d = r.i32();
    if (shape != p.tensor.shape()) throw DataError("checkpoint shape mismatch for '" + name + "'");
    p.frozen = r.u8();
    const bool has_mask = r.u8();
    if (has_mask) {
      r.need(p.tensor.size());
      p.freeze_mask.assign(payload.data() + r.pos, payload.data() + r.pos + p.tensor.size());
      r.pos += p.tensor.size();
    }
    for (auto& v : p.tensor.data()) v = r.f32();
    p.tensor.set_requires_grad(!p.frozen);
    p.tensor.check_finite("checkpoint parameter " + name);
  }
  return m;
}

}  // namespace sacnn
