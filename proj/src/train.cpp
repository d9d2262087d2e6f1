#include "sacnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sacnn/parallel.hpp"

namespace sacnn {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
}

namespace {

// Longest prefix of blocks whose parameters are all frozen. Activations of
// that prefix are constant during training and can be computed once.
int frozen_prefix_blocks(const Model& model) {
  int prefix = 0;
  for (std::size_t b = 0; b < model.spec().blocks.size(); ++b) {
    bool all_frozen = true;
    for (const auto& name : model.block_param_names(static_cast<int>(b)))
      if (!model.find_param(name)->frozen) all_frozen = false;
    if (!all_frozen) break;
    prefix = static_cast<int>(b) + 1;
  }
  return prefix;
}

std::vector<float> snapshot_values(const Model& model) {
  std::vector<float> out;
  for (const auto& p : model.params())
    out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore_values(Model& model, const std::vector<float>& snap) {
  std::size_t off = 0;
  for (auto& p : model.params()) {
    auto d = p.tensor.data();
    std::copy(snap.begin() + static_cast<std::ptrdiff_t>(off),
              snap.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
    off += d.size();
  }
}

}  // namespace

std::vector<float> validation_targets(const Dataset& data, int neuron) {
  std::vector<float> out(static_cast<std::size_t>(data.n_val));
  for (int i = 0; i < data.n_val; ++i) out[static_cast<std::size_t>(i)] = data.response(data.val_index(i), neuron);
  return out;
}

std::vector<float> predict_validation(const Model& model, const Dataset& data) {
  std::vector<float> out(static_cast<std::size_t>(data.n_val));
  for (int i = 0; i < data.n_val; ++i)
    out[static_cast<std::size_t>(i)] = model.predict(data.image(data.val_index(i)));
  return out;
}

StageReport train(Model& model, const Dataset& data, int neuron, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (neuron < 0 || neuron >= data.n_neurons)
    throw ConfigError("neuron index " + std::to_string(neuron) + " out of range (have " +
                      std::to_string(data.n_neurons) + ")");

  StageReport rep;
  rep.neuron = neuron;
  rep.seed = cfg.seed;
  rep.train_samples = std::max(1, static_cast<int>(std::floor(cfg.fraction * data.n_train)));

  // Input standardization over the train split (scalar mean/std), recorded in
  // the model so evaluation applies the same transform.
  if (cfg.standardize_input) {
    const std::size_t px = static_cast<std::size_t>(data.height) * data.width;
    const std::size_t n = px * static_cast<std::size_t>(data.n_train);
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += data.images[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = data.images[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    model.provenance().standardize_input = true;
    model.provenance().input_mean = static_cast<float>(mean);
    model.provenance().input_std = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
  } else {
    model.provenance().standardize_input = false;
  }
  model.provenance().neuron = neuron;
  model.provenance().seed = cfg.seed;

  // Train subset: seeded shuffle prefix of the train split.
  std::vector<int> pool(static_cast<std::size_t>(data.n_train));
  std::iota(pool.begin(), pool.end(), 0);
  if (cfg.fraction < 1.0) {
    Rng sub(mix_seed(cfg.seed, 0xf7ac));
    sub.shuffle(pool);
    pool.resize(static_cast<std::size_t>(rep.train_samples));
  }

  const int prefix = frozen_prefix_blocks(model);
  const bool cache_all = prefix > 0;

  // Cached prefix activations (train pool order mirrors `pool` indices).
  std::vector<Tensor> train_in(pool.size());
  std::vector<Tensor> val_in(static_cast<std::size_t>(data.n_val));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    Tensor x = model.transform_input(data.image(pool[i]));
    train_in[i] = cache_all ? model.forward_prefix(x, prefix) : x;
  }
  for (int i = 0; i < data.n_val; ++i) {
    Tensor x = model.transform_input(data.image(data.val_index(i)));
    val_in[static_cast<std::size_t>(i)] = cache_all ? model.forward_prefix(x, prefix) : x;
  }

  std::vector<float> val_y = validation_targets(data, neuron);

  auto evaluate_val = [&]() -> std::optional<double> {
    std::vector<float> preds(val_in.size());
    for (std::size_t i = 0; i < val_in.size(); ++i)
      preds[i] = model.forward_chain(nullptr, val_in[i], prefix).item();
    return pearson(val_y, preds);
  };

  auto trainable = model.trainable_params();
  AdamState opt;
  opt.config.lr = cfg.lr;

  std::optional<double> best_corr;
  std::vector<float> best_values = snapshot_values(model);
  int evals_since_best = 0;

  rep.epochs_run = 0;
  double last_epoch_loss = 0.0;

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(mix_seed(cfg.seed, 0x5bfful));

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                      order.size() - done);
      if (!trainable.empty()) model.zero_grads();
      const float inv_batch = 1.0f / static_cast<float>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t idx = order[done + b];
        const float target = data.response(pool[idx], neuron);
        Tape tape;
        Tensor pred = model.forward_chain(&tape, train_in[idx], prefix);
        Tensor tgt = Tensor::from({1}, {target});
        Tensor loss = mse_loss(&tape, reshape(&tape, pred, {1}), tgt);
        const float lv = loss.item();
        if (!is_finite(lv))
          throw NumericError("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch) + ", neuron " + std::to_string(neuron));
        epoch_loss += static_cast<double>(lv) * inv_batch;
        if (!trainable.empty()) {
          Tensor scaled = scale(&tape, loss, inv_batch);
          tape.backward(scaled);
        }
      }
      if (!trainable.empty()) adam_step(trainable, opt);
      done += batch;
    }
    rep.epochs_run = epoch + 1;
    last_epoch_loss = epoch_loss / std::ceil(static_cast<double>(order.size()) / cfg.batch_size);

    const std::optional<double> corr = evaluate_val();
    const bool improved = corr && (!best_corr || *corr > *best_corr);
    if (improved) {
      best_corr = corr;
      best_values = snapshot_values(model);
      evals_since_best = 0;
    } else {
      ++evals_since_best;
      if (evals_since_best >= cfg.patience) break;
    }
  }

  restore_values(model, best_values);
  model.provenance().epochs = rep.epochs_run;
  rep.final_train_loss = last_epoch_loss;
  rep.val_corr = best_corr ? best_corr : evaluate_val();
  rep.model = model.provenance().stage;
  return rep;
}

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------

void load_and_freeze(Model& dst, const Model& src, const std::vector<std::string>& names) {
  for (const auto& name : names) {
    const NamedParam* s = src.find_param(name);
    NamedParam* d = dst.find_param(name);
    if (!s || !d)
      throw ConfigError("load_and_freeze: parameter '" + name + "' missing in " +
                        (s ? "destination" : "source") + " model");
    if (s->tensor.shape() != d->tensor.shape())
      throw ShapeError("load_and_freeze: shape mismatch for '" + name + "' (" +
                       shape_str(s->tensor.shape()) + " vs " + shape_str(d->tensor.shape()) + ")");
    d->tensor.copy_values_from(s->tensor);
    dst.set_param_frozen(name, true);
  }
}

void init_fcl_from_ctl(Model& dst, const Model& src, bool freeze_center) {
  if (dst.spec().readout != ReadoutKind::kFCL)
    throw ConfigError("init_fcl_from_ctl: destination readout is not an FCL");
  if (src.spec().readout != ReadoutKind::kCTL)
    throw ConfigError("init_fcl_from_ctl: source readout is not a CTL");
  const auto shape = readout_input_shape(dst.spec());
  if (shape != readout_input_shape(src.spec()))
    throw ShapeError("init_fcl_from_ctl: models disagree on the readout input shape");
  const int c = shape[0], h = shape[1], w = shape[2];
  auto [cy, cx] = center_position(h, w);
  const int hw = h * w;
  const int center = cy * w + cx;

  NamedParam* fw = dst.find_param("readout.w");
  NamedParam* fb = dst.find_param("readout.b");
  const NamedParam* cw = src.find_param("readout.w");
  const NamedParam* cb = src.find_param("readout.b");
  auto wdata = fw->tensor.data();
  std::fill(wdata.begin(), wdata.end(), 0.0f);
  std::vector<std::uint8_t> mask;
  if (freeze_center) mask.assign(fw->tensor.size(), 0);
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t idx = static_cast<std::size_t>(ch) * hw + center;
    wdata[idx] = cw->tensor.data()[static_cast<std::size_t>(ch)];
    if (freeze_center) mask[idx] = 1;
  }
  fb->tensor.data()[0] = cb->tensor.data()[0];
  dst.set_param_mask("readout.w", std::move(mask));
}

namespace {

std::vector<std::string> alpha_param_names(const Model& m) {
  std::vector<std::string> names;
  for (std::size_t b = 0; b < m.spec().blocks.size(); ++b)
    if (m.spec().blocks[b].kind == BlockKind::kAlpha)
      for (const auto& n : m.block_param_names(static_cast<int>(b))) names.push_back(n);
  return names;
}

std::vector<std::string> trunk_param_names(const Model& m) {
  std::vector<std::string> names;
  for (std::size_t b = 0; b < m.spec().blocks.size(); ++b)
    for (const auto& n : m.block_param_names(static_cast<int>(b))) names.push_back(n);
  return names;
}

}  // namespace

PipelineResult incremental_pipeline(const Dataset& data, int neuron, const TrainConfig& cfg) {
  cfg.validate();
  PipelineResult out;

  // Stage 1: rf-CNN from scratch.
  {
    ModelSpec spec = preset("rf-CNN");
    out.rf = Model::build(spec, mix_seed(cfg.seed, 1));
    out.rf.provenance().stage = "rf-CNN";
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, 1);
    out.rep_rf = train(out.rf, data, neuron, c);
    out.rep_rf.stage = "rf-CNN";
    out.rep_rf.model = "rf-CNN";
  }

  // Stage 2: rf+sa-CNN* with frozen stage-1 alpha blocks.
  {
    ModelSpec spec = preset("rf+sa-CNN*");
    out.incr = Model::build(spec, mix_seed(cfg.seed, 2));
    out.incr.provenance().stage = "rf+sa-CNN*(Incr.)";
    load_and_freeze(out.incr, out.rf, alpha_param_names(out.incr));
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, 2);
    out.rep_incr = train(out.incr, data, neuron, c);
    out.rep_incr.stage = "rf+sa-CNN*(Incr.)";
    out.rep_incr.model = "rf+sa-CNN*";
  }

  // Stage 3a (FC1): trunk + FCL center weights frozen.
  {
    ModelSpec spec = preset("ff+sa-CNN*");
    out.fc1 = Model::build(spec, mix_seed(cfg.seed, 3));
    out.fc1.provenance().stage = "ff+sa-CNN*(Incr.FC1)";
    load_and_freeze(out.fc1, out.incr, trunk_param_names(out.fc1));
    init_fcl_from_ctl(out.fc1, out.incr, /*freeze_center=*/true);
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, 3);
    out.rep_fc1 = train(out.fc1, data, neuron, c);
    out.rep_fc1.stage = "ff+sa-CNN*(Incr.FC1)";
    out.rep_fc1.model = "ff+sa-CNN*";
  }

  // Stage 3b (FC2): trunk frozen, whole FCL learnable.
  {
    ModelSpec spec = preset("ff+sa-CNN*");
    out.fc2 = Model::build(spec, mix_seed(cfg.seed, 4));
    out.fc2.provenance().stage = "ff+sa-CNN*(Incr.FC2)";
    load_and_freeze(out.fc2, out.incr, trunk_param_names(out.fc2));
    init_fcl_from_ctl(out.fc2, out.incr, /*freeze_center=*/false);
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, 4);
    out.rep_fc2 = train(out.fc2, data, neuron, c);
    out.rep_fc2.stage = "ff+sa-CNN*(Incr.FC2)";
    out.rep_fc2.model = "ff+sa-CNN*";
  }
  return out;
}

SimulResult simultaneous(const std::string& preset_name, const Dataset& data, int neuron,
                         const TrainConfig& cfg) {
  SimulResult out;
  out.model = Model::build(preset(preset_name), mix_seed(cfg.seed, 11));
  out.model.provenance().stage = preset_name + "(Simul.)";
  TrainConfig c = cfg;
  c.seed = mix_seed(cfg.seed, 11);
  out.report = train(out.model, data, neuron, c);
  out.report.stage = out.model.provenance().stage;
  out.report.model = preset_name;
  return out;
}

// ---------------------------------------------------------------------------
// Population harness
// ---------------------------------------------------------------------------

PopulationRun train_population(const std::string& preset_name, const Dataset& data,
                               const TrainConfig& cfg, int n_jobs) {
  PopulationRun run;
  const int m = data.n_neurons;
  run.models.resize(static_cast<std::size_t>(m));
  run.reports.resize(static_cast<std::size_t>(m));
  std::vector<std::vector<float>> real(static_cast<std::size_t>(m)), pred(static_cast<std::size_t>(m));
  parallel_for(n_jobs, m, [&](int neuron) {
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(neuron));
    Model model = Model::build(preset(preset_name), c.seed);
    model.provenance().stage = preset_name;
    StageReport rep = train(model, data, neuron, c);
    rep.stage = preset_name;
    rep.model = preset_name;
    real[static_cast<std::size_t>(neuron)] = validation_targets(data, neuron);
    pred[static_cast<std::size_t>(neuron)] = predict_validation(model, data);
    run.models[static_cast<std::size_t>(neuron)] = std::move(model);
    run.reports[static_cast<std::size_t>(neuron)] = std::move(rep);
  });
  run.metrics = make_report(preset_name, real, pred);
  return run;
}

PopulationPipelineRun run_pipeline_population(const Dataset& data, const TrainConfig& cfg,
                                              int n_jobs) {
  PopulationPipelineRun run;
  const int m = data.n_neurons;
  run.by_neuron.resize(static_cast<std::size_t>(m));
  parallel_for(n_jobs, m, [&](int neuron) {
    TrainConfig c = cfg;
    c.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(neuron));
    run.by_neuron[static_cast<std::size_t>(neuron)] = incremental_pipeline(data, neuron, c);
  });
  std::vector<std::vector<float>> real(static_cast<std::size_t>(m));
  std::vector<std::vector<float>> p_rf(static_cast<std::size_t>(m)), p_incr(static_cast<std::size_t>(m)),
      p_fc1(static_cast<std::size_t>(m)), p_fc2(static_cast<std::size_t>(m));
  parallel_for(n_jobs, m, [&](int neuron) {
    const auto& pr = run.by_neuron[static_cast<std::size_t>(neuron)];
    real[static_cast<std::size_t>(neuron)] = validation_targets(data, neuron);
    p_rf[static_cast<std::size_t>(neuron)] = predict_validation(pr.rf, data);
    p_incr[static_cast<std::size_t>(neuron)] = predict_validation(pr.incr, data);
    p_fc1[static_cast<std::size_t>(neuron)] = predict_validation(pr.fc1, data);
    p_fc2[static_cast<std::size_t>(neuron)] = predict_validation(pr.fc2, data);
  });
  run.metrics_rf = make_report("rf-CNN", real, p_rf);
  run.metrics_incr = make_report("rf+sa-CNN*(Incr.)", real, p_incr);
  run.metrics_fc1 = make_report("ff+sa-CNN*(Incr.FC1)", real, p_fc1);
  run.metrics_fc2 = make_report("ff+sa-CNN*(Incr.FC2)", real, p_fc2);
  return run;
}

std::vector<FractionRunResult> data_fraction_run(const std::vector<std::string>& presets,
                                                 const Dataset& data,
                                                 const std::vector<double>& fractions,
                                                 const TrainConfig& cfg, int n_jobs) {
  std::vector<FractionRunResult> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("data fraction must be in (0, 1]");
    for (const auto& name : presets) {
      TrainConfig c = cfg;
      c.fraction = f;
      PopulationRun run = train_population(name, data, c, n_jobs);
      out.push_back({f, name, std::move(run.metrics)});
    }
  }
  return out;
}

}  // namespace sacnn
