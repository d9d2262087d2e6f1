#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sacnn/model.hpp"
#include "test_util.hpp"

using namespace sacnn;
using test::bits_equal;
using test::rand_tensor;

namespace {

long breakdown_entry(const ParamCount& pc, const std::string& component) {
  for (const auto& e : pc.breakdown)
    if (e.component == component) return e.count;
  return -1;
}

Tensor random_image(Rng& rng) { return test::rand_tensor<float>({1, 50, 50}, rng, 0.0, 1.0, false); }

}  // namespace

TEST_CASE("preset shape chains") {
  for (const auto& name : preset_names()) {
    ModelSpec spec = preset(name);
    auto shapes = chain_shapes(spec);
    // The alpha stack always lands on c x 9 x 9 for 50x50 inputs.
    int alpha_end = 0;
    for (std::size_t i = 0; i < spec.blocks.size(); ++i)
      if (spec.blocks[i].kind == BlockKind::kAlpha) alpha_end = static_cast<int>(i);
    CHECK(shapes[static_cast<std::size_t>(alpha_end)][1] == 9);
    CHECK(shapes[static_cast<std::size_t>(alpha_end)][2] == 9);
  }

  // rf-CNN: 32x9x9 before the CTL, center at (4,4).
  auto rf = preset("rf-CNN");
  auto rf_out = readout_input_shape(rf);
  CHECK(rf_out == std::array<int, 3>{32, 9, 9});
  auto [cy, cx] = center_position(rf_out[1], rf_out[2]);
  CHECK(cy == 4);
  CHECK(cx == 4);

  // ff+sa-CNN: k=3 betas shrink 9 -> 7 -> 5, so the FCL reads 750 values.
  auto ff_sa = preset("ff+sa-CNN");
  auto s = readout_input_shape(ff_sa);
  CHECK(s[0] * s[1] * s[2] == 750);

  // k=1 betas preserve 9x9.
  auto star = preset("ff+sa-CNN*");
  CHECK(readout_input_shape(star) == std::array<int, 3>{30, 9, 9});

  // c=375 bottleneck variant maps 375 -> 1.
  auto c375 = preset("rf+sa-CNN-c375");
  CHECK(readout_input_shape(c375)[0] == 375);

  CHECK_THROWS_AS(preset("not-a-model"), ConfigError);
}

TEST_CASE("param counts") {
  // rf+sa-CNN SA block, gamma=false: the Q/K maps hold 2*(30*5+5) = 310
  // learnable scalars; channel-norm affines are reported separately.
  Model m = Model::build(preset("rf+sa-CNN"), 1);
  auto pc = m.param_count();
  CHECK(breakdown_entry(pc, "b2.sa.maps") == 310);
  CHECK(breakdown_entry(pc, "b2.sa.norm") == 2 * 30);

  // gamma=true adds a value map (c*5+5) and an output map (5*c+c).
  Model mg = Model::build(preset("rf+sa-CNN*"), 1);
  CHECK(breakdown_entry(mg.param_count(), "b2.sa.maps") == 310 + (30 * 5 + 5) + (5 * 30 + 30));

  // Totals agree with the spec-arithmetic recount for every preset.
  for (const auto& name : preset_names()) {
    Model mm = Model::build(preset(name), 3);
    CHECK(mm.param_count().total == mm.expected_param_count().total);
  }

  // An independent hand recount for ff-CNN (c=32):
  //   alpha1 32*(25+1), alpha2 32*(32*25+1), beta 32*(32*9+1) twice,
  //   readout 32*5*5+1.
  const long ff_expect = 32 * 26 + 32 * (32 * 25 + 1) + 2 * (32 * (32 * 9 + 1)) + (800 + 1);
  Model ff = Model::build(preset("ff-CNN"), 1);
  CHECK(ff.param_count().total == ff_expect);

  // Parameter matching: ff-CNN (c=32) vs ff+sa-CNN (c=30) within 15%.
  Model ffsa = Model::build(preset("ff+sa-CNN"), 1);
  const double rel = std::abs(static_cast<double>(ff.param_count().total) -
                              static_cast<double>(ffsa.param_count().total)) /
                     static_cast<double>(ff.param_count().total);
  CHECK(rel < 0.15);

  // Bare FCL on the raw 1x50x50 image: 2500 weights + 1 bias.
  ModelSpec bare;
  bare.readout = ReadoutKind::kFCL;
  Model mb = Model::build(bare, 1);
  CHECK(mb.param_count().total == 2501);
}

TEST_CASE("build determinism and zero-image forward") {
  Model a = Model::build(preset("rf+sa-CNN"), 42);
  Model b = Model::build(preset("rf+sa-CNN"), 42);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(bits_equal(a.params()[i].tensor, b.params()[i].tensor));

  Model c = Model::build(preset("rf+sa-CNN"), 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (!bits_equal(a.params()[i].tensor, c.params()[i].tensor)) any_diff = true;
  CHECK(any_diff);

  auto zero = Tensor::zeros({1, 50, 50});
  const float pred = a.predict(zero);
  CHECK(std::isfinite(pred));
}

TEST_CASE("illegal chains are rejected naming the offending block") {
  // beta(3) on the raw 50x50 image leaves an even 48x48 grid: no CTL center.
  ModelSpec bad;
  bad.blocks = {BlockSpec{BlockKind::kBeta, 4, 3, false, true, false}};
  bad.readout = ReadoutKind::kCTL;
  CHECK_THROWS_AS(chain_shapes(bad), ShapeError);

  // Even beta kernels are rejected at the block level.
  ModelSpec even_k;
  even_k.blocks = {BlockSpec{BlockKind::kBeta, 4, 2, false, true, false}};
  CHECK_THROWS_AS(chain_shapes(even_k), ShapeError);

  // Alpha stack below the minimum spatial size.
  ModelSpec tiny;
  tiny.input_shape = {1, 5, 5};
  tiny.blocks = {BlockSpec{BlockKind::kAlpha, 4, 5, false, true, false}};
  CHECK_THROWS_AS(chain_shapes(tiny), ShapeError);
}

TEST_CASE("forward taps") {
  Rng rng(5);
  Model m = Model::build(preset("rf+sa-CNN"), 7);
  auto img = random_image(rng);

  const float plain = m.predict(img);
  ForwardTaps taps;
  const float tapped = m.forward(nullptr, img, &taps).item();
  CHECK(plain == tapped);  // taps never alter the prediction

  REQUIRE(taps.attention.size() == 1);
  const Tensor& attn = taps.attention[0];
  CHECK(attn.shape() == std::vector<int>{81, 81});
  for (int r = 0; r < 81; ++r) {
    double s = 0;
    for (int c0 = 0; c0 < 81; ++c0) s += attn.data()[static_cast<std::size_t>(r) * 81 + c0];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(taps.pre_readout.shape() == std::vector<int>{30, 9, 9});
  CHECK(taps.block_outputs.size() == m.spec().blocks.size());

  CHECK_THROWS_AS(m.forward(nullptr, Tensor::zeros({1, 49, 50})), ShapeError);
}

TEST_CASE("rf-CNN prediction ignores pixels outside the center support") {
  // The structural support of the center hypercolumn is rows/cols 16..31.
  Rng rng(6);
  Model m = Model::build(preset("rf-CNN"), 11);
  auto img = random_image(rng);
  const float base = m.predict(img);
  auto perturbed = img.clone();
  for (int y = 0; y < 50; ++y)
    for (int x = 0; x < 50; ++x)
      if (y < 16 || y > 31 || x < 16 || x > 31)
        perturbed.data()[static_cast<std::size_t>(y) * 50 + x] =
            static_cast<float>(rng.uniform(0.0, 1.0));
  CHECK(m.predict(perturbed) == base);
}

TEST_CASE("checkpoint round-trip") {
  Rng rng(8);
  Model m = Model::build(preset("ff+sa-CNN"), 21);
  m.provenance().stage = "unit-test";
  m.provenance().epochs = 3;
  m.set_param_frozen("b0.alpha.w", true);
  std::vector<std::uint8_t> mask(m.find_param("readout.w")->tensor.size(), 0);
  mask[40] = 1;
  m.set_param_mask("readout.w", mask);

  const std::string path = "ckpt_roundtrip.bin";
  save_checkpoint(m, path);
  Model r = load_checkpoint(path);

  CHECK(r.spec() == m.spec());
  CHECK(r.provenance().stage == "unit-test");
  CHECK(r.provenance().epochs == 3);
  CHECK(r.find_param("b0.alpha.w")->frozen);
  CHECK_FALSE(r.find_param("b0.alpha.w")->tensor.requires_grad());
  CHECK(r.find_param("readout.w")->freeze_mask == mask);

  for (int i = 0; i < 10; ++i) {
    auto img = random_image(rng);
    CHECK(m.predict(img) == r.predict(img));  // bit-identical forward
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint tampering is detected") {
  Model m = Model::build(preset("rf-CNN"), 5);
  const std::string path = "ckpt_tamper.bin";
  save_checkpoint(m, path);

  // Flip one payload byte.
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(200);
  char c;
  f.seekg(200);
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x40);
  f.seekp(200);
  f.write(&c, 1);
  f.close();
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  // Truncation is also a checksum/length failure.
  std::filesystem::resize_file(path, 100);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);  // missing file
}

TEST_CASE("spec config text round-trip") {
  ModelSpec spec = preset("rf+sa-CNN*");
  spec.seed = 99;
  const std::string text = format_spec_config(spec);
  ModelSpec parsed = parse_spec_config(text);
  CHECK(parsed == spec);

  // Preset shorthand plus overrides.
  ModelSpec p2 = parse_spec_config("preset = ff-CNN\n");
  CHECK(p2 == preset("ff-CNN"));

  CHECK_THROWS_AS(parse_spec_config("readout = sideways\n"), ConfigError);
  CHECK_THROWS_AS(parse_spec_config("block = warp c=3\n"), ConfigError);
  // Config describing an illegal chain fails validation at parse time.
  CHECK_THROWS_AS(parse_spec_config("block = beta c=4 k=3\nreadout = ctl\n"), ShapeError);
}

TEST_CASE("double-precision mirror forward matches float within tolerance") {
  Rng rng(10);
  Model m = Model::build(preset("rf+sa-CNN"), 77);
  auto img = random_image(rng);
  auto dparams = params_as<double>(m);
  auto dimg = DTensor::zeros({1, 50, 50});
  for (std::size_t i = 0; i < img.size(); ++i) dimg.data()[i] = img.data()[i];
  const double dpred = forward_with_params<double>(m.spec(), dparams, nullptr, dimg).item();
  const float fpred = m.predict(img);
  CHECK(dpred == doctest::Approx(static_cast<double>(fpred)).epsilon(1e-4));
}
