#include <cmath>

#include "juap/interpreters.hpp"
#include "juap/losses.hpp"
#include "test_util.hpp"

namespace juap {
namespace {

TEST(Postprocess, SingleChannelMapIsNormalizedByItsMax) {
  auto a = torch::tensor({{1.0f, 2.0f}, {3.0f, 4.0f}}).unsqueeze(0);
  auto out = postprocess_maps(a, 2, 2);
  EXPECT_TRUE(torch::allclose(out, a / 4.0f));
  auto up = postprocess_maps(a, 4, 4);
  auto expected = torch::nn::functional::interpolate(
      (a / 4.0f).unsqueeze(1),
      torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{4, 4}).mode(torch::kBilinear).align_corners(false));
  EXPECT_TRUE(torch::allclose(up, expected.squeeze(1) / expected.max(), 1e-6, 1e-6));
}

TEST(Postprocess, NegativesClampedAndIdempotent) {
  auto raw = torch::randn({3, 8, 8});
  auto once = postprocess_maps(raw, 32, 32);
  EXPECT_GE(once.min().item<float>(), 0.0f);
  auto per_max = once.amax({1, 2});
  EXPECT_TRUE(torch::allclose(per_max, torch::ones({3})));
  EXPECT_TRUE(torch::allclose(postprocess_maps(once, 32, 32), once));
  auto zero = postprocess_maps(torch::zeros({1, 4, 4}), 8, 8);
  EXPECT_TRUE(torch::equal(zero, torch::zeros({1, 8, 8})));
}

TEST(Cam, SingleChannelUnitWeightReproducesTheActivation) {
  ClassifierSpec spec;
  spec.feature_channels = 1;
  auto m = make_classifier(spec, 3);
  m->eval();
  {
    torch::NoGradGuard ng;
    m->head_weight().fill_(1.0);
  }
  auto x = torch::rand({2, 3, 32, 32});
  auto classes = torch::tensor({0, 4}, torch::kInt64);
  auto raw = cam_raw(m, x, classes);
  auto a = capture_activations(m, x).activations.select(1, 0);
  EXPECT_TRUE(torch::allclose(raw, a, 1e-5, 1e-6));
}

TEST(Cam, ZeroHeadWeightsGiveAZeroMap) {
  auto m = make_classifier(ClassifierSpec{}, 3);
  m->eval();
  {
    torch::NoGradGuard ng;
    m->head_weight().zero_();
  }
  auto x = torch::rand({2, 3, 32, 32});
  auto cls = torch::tensor({1, 2}, torch::kInt64);
  EXPECT_EQ(cam_attribution(m, x, cls).values.abs().max().item<float>(), 0.0f);
  // f_c no longer depends on A, so GradCAM also collapses to zero.
  EXPECT_EQ(gradcam_attribution(m, x, cls).values.abs().max().item<float>(), 0.0f);
}

TEST(CamGradCam, AgreeOnGapHeadModels) {
  for (uint64_t seed = 0; seed < 6; ++seed) {
    ClassifierSpec spec;
    spec.arch = seed % 2 ? ClassifierArch::DenseSmall : ClassifierArch::ResidualSmall;
    auto m = make_classifier(spec, seed);
    m->eval();
    torch::manual_seed(seed);
    auto x = torch::rand({3, 3, 32, 32});
    auto cam = cam_attribution(m, x).values;
    auto grad = gradcam_attribution(m, x).values;
    EXPECT_LT((cam - grad).abs().max().item<float>(), 1e-4f) << "seed " << seed;
  }
}

TEST(Interpreter, MapsAreIndependentPerImage) {
  auto& s = test::tiny_setup();
  auto one = s.test.data.pixels.slice(0, 0, 1);
  auto x = torch::cat({one, s.test.data.pixels.slice(0, 1, 2), one});
  for (auto kind : {InterpreterKind::Cam, InterpreterKind::GradCam}) {
    Interpreter interp{kind, s.model, nullptr};
    auto maps = interp.explain(x).values;
    ASSERT_EQ(maps.sizes(), (std::vector<int64_t>{3, 32, 32}));
    EXPECT_TRUE(torch::allclose(maps[0], maps[2]));
    EXPECT_TRUE(torch::equal(maps, interp.explain(x).values));
    EXPECT_TRUE(torch::allclose(interp.explain(one).values[0], maps[0], 1e-5, 1e-6));
  }
}

TEST(Interpreter, DifferentiableMapsMatchPlainMaps) {
  auto& s = test::tiny_setup();
  auto x = s.test.data.pixels.slice(0, 0, 4);
  auto classes = predict_labels(s.model, x);
  for (auto kind : {InterpreterKind::Cam, InterpreterKind::GradCam}) {
    Interpreter interp{kind, s.model, nullptr};
    auto plain = interp.maps(x, classes, false);
    auto both = interp.maps_and_logits(x, classes, true);
    EXPECT_TRUE(both.maps.requires_grad());
    EXPECT_TRUE(torch::allclose(both.maps.detach(), plain, 1e-5, 1e-6));
    EXPECT_TRUE(torch::allclose(both.logits.detach(), predict(s.model, x), 1e-5, 1e-5));
  }
}

// The network is piecewise linear under standard ReLU, so the input gradient of
// a logit is locally constant and its derivative vanishes; the smoothed gate
// makes the backward pass a smooth function of the pre-activations.
TEST(SecondOrder, InputHessianVanishesOnlyUnderStandardRelu) {
  auto m = make_classifier(ClassifierSpec{}, 8);
  m->eval();
  auto x = torch::rand({2, 3, 32, 32}).requires_grad_(true);
  auto v = torch::randn({2, 3, 32, 32});
  auto hvp_norm = [&](const ActivationSettings& act) {
    ScopedActivation scope(m, act);
    auto f = m->forward(x).select(1, 0).sum();
    auto g = torch::autograd::grad({f}, {x}, {}, true, true)[0];
    auto h = torch::autograd::grad({(g * v).sum()}, {x}, {}, false, false, true)[0];
    return h.defined() ? h.abs().max().item<double>() : 0.0;
  };
  EXPECT_EQ(hvp_norm(ActivationSettings{}), 0.0);
  EXPECT_GT(hvp_norm({ActivationMode::SmoothedRelu, 1e-4, GateForm::AsPrinted}), 0.0);
}

TEST(SecondOrder, GradCamLossGradientIsFiniteAndNonzeroUnderSmoothedRelu) {
  auto& s = test::tiny_setup();
  Interpreter interp{InterpreterKind::GradCam, s.model, nullptr};
  auto x = s.test.data.pixels.slice(0, 0, 4);
  auto classes = predict_labels(s.model, x);
  auto benign = interp.maps(x, classes, false);
  auto theta = (torch::randn_like(x) * 0.02).requires_grad_(true);
  ScopedActivation scope(s.model, {ActivationMode::SmoothedRelu, 1e-4, GateForm::AsPrinted});
  auto maps = interp.maps(x + theta, classes, true);
  auto g = torch::autograd::grad({interpreter_loss(maps, benign)}, {theta})[0];
  EXPECT_TRUE(torch::isfinite(g).all().item<bool>());
  EXPECT_GT(g.abs().max().item<float>(), 0.0f);
}

TEST(Binarize, AllOnesMapSelectsEverything) {
  auto masks = binarize(torch::ones({1, 5, 5}));
  EXPECT_TRUE(masks.all().item<bool>());
}

TEST(Binarize, FixedThreshold) {
  auto m = torch::tensor({0.2f, 0.7f}).view({1, 1, 2});
  auto mask = binarize(m, ThresholdRule::fixed(0.5));
  EXPECT_FALSE(mask[0][0][0].item<bool>());
  EXPECT_TRUE(mask[0][0][1].item<bool>());
}

TEST(Binarize, TopFractionOnRampSelectsCeilCount) {
  for (int64_t side : {10, 7, 13}) {
    auto ramp = torch::arange(1, side * side + 1, torch::kFloat32).view({1, side, side}) / (side * side);
    auto mask = binarize(ramp, ThresholdRule::top_fraction(0.2));
    const auto expected = static_cast<int64_t>(std::ceil(0.2 * side * side));
    EXPECT_EQ(mask.sum().item<int64_t>(), expected) << side;
    // The selected pixels are the largest ones.
    EXPECT_TRUE(mask.view(-1).slice(0, side * side - expected).all().item<bool>());
  }
}

TEST(Binarize, ZeroMapGivesEmptyMask) {
  EXPECT_EQ(binarize(torch::zeros({2, 4, 4})).sum().item<int64_t>(), 0);
}

TEST(Blend, Identities) {
  auto x = torch::rand({2, 3, 8, 8});
  auto bg = blend_background(x, BlendBackground::Blur, 1);
  EXPECT_TRUE(torch::allclose(blend(x, torch::ones({2, 8, 8}), bg), x));
  EXPECT_TRUE(torch::allclose(blend(x, torch::zeros({2, 8, 8}), bg), bg));
  auto noise = blend_background(x, BlendBackground::UniformNoise, 1);
  EXPECT_TRUE(torch::equal(noise, blend_background(x, BlendBackground::UniformNoise, 1)));
}

TEST(Rts, MaskShapeRangeAndDeterminism) {
  RtsModel rts(RtsSpec{});
  rts->eval();
  auto x = torch::rand({3, 3, 32, 32});
  x[2].copy_(x[0]);
  auto m = rts_attribution(rts, x).values;
  ASSERT_EQ(m.sizes(), (std::vector<int64_t>{3, 32, 32}));
  EXPECT_GE(m.min().item<float>(), 0.0f);
  EXPECT_LE(m.max().item<float>(), 1.0f);
  EXPECT_TRUE(torch::allclose(m[0], m[2]));
  EXPECT_TRUE(torch::equal(m, rts_attribution(rts, x).values));
}

TEST(Rts, TrainingReducesLossAndKeepsMasksSparse) {
  auto& s = test::tiny_setup();
  RtsTrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.seed = 2;
  RtsTrainRecord record;
  auto rts = train_rts(s.model, s.train, cfg, &record);
  ASSERT_EQ(record.epoch_losses.size(), 4u);
  EXPECT_LT(record.epoch_losses.back(), record.epoch_losses.front());
  torch::NoGradGuard ng;
  EXPECT_LT(rts->forward(s.test.data.pixels).mean().item<float>(), 0.9f);
  for (auto& p : s.model->parameters()) EXPECT_TRUE(p.requires_grad());

  auto dir = test::fresh_dir("rts_ckpt");
  save_rts(dir / "r.pt", rts, nlohmann::json::object());
  auto loaded = load_rts(dir / "r.pt");
  EXPECT_TRUE(torch::equal(loaded->forward(s.test.data.pixels), rts->forward(s.test.data.pixels)));
}

TEST(Rts, ObjectiveValidatesWeights) {
  RtsTrainConfig cfg;
  cfg.lambda_tv = -1.0;
  EXPECT_THROW(cfg.validate(), InputError);
}

TEST(InterpreterKind, ParsesTags) {
  EXPECT_EQ(parse_interpreter_kind("GradCAM"), InterpreterKind::GradCam);
  EXPECT_EQ(to_string(InterpreterKind::Rts), "RTS");
  EXPECT_THROW(parse_interpreter_kind("LIME"), InputError);
}

}  // namespace
}  // namespace juap
