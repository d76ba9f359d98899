#include <cmath>

#include "juap/losses.hpp"
#include "test_util.hpp"

namespace juap {
namespace {

TEST(ClassifierLoss, UniformLogitsMaximizeCe) {
  auto logits = torch::zeros({4, 10});
  auto targets = torch::tensor({0, 3, 5, 9}, torch::kInt64);
  const double expected = -std::log(std::log(10.0));
  EXPECT_NEAR(classifier_loss(ObjectiveKind::MaximizeCe, logits, targets).item<double>(), expected, 1e-6);
  EXPECT_NEAR(expected, -0.834, 1e-3);
}

TEST(ClassifierLoss, LeastLikelyAlreadyReachedBeatsUniform) {
  auto benign = torch::tensor({{3.0f, 1.0f, -2.0f}, {0.0f, -1.0f, 2.0f}});
  auto cmin = least_likely_classes(benign);
  EXPECT_EQ(cmin[0].item<int64_t>(), 2);
  EXPECT_EQ(cmin[1].item<int64_t>(), 1);
  auto reached = torch::tensor({{-2.0f, -2.0f, 3.0f}, {-2.0f, 3.0f, -2.0f}});
  auto uniform = torch::zeros({2, 3});
  EXPECT_LT(classifier_loss(ObjectiveKind::LeastLikely, reached, cmin).item<double>(),
            classifier_loss(ObjectiveKind::LeastLikely, uniform, cmin).item<double>());
}

TEST(ClassifierLoss, TargetedNearOneHotIsStronglyNegative) {
  auto logits = torch::tensor({{30.0f, 0.0f, 0.0f}, {30.0f, 0.0f, 0.0f}});
  auto t = torch::zeros({2}, torch::kInt64);
  EXPECT_LT(classifier_loss(ObjectiveKind::Targeted, logits, t).item<double>(), -10.0);
  EXPECT_TRUE(std::isfinite(classifier_loss(ObjectiveKind::Targeted, logits * 100, t).item<double>()));
}

TEST(InterpreterLoss, ClosedForms) {
  auto a = torch::rand({1, 6, 5});
  EXPECT_EQ(interpreter_loss(a, a).item<double>(), 0.0);
  EXPECT_NEAR(interpreter_loss(a + 0.1, a).item<double>(), 0.1 * std::sqrt(30.0), 1e-5);
  auto b = torch::rand({2, 6, 5});
  auto c = b.clone();
  c[1] += 0.2;
  EXPECT_NEAR(interpreter_loss(c, b).item<double>(), 0.5 * 0.2 * std::sqrt(30.0), 1e-5);
}

TEST(InterpreterLoss, BenignSideIsConstant) {
  auto adv = torch::rand({2, 4, 4}).requires_grad_(true);
  auto benign = torch::rand({2, 4, 4}).requires_grad_(true);
  auto grads = torch::autograd::grad({interpreter_loss(adv, benign)}, {adv, benign}, {}, false, false, true);
  EXPECT_TRUE(grads[0].defined());
  EXPECT_FALSE(grads[1].defined() && grads[1].abs().sum().item<float>() > 0);
}

TEST(EncoderLoss, ZeroForIdenticalEmbeddings) {
  auto e = torch::rand({3, 8, 4, 4});
  EXPECT_EQ(rts_encoder_loss(e, e).item<double>(), 0.0);
}

TEST(JointLoss, GateArithmetic) {
  auto gated = joint_loss(torch::tensor(-1.2, torch::kFloat64), torch::tensor(5.0, torch::kFloat64), 0.001, -0.8);
  EXPECT_NEAR(gated.item<double>(), -0.795, 1e-9);
  auto open = joint_loss(torch::tensor(-0.3, torch::kFloat64), torch::tensor(5.0, torch::kFloat64), 0.001, -0.8);
  EXPECT_NEAR(open.item<double>(), -0.3 + 0.005, 1e-9);
}

TEST(JointLoss, SubgradientOfTheClassifierTerm) {
  for (double v : {-1.2, -0.3}) {
    auto l = torch::tensor(v, torch::kFloat64).requires_grad_(true);
    auto j = joint_loss(l, torch::tensor(2.0, torch::kFloat64), 0.01, -0.8);
    auto g = torch::autograd::grad({j}, {l})[0].item<double>();
    EXPECT_EQ(g, v < -0.8 ? 0.0 : 1.0);
  }
}

TEST(ObjectiveKind, ParsesTags) {
  EXPECT_EQ(parse_objective_kind("least-likely"), ObjectiveKind::LeastLikely);
  EXPECT_EQ(to_string(ObjectiveKind::MaximizeCe), "maximize-ce");
  EXPECT_THROW(parse_objective_kind("bogus"), InputError);
}

}  // namespace
}  // namespace juap
