#include <fstream>
#include <iterator>
#include <random>

#include "juap/image_io.hpp"
#include "juap/metrics.hpp"
#include "juap/render.hpp"
#include "test_util.hpp"

namespace juap {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(FoolingRatio, CountsChangedPredictions) {
  auto benign = torch::tensor({0, 1, 2}, torch::kInt64);
  auto adv = torch::tensor({1, 1, 0}, torch::kInt64);
  EXPECT_NEAR(fooling_ratio(benign, adv), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(fooling_ratio(benign, benign), 0.0);
}

TEST(FoolingRatio, ZeroPerturbationFoolsNothing) {
  auto& s = test::tiny_setup();
  auto x = s.test.data.pixels;
  auto zero = Perturbation::zeros({3, 32, 32}, NormKind::LInf, 0.04);
  EXPECT_EQ(fooling_ratio(s.model, x, zero), 0.0);
}

TEST(L1Discrepancy, ClosedForms) {
  auto a = torch::zeros({2, 4, 4});
  auto b = torch::ones({2, 4, 4});
  EXPECT_DOUBLE_EQ(l1_discrepancy(a, b), 1.0);
  EXPECT_DOUBLE_EQ(l1_discrepancy(a, a), 0.0);
  auto c = torch::zeros({2, 4, 4});
  c[0].fill_(0.5);
  auto per = l1_per_image(a, c);
  EXPECT_NEAR(per[0].item<double>(), 0.5, 1e-7);
  EXPECT_NEAR(per[1].item<double>(), 0.0, 1e-7);
  EXPECT_NEAR(l1_discrepancy(a, c), 0.25, 1e-7);
}

TEST(L1Discrepancy, SymmetricAndTriangle) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = torch::rand({3, 8, 8}, g), b = torch::rand({3, 8, 8}, g), c = torch::rand({3, 8, 8}, g);
    EXPECT_NEAR(l1_discrepancy(a, b), l1_discrepancy(b, a), 1e-9);
    EXPECT_LE(l1_discrepancy(a, c), l1_discrepancy(a, b) + l1_discrepancy(b, c) + 1e-9);
    EXPECT_GE(l1_discrepancy(a, b), 0.0);
  }
}

TEST(Iou, ClosedForms) {
  auto a = torch::zeros({4, 4}, torch::kBool);
  a.slice(0, 0, 2).fill_(true);
  EXPECT_DOUBLE_EQ(iou_score(a, a), 1.0);
  auto b = torch::zeros({4, 4}, torch::kBool);
  b.slice(0, 1, 3).fill_(true);
  // 4 shared pixels of 12 in the union
  EXPECT_NEAR(iou_score(a, b), 4.0 / 12.0, 1e-12);
  EXPECT_DOUBLE_EQ(iou_score(a, b), iou_score(b, a));
  auto half = torch::zeros({4, 4}, torch::kBool);
  half.slice(0, 0, 1).fill_(true);
  EXPECT_NEAR(iou_score(a, half), 0.5, 1e-12);
  auto empty = torch::zeros({4, 4}, torch::kBool);
  EXPECT_DOUBLE_EQ(iou_score(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(iou_score(a, empty), 0.0);
  auto per = iou_per_image(torch::stack({a, a}), torch::stack({a, empty}));
  EXPECT_NEAR(per[0].item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(per[1].item<double>(), 0.0, 1e-12);
}

TEST(Evaluate, ZeroPerturbationIsHarmless) {
  auto& s = test::tiny_setup();
  for (auto kind : {InterpreterKind::Cam, InterpreterKind::GradCam}) {
    Interpreter interp{kind, s.model, nullptr};
    auto images = s.test.data.slice(0, 20);
    auto rep = evaluate_attack(interp, images, Perturbation::zeros({3, 32, 32}, NormKind::LInf, 0.04));
    EXPECT_EQ(rep.fooling_ratio, 0.0);
    EXPECT_NEAR(rep.l1_mean, 0.0, 1e-6);
    EXPECT_NEAR(rep.iou_mean, 1.0, 1e-9);
    EXPECT_EQ(rep.records.size(), 20u);
    EXPECT_EQ(rep.discrepancy_count, 20);
  }
}

TEST(Evaluate, FooledOnlyAveragesOverFooledImages) {
  auto& s = test::tiny_setup();
  Interpreter interp{InterpreterKind::Cam, s.model, nullptr};
  auto images = s.test.data.slice(0, 24);
  auto pert = baseline_pgd(s.model, images.pixels, NormKind::LInf, 0.1, 10, 0.02);
  EvalOptions opt;
  opt.fooled_only = true;
  auto rep = evaluate_attack(interp, images, pert, opt);
  int64_t fooled = 0;
  double l1 = 0.0;
  for (const auto& r : rep.records) {
    if (r.adv_pred != r.benign_pred) {
      ++fooled;
      l1 += r.l1;
    }
  }
  EXPECT_EQ(rep.discrepancy_count, fooled);
  if (fooled > 0) EXPECT_NEAR(rep.l1_mean, l1 / static_cast<double>(fooled), 1e-9);
  EXPECT_NEAR(rep.fooling_ratio, static_cast<double>(fooled) / 24.0, 1e-12);
}

TEST(EvalReport, JsonRoundTripAndValidation) {
  EvalReport r;
  r.attack_id = "a";
  r.interpreter = "CAM";
  r.fooling_ratio = 0.75;
  r.l1_mean = 0.1;
  r.iou_mean = 0.6;
  r.records.push_back({3, 1, 1, 2, 0.2, 0.5});
  auto back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_NO_THROW(back.validate());
  back.iou_mean = 1.5;
  EXPECT_THROW(back.validate(), InputError);
  back.iou_mean = 0.5;
  back.fooling_ratio = -0.1;
  EXPECT_THROW(back.validate(), InputError);
}

TEST(RocAuc, Oracles) {
  EXPECT_DOUBLE_EQ(roc_auc({2, 3}, {0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({0, 1}, {2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(roc_auc({1}, {1}), 0.5);
  // One of four pairs is misordered, one is tied
  EXPECT_DOUBLE_EQ(roc_auc({1, 3}, {1, 2}), (1.0 + 0.5 + 1.0 + 0.0) / 4.0);
  EXPECT_THROW(roc_auc({}, {1}), InputError);
}

TEST(RocAuc, SameDistributionIsChance) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a, b;
  for (int i = 0; i < 2000; ++i) {
    a.push_back(n(rng));
    b.push_back(n(rng));
  }
  EXPECT_NEAR(roc_auc(a, b), 0.5, 0.05);
}

TEST(Detection, BenignAgainstBenignIsChance) {
  auto& s = test::tiny_setup();
  Interpreter interp{InterpreterKind::Cam, s.model, nullptr};
  auto images = s.test.data.pixels;
  auto g = at::make_generator<at::CPUGeneratorImpl>(77);
  auto other = (torch::randint(0, 2, images.sizes(), g).to(torch::kFloat32) * 2.0 - 1.0) * (10.0 / 255.0);
  Perturbation same{other, NormKind::LInf, 10.0 / 255.0, 10.0 / 255.0};
  Perturbation zero = Perturbation::zeros({3, 32, 32}, NormKind::LInf, 0.04);
  auto table = detection_gap_experiment(interp, images, {{"benign", same}, {"zero", zero}});
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_NEAR(table.row("benign").auc_l1, 0.5, 0.2);
  // A zero perturbation scores below every noisy benign arrival.
  EXPECT_LT(table.row("zero").auc_l1, 0.2);
  EXPECT_EQ(table.reference.count, images.size(0));
  EXPECT_THROW(table.row("missing"), InputError);

  auto rows = parse_csv(table.to_csv());
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "set");
  EXPECT_EQ(rows[1][0], "benign");
  EXPECT_EQ(rows[3][0], "zero");
}

TEST(Csv, QuotingRoundTrip) {
  std::vector<std::vector<std::string>> rows{{"a,b", "say \"hi\""}, {"", "3"}};
  auto back = parse_csv(to_csv({"x", "y"}, rows));
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1], rows[0]);
  EXPECT_EQ(back[2], rows[1]);
}

std::vector<GridRow> sample_rows(int64_t n_rows, int64_t n_cols) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(9);
  std::vector<GridRow> rows;
  for (int64_t r = 0; r < n_rows; ++r) {
    rows.push_back({"row" + std::to_string(r), torch::rand({n_cols, 3, 16, 16}, g), torch::rand({n_cols, 16, 16}, g)});
  }
  return rows;
}

TEST(Render, GridLayoutAndDeterminism) {
  auto dir = test::fresh_dir("render");
  auto layout = render_attribution_grid(sample_rows(4, 5), dir / "a.png");
  EXPECT_EQ(layout.rows, 4);
  EXPECT_EQ(layout.columns, 5);
  EXPECT_EQ(layout.tiles, 20);
  auto img = read_image(dir / "a.png");
  EXPECT_EQ(img.size(1), layout.height);
  EXPECT_EQ(img.size(2), layout.width);
  render_attribution_grid(sample_rows(4, 5), dir / "b.png");
  EXPECT_EQ(slurp(dir / "a.png"), slurp(dir / "b.png"));
}

TEST(Render, BadInputWritesNothing) {
  auto dir = test::fresh_dir("render_bad");
  EXPECT_THROW(render_attribution_grid({}, dir / "empty.png"), InputError);
  EXPECT_FALSE(fs::exists(dir / "empty.png"));
  auto rows = sample_rows(2, 3);
  rows[1].images = rows[1].images.slice(0, 0, 2);
  rows[1].maps = rows[1].maps.slice(0, 0, 2);
  EXPECT_THROW(render_attribution_grid(rows, dir / "ragged.png"), InputError);
  EXPECT_FALSE(fs::exists(dir / "ragged.png"));
}

TEST(Render, HeatColormapEndpoints) {
  auto m = torch::tensor({0.0f, 1.0f}).view({1, 2});
  auto c = heat_colormap(m);
  EXPECT_EQ(c.sizes(), (std::vector<int64_t>{3, 1, 2}));
  // low values are blue, high values red
  EXPECT_GT(c[2][0][0].item<float>(), c[0][0][0].item<float>());
  EXPECT_GT(c[0][0][1].item<float>(), c[2][0][1].item<float>());
}

}  // namespace
}  // namespace juap
