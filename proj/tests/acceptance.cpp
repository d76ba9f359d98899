// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if
// any criterion fails. Takes about an hour on a single CPU core.
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "juap/attack.hpp"
#include "juap/metrics.hpp"
#include "juap/pipeline.hpp"

using namespace juap;

namespace {

constexpr int64_t kImagesPerClass = 200;
constexpr int64_t kTrainImages = 960;
constexpr int64_t kClassifierEpochs = 15;
constexpr int64_t kRtsEpochs = 5;
constexpr int64_t kAttackIterations = 600;
constexpr int64_t kGeneratorWidth = 16;
constexpr double kLambda = 0.1;
// RTS maps move far less than CAM maps, so its interpreter loss is two orders
// of magnitude smaller and gets the larger weight.
constexpr double kLambdaCam = 0.02;
constexpr double kLambdaRts = 0.1;
constexpr int kSeeds = 3;
constexpr int64_t kImageDependentCount = 100;
constexpr int64_t kJapIterations = 300;
constexpr int64_t kPgdSteps = 40;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> g_outcomes;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  g_outcomes.push_back({id, name, pass, detail});
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << "C" << id << " " << name << ": " << detail << std::endl;
}

struct Stats {
  double mean = 0.0;
  double sd = 0.0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(s.sd / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct World {
  Dataset ds;
  Classifier clf{nullptr};
  RtsModel rts{nullptr};
  double top1 = 0.0;

  Interpreter interpreter(InterpreterKind kind) const {
    return Interpreter{kind, clf, kind == InterpreterKind::Rts ? rts : RtsModel{nullptr}};
  }
};

World build_world() {
  World w;
  auto all = make_synthetic_shapes({kImagesPerClass, 32, 7});
  auto g = at::make_generator<at::CPUGeneratorImpl>(11);
  auto perm = torch::randperm(all.size(), g, torch::kLong);
  w.ds.train.data = all.select(perm.slice(0, 0, kTrainImages));
  w.ds.test.data = all.select(perm.slice(0, kTrainImages));
  w.ds.num_classes = 6;
  TrainConfig tc;
  tc.epochs = kClassifierEpochs;
  auto trained = train_classifier(w.ds.train, w.ds.test, ClassifierSpec{}, tc);
  w.clf = trained.model;
  w.top1 = trained.top1;
  RtsTrainConfig rc;
  rc.epochs = kRtsEpochs;
  w.rts = train_rts(w.clf, w.ds.train, rc);
  return w;
}

// --- criterion 1 --------------------------------------------------------------

void norm_constraint_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int violations = 0;
  double worst = -1.0;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    GeneratorSpec gs;
    gs.arch = (i % 2) ? GeneratorArch::UNetGen : GeneratorArch::ResidualGen;
    gs.channels = (i % 5 == 0) ? 1 : 3;
    if (gs.arch == GeneratorArch::UNetGen) {
      gs.height = gs.width = (i % 3 == 0) ? 64 : 32;
    } else {
      gs.height = gs.width = (i % 3 == 0) ? 16 : 32;
    }
    gs.base_width = 4;
    const NormKind p = (i % 4 < 2) ? NormKind::L2 : NormKind::LInf;
    const double zeta = std::pow(10.0, -3.0 + 4.0 * unit(rng));
    auto gen = make_generator(gs, rng());
    auto noise = sample_noise({gs.channels, gs.height, gs.width}, rng()) * (0.1 + 10.0 * unit(rng));
    torch::NoGradGuard ng;
    auto pert = generate_perturbation(gen, noise, p, zeta);
    const double n = norm_of(pert.values.to(torch::kFloat64), p);
    worst = std::max(worst, n - zeta);
    if (!(n <= zeta + 1e-6)) ++violations;
  }
  const double t = seconds_since(t0);
  report(1, "norm constraint", violations == 0 && t < 60.0,
         std::to_string(draws) + " draws, " + std::to_string(violations) + " violations, max(norm - zeta) = " +
             fmt(worst, 9) + ", " + fmt(t, 1) + " s");
}

// --- criterion 2 --------------------------------------------------------------

void cam_gradcam_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (uint64_t i = 0; i < 100; ++i) {
    ClassifierSpec spec;
    spec.arch = (i % 2) ? ClassifierArch::DenseSmall : ClassifierArch::ResidualSmall;
    spec.num_classes = 2 + static_cast<int64_t>(i % 9);
    spec.feature_channels = 8 + 8 * static_cast<int64_t>(i % 4);
    spec.image_height = spec.image_width = (i % 3 == 0) ? 16 : 32;
    auto model = make_classifier(spec, 1000 + i);
    auto g = at::make_generator<at::CPUGeneratorImpl>(2000 + i);
    auto x = torch::rand({4, 3, spec.image_height, spec.image_width}, g);
    auto cam = cam_attribution(model, x).values;
    auto grad = gradcam_attribution(model, x).values;
    worst = std::max(worst, (cam - grad).abs().max().item<double>());
  }
  const double t = seconds_since(t0);
  report(2, "CAM/GradCAM oracle", worst <= 1e-4 && t < 120.0,
         "100 models, max |CAM - GradCAM| = " + fmt(worst, 8) + ", " + fmt(t, 1) + " s");
}

// --- criterion 3 --------------------------------------------------------------

void smoothed_relu_check(World& w) {
  const double tau = 1e-4;
  // Antiderivative of the gate: F'(s) equals the smoothed gate everywhere.
  auto F = [&](double s) { return std::sqrt(s * s + tau) + std::min(s, 0.0); };
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> expo(-2.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double s = (i % 2 ? -1.0 : 1.0) * std::pow(10.0, expo(rng));
    const double h = 1e-6 * std::max(1.0, std::abs(s));
    const double fd = (F(s + h) - F(s - h)) / (2.0 * h);
    const double analytic = smoothed_relu_gate(s, tau);
    worst = std::max(worst, std::abs(analytic - fd) / std::max(std::abs(fd), 1e-12));
  }

  int good = 0;
  double min_norm = std::numeric_limits<double>::infinity();
  for (uint64_t i = 0; i < 10; ++i) {
    auto interp = w.interpreter(InterpreterKind::GradCam);
    GeneratorSpec gs;
    gs.base_width = 8;
    auto gen = make_generator(gs, 500 + i);
    auto x = w.ds.train.data.pixels.slice(0, 8 * static_cast<int64_t>(i), 8 * static_cast<int64_t>(i) + 8);
    auto classes = predict_labels(w.clf, x);
    auto benign = interp.maps(x, classes, false);
    ScopedActivation act(interp.classifier, {ActivationMode::SmoothedRelu, tau, GateForm::AsPrinted});
    auto noise = sample_noise({3, 32, 32}, 600 + i);
    const NormKind p = (i % 2) ? NormKind::L2 : NormKind::LInf;
    auto pert = scale_to_budget(gen->forward(noise), p, default_zeta(p, 32, 32));
    auto maps = interp.maps(apply_perturbation(x, pert), classes, true);
    auto loss = interpreter_loss(maps, benign);
    auto params = gen->parameters();
    auto grads = torch::autograd::grad({loss}, params, {}, false, false, true);
    double sq = 0.0;
    bool finite = true;
    for (const auto& gr : grads) {
      if (!gr.defined()) continue;
      finite = finite && torch::isfinite(gr).all().item<bool>();
      sq += gr.pow(2).sum().item<double>();
    }
    const double norm = std::sqrt(sq);
    min_norm = std::min(min_norm, norm);
    if (finite && norm > 0.0) ++good;
  }
  report(3, "smoothed-ReLU gradient", worst <= 1e-3 && good == 10,
         "max relative FD error " + fmt(worst, 8) + " over 100 points; " + std::to_string(good) +
             "/10 GradCAM loss gradients finite and nonzero (min norm " + fmt(min_norm, 6) + ")");
}

// --- criterion 4 --------------------------------------------------------------

double grad_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b, double* scale) {
  double d = 0.0, s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    auto ai = a[i].defined() ? a[i] : torch::zeros_like(b[i]);
    auto bi = b[i].defined() ? b[i] : torch::zeros_like(ai);
    d += (ai - bi).pow(2).sum().item<double>();
    s += bi.pow(2).sum().item<double>();
  }
  *scale = std::sqrt(s);
  return std::sqrt(d);
}

void gate_semantics(World& w) {
  auto interp = w.interpreter(InterpreterKind::Cam);
  AttackConfig cfg;
  cfg.objective = ObjectiveKind::MaximizeCe;
  cfg.lambda = kLambda;
  cfg.iterations = 200;
  cfg.instrument = true;
  cfg.seed = 41;
  GeneratorSpec gs;
  gs.base_width = kGeneratorWidth;
  JuapTrainer trainer(make_generator(gs, 41), interp, w.ds.train, cfg);
  int active = 0, inactive = 0, bad = 0;
  int sub_checked = 0, sub_bad = 0, sub_active = 0;
  double worst_rel = 0.0;
  auto g = at::make_generator<at::CPUGeneratorImpl>(42);
  while (!trainer.finished()) {
    auto rec = trainer.step();
    const double gn = rec.classifier_grad_norm.value_or(-1.0);
    if (rec.gate_active) {
      ++active;
      if (gn != 0.0) ++bad;
    } else {
      ++inactive;
      if (!(gn > 0.0)) ++bad;
    }
    if (rec.iteration % 10 != 9) continue;
    // Exact subgradient identity on a fresh batch.
    auto idx = torch::randint(0, w.ds.train.size(), {30}, g);
    auto x = w.ds.train.data.pixels.index_select(0, idx);
    auto labels = w.ds.train.data.labels.index_select(0, idx);
    auto classes = predict_labels(w.clf, x);
    auto benign = interp.maps(x, classes, false);
    auto params = trainer.generator()->parameters();
    auto pert = scale_to_budget(trainer.generator()->forward(trainer.noise()), cfg.p, cfg.zeta);
    auto out = interp.maps_and_logits(apply_perturbation(x, pert), classes, true);
    auto l_cls = classifier_loss(cfg.objective, out.logits, labels);
    auto l_int = interpreter_loss(out.maps, benign);
    auto l_joint = joint_loss(l_cls, l_int, cfg.lambda, cfg.delta);
    auto g_cls = torch::autograd::grad({l_cls}, params, {}, true, false, true);
    auto g_int = torch::autograd::grad({l_int}, params, {}, true, false, true);
    auto g_joint = torch::autograd::grad({l_joint}, params, {}, false, false, true);
    const bool open = l_cls.item<double>() < cfg.delta;
    std::vector<torch::Tensor> expected;
    for (size_t i = 0; i < params.size(); ++i) {
      auto gi = g_int[i].defined() ? g_int[i] : torch::zeros_like(params[i]);
      auto gc = g_cls[i].defined() ? g_cls[i] : torch::zeros_like(params[i]);
      expected.push_back(open ? cfg.lambda * gi : gc + cfg.lambda * gi);
    }
    double scale = 0.0;
    const double dist = grad_distance(g_joint, expected, &scale);
    const double rel = dist / std::max(scale, 1e-20);
    worst_rel = std::max(worst_rel, rel);
    ++sub_checked;
    sub_active += open;
    if (rel > 1e-5) ++sub_bad;
  }
  const bool pass = bad == 0 && active > 0 && inactive > 0 && sub_checked == 20 && sub_bad == 0;
  report(4, "gate semantics", pass,
         std::to_string(active) + " gated / " + std::to_string(inactive) + " open iterations, " + std::to_string(bad) +
             " contract violations; subgradient identity at " + std::to_string(sub_checked) + " iterations (" +
             std::to_string(sub_active) + " gated), worst relative error " + fmt(worst_rel, 9));
}

// --- criteria 5, 6, 10 -----------------------------------------------------------

struct Metrics {
  double fr = 0.0, l1 = 0.0, iou = 0.0;
};

struct ThreatResult {
  std::string name;
  std::map<InterpreterKind, std::vector<Metrics>> juap;
  std::map<InterpreterKind, std::vector<Metrics>> ablation;
  std::vector<Perturbation> ablation_perts;
  std::map<InterpreterKind, std::vector<Perturbation>> juap_perts;
  double max_run_seconds = 0.0;
};

const std::vector<InterpreterKind> kInterpreters = {InterpreterKind::Cam, InterpreterKind::GradCam,
                                                    InterpreterKind::Rts};

Metrics measure(World& w, InterpreterKind kind, const Perturbation& pert) {
  auto interp = w.interpreter(kind);
  auto rep = evaluate_attack(interp, w.ds.test.data, pert);
  return {rep.fooling_ratio, rep.l1_mean, rep.iou_mean};
}

AttackConfig attack_config(NormKind p, double lambda, uint64_t seed) {
  AttackConfig cfg;
  cfg.objective = ObjectiveKind::MaximizeCe;
  cfg.lambda = lambda;
  cfg.p = p;
  cfg.zeta = default_zeta(p, 32, 32);
  cfg.iterations = kAttackIterations;
  cfg.seed = seed;
  return cfg;
}

Perturbation run_attack(World& w, InterpreterKind kind, const AttackConfig& cfg, double* seconds) {
  GeneratorSpec gs;
  gs.base_width = kGeneratorWidth;
  const auto t0 = Clock::now();
  auto res = train_juap(make_generator(gs, cfg.seed), w.interpreter(kind), w.ds.train, cfg);
  *seconds = seconds_since(t0);
  return res.perturbation;
}

ThreatResult run_threat_model(World& w, NormKind p) {
  ThreatResult r;
  r.name = p == NormKind::LInf ? "p=inf zeta=10/255" : "p=2 zeta=" + fmt(default_zeta(p, 32, 32), 3);
  for (int s = 1; s <= kSeeds; ++s) {
    double sec = 0.0;
    // The lambda = 0 run never differentiates a map, so one run serves all interpreters.
    auto pert = run_attack(w, InterpreterKind::Cam, attack_config(p, 0.0, s), &sec);
    r.max_run_seconds = std::max(r.max_run_seconds, sec);
    r.ablation_perts.push_back(pert);
    for (auto kind : kInterpreters) {
      auto m = measure(w, kind, pert);
      r.ablation[kind].push_back(m);
      std::cout << "  " << r.name << " ablation seed " << s << " " << to_string(kind) << ": FR " << fmt(m.fr)
                << " L1 " << fmt(m.l1) << " IOU " << fmt(m.iou) << " (" << fmt(sec, 0) << " s)" << std::endl;
    }
  }
  for (auto kind : kInterpreters) {
    for (int s = 1; s <= kSeeds; ++s) {
      double sec = 0.0;
      const double lambda = kind == InterpreterKind::Rts ? kLambdaRts : kLambdaCam;
      auto pert = run_attack(w, kind, attack_config(p, lambda, s), &sec);
      r.max_run_seconds = std::max(r.max_run_seconds, sec);
      r.juap_perts[kind].push_back(pert);
      auto m = measure(w, kind, pert);
      r.juap[kind].push_back(m);
      std::cout << "  " << r.name << " JUAP seed " << s << " " << to_string(kind) << ": FR " << fmt(m.fr) << " L1 "
                << fmt(m.l1) << " IOU " << fmt(m.iou) << " (" << fmt(sec, 0) << " s)" << std::endl;
    }
  }
  return r;
}

std::vector<double> pick(const std::vector<Metrics>& v, double Metrics::*field) {
  std::vector<double> out;
  for (const auto& m : v) out.push_back(m.*field);
  return out;
}

bool efficacy_holds(const ThreatResult& r, std::string* detail) {
  bool ok = r.max_run_seconds <= 1800.0;
  std::ostringstream d;
  d << r.name << ":";
  for (auto kind : kInterpreters) {
    const auto j = stats(pick(r.juap.at(kind), &Metrics::fr));
    const auto a = stats(pick(r.ablation.at(kind), &Metrics::fr));
    const bool pass = j.mean >= 0.5 && j.mean >= a.mean - 0.05;
    ok = ok && pass;
    d << " " << to_string(kind) << " FR " << fmt(j.mean) << " vs ablation " << fmt(a.mean) << (pass ? "" : " (x)")
      << ";";
  }
  d << " longest run " << fmt(r.max_run_seconds, 0) << " s";
  *detail = d.str();
  return ok;
}

bool stealth_holds(const ThreatResult& r, std::string* detail) {
  bool ok = true;
  std::ostringstream d;
  d << r.name << ":";
  for (auto kind : kInterpreters) {
    const auto jl = stats(pick(r.juap.at(kind), &Metrics::l1));
    const auto al = stats(pick(r.ablation.at(kind), &Metrics::l1));
    const auto ji = stats(pick(r.juap.at(kind), &Metrics::iou));
    const auto ai = stats(pick(r.ablation.at(kind), &Metrics::iou));
    const bool l1_ok = al.mean - jl.mean > std::max(jl.sd, al.sd);
    const bool iou_ok = ji.mean - ai.mean > std::max(ji.sd, ai.sd);
    ok = ok && l1_ok && iou_ok;
    d << " " << to_string(kind) << " L1 " << fmt(jl.mean) << "+-" << fmt(jl.sd) << " vs " << fmt(al.mean) << "+-"
      << fmt(al.sd) << (l1_ok ? "" : " (x)") << ", IOU " << fmt(ji.mean) << "+-" << fmt(ji.sd) << " vs "
      << fmt(ai.mean) << "+-" << fmt(ai.sd) << (iou_ok ? "" : " (x)") << ";";
  }
  *detail = d.str();
  return ok;
}

// --- criterion 7 --------------------------------------------------------------

void image_dependent(World& w) {
  auto interp = w.interpreter(InterpreterKind::GradCam);
  // Images the classifier gets right, so the true label (JAP's target) and the
  // benign prediction (PGD's target) coincide.
  auto pred = predict_labels(w.clf, w.ds.test.data.pixels);
  auto correct = pred.eq(w.ds.test.data.labels).nonzero().view(-1);
  auto images = w.ds.test.data.select(correct.slice(0, 0, kImageDependentCount));
  const double zeta = 10.0 / 255.0;
  const auto t0 = Clock::now();
  auto pgd = baseline_pgd(w.clf, images.pixels, NormKind::LInf, zeta, kPgdSteps,
                          2.5 * zeta / static_cast<double>(kPgdSteps));
  auto cfg = attack_config(NormKind::LInf, kLambda, 71);
  cfg.iterations = kJapIterations;
  JapOptions opt;
  opt.generator.base_width = 8;
  auto jap = train_jap_per_image(interp, images, cfg, opt);
  auto rp = evaluate_attack(interp, images, pgd);
  auto rj = evaluate_attack(interp, images, jap.perturbation);
  const bool pass = rp.fooling_ratio >= 0.95 && rj.fooling_ratio >= 0.95 && rj.iou_mean > rp.iou_mean &&
                    rj.l1_mean < rp.l1_mean;
  report(7, "image-dependent variant", pass,
         "GradCAM, " + std::to_string(images.size()) + " correctly classified test images: JAP FR " + fmt(rj.fooling_ratio) + " L1 " + fmt(rj.l1_mean) + " IOU " +
             fmt(rj.iou_mean) + "; PGD FR " + fmt(rp.fooling_ratio) + " L1 " + fmt(rp.l1_mean) + " IOU " +
             fmt(rp.iou_mean) + "; " + fmt(seconds_since(t0), 0) + " s");
}

// --- criterion 8 --------------------------------------------------------------

void detection_gap(World& w, const ThreatResult& r) {
  auto images = w.ds.test.data.pixels;
  auto g = at::make_generator<at::CPUGeneratorImpl>(8080);
  const double eps = 10.0 / 255.0;
  auto other_benign = (torch::randint(0, 2, images.sizes(), g).to(torch::kFloat32) * 2.0 - 1.0) * eps;
  bool ok = true;
  std::ostringstream d;
  for (auto kind : kInterpreters) {
    auto interp = w.interpreter(kind);
    DetectionOptions opt;
    opt.seed = 8;
    auto table = detection_gap_experiment(interp, images,
                                          {{"uap", r.ablation_perts[0]},
                                           {"juap", r.juap_perts.at(kind)[0]},
                                           {"benign", Perturbation{other_benign, NormKind::LInf, eps, eps}}},
                                          opt);
    const double a_uap = table.row("uap").auc_l1;
    const double a_juap = table.row("juap").auc_l1;
    const double a_ben = table.row("benign").auc_l1;
    const bool pass = a_uap >= 0.75 && a_juap <= 0.65 && std::abs(a_ben - 0.5) <= 0.05;
    ok = ok && pass;
    d << " " << to_string(kind) << " AUC uap " << fmt(a_uap, 3) << " juap " << fmt(a_juap, 3) << " benign "
      << fmt(a_ben, 3) << (pass ? "" : " (x)") << ";";
  }
  report(8, "detection gap", ok, "L1 detector," + d.str());
}

// --- criterion 9 --------------------------------------------------------------

void metric_examples() {
  bool ok = true;
  ok = ok && fooling_ratio(torch::tensor({0, 1, 2}), torch::tensor({1, 1, 0})) == 2.0 / 3.0;
  ok = ok && fooling_ratio(torch::tensor({4, 4}), torch::tensor({4, 4})) == 0.0;
  auto a = torch::zeros({4, 4}, torch::kBool);
  a.slice(0, 0, 2).fill_(true);
  auto half = torch::zeros({4, 4}, torch::kBool);
  half.slice(0, 0, 1).fill_(true);
  auto b = torch::zeros({4, 4}, torch::kBool);
  b.slice(0, 1, 3).fill_(true);
  ok = ok && iou_score(a, a) == 1.0 && iou_score(a, half) == 0.5 && iou_score(a, b) == iou_score(b, a);
  ok = ok && iou_score(torch::zeros({4, 4}, torch::kBool), torch::zeros({4, 4}, torch::kBool)) == 1.0;
  ok = ok && l1_discrepancy(torch::zeros({2, 4, 4}), torch::ones({2, 4, 4})) == 1.0;
  ok = ok && l1_discrepancy(torch::ones({2, 4, 4}), torch::ones({2, 4, 4})) == 0.0;
  auto c = torch::zeros({2, 4, 4});
  c[0].fill_(0.5);
  ok = ok && l1_discrepancy(torch::zeros({2, 4, 4}), c) == 0.25;
  report(9, "metric examples", ok, ok ? "FR, IOU and L1 closed forms exact" : "a closed form did not match");
}

// --- criterion 11 --------------------------------------------------------------

void pipeline_reproducibility(const fs::path& work) {
  fs::remove_all(work / "repro");
  auto base = Config::parse(
      "run.seed = 21\n"
      "dataset.root_path = data\n"
      "dataset.name = shapes\n"
      "dataset.images_per_class = 30\n"
      "classifier.path = clf\n"
      "classifier.epochs = 3\n"
      "attack.method = juap\n"
      "attack.interpreter = GradCAM\n"
      "attack.objective = maximize-ce\n"
      "attack.lambda = 0.1\n"
      "attack.iterations = 40\n"
      "attack.batch_size = 16\n"
      "attack.path = attack\n");
  std::vector<double> joint;
  std::vector<EvalReport> reports;
  for (const auto* name : {"a", "b"}) {
    RunContext ctx;
    ctx.artifact_root = work / "repro" / name;
    auto step = [&](const char* out, auto fn) {
      ctx.config = base;
      ctx.config.set("run.out_dir", out);
      return fn(ctx);
    };
    step("data", cmd_make_dataset);
    step("clf", cmd_train_classifier);
    auto atk = step("attack", cmd_attack);
    step("eval", cmd_evaluate);
    joint.push_back(atk.summary.at("final_joint_loss").get<double>());
    reports.push_back(EvalReport::from_json(nlohmann::json::parse(read_file(ctx.artifact_root / "eval/report.json"))));
  }
  const double dj = std::abs(joint[0] - joint[1]);
  const double dm = std::max({std::abs(reports[0].fooling_ratio - reports[1].fooling_ratio),
                              std::abs(reports[0].l1_mean - reports[1].l1_mean),
                              std::abs(reports[0].iou_mean - reports[1].iou_mean)});
  report(11, "pipeline reproducibility", dj <= 1e-4 && dm <= 1e-6,
         "joint loss " + fmt(joint[0], 6) + " vs " + fmt(joint[1], 6) + " (diff " + fmt(dj, 9) +
             "), max metric diff " + fmt(dm, 9));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "juap_acceptance";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::strcmp(argv[i], "--work-dir") == 0) work = argv[i + 1];
  }
  fs::create_directories(work);
  use_deterministic_runtime();
  const auto t0 = Clock::now();
  try {
    norm_constraint_suite();
    cam_gradcam_oracle();
    metric_examples();

    std::cout << "training classifier and RTS model..." << std::endl;
    auto world = build_world();
    std::cout << "  residual-small top-1 " << fmt(world.top1) << std::endl;
    smoothed_relu_check(world);
    gate_semantics(world);

    auto linf = run_threat_model(world, NormKind::LInf);
    std::string d_inf, d_l2, s_inf, s_l2;
    const bool e_inf = efficacy_holds(linf, &d_inf);
    const bool top1_ok = world.top1 >= 0.85;
    report(5, "JUAP efficacy", e_inf && top1_ok, "top-1 " + fmt(world.top1) + "; " + d_inf);
    const bool st_inf = stealth_holds(linf, &s_inf);
    report(6, "stealth ordering", st_inf, s_inf);

    image_dependent(world);
    detection_gap(world, linf);

    auto l2 = run_threat_model(world, NormKind::L2);
    const bool e_l2 = efficacy_holds(l2, &d_l2);
    const bool st_l2 = stealth_holds(l2, &s_l2);
    report(10, "threat-model robustness", e_inf && st_inf && e_l2 && st_l2 && top1_ok,
           "efficacy " + d_l2 + " | stealth " + s_l2 + " | p=inf efficacy " + (e_inf ? "holds" : "fails") +
               ", stealth " + (st_inf ? "holds" : "fails"));

    pipeline_reproducibility(work);
  } catch (const std::exception& e) {
    std::cout << "acceptance run aborted: " << e.what() << std::endl;
    return 1;
  }

  std::sort(g_outcomes.begin(), g_outcomes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  int failed = 0;
  std::cout << "\nsummary (" << fmt(seconds_since(t0) / 60.0, 1) << " min)\n";
  for (const auto& o : g_outcomes) {
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << "C" << o.id << " " << o.name << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
