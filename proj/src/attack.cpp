#include "juap/attack.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "juap/image_io.hpp"

namespace juap {

void AttackConfig::validate(int64_t num_classes) const {
  if (!(lambda >= 0.0)) throw InputError("lambda must be non-negative");
  if (iterations < 1) throw InputError("iterations must be at least 1");
  if (!(zeta > 0.0)) throw InputError("zeta must be positive");
  if (!(tau > 0.0)) throw InputError("tau must be positive");
  if (!(learning_rate > 0.0)) throw InputError("learning rate must be positive");
  if (batch_size < 1) throw InputError("batch size must be positive");
  if (objective == ObjectiveKind::Targeted) {
    if (!target_class) throw InputError("targeted objective requires a target class");
    if (*target_class < 0 || *target_class >= num_classes) throw InputError("target class out of range");
  }
  augment.validate();
}

bool AttackConfig::lambda_outside_recommended() const { return lambda < 1e-4 || lambda > 3e-3; }

bool AttackConfig::use_smoothed_relu(InterpreterKind kind) const {
  return smoothed_relu.value_or(kind == InterpreterKind::GradCam);
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j = {{"objective", to_string(objective)},
                      {"lambda", lambda},
                      {"delta", delta},
                      {"p", to_string(p)},
                      {"zeta", zeta},
                      {"tau", tau},
                      {"gate_form", gate_form == GateForm::AsPrinted ? "as-printed" : "halved-sigmoid"},
                      {"iterations", iterations},
                      {"learning_rate", learning_rate},
                      {"batch_size", batch_size},
                      {"seed", seed},
                      {"rts_encoder_loss", rts_encoder_loss},
                      {"random_crop", augment.random_crop},
                      {"horizontal_flip", augment.horizontal_flip}};
  if (target_class) j["target_class"] = *target_class;
  if (smoothed_relu) j["smoothed_relu"] = *smoothed_relu;
  return j;
}

nlohmann::json IterationRecord::to_json() const {
  nlohmann::json j = {{"iter", iteration},
                      {"L_cls", classifier_loss},
                      {"L_int", interpreter_loss},
                      {"L_enc", encoder_loss},
                      {"L_joint", joint_loss},
                      {"gate_active", gate_active},
                      {"norm", perturbation_norm}};
  if (classifier_grad_norm) j["cls_grad_norm"] = *classifier_grad_norm;
  return j;
}

IterationRecord IterationRecord::from_json(const nlohmann::json& j) {
  IterationRecord r;
  r.iteration = j.at("iter").get<int64_t>();
  r.classifier_loss = j.at("L_cls").get<double>();
  r.interpreter_loss = j.at("L_int").get<double>();
  r.encoder_loss = j.value("L_enc", 0.0);
  r.joint_loss = j.at("L_joint").get<double>();
  r.gate_active = j.at("gate_active").get<bool>();
  r.perturbation_norm = j.at("norm").get<double>();
  if (j.contains("cls_grad_norm")) r.classifier_grad_norm = j.at("cls_grad_norm").get<double>();
  return r;
}

std::string AttackRunRecord::to_jsonl() const {
  std::string out;
  for (const auto& r : iterations) out += r.to_json().dump() + "\n";
  return out;
}

AttackRunRecord AttackRunRecord::from_jsonl(const std::string& text) {
  AttackRunRecord rec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rec.iterations.push_back(IterationRecord::from_json(nlohmann::json::parse(line)));
  }
  return rec;
}

namespace {

std::vector<bool> freeze(torch::nn::Module& m) {
  std::vector<bool> flags;
  for (auto& p : m.parameters()) {
    flags.push_back(p.requires_grad());
    p.requires_grad_(false);
  }
  return flags;
}

void unfreeze(torch::nn::Module& m, const std::vector<bool>& flags, size_t offset = 0) {
  size_t i = offset;
  for (auto& p : m.parameters()) {
    if (i < flags.size()) p.requires_grad_(flags[i]);
    ++i;
  }
}

double grad_norm(const std::vector<torch::Tensor>& grads) {
  double total = 0.0;
  for (const auto& g : grads) {
    if (g.defined()) total += g.to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(total);
}

}  // namespace

JuapTrainer::JuapTrainer(Generator generator, Interpreter interpreter, const Split& train, AttackConfig cfg)
    : generator_(std::move(generator)),
      interpreter_(std::move(interpreter)),
      train_(&train),
      cfg_(std::move(cfg)),
      stream_(train, cfg_.batch_size, derive_seed(cfg_.seed, "attack-batches")) {
  cfg_.validate(interpreter_.classifier->spec().num_classes);
  if (interpreter_.kind == InterpreterKind::Rts && !interpreter_.rts) {
    throw InputError("RTS interpreter selected but no RTS model was provided");
  }
  const auto& gs = generator_->spec();
  const auto& cs = interpreter_.classifier->spec();
  if (gs.channels != cs.in_channels || gs.height != cs.image_height || gs.width != cs.image_width) {
    throw InputError("generator output shape does not match the classifier input");
  }
  interpreter_.classifier->eval();
  frozen_flags_ = freeze(*interpreter_.classifier);
  if (interpreter_.rts) {
    interpreter_.rts->eval();
    auto more = freeze(*interpreter_.rts);
    frozen_flags_.insert(frozen_flags_.end(), more.begin(), more.end());
  }
  generator_->train();
  optimizer_ = std::make_unique<torch::optim::Adam>(
      generator_->parameters(), torch::optim::AdamOptions(cfg_.learning_rate).betas({0.5, 0.999}));
  noise_ = sample_noise({gs.channels, gs.height, gs.width}, derive_seed(cfg_.seed, "attack-noise"));
}

JuapTrainer::~JuapTrainer() {
  unfreeze(*interpreter_.classifier, frozen_flags_);
  if (interpreter_.rts) {
    unfreeze(*interpreter_.rts, frozen_flags_, interpreter_.classifier->parameters().size());
  }
}

IterationRecord JuapTrainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t t = next_iteration_;
  auto batch = augment(stream_.batch(t), cfg_.augment, derive_seed(cfg_.seed, "attack-augment", t));
  const auto& x = batch.pixels;

  auto& clf = interpreter_.classifier;
  auto benign_logits = predict(clf, x);
  auto classes = benign_logits.argmax(1);
  torch::Tensor targets;
  switch (cfg_.objective) {
    case ObjectiveKind::MaximizeCe:
      targets = batch.labels;
      break;
    case ObjectiveKind::LeastLikely:
      targets = least_likely_classes(benign_logits);
      break;
    default:
      targets = torch::full({x.size(0)}, *cfg_.target_class, torch::kInt64);
  }
  const bool need_interp = cfg_.lambda > 0.0;
  const bool want_embedding =
      interpreter_.kind == InterpreterKind::Rts && cfg_.rts_encoder_loss && need_interp;

  torch::Tensor benign_maps, benign_embedding;
  benign_maps = interpreter_.maps(x, classes, /*differentiable=*/false);
  if (want_embedding) {
    torch::NoGradGuard no_grad;
    benign_embedding = interpreter_.rts->encode(x);
  }

  ActivationSettings act;
  if (cfg_.use_smoothed_relu(interpreter_.kind)) act = {ActivationMode::SmoothedRelu, cfg_.tau, cfg_.gate_form};
  ScopedActivation scope(clf, act);

  auto pert = scale_to_budget(generator_->forward(noise_), cfg_.p, cfg_.zeta);
  auto x_adv = apply_perturbation(x, pert);
  MapsAndLogits fwd;
  if (need_interp) {
    fwd = interpreter_.maps_and_logits(x_adv, classes, /*differentiable=*/true, want_embedding);
  } else {
    // Ablation: only the classifier term is optimized; the map shift is logged.
    fwd.logits = clf->forward(x_adv);
    fwd.maps = interpreter_.maps(x_adv.detach(), classes, /*differentiable=*/false);
  }
  auto l_cls = classifier_loss(cfg_.objective, fwd.logits, targets);
  auto l_int = interpreter_loss(fwd.maps, benign_maps);
  if (!need_interp) l_int = l_int.detach();
  torch::Tensor l_enc = torch::zeros({});
  if (want_embedding) l_enc = rts_encoder_loss(fwd.embedding, benign_embedding);
  auto l_joint = joint_loss(l_cls, l_int + l_enc, cfg_.lambda, cfg_.delta);

  IterationRecord rec;
  rec.iteration = t;
  rec.classifier_loss = l_cls.item<double>();
  rec.interpreter_loss = l_int.item<double>();
  rec.encoder_loss = l_enc.item<double>();
  rec.joint_loss = l_joint.item<double>();
  rec.gate_active = rec.classifier_loss < cfg_.delta;
  rec.perturbation_norm = norm_of(pert, cfg_.p);
  if (!std::isfinite(rec.joint_loss) || !std::isfinite(rec.classifier_loss) || !std::isfinite(rec.interpreter_loss)) {
    throw NumericalError("attack loss is not finite", t);
  }
  last_perturbation_ = pert.detach().clone();
  last_fooled_fraction_ = fwd.logits.detach().argmax(1).ne(classes).to(torch::kFloat64).mean().item<double>();

  auto params = generator_->parameters();
  if (cfg_.instrument) {
    auto gated = torch::maximum(l_cls, torch::full_like(l_cls, cfg_.delta));
    auto g = torch::autograd::grad({gated}, params, {}, /*retain_graph=*/true, /*create_graph=*/false,
                                   /*allow_unused=*/true);
    rec.classifier_grad_norm = grad_norm(g);
  }
  optimizer_->zero_grad();
  if (l_joint.requires_grad()) l_joint.backward();
  for (const auto& p : params) {
    if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
      throw NumericalError("generator gradient is not finite", t);
    }
  }
  optimizer_->step();

  ++next_iteration_;
  record_.iterations.push_back(rec);
  record_.wall_clock_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void JuapTrainer::run_until(int64_t until) {
  until = std::min(until, cfg_.iterations);
  while (next_iteration_ < until) step();
}

Perturbation JuapTrainer::perturbation() {
  torch::NoGradGuard no_grad;
  generator_->eval();
  auto out = generate_perturbation(generator_, noise_, cfg_.p, cfg_.zeta);
  generator_->train();
  out.meta["seed"] = cfg_.seed;
  out.meta["iterations"] = next_iteration_;
  return out;
}

void JuapTrainer::save_state(const fs::path& dir) {
  fs::create_directories(dir);
  auto tmp_gen = dir / "state_generator.pt.tmp";
  torch::save(generator_, tmp_gen.string());
  fs::rename(tmp_gen, dir / "state_generator.pt");
  torch::serialize::OutputArchive archive;
  optimizer_->save(archive);
  auto tmp_opt = dir / "state_optimizer.pt.tmp";
  archive.save_to(tmp_opt.string());
  fs::rename(tmp_opt, dir / "state_optimizer.pt");
  write_raw_tensor(dir / "state_noise.f32", noise_);
  write_file_atomic(dir / "state_record.jsonl", record_.to_jsonl());
  nlohmann::json meta = {{"next_iteration", next_iteration_},
                         {"wall_clock_seconds", record_.wall_clock_seconds},
                         {"config", cfg_.to_json()}};
  // Written last: its presence marks a complete state.
  write_file_atomic(dir / "state.json", meta.dump(2) + "\n");
}

void JuapTrainer::load_state(const fs::path& dir) {
  if (!fs::exists(dir / "state.json")) throw InputError("no resumable attack state in " + dir.string());
  const auto meta = nlohmann::json::parse(read_file(dir / "state.json"));
  if (meta.at("config") != cfg_.to_json()) {
    throw InputError("attack state in " + dir.string() + " was produced by a different configuration");
  }
  torch::load(generator_, (dir / "state_generator.pt").string());
  torch::serialize::InputArchive archive;
  archive.load_from((dir / "state_optimizer.pt").string());
  optimizer_->load(archive);
  noise_ = read_raw_tensor(dir / "state_noise.f32");
  record_ = AttackRunRecord::from_jsonl(read_file(dir / "state_record.jsonl"));
  record_.wall_clock_seconds = meta.value("wall_clock_seconds", 0.0);
  next_iteration_ = meta.at("next_iteration").get<int64_t>();
}

JuapResult train_juap(Generator generator, Interpreter interpreter, const Split& train, const AttackConfig& cfg) {
  JuapTrainer trainer(generator, std::move(interpreter), train, cfg);
  trainer.run();
  return {trainer.generator(), trainer.perturbation(), trainer.record()};
}

JapResult train_jap_per_image(Interpreter interpreter, const ImageBatch& images, const AttackConfig& cfg,
                              const JapOptions& options) {
  JapResult out;
  std::vector<torch::Tensor> perts;
  for (int64_t i = 0; i < images.size(); ++i) {
    Split single;
    single.data = images.slice(i, i + 1);
    single.indices = {i};
    AttackConfig per = cfg;
    per.batch_size = 1;
    per.seed = derive_seed(cfg.seed, "jap-image", static_cast<uint64_t>(i));
    JuapTrainer trainer(make_generator(options.generator, per.seed), interpreter, single, per);
    torch::Tensor best;
    double best_loss = std::numeric_limits<double>::infinity();
    while (!trainer.finished()) {
      auto rec = trainer.step();
      if (options.keep_best_fooled && trainer.last_fooled_fraction() >= 1.0 &&
          rec.interpreter_loss + rec.encoder_loss < best_loss) {
        best_loss = rec.interpreter_loss + rec.encoder_loss;
        best = trainer.last_perturbation();
      }
    }
    if (!best.defined()) best = trainer.perturbation().values;
    perts.push_back(best);
    out.records.push_back(trainer.record());
  }
  out.perturbation.p = cfg.p;
  out.perturbation.zeta = cfg.zeta;
  if (perts.empty()) {
    out.perturbation.values = torch::zeros_like(images.pixels);
  } else {
    out.perturbation.values = torch::stack(perts);
  }
  out.perturbation.achieved_norm =
      images.size() > 0 ? batched_norm(out.perturbation.values.to(torch::kFloat64), cfg.p).max().item<double>() : 0.0;
  out.perturbation.meta["seed"] = cfg.seed;
  out.perturbation.meta["method"] = "jap";
  return out;
}

namespace {

torch::Tensor step_direction(const torch::Tensor& g, NormKind p) {
  if (p == NormKind::LInf) return g.sign();
  std::vector<int64_t> view(static_cast<size_t>(g.dim()), 1);
  view[0] = -1;
  return g / batched_norm(g, NormKind::L2).clamp_min(1e-12).view(view);
}

}  // namespace

IterativeUapResult baseline_iterative_uap(Classifier& classifier, const Split& train, NormKind p, double zeta,
                                          const IterativeUapOptions& options) {
  if (train.size() == 0) throw InputError("iterative UAP needs training images");
  classifier->eval();
  auto flags = freeze(*classifier);
  IterativeUapResult out;
  const auto& x_all = train.data.pixels;
  int64_t n = train.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(options.seed, "uap-order"));
  std::shuffle(order.begin(), order.end(), rng);
  if (options.max_images > 0 && options.max_images < n) {
    order.resize(static_cast<size_t>(options.max_images));
    n = options.max_images;
  }
  auto index = torch::tensor(order, torch::kInt64);
  auto images = x_all.index_select(0, index);
  auto benign = predict_labels(classifier, images);
  auto v = torch::zeros(x_all.sizes().slice(1));
  const double step = options.step_fraction * zeta;

  for (int64_t pass = 0; pass < options.max_passes; ++pass) {
    out.passes = pass + 1;
    for (int64_t i = 0; i < n; ++i) {
      auto x = images.slice(0, i, i + 1);
      auto label = benign.slice(0, i, i + 1);
      if (predict_labels(classifier, apply_perturbation(x, v)).item<int64_t>() != label.item<int64_t>()) continue;
      auto r = torch::zeros_like(v);
      for (int64_t k = 0; k < options.inner_steps; ++k) {
        auto xk = apply_perturbation(x, v + r).detach().requires_grad_(true);
        auto logits = classifier->forward(xk);
        if (logits.argmax(1).item<int64_t>() != label.item<int64_t>()) break;
        auto loss = torch::nn::functional::cross_entropy(logits, label);
        auto g = torch::autograd::grad({loss}, {xk})[0];
        r = r + step * step_direction(g, p).squeeze(0);
      }
      v = project_to_ball(v + r, p, zeta).detach();
      out.norm_history.push_back(norm_of(v, p));
    }
    out.train_fooling_ratio =
        predict_labels(classifier, apply_perturbation(images, v)).ne(benign).to(torch::kFloat64).mean().item<double>();
    if (out.train_fooling_ratio >= options.target_fooling_ratio) {
      out.converged = true;
      break;
    }
  }
  unfreeze(*classifier, flags);
  out.perturbation.values = v;
  out.perturbation.p = p;
  out.perturbation.zeta = zeta;
  out.perturbation.achieved_norm = norm_of(v, p);
  out.perturbation.meta = {{"method", "iterative-uap"}, {"converged", out.converged}, {"passes", out.passes},
                           {"seed", options.seed}};
  return out;
}

Perturbation baseline_pgd(Classifier& classifier, const torch::Tensor& images, NormKind p, double zeta, int64_t steps,
                          double step_size) {
  classifier->eval();
  auto flags = freeze(*classifier);
  auto labels = predict_labels(classifier, images);
  auto delta = torch::zeros_like(images);
  for (int64_t s = 0; s < steps; ++s) {
    auto xa = (images + delta).detach().requires_grad_(true);
    auto loss = torch::nn::functional::cross_entropy(classifier->forward(xa), labels,
                                                     torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
    auto g = torch::autograd::grad({loss}, {xa})[0];
    delta = project_to_ball(delta + step_size * step_direction(g, p), p, zeta, /*batched=*/true);
    delta = ((images + delta).clamp(0.0, 1.0) - images).detach();
  }
  unfreeze(*classifier, flags);
  Perturbation out;
  out.values = delta;
  out.p = p;
  out.zeta = zeta;
  out.achieved_norm = images.size(0) > 0 ? batched_norm(delta.to(torch::kFloat64), p).max().item<double>() : 0.0;
  out.meta = {{"method", "pgd"}, {"steps", steps}, {"step_size", step_size}};
  return out;
}

}  // namespace juap
