#include "juap/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "juap/image_io.hpp"
#include "juap/render.hpp"

namespace juap {

namespace {

// Keys that steer execution but not results; a resumed or re-run command may
// change them freely.
const std::set<std::string> kVolatileKeys = {"run.artifact_root", "attack.stop_after", "attack.checkpoint_every"};

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(6) << v;
  return out.str();
}

std::string stable_config_text(const Config& cfg) {
  Config copy;
  for (const auto& [k, v] : cfg.entries()) {
    if (!kVolatileKeys.count(k)) copy.set(k, v);
  }
  return copy.dump();
}

/// Claims `dir` for this command. Returns true when the same configuration
/// already completed there; throws if a different configuration owns it.
bool prepare_out_dir(const RunContext& ctx, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  const auto effective = stable_config_text(ctx.config);
  const auto done = dir / "done.json";
  const auto cfg_path = dir / "config.effective.cfg";
  if (fs::exists(cfg_path)) {
    const auto previous = read_file(cfg_path);
    Config prev = Config::parse(previous, cfg_path.string());
    const bool has_results = fs::exists(done) || fs::exists(dir / "state" / "state.json");
    if (stable_config_text(prev) != effective && has_results) {
      throw InputError("output directory " + dir.string() + " holds a " + command +
                       " run with a different configuration");
    }
    if (has_results && fs::exists(done)) return true;
  }
  write_file_atomic(cfg_path, ctx.config.dump());
  return false;
}

void mark_done(const fs::path& dir, const std::string& command, const nlohmann::json& summary) {
  nlohmann::json j = {{"command", command}, {"summary", summary}};
  write_file_atomic(dir / "done.json", j.dump(2) + "\n");
}

nlohmann::json read_done(const fs::path& dir) {
  const auto j = nlohmann::json::parse(read_file(dir / "done.json"));
  return j.value("summary", nlohmann::json::object());
}

void write_seeds(const fs::path& dir, const nlohmann::json& seeds) {
  write_file_atomic(dir / "seeds.json", seeds.dump(2) + "\n");
}

fs::path checkpoint_file(const fs::path& p, const std::string& default_name) {
  if (fs::is_directory(p)) return p / default_name;
  return p;
}

Dataset load_configured_dataset(const RunContext& ctx) {
  if (!ctx.config.contains("dataset.root_path")) throw InputError("config is missing dataset.root_path");
  auto manifest = DatasetManifest::from_config(ctx.config, ctx.artifact_root);
  if (!ctx.config.contains("dataset.seed")) manifest.seed = derive_seed(ctx.seed(), "dataset-split");
  return load_dataset(manifest);
}

Classifier load_configured_classifier(const RunContext& ctx, nlohmann::json* meta = nullptr) {
  if (!ctx.config.contains("classifier.path")) throw InputError("config is missing classifier.path");
  const auto path = checkpoint_file(ctx.resolve(ctx.config.get_string("classifier.path")), "classifier.pt");
  return load_classifier(path, meta);
}

Interpreter load_interpreter(const RunContext& ctx, const std::string& section) {
  Interpreter interp;
  interp.kind = parse_interpreter_kind(ctx.config.get_string(section + ".interpreter", "CAM"));
  interp.classifier = load_configured_classifier(ctx);
  if (interp.kind == InterpreterKind::Rts) {
    if (!ctx.config.contains("rts.path")) throw InputError("RTS interpreter requires rts.path");
    interp.rts = load_rts(checkpoint_file(ctx.resolve(ctx.config.get_string("rts.path")), "rts.pt"));
    if (interp.rts->spec().num_classes != interp.classifier->spec().num_classes) {
      throw InputError("RTS model was trained against a classifier with a different class count");
    }
  }
  return interp;
}

void check_dataset_matches(const Dataset& ds, Classifier& clf) {
  const auto& s = clf->spec();
  if (ds.num_classes != s.num_classes) throw InputError("dataset class count does not match the classifier");
  const auto& px = ds.test.data.pixels.defined() ? ds.test.data.pixels : ds.train.data.pixels;
  if (px.size(1) != s.in_channels || px.size(2) != s.image_height || px.size(3) != s.image_width) {
    throw InputError("dataset image shape does not match the classifier input");
  }
}

ImageBatch first_n(const ImageBatch& batch, int64_t n) {
  if (n <= 0 || n >= batch.size()) return batch;
  return batch.slice(0, n);
}

struct AttackArtifacts {
  fs::path dir;
  nlohmann::json summary;
  Perturbation perturbation;
};

AttackArtifacts load_attack(const fs::path& dir) {
  if (!fs::exists(dir / "done.json")) throw InputError("attack artifacts not found (incomplete run?): " + dir.string());
  AttackArtifacts a;
  a.dir = dir;
  a.summary = read_done(dir);
  a.perturbation = load_perturbation(dir / "perturbation.f32");
  return a;
}

std::string attack_id_of(const fs::path& dir) {
  auto name = dir.filename().string();
  if (name.empty()) name = dir.parent_path().filename().string();
  return name;
}

}  // namespace

RunContext RunContext::from_config(Config config, std::ostream* log) {
  RunContext ctx;
  if (const char* env = std::getenv("JUAP_ARTIFACT_ROOT"); env && *env) {
    ctx.artifact_root = env;
  } else if (auto root = config.find("run.artifact_root")) {
    ctx.artifact_root = *root;
  } else {
    ctx.artifact_root = fs::current_path();
  }
  ctx.config = std::move(config);
  ctx.log = log;
  return ctx;
}

fs::path RunContext::resolve(const fs::path& p) const { return p.is_absolute() ? p : artifact_root / p; }

fs::path RunContext::out_dir() const {
  if (!config.contains("run.out_dir")) throw InputError("config is missing run.out_dir");
  return resolve(config.get_string("run.out_dir"));
}

uint64_t RunContext::seed() const { return static_cast<uint64_t>(config.get_int("run.seed", 0)); }

void RunContext::warn(const std::string& message) const {
  if (log) *log << "warning: " << message << "\n";
}

void RunContext::info(const std::string& message) const {
  if (log) *log << message << "\n";
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

AttackConfig attack_config_from(const Config& cfg, int64_t height, int64_t width, uint64_t seed) {
  AttackConfig a;
  a.objective = parse_objective_kind(cfg.get_string("attack.objective", to_string(a.objective)));
  if (cfg.contains("attack.target_class")) a.target_class = cfg.get_int("attack.target_class");
  a.lambda = cfg.get_double("attack.lambda", a.lambda);
  a.delta = cfg.get_double("attack.delta", a.delta);
  a.p = parse_norm_kind(cfg.get_string("attack.p", to_string(a.p)));
  a.zeta = cfg.get_double("attack.zeta", default_zeta(a.p, height, width));
  a.tau = cfg.get_double("attack.tau", a.tau);
  const auto form = cfg.get_string("attack.gate_form", "as-printed");
  if (form == "as-printed") {
    a.gate_form = GateForm::AsPrinted;
  } else if (form == "halved-sigmoid") {
    a.gate_form = GateForm::HalvedSigmoid;
  } else {
    throw InputError("attack.gate_form must be as-printed or halved-sigmoid");
  }
  if (cfg.contains("attack.smoothed_relu")) a.smoothed_relu = cfg.get_bool("attack.smoothed_relu", true);
  a.iterations = cfg.get_int("attack.iterations", a.iterations);
  a.learning_rate = cfg.get_double("attack.learning_rate", a.learning_rate);
  a.batch_size = cfg.get_int("attack.batch_size", a.batch_size);
  a.rts_encoder_loss = cfg.get_bool("attack.encoder_loss", a.rts_encoder_loss);
  a.augment.random_crop = cfg.get_bool("attack.random_crop", false);
  a.augment.horizontal_flip = cfg.get_bool("attack.horizontal_flip", false);
  a.instrument = cfg.get_bool("attack.instrument", false);
  a.seed = seed;
  return a;
}

CommandResult cmd_make_dataset(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  DirectoryLock lock(res.out_dir);
  if (prepare_out_dir(ctx, res.out_dir, "make-dataset")) {
    res.status = CommandStatus::AlreadyComplete;
    res.summary = read_done(res.out_dir);
    return res;
  }
  SyntheticShapesSpec spec;
  spec.images_per_class = ctx.config.get_int("dataset.images_per_class", spec.images_per_class);
  spec.image_size = ctx.config.get_int("dataset.image_size", spec.image_size);
  spec.seed = derive_seed(ctx.seed(), "synthetic-shapes");
  if (spec.images_per_class < 1 || spec.image_size < 8) throw InputError("synthetic dataset is too small");
  write_synthetic_shapes(res.out_dir, spec);
  write_seeds(res.out_dir, {{"run.seed", ctx.seed()}, {"synthetic-shapes", spec.seed}});
  res.summary = {{"images", spec.images_per_class * 6}, {"image_size", spec.image_size}};
  mark_done(res.out_dir, "make-dataset", res.summary);
  return res;
}

CommandResult cmd_train_classifier(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  DirectoryLock lock(res.out_dir);
  const auto& cfg = ctx.config;
  if (prepare_out_dir(ctx, res.out_dir, "train-classifier")) {
    res.status = CommandStatus::AlreadyComplete;
    res.summary = read_done(res.out_dir);
    return res;
  }
  auto ds = load_configured_dataset(ctx);
  save_split_indices(res.out_dir / "split_indices.json", ds);

  ClassifierSpec spec;
  spec.arch = parse_classifier_arch(cfg.get_string("classifier.architecture", to_string(spec.arch)));
  spec.in_channels = ds.train.data.pixels.size(1);
  spec.image_height = ds.train.data.pixels.size(2);
  spec.image_width = ds.train.data.pixels.size(3);
  spec.num_classes = ds.num_classes;
  spec.feature_channels = cfg.get_int("classifier.feature_channels", spec.feature_channels);

  TrainConfig tc;
  tc.optimizer = cfg.get_string("classifier.optimizer", tc.optimizer);
  tc.learning_rate = cfg.get_double("classifier.learning_rate", tc.learning_rate);
  tc.batch_size = cfg.get_int("classifier.batch_size", tc.batch_size);
  tc.epochs = cfg.get_int("classifier.epochs", tc.epochs);
  tc.augment.random_crop = cfg.get_bool("classifier.random_crop", tc.augment.random_crop);
  tc.augment.crop_padding = cfg.get_int("classifier.crop_padding", tc.augment.crop_padding);
  tc.augment.horizontal_flip = cfg.get_bool("classifier.horizontal_flip", tc.augment.horizontal_flip);
  tc.seed = derive_seed(ctx.seed(), "classifier");
  tc.validate();
  write_seeds(res.out_dir, {{"run.seed", ctx.seed()},
                            {"classifier", tc.seed},
                            {"classifier-init", derive_seed(tc.seed, "classifier-init")},
                            {"classifier-batches", derive_seed(tc.seed, "classifier-batches")},
                            {"dataset-split", derive_seed(ctx.seed(), "dataset-split")}});

  ctx.info("training " + to_string(spec.arch) + " on " + std::to_string(ds.train.size()) + " images");
  auto trained = train_classifier(ds.train, ds.test, spec, tc);
  const std::string dataset_name = cfg.get_string("dataset.name", "dataset");
  nlohmann::json meta = {{"dataset", dataset_name},
                         {"top1", trained.top1},
                         {"epoch_losses", trained.epoch_losses},
                         {"train_config", tc.to_json()},
                         {"class_names", ds.class_names}};
  save_classifier(res.out_dir / "classifier.pt", trained.model, meta);
  write_file_atomic(res.out_dir / "accuracy.csv",
                    to_csv({"dataset", "model", "top1"}, {{dataset_name, to_string(spec.arch), fmt(trained.top1)}}));
  res.summary = {{"top1", trained.top1}, {"model", to_string(spec.arch)}, {"dataset", dataset_name}};
  ctx.info("top-1 accuracy " + fmt(trained.top1));
  mark_done(res.out_dir, "train-classifier", res.summary);
  return res;
}

CommandResult cmd_train_rts(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  DirectoryLock lock(res.out_dir);
  const auto& cfg = ctx.config;
  if (prepare_out_dir(ctx, res.out_dir, "train-rts")) {
    res.status = CommandStatus::AlreadyComplete;
    res.summary = read_done(res.out_dir);
    return res;
  }
  auto clf = load_configured_classifier(ctx);
  auto ds = load_configured_dataset(ctx);
  check_dataset_matches(ds, clf);

  RtsTrainConfig rc;
  rc.lambda_tv = cfg.get_double("rts.lambda_tv", rc.lambda_tv);
  rc.lambda_av = cfg.get_double("rts.lambda_av", rc.lambda_av);
  rc.lambda_keep = cfg.get_double("rts.lambda_keep", rc.lambda_keep);
  rc.lambda_power = cfg.get_double("rts.lambda_power", rc.lambda_power);
  const auto bg = cfg.get_string("rts.background", "blur");
  if (bg == "blur") {
    rc.background = BlendBackground::Blur;
  } else if (bg == "uniform-noise") {
    rc.background = BlendBackground::UniformNoise;
  } else {
    throw InputError("rts.background must be blur or uniform-noise");
  }
  rc.learning_rate = cfg.get_double("rts.learning_rate", rc.learning_rate);
  rc.batch_size = cfg.get_int("rts.batch_size", rc.batch_size);
  rc.epochs = cfg.get_int("rts.epochs", rc.epochs);
  rc.seed = derive_seed(ctx.seed(), "rts");
  rc.validate();
  write_seeds(res.out_dir, {{"run.seed", ctx.seed()}, {"rts", rc.seed}, {"rts-init", derive_seed(rc.seed, "rts-init")}});

  RtsTrainRecord record;
  auto rts = train_rts(clf, ds.train, rc, &record);
  save_rts(res.out_dir / "rts.pt", rts, {{"train_config", rc.to_json()}, {"epoch_losses", record.epoch_losses}});
  res.summary = {{"epoch_losses", record.epoch_losses}};
  mark_done(res.out_dir, "train-rts", res.summary);
  return res;
}

CommandResult cmd_attack(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  DirectoryLock lock(res.out_dir);
  const auto& cfg = ctx.config;
  const auto method = cfg.get_string("attack.method", "juap");
  static const std::set<std::string> methods = {"juap", "ablation", "uap", "pgd", "jap", "zero"};
  if (!methods.count(method)) throw InputError("unknown attack.method: " + method);

  if (prepare_out_dir(ctx, res.out_dir, "attack")) {
    res.status = CommandStatus::AlreadyComplete;
    res.summary = read_done(res.out_dir);
    ctx.info("attack already complete in " + res.out_dir.string());
    return res;
  }

  auto interp = load_interpreter(ctx, "attack");
  auto& clf = interp.classifier;
  auto ds = load_configured_dataset(ctx);
  check_dataset_matches(ds, clf);
  const auto& cs = clf->spec();

  const uint64_t attack_seed = derive_seed(ctx.seed(), "attack");
  auto acfg = attack_config_from(cfg, cs.image_height, cs.image_width, attack_seed);
  if (method == "ablation") acfg.lambda = 0.0;
  acfg.validate(cs.num_classes);
  if (method == "juap" || method == "jap") {
    if (acfg.lambda_outside_recommended()) {
      ctx.warn("lambda = " + fmt(acfg.lambda) + " lies outside the recommended range [0.0001, 0.003]");
    }
  }

  nlohmann::json seeds = {{"run.seed", ctx.seed()},
                          {"attack", attack_seed},
                          {"attack-noise", derive_seed(attack_seed, "attack-noise")},
                          {"attack-batches", derive_seed(attack_seed, "attack-batches")}};

  GeneratorSpec gs;
  gs.arch = parse_generator_arch(cfg.get_string("attack.generator", to_string(gs.arch)));
  gs.channels = cs.in_channels;
  gs.height = cs.image_height;
  gs.width = cs.image_width;
  gs.base_width = cfg.get_int("attack.generator_width", 16);

  const int64_t max_images = cfg.get_int("attack.max_images", 100);
  Perturbation pert;
  nlohmann::json extra = nlohmann::json::object();
  bool interrupted = false;

  if (method == "juap" || method == "ablation") {
    const uint64_t gen_seed = derive_seed(attack_seed, "generator");
    seeds["generator"] = gen_seed;
    JuapTrainer trainer(make_generator(gs, gen_seed), interp, ds.train, acfg);
    const auto state_dir = res.out_dir / "state";
    if (fs::exists(state_dir / "state.json")) {
      trainer.load_state(state_dir);
      ctx.info("resuming attack at iteration " + std::to_string(trainer.iteration()));
    }
    const int64_t every = std::max<int64_t>(1, cfg.get_int("attack.checkpoint_every", 100));
    const int64_t stop_after = cfg.get_int("attack.stop_after", 0);
    while (!trainer.finished()) {
      int64_t next = std::min(trainer.iteration() + every, acfg.iterations);
      if (stop_after > 0) next = std::min(next, stop_after);
      if (next <= trainer.iteration()) break;
      trainer.run_until(next);
      trainer.save_state(state_dir);
      if (stop_after > 0 && trainer.iteration() >= stop_after && !trainer.finished()) {
        interrupted = true;
        break;
      }
    }
    if (interrupted) {
      write_seeds(res.out_dir, seeds);
      res.status = CommandStatus::Interrupted;
      res.summary = {{"iteration", trainer.iteration()}};
      ctx.info("stopped at iteration " + std::to_string(trainer.iteration()) + "; re-run to resume");
      return res;
    }
    pert = trainer.perturbation();
    save_generator(res.out_dir / "generator.pt", trainer.generator(), {{"attack", acfg.to_json()}});
    write_file_atomic(res.out_dir / "noise.json",
                      nlohmann::json({{"seed", derive_seed(attack_seed, "attack-noise")}}).dump() + "\n");
    write_file_atomic(res.out_dir / "record.jsonl", trainer.record().to_jsonl());
    const auto& last = trainer.record().iterations.back();
    extra["final_joint_loss"] = last.joint_loss;
    extra["final_classifier_loss"] = last.classifier_loss;
    extra["final_interpreter_loss"] = last.interpreter_loss;
    extra["wall_clock_seconds"] = trainer.record().wall_clock_seconds;
  } else if (method == "uap") {
    IterativeUapOptions opt;
    opt.max_passes = cfg.get_int("attack.uap_passes", opt.max_passes);
    opt.inner_steps = cfg.get_int("attack.uap_inner_steps", opt.inner_steps);
    opt.step_fraction = cfg.get_double("attack.uap_step_fraction", opt.step_fraction);
    opt.target_fooling_ratio = cfg.get_double("attack.uap_target_fooling_ratio", opt.target_fooling_ratio);
    opt.max_images = cfg.get_int("attack.uap_max_images", 0);
    opt.seed = derive_seed(attack_seed, "uap");
    seeds["uap"] = opt.seed;
    auto out = baseline_iterative_uap(clf, ds.train, acfg.p, acfg.zeta, opt);
    pert = out.perturbation;
    extra["converged"] = out.converged;
    extra["train_fooling_ratio"] = out.train_fooling_ratio;
  } else if (method == "pgd") {
    auto images = first_n(ds.test.data, max_images);
    const int64_t steps = cfg.get_int("attack.pgd_steps", 40);
    const double step_size = cfg.get_double("attack.pgd_step_size", 2.5 * acfg.zeta / static_cast<double>(steps));
    pert = baseline_pgd(clf, images.pixels, acfg.p, acfg.zeta, steps, step_size);
    extra["images"] = images.size();
  } else if (method == "jap") {
    auto images = first_n(ds.test.data, max_images);
    JapOptions opt;
    opt.generator = gs;
    opt.keep_best_fooled = cfg.get_bool("attack.jap_keep_best", true);
    auto per = acfg;
    per.iterations = cfg.get_int("attack.jap_iterations", acfg.iterations);
    seeds["jap-image-0"] = derive_seed(attack_seed, "jap-image", 0);
    auto out = train_jap_per_image(interp, images, per, opt);
    pert = out.perturbation;
    extra["images"] = images.size();
  } else {
    pert = Perturbation::zeros({cs.in_channels, cs.image_height, cs.image_width}, acfg.p, acfg.zeta);
  }

  pert.meta["method"] = method;
  save_perturbation(res.out_dir / "perturbation.f32", pert);
  if (!pert.per_image()) export_perturbation_png(res.out_dir / "perturbation.png", pert);
  write_seeds(res.out_dir, seeds);
  res.summary = {{"method", method},
                 {"interpreter", to_string(interp.kind)},
                 {"p", to_string(acfg.p)},
                 {"zeta", acfg.zeta},
                 {"achieved_norm", pert.achieved_norm},
                 {"per_image", pert.per_image()},
                 {"attack_config", acfg.to_json()}};
  res.summary.update(extra);
  mark_done(res.out_dir, "attack", res.summary);
  if (fs::exists(res.out_dir / "state")) fs::remove_all(res.out_dir / "state");
  return res;
}

CommandResult cmd_evaluate(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  DirectoryLock lock(res.out_dir);
  const auto& cfg = ctx.config;
  if (!cfg.contains("attack.path")) throw InputError("config is missing attack.path");
  const auto attack_dir = ctx.resolve(cfg.get_string("attack.path"));
  auto attack = load_attack(attack_dir);
  if (prepare_out_dir(ctx, res.out_dir, "evaluate")) {
    res.status = CommandStatus::AlreadyComplete;
    res.summary = read_done(res.out_dir);
    return res;
  }
  Config eval_cfg = cfg;
  if (!cfg.contains("evaluate.interpreter")) {
    eval_cfg.set("evaluate.interpreter", attack.summary.value("interpreter", std::string("CAM")));
  }
  RunContext ectx = ctx;
  ectx.config = eval_cfg;
  auto interp = load_interpreter(ectx, "evaluate");
  auto ds = load_configured_dataset(ctx);
  check_dataset_matches(ds, interp.classifier);

  auto images = ds.test.data;
  if (attack.perturbation.per_image()) {
    const int64_t n = attack.perturbation.values.size(0);
    if (n > images.size()) throw InputError("per-image perturbations outnumber the test images");
    images = images.slice(0, n);
  } else {
    images = first_n(images, cfg.get_int("evaluate.max_images", 0));
  }

  EvalOptions opt;
  if (cfg.contains("evaluate.fixed_threshold")) {
    opt.threshold = ThresholdRule::fixed(cfg.get_double("evaluate.fixed_threshold"));
  } else {
    opt.threshold = ThresholdRule::top_fraction(cfg.get_double("evaluate.top_fraction", 0.2));
  }
  opt.fooled_only = cfg.get_bool("evaluate.fooled_only", false);

  auto report = evaluate_attack(interp, images, attack.perturbation, opt);
  const std::string method = cfg.get_string("evaluate.method_name", attack.summary.value("method", "attack"));
  nlohmann::json clf_meta;
  load_configured_classifier(ctx, &clf_meta);
  report.attack_id = attack_id_of(attack_dir);
  report.classifier_id = cfg.get_string("classifier.path");
  report.dataset = cfg.get_string("dataset.name", clf_meta.value("dataset", "dataset"));
  report.model = clf_meta.value("architecture_tag", "classifier");
  report.seed = ctx.seed();
  report.config = {{"method", method},
                   {"attack", attack.summary},
                   {"fooled_only", opt.fooled_only},
                   {"threshold", opt.threshold.value},
                   {"threshold_kind", opt.threshold.kind == ThresholdRule::Kind::Fixed ? "fixed" : "percentile"}};
  report.validate();
  write_file_atomic(res.out_dir / "report.json", report.to_json().dump(2) + "\n");
  write_file_atomic(res.out_dir / "fr.csv", to_csv({"method", "dataset", "model", "FR"},
                                                   {{method, report.dataset, report.model, fmt(report.fooling_ratio)}}));
  write_file_atomic(res.out_dir / "discrepancy.csv",
                    to_csv({"method", "dataset", "model", "L1", "IOU"},
                           {{method, report.dataset, report.model, fmt(report.l1_mean), fmt(report.iou_mean)}}));

  const int64_t grid_n = std::min<int64_t>(cfg.get_int("evaluate.grid_images", 5), images.size());
  if (grid_n > 0) {
    auto shown = images.slice(0, grid_n);
    torch::Tensor pert = attack.perturbation.values;
    if (attack.perturbation.per_image()) pert = pert.slice(0, 0, grid_n);
    auto adv = apply_perturbation(shown.pixels, pert);
    ScopedActivation standard(interp.classifier, {});
    auto classes = predict_labels(interp.classifier, shown.pixels);
    auto benign_maps = interp.explain(shown.pixels, classes).values;
    auto adv_maps = interp.explain(adv, classes).values;
    render_attribution_grid({{"benign", shown.pixels, benign_maps}, {method, adv, adv_maps}},
                            res.out_dir / "grid.png");
  }
  res.summary = {{"method", method},
                 {"FR", report.fooling_ratio},
                 {"L1_mean", report.l1_mean},
                 {"IOU_mean", report.iou_mean}};
  mark_done(res.out_dir, "evaluate", res.summary);
  return res;
}

std::string leaderboard_csv(const std::vector<EvalReport>& reports) {
  auto method_of = [](const EvalReport& r) { return r.config.value("method", r.attack_id); };
  std::vector<size_t> order(reports.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const auto& ra = reports[a];
    const auto& rb = reports[b];
    if (ra.fooling_ratio != rb.fooling_ratio) return ra.fooling_ratio > rb.fooling_ratio;
    if (ra.iou_mean != rb.iou_mean) return ra.iou_mean > rb.iou_mean;
    return ra.attack_id < rb.attack_id;
  });
  std::vector<std::vector<std::string>> rows;
  int rank = 1;
  for (size_t i : order) {
    const auto& r = reports[i];
    const EvalReport* base = nullptr;
    for (const auto& other : reports) {
      if (&other != &r && method_of(other) == "ablation" && other.interpreter == r.interpreter &&
          other.dataset == r.dataset && other.model == r.model) {
        base = &other;
        break;
      }
    }
    std::vector<std::string> row = {std::to_string(rank++), r.attack_id,        method_of(r),
                                    r.interpreter,          r.dataset,          r.model,
                                    fmt(r.fooling_ratio),   fmt(r.l1_mean),     fmt(r.iou_mean)};
    if (base && method_of(r) != "ablation") {
      row.push_back(fmt(r.fooling_ratio - base->fooling_ratio));
      row.push_back(fmt(r.l1_mean - base->l1_mean));
      row.push_back(fmt(r.iou_mean - base->iou_mean));
    } else {
      row.insert(row.end(), {"", "", ""});
    }
    rows.push_back(row);
  }
  return to_csv({"rank", "attack_id", "method", "interpreter", "dataset", "model", "FR", "L1", "IOU", "delta_FR",
                 "delta_L1", "delta_IOU"},
                rows);
}

CommandResult cmd_compare(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  const auto paths = split_list(ctx.config.get_string("compare.reports", ""));
  if (paths.size() < 2) throw InputError("compare needs at least two reports");
  std::vector<EvalReport> reports;
  for (const auto& p : paths) {
    auto path = ctx.resolve(p);
    if (fs::is_directory(path)) path /= "report.json";
    if (!fs::exists(path)) throw InputError("report not found: " + path.string());
    try {
      reports.push_back(EvalReport::from_json(nlohmann::json::parse(read_file(path))));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("report schema mismatch in " + path.string() + ": " + e.what());
    }
  }
  DirectoryLock lock(res.out_dir);
  write_file_atomic(res.out_dir / "config.effective.cfg", ctx.config.dump());
  write_file_atomic(res.out_dir / "leaderboard.csv", leaderboard_csv(reports));
  res.summary = {{"reports", reports.size()}};
  return res;
}

CommandResult cmd_render(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  const auto& cfg = ctx.config;
  const auto attacks = split_list(cfg.get_string("render.attacks", ""));
  if (attacks.empty()) throw InputError("render.attacks names no attack directories");
  auto interp = load_interpreter(ctx, "render");
  auto ds = load_configured_dataset(ctx);
  check_dataset_matches(ds, interp.classifier);
  const int64_t n = std::min<int64_t>(cfg.get_int("render.images", 5), ds.test.size());
  auto shown = ds.test.data.slice(0, n);

  ScopedActivation standard(interp.classifier, {});
  auto classes = predict_labels(interp.classifier, shown.pixels);
  std::vector<GridRow> rows = {{"benign", shown.pixels, interp.explain(shown.pixels, classes).values}};
  for (const auto& a : attacks) {
    auto art = load_attack(ctx.resolve(a));
    torch::Tensor pert = art.perturbation.values;
    if (art.perturbation.per_image()) {
      if (pert.size(0) < n) throw InputError("per-image attack has fewer images than render.images");
      pert = pert.slice(0, 0, n);
    }
    auto adv = apply_perturbation(shown.pixels, pert);
    rows.push_back({art.summary.value("method", attack_id_of(art.dir)), adv, interp.explain(adv, classes).values});
  }
  DirectoryLock lock(res.out_dir);
  auto layout = render_attribution_grid(rows, res.out_dir / "grid.png", cfg.get_int("render.scale", 2));
  res.summary = {{"rows", layout.rows}, {"columns", layout.columns}};
  return res;
}

CommandResult cmd_detect_gap(const RunContext& ctx) {
  CommandResult res;
  res.out_dir = ctx.out_dir();
  const auto& cfg = ctx.config;
  const auto sets = split_list(cfg.get_string("detect.sets", ""));
  if (sets.size() < 2) throw InputError("detect.sets needs at least two adversarial sets (name=attack_dir)");
  auto interp = load_interpreter(ctx, "detect");
  auto ds = load_configured_dataset(ctx);
  check_dataset_matches(ds, interp.classifier);
  auto images = first_n(ds.test.data, cfg.get_int("detect.max_images", 0));
  std::vector<std::pair<std::string, Perturbation>> adversarial;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InputError("detect.sets entries look like name=attack_dir: " + s);
    auto art = load_attack(ctx.resolve(s.substr(eq + 1)));
    if (art.perturbation.per_image()) {
      if (art.perturbation.values.size(0) < images.size()) {
        throw InputError("per-image attack covers fewer images than the detection set");
      }
      art.perturbation.values = art.perturbation.values.slice(0, 0, images.size());
    }
    adversarial.emplace_back(s.substr(0, eq), art.perturbation);
  }
  DetectionOptions opt;
  opt.seed = derive_seed(ctx.seed(), "detect");
  opt.benign_noise = cfg.get_double("detect.benign_noise", opt.benign_noise);
  auto table = detection_gap_experiment(interp, images.pixels, adversarial, opt);
  DirectoryLock lock(res.out_dir);
  write_file_atomic(res.out_dir / "config.effective.cfg", cfg.dump());
  write_file_atomic(res.out_dir / "detection.csv", table.to_csv());
  res.summary = nlohmann::json::object();
  for (const auto& r : table.rows) res.summary[r.set_name] = {{"auc_l1", r.auc_l1}, {"auc_iou", r.auc_iou}};
  return res;
}

}  // namespace juap
