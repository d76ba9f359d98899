#include "juap/interpreters.hpp"

#include <cmath>

#include "juap/image_io.hpp"

namespace juap {

namespace F = torch::nn::functional;

std::string to_string(InterpreterKind kind) {
  switch (kind) {
    case InterpreterKind::Cam:
      return "CAM";
    case InterpreterKind::GradCam:
      return "GradCAM";
    default:
      return "RTS";
  }
}

InterpreterKind parse_interpreter_kind(const std::string& tag) {
  if (tag == "CAM" || tag == "cam") return InterpreterKind::Cam;
  if (tag == "GradCAM" || tag == "gradcam") return InterpreterKind::GradCam;
  if (tag == "RTS" || tag == "rts") return InterpreterKind::Rts;
  throw InputError("unknown interpreter: " + tag);
}

torch::Tensor postprocess_maps(const torch::Tensor& raw, int64_t height, int64_t width) {
  if (raw.dim() != 3) throw InputError("attribution maps must be [N, h, w]");
  auto m = torch::relu(raw);
  if (m.size(1) != height || m.size(2) != width) {
    m = F::interpolate(m.unsqueeze(1), F::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{height, width})
                                           .mode(torch::kBilinear)
                                           .align_corners(false))
            .squeeze(1);
  }
  if (m.size(0) == 0) return m;
  auto peak = std::get<0>(m.flatten(1).max(1)).view({-1, 1, 1});
  auto safe = torch::where(peak > 0, peak, torch::ones_like(peak));
  return torch::where(peak > 0, m / safe, torch::zeros_like(m));
}

torch::Tensor select_classes(Classifier& model, const torch::Tensor& pixels,
                             const std::optional<torch::Tensor>& classes) {
  if (classes) {
    if (classes->size(0) != pixels.size(0)) throw InputError("one class index per image is required");
    return classes->to(torch::kInt64);
  }
  return predict_labels(model, pixels.detach());
}

namespace {

torch::Tensor cam_from(Classifier& model, const ClassifierOutput& out, const torch::Tensor& classes) {
  auto weights = model->head_weight().index_select(0, classes);  // [N, K]
  return torch::einsum("nk,nkhw->nhw", {weights, out.activations});
}

torch::Tensor gradcam_from(const ClassifierOutput& out, const torch::Tensor& classes, bool create_graph) {
  const auto& a = out.activations;
  if (!a.requires_grad()) throw InputError("GradCAM needs gradients, but the activations carry no graph");
  auto score = out.logits.gather(1, classes.view({-1, 1})).sum();
  auto grads = torch::autograd::grad({score}, {a}, {}, /*retain_graph=*/true, create_graph,
                                     /*allow_unused=*/true)[0];
  if (!grads.defined()) grads = torch::zeros_like(a);
  auto weights = grads.mean({2, 3});  // (1/V) sum_ij
  auto raw = torch::einsum("nk,nkhw->nhw", {weights, a});
  return create_graph ? raw : raw.detach();
}

/// Benign inputs carry no graph; give them one so dA/dx exists even when the
/// classifier parameters are frozen.
torch::Tensor with_graph(const torch::Tensor& pixels) {
  if (!torch::GradMode::is_enabled()) {
    throw InputError("GradCAM needs gradients, but autograd is disabled (no-grad evaluation state)");
  }
  return pixels.requires_grad() ? pixels : pixels.detach().requires_grad_(true);
}

}  // namespace

torch::Tensor cam_raw(Classifier& model, const torch::Tensor& pixels, const torch::Tensor& classes) {
  return cam_from(model, model->forward_with_activations(pixels), classes);
}

torch::Tensor gradcam_raw(Classifier& model, const torch::Tensor& pixels, const torch::Tensor& classes,
                          bool create_graph) {
  auto x = with_graph(pixels);
  return gradcam_from(model->forward_with_activations(x), classes, create_graph);
}

AttributionMap cam_attribution(Classifier& model, const torch::Tensor& pixels,
                               const std::optional<torch::Tensor>& classes) {
  model->eval();
  auto cls = select_classes(model, pixels, classes);
  torch::NoGradGuard no_grad;
  auto maps = postprocess_maps(cam_raw(model, pixels, cls), pixels.size(2), pixels.size(3));
  return {maps, InterpreterKind::Cam, cls};
}

AttributionMap gradcam_attribution(Classifier& model, const torch::Tensor& pixels,
                                   const std::optional<torch::Tensor>& classes) {
  model->eval();
  auto cls = select_classes(model, pixels, classes);
  auto raw = gradcam_raw(model, pixels, cls, /*create_graph=*/false);
  auto maps = postprocess_maps(raw, pixels.size(2), pixels.size(3)).detach();
  return {maps, InterpreterKind::GradCam, cls};
}

// --- RTS ---------------------------------------------------------------------

nlohmann::json RtsSpec::to_json() const {
  return {{"in_channels", in_channels},
          {"image_size", {image_height, image_width}},
          {"base_width", base_width},
          {"k", num_classes}};
}

RtsSpec RtsSpec::from_json(const nlohmann::json& j) {
  RtsSpec s;
  s.in_channels = j.at("in_channels").get<int64_t>();
  s.image_height = j.at("image_size").at(0).get<int64_t>();
  s.image_width = j.at("image_size").at(1).get<int64_t>();
  s.base_width = j.at("base_width").get<int64_t>();
  s.num_classes = j.at("k").get<int64_t>();
  return s;
}

RtsModelImpl::RtsModelImpl(RtsSpec spec) : spec_(spec) {
  using torch::nn::Conv2dOptions;
  const int64_t w = spec_.base_width;
  enc1_ = register_module("enc1", torch::nn::Conv2d(Conv2dOptions(spec_.in_channels, w, 3).padding(1)));
  enc2_ = register_module("enc2", torch::nn::Conv2d(Conv2dOptions(w, 2 * w, 3).stride(2).padding(1)));
  enc3_ = register_module("enc3", torch::nn::Conv2d(Conv2dOptions(2 * w, 4 * w, 3).stride(2).padding(1)));
  dec1_ = register_module("dec1", torch::nn::Conv2d(Conv2dOptions(4 * w + 2 * w, 2 * w, 3).padding(1)));
  dec2_ = register_module("dec2", torch::nn::Conv2d(Conv2dOptions(2 * w + w, w, 3).padding(1)));
  out_ = register_module("out", torch::nn::Conv2d(Conv2dOptions(w, 1, 1)));
}

torch::Tensor RtsModelImpl::encode(const torch::Tensor& x) {
  auto h1 = torch::relu(enc1_->forward(x));
  auto h2 = torch::relu(enc2_->forward(h1));
  return torch::relu(enc3_->forward(h2));
}

torch::Tensor RtsModelImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) != spec_.image_height ||
      x.size(3) != spec_.image_width) {
    throw InputError("RTS input spatial size mismatch");
  }
  auto h1 = torch::relu(enc1_->forward(x));
  auto h2 = torch::relu(enc2_->forward(h1));
  auto h3 = torch::relu(enc3_->forward(h2));
  auto up = [](const torch::Tensor& t, const torch::Tensor& like) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto d1 = torch::relu(dec1_->forward(torch::cat({up(h3, h2), h2}, 1)));
  auto d2 = torch::relu(dec2_->forward(torch::cat({up(d1, h1), h1}, 1)));
  return torch::sigmoid(out_->forward(d2)).squeeze(1);
}

void RtsTrainConfig::validate() const {
  if (lambda_tv < 0 || lambda_av < 0 || lambda_keep < 0 || lambda_power < 0) {
    throw InputError("RTS lambdas must be non-negative");
  }
  if (!(learning_rate > 0)) throw InputError("RTS learning rate must be positive");
  if (batch_size <= 0 || epochs <= 0) throw InputError("RTS batch size and epochs must be positive");
}

nlohmann::json RtsTrainConfig::to_json() const {
  return {{"lambda1", lambda_tv},
          {"lambda2", lambda_av},
          {"lambda3", lambda_keep},
          {"lambda4", lambda_power},
          {"background", background == BlendBackground::Blur ? "blur" : "uniform-noise"},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed}};
}

torch::Tensor blend_background(const torch::Tensor& x, BlendBackground kind, uint64_t seed) {
  if (kind == BlendBackground::UniformNoise) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed, "rts-noise"));
    return torch::rand(x.sizes(), gen, x.options().requires_grad(false));
  }
  // Separable Gaussian blur, sigma 2, 9 taps, replicate padding.
  constexpr int64_t taps = 9;
  constexpr double sigma = 2.0;
  std::vector<float> k(taps);
  double total = 0.0;
  for (int64_t i = 0; i < taps; ++i) {
    const double d = static_cast<double>(i - taps / 2);
    k[static_cast<size_t>(i)] = static_cast<float>(std::exp(-d * d / (2 * sigma * sigma)));
    total += k[static_cast<size_t>(i)];
  }
  auto kernel = torch::tensor(k).div(total);
  const int64_t c = x.size(1);
  auto kh = kernel.view({1, 1, taps, 1}).repeat({c, 1, 1, 1});
  auto kw = kernel.view({1, 1, 1, taps}).repeat({c, 1, 1, 1});
  auto padded = F::pad(x.detach(), F::PadFuncOptions({taps / 2, taps / 2, taps / 2, taps / 2}).mode(torch::kReplicate));
  auto y = F::conv2d(padded, kh, F::Conv2dFuncOptions().groups(c));
  return F::conv2d(y, kw, F::Conv2dFuncOptions().groups(c));
}

torch::Tensor blend(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& background) {
  auto m = mask.dim() == 3 ? mask.unsqueeze(1) : mask;
  return m * x + (1.0 - m) * background;
}

torch::Tensor rts_objective(Classifier& classifier, const torch::Tensor& x, const torch::Tensor& mask,
                            const torch::Tensor& classes, const torch::Tensor& background,
                            const RtsTrainConfig& cfg) {
  auto m = mask.dim() == 3 ? mask : mask.squeeze(1);
  auto tv = (m.slice(1, 1) - m.slice(1, 0, -1)).abs().mean() + (m.slice(2, 1) - m.slice(2, 0, -1)).abs().mean();
  auto av = m.mean();
  auto idx = classes.view({-1, 1});
  auto p_keep = torch::softmax(classifier->forward(blend(x, m, background)), 1).gather(1, idx).squeeze(1);
  auto p_drop = torch::softmax(classifier->forward(blend(x, 1.0 - m, background)), 1).gather(1, idx).squeeze(1);
  auto keep_term = -torch::log(p_keep.clamp_min(1e-12)).mean();
  auto drop_term = p_drop.clamp_min(1e-12).pow(cfg.lambda_power).mean();
  return cfg.lambda_tv * tv + cfg.lambda_av * av + keep_term + cfg.lambda_keep * drop_term;
}

RtsModel train_rts(Classifier& classifier, const Split& train, const RtsTrainConfig& cfg, RtsTrainRecord* record) {
  cfg.validate();
  if (train.size() == 0) throw InputError("RTS training split is empty");
  const auto& cs = classifier->spec();
  const auto max_label = train.data.labels.max().item<int64_t>();
  if (max_label >= cs.num_classes) throw InputError("RTS training labels exceed the classifier's class count");

  torch::manual_seed(derive_seed(cfg.seed, "rts-init"));
  RtsModel rts(RtsSpec{cs.in_channels, cs.image_height, cs.image_width, 16, cs.num_classes});
  classifier->eval();
  std::vector<bool> had_grad;
  for (auto& p : classifier->parameters()) {
    had_grad.push_back(p.requires_grad());
    p.requires_grad_(false);
  }
  torch::optim::Adam opt(rts->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  BatchStream stream(train, cfg.batch_size, derive_seed(cfg.seed, "rts-batches"));
  int64_t step = 0;
  try {
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      double total = 0.0;
      for (int64_t b = 0; b < stream.batches_per_epoch(); ++b, ++step) {
        auto batch = stream.batch(step);
        auto bg = blend_background(batch.pixels, cfg.background, derive_seed(cfg.seed, "rts-bg", step));
        opt.zero_grad();
        auto loss = rts_objective(classifier, batch.pixels, rts->forward(batch.pixels), batch.labels, bg, cfg);
        const double v = loss.item<double>();
        if (!std::isfinite(v)) throw NumericalError("RTS training diverged", step);
        loss.backward();
        opt.step();
        total += v;
      }
      if (record) record->epoch_losses.push_back(total / static_cast<double>(stream.batches_per_epoch()));
    }
  } catch (...) {
    size_t i = 0;
    for (auto& p : classifier->parameters()) p.requires_grad_(had_grad[i++]);
    throw;
  }
  size_t i = 0;
  for (auto& p : classifier->parameters()) p.requires_grad_(had_grad[i++]);
  rts->eval();
  return rts;
}

AttributionMap rts_attribution(RtsModel& rts, const torch::Tensor& pixels) {
  torch::NoGradGuard no_grad;
  rts->eval();
  return {rts->forward(pixels), InterpreterKind::Rts, torch::Tensor()};
}

void save_rts(const fs::path& path, RtsModel& model, const nlohmann::json& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  torch::save(model, tmp.string());
  fs::rename(tmp, path);
  auto sidecar = meta;
  sidecar["rts_spec"] = model->spec().to_json();
  auto json_path = path;
  json_path += ".json";
  write_file_atomic(json_path, sidecar.dump(2) + "\n");
}

RtsModel load_rts(const fs::path& path, nlohmann::json* meta) {
  auto json_path = path;
  json_path += ".json";
  if (!fs::exists(path) || !fs::exists(json_path)) throw InputError("RTS checkpoint not found: " + path.string());
  const auto j = nlohmann::json::parse(read_file(json_path));
  RtsModel model(RtsSpec::from_json(j.at("rts_spec")));
  torch::load(model, path.string());
  model->eval();
  if (meta) *meta = j;
  return model;
}

// --- bundle --------------------------------------------------------------------

torch::Tensor Interpreter::maps(const torch::Tensor& pixels, const torch::Tensor& classes, bool differentiable) {
  const auto h = pixels.size(2), w = pixels.size(3);
  switch (kind) {
    case InterpreterKind::Cam: {
      if (!differentiable) {
        torch::NoGradGuard no_grad;
        return postprocess_maps(cam_raw(classifier, pixels, classes), h, w);
      }
      return postprocess_maps(cam_raw(classifier, pixels, classes), h, w);
    }
    case InterpreterKind::GradCam: {
      torch::AutoGradMode grad_on(true);
      auto m = postprocess_maps(gradcam_raw(classifier, pixels, classes, differentiable), h, w);
      return differentiable ? m : m.detach();
    }
    default: {
      if (!rts) throw InputError("RTS interpreter selected but no RTS model is loaded");
      if (rts->spec().num_classes != classifier->spec().num_classes) {
        throw InputError("RTS model was trained against a classifier with a different class count");
      }
      if (!differentiable) {
        torch::NoGradGuard no_grad;
        return rts->forward(pixels);
      }
      return rts->forward(pixels);
    }
  }
}

MapsAndLogits Interpreter::maps_and_logits(const torch::Tensor& pixels, const torch::Tensor& classes,
                                           bool differentiable, bool want_embedding) {
  const auto h = pixels.size(2), w = pixels.size(3);
  MapsAndLogits out;
  std::optional<torch::NoGradGuard> no_grad;
  if (!differentiable && kind != InterpreterKind::GradCam) no_grad.emplace();
  switch (kind) {
    case InterpreterKind::Cam: {
      auto fwd = classifier->forward_with_activations(pixels);
      out.maps = postprocess_maps(cam_from(classifier, fwd, classes), h, w);
      out.logits = fwd.logits;
      break;
    }
    case InterpreterKind::GradCam: {
      torch::AutoGradMode grad_on(true);
      auto fwd = classifier->forward_with_activations(with_graph(pixels));
      out.maps = postprocess_maps(gradcam_from(fwd, classes, differentiable), h, w);
      out.logits = fwd.logits;
      if (!differentiable) {
        out.maps = out.maps.detach();
        out.logits = out.logits.detach();
      }
      break;
    }
    default: {
      out.maps = maps(pixels, classes, differentiable);
      out.logits = classifier->forward(pixels);
      if (want_embedding) out.embedding = rts->encode(pixels);
      break;
    }
  }
  return out;
}

AttributionMap Interpreter::explain(const torch::Tensor& pixels, const std::optional<torch::Tensor>& classes) {
  classifier->eval();
  if (rts) rts->eval();
  auto cls = kind == InterpreterKind::Rts ? (classes ? *classes : torch::Tensor())
                                          : select_classes(classifier, pixels, classes);
  return {maps(pixels, cls, false), kind, cls};
}

// --- binarization ---------------------------------------------------------------

torch::Tensor binarize(const torch::Tensor& maps, const ThresholdRule& rule) {
  if (maps.dim() != 3) throw InputError("binarize expects maps [N, H, W]");
  auto m = maps.detach();
  if (rule.kind == ThresholdRule::Kind::Fixed) return m.ge(rule.value);
  const int64_t hw = m.size(1) * m.size(2);
  const double fraction = 1.0 - rule.value;
  auto keep = static_cast<int64_t>(std::ceil(fraction * static_cast<double>(hw) - 1e-9));
  keep = std::clamp<int64_t>(keep, 1, hw);
  if (m.size(0) == 0) return m.gt(0);
  auto flat = m.flatten(1);
  auto kth = std::get<0>(flat.topk(keep, 1)).select(1, keep - 1).view({-1, 1, 1});
  return m.ge(kth).logical_and(m.gt(0));
}

void export_map_png(const fs::path& path, const torch::Tensor& map) { write_png(path, map.detach()); }

}  // namespace juap
