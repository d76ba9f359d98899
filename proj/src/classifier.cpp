#include "juap/classifier.hpp"

#include <cmath>

namespace juap {

namespace nn = torch::nn;

std::string to_string(ClassifierArch arch) {
  return arch == ClassifierArch::ResidualSmall ? "residual-small" : "dense-small";
}

ClassifierArch parse_classifier_arch(const std::string& tag) {
  if (tag == "residual-small") return ClassifierArch::ResidualSmall;
  if (tag == "dense-small") return ClassifierArch::DenseSmall;
  throw InputError("unknown classifier architecture: " + tag);
}

double smoothed_relu_gate(double s, double tau, GateForm form) {
  const double r = s / std::sqrt(s * s + tau);
  if (form == GateForm::HalvedSigmoid) return 0.5 * (1.0 + r);
  return s < 0.0 ? 1.0 + r : r;
}

torch::Tensor smoothed_relu_gate(const torch::Tensor& s, double tau, GateForm form) {
  auto r = s / torch::sqrt(s * s + tau);
  if (form == GateForm::HalvedSigmoid) return 0.5 * (1.0 + r);
  return torch::where(s < 0, 1.0 + r, r);
}

namespace {

struct SmoothedReluFunction : public torch::autograd::Function<SmoothedReluFunction> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& s, double tau,
                               int64_t form) {
    ctx->save_for_backward({s});
    ctx->saved_data["tau"] = tau;
    ctx->saved_data["form"] = form;
    return torch::relu(s);
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grad_out) {
    const auto s = ctx->get_saved_variables()[0];
    const double tau = ctx->saved_data["tau"].toDouble();
    const auto form = static_cast<GateForm>(ctx->saved_data["form"].toInt());
    return {grad_out[0] * smoothed_relu_gate(s, tau, form), torch::Tensor(), torch::Tensor()};
  }
};

struct Block : nn::Module {
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
};

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}

struct Stem : Block {
  Stem(int64_t in, int64_t out, std::shared_ptr<ActivationSettings> act, bool activate)
      : act_(std::move(act)), activate_(activate) {
    conv_ = register_module("conv", conv(in, out, 3));
    if (activate_) bn_ = register_module("bn", nn::BatchNorm2d(out));
  }
  torch::Tensor forward(const torch::Tensor& x) override {
    auto y = conv_->forward(x);
    return activate_ ? gated_relu(bn_->forward(y), *act_) : y;
  }
  std::shared_ptr<ActivationSettings> act_;
  bool activate_;
  nn::Conv2d conv_{nullptr};
  nn::BatchNorm2d bn_{nullptr};
};

struct ResidualBlock : Block {
  ResidualBlock(int64_t in, int64_t out, int64_t stride, std::shared_ptr<ActivationSettings> act)
      : act_(std::move(act)) {
    conv1_ = register_module("conv1", conv(in, out, 3, stride));
    bn1_ = register_module("bn1", nn::BatchNorm2d(out));
    conv2_ = register_module("conv2", conv(out, out, 3));
    bn2_ = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut_conv_ = register_module("shortcut_conv", conv(in, out, 1, stride));
      shortcut_bn_ = register_module("shortcut_bn", nn::BatchNorm2d(out));
    }
  }
  torch::Tensor forward(const torch::Tensor& x) override {
    auto y = gated_relu(bn1_->forward(conv1_->forward(x)), *act_);
    y = bn2_->forward(conv2_->forward(y));
    auto sc = shortcut_conv_ ? shortcut_bn_->forward(shortcut_conv_->forward(x)) : x;
    return gated_relu(y + sc, *act_);
  }
  std::shared_ptr<ActivationSettings> act_;
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_conv_{nullptr};
  nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr}, shortcut_bn_{nullptr};
};

struct DenseBlock : Block {
  DenseBlock(int64_t in, int64_t layers, int64_t growth, std::shared_ptr<ActivationSettings> act)
      : act_(std::move(act)) {
    for (int64_t i = 0; i < layers; ++i) {
      bns_.push_back(register_module("bn" + std::to_string(i), nn::BatchNorm2d(in + i * growth)));
      convs_.push_back(register_module("conv" + std::to_string(i), conv(in + i * growth, growth, 3)));
    }
  }
  torch::Tensor forward(const torch::Tensor& x) override {
    auto y = x;
    for (size_t i = 0; i < convs_.size(); ++i) {
      y = torch::cat({y, convs_[i]->forward(gated_relu(bns_[i]->forward(y), *act_))}, 1);
    }
    return y;
  }
  std::shared_ptr<ActivationSettings> act_;
  std::vector<nn::BatchNorm2d> bns_;
  std::vector<nn::Conv2d> convs_;
};

struct Transition : Block {
  Transition(int64_t in, int64_t out, bool pool, std::shared_ptr<ActivationSettings> act)
      : act_(std::move(act)), pool_(pool) {
    bn_ = register_module("bn", nn::BatchNorm2d(in));
    conv_ = register_module("conv", conv(in, out, 1));
    if (!pool_) out_bn_ = register_module("out_bn", nn::BatchNorm2d(out));
  }
  torch::Tensor forward(const torch::Tensor& x) override {
    auto y = conv_->forward(gated_relu(bn_->forward(x), *act_));
    // The closing transition has no pooling and ends in BN + ReLU (the tap).
    return pool_ ? torch::avg_pool2d(y, 2) : gated_relu(out_bn_->forward(y), *act_);
  }
  std::shared_ptr<ActivationSettings> act_;
  bool pool_;
  nn::BatchNorm2d bn_{nullptr}, out_bn_{nullptr};
  nn::Conv2d conv_{nullptr};
};

}  // namespace

torch::Tensor gated_relu(const torch::Tensor& s, const ActivationSettings& settings) {
  if (settings.mode == ActivationMode::StandardRelu) return torch::relu(s);
  return SmoothedReluFunction::apply(s, settings.tau, static_cast<int64_t>(settings.form));
}

nlohmann::json ClassifierSpec::to_json() const {
  return {{"architecture_tag", juap::to_string(arch)}, {"in_channels", in_channels},
          {"k", num_classes},  {"image_size", {image_height, image_width}},
          {"feature_channels", feature_channels}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
  ClassifierSpec s;
  s.arch = parse_classifier_arch(j.at("architecture_tag").get<std::string>());
  s.in_channels = j.at("in_channels").get<int64_t>();
  s.num_classes = j.at("k").get<int64_t>();
  s.image_height = j.at("image_size").at(0).get<int64_t>();
  s.image_width = j.at("image_size").at(1).get<int64_t>();
  s.feature_channels = j.at("feature_channels").get<int64_t>();
  return s;
}

ClassifierImpl::ClassifierImpl(ClassifierSpec spec)
    : spec_(spec),
      activation_(std::make_shared<ActivationSettings>()),
      counters_(std::make_shared<ClassifierCounters>()) {
  if (spec_.num_classes < 2) throw InputError("a classifier needs at least 2 classes");
  if (spec_.feature_channels < 1) throw InputError("feature_channels must be positive");
  std::vector<std::shared_ptr<Block>> blocks;
  if (spec_.arch == ClassifierArch::ResidualSmall) {
    blocks.push_back(std::make_shared<Stem>(spec_.in_channels, 16, activation_, true));
    blocks.push_back(std::make_shared<ResidualBlock>(16, 16, 1, activation_));
    blocks.push_back(std::make_shared<ResidualBlock>(16, 32, 2, activation_));
    blocks.push_back(std::make_shared<ResidualBlock>(32, spec_.feature_channels, 2, activation_));
  } else {
    constexpr int64_t growth = 12, layers = 3;
    blocks.push_back(std::make_shared<Stem>(spec_.in_channels, 24, activation_, false));
    blocks.push_back(std::make_shared<DenseBlock>(24, layers, growth, activation_));
    blocks.push_back(std::make_shared<Transition>(24 + layers * growth, 32, true, activation_));
    blocks.push_back(std::make_shared<DenseBlock>(32, layers, growth, activation_));
    blocks.push_back(std::make_shared<Transition>(32 + layers * growth, 48, true, activation_));
    blocks.push_back(std::make_shared<DenseBlock>(48, layers, growth, activation_));
    blocks.push_back(std::make_shared<Transition>(48 + layers * growth, spec_.feature_channels, false, activation_));
  }
  body_ = register_module("body", nn::ModuleList());
  for (auto& b : blocks) body_->push_back(b);
  head_ = register_module("head", nn::Linear(spec_.feature_channels, spec_.num_classes));
}

torch::Tensor ClassifierImpl::features(const torch::Tensor& x) {
  auto y = x;
  for (const auto& m : *body_) y = std::static_pointer_cast<Block>(m)->forward(y);
  return y;
}

ClassifierOutput ClassifierImpl::forward_with_activations(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) != spec_.image_height ||
      x.size(3) != spec_.image_width) {
    throw InputError("classifier input shape mismatch: expected [N, " + std::to_string(spec_.in_channels) + ", " +
                     std::to_string(spec_.image_height) + ", " + std::to_string(spec_.image_width) + "]");
  }
  counters_->forward_calls++;
  if (x.size(0) == 0) {
    const int64_t h = spec_.arch == ClassifierArch::ResidualSmall ? (spec_.image_height + 3) / 4 : spec_.image_height / 4;
    const int64_t w = spec_.arch == ClassifierArch::ResidualSmall ? (spec_.image_width + 3) / 4 : spec_.image_width / 4;
    return {torch::empty({0, spec_.feature_channels, h, w}), torch::empty({0, spec_.num_classes})};
  }
  auto a = features(x);
  auto logits = head_->forward(a.mean({2, 3}));
  if (logits.requires_grad()) {
    auto counters = counters_;
    logits.register_hook([counters](torch::Tensor g) {
      counters->backward_passes++;
      return g;
    });
  }
  return {a, logits};
}

ScopedActivation::ScopedActivation(Classifier& model, const ActivationSettings& settings)
    : model_(model), saved_(model->activation()) {
  model_->set_activation(settings);
}

ScopedActivation::~ScopedActivation() { model_->set_activation(saved_); }

Classifier make_classifier(const ClassifierSpec& spec, uint64_t seed) {
  torch::manual_seed(derive_seed(seed, "classifier-init"));
  Classifier model(spec);
  model->eval();
  return model;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InputError("learning_rate must be positive");
  if (batch_size <= 0) throw InputError("batch_size must be positive");
  if (epochs <= 0) throw InputError("epochs must be positive");
  if (optimizer != "adam" && optimizer != "sgd") throw InputError("optimizer must be adam or sgd");
  augment.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"optimizer", optimizer},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"random_crop", augment.random_crop},
          {"crop_padding", augment.crop_padding},
          {"horizontal_flip", augment.horizontal_flip},
          {"flip_probability", augment.flip_probability}};
}

TrainedClassifier train_classifier(const Split& train, const Split& test, const ClassifierSpec& spec,
                                   const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw InputError("training split is empty");
  TrainedClassifier out;
  out.model = make_classifier(spec, cfg.seed);
  auto& model = out.model;
  std::unique_ptr<torch::optim::Optimizer> opt;
  if (cfg.optimizer == "adam") {
    opt = std::make_unique<torch::optim::Adam>(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  } else {
    opt = std::make_unique<torch::optim::SGD>(model->parameters(),
                                              torch::optim::SGDOptions(cfg.learning_rate).momentum(0.9));
  }
  BatchStream stream(train, cfg.batch_size, derive_seed(cfg.seed, "classifier-batches"));
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    model->train();
    double total = 0.0;
    int64_t seen = 0;
    for (int64_t b = 0; b < stream.batches_per_epoch(); ++b, ++step) {
      auto batch = augment(stream.batch(step), cfg.augment, derive_seed(cfg.seed, "classifier-augment", step));
      opt->zero_grad();
      auto loss = torch::nn::functional::cross_entropy(model->forward(batch.pixels), batch.labels);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw NumericalError("classifier training diverged (NaN loss)", step);
      loss.backward();
      opt->step();
      total += value * static_cast<double>(batch.size());
      seen += batch.size();
    }
    out.epoch_losses.push_back(total / static_cast<double>(seen));
  }
  model->eval();
  out.top1 = test.size() > 0 ? top1_accuracy(model, test) : 0.0;
  return out;
}

torch::Tensor predict(Classifier& model, const torch::Tensor& pixels, int64_t chunk) {
  torch::NoGradGuard no_grad;
  model->eval();
  if (pixels.size(0) == 0) return model->forward(pixels);
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < pixels.size(0); i += chunk) {
    parts.push_back(model->forward(pixels.slice(0, i, std::min(i + chunk, pixels.size(0)))));
  }
  return torch::cat(parts);
}

torch::Tensor predict_labels(Classifier& model, const torch::Tensor& pixels) {
  return predict(model, pixels).argmax(1);
}

double top1_accuracy(Classifier& model, const Split& split) {
  if (split.size() == 0) throw InputError("cannot score an empty split");
  auto pred = predict_labels(model, split.data.pixels);
  return pred.eq(split.data.labels).to(torch::kFloat64).mean().item<double>();
}

ClassifierOutput capture_activations(Classifier& model, const torch::Tensor& pixels) {
  return model->forward_with_activations(pixels);
}

void save_classifier(const fs::path& path, Classifier& model, const nlohmann::json& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  torch::save(model, tmp.string());
  fs::rename(tmp, path);
  auto sidecar = meta;
  sidecar.update(model->spec().to_json());
  auto json_path = path;
  json_path += ".json";
  write_file_atomic(json_path, sidecar.dump(2) + "\n");
}

Classifier load_classifier(const fs::path& path, nlohmann::json* meta) {
  auto json_path = path;
  json_path += ".json";
  if (!fs::exists(path) || !fs::exists(json_path)) {
    throw InputError("classifier checkpoint not found: " + path.string());
  }
  const auto j = nlohmann::json::parse(read_file(json_path));
  Classifier model(ClassifierSpec::from_json(j));
  torch::load(model, path.string());
  model->eval();
  if (meta) *meta = j;
  return model;
}

}  // namespace juap
