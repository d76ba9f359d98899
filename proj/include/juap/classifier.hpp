#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "juap/data.hpp"

namespace juap {

enum class ClassifierArch { ResidualSmall, DenseSmall };

std::string to_string(ClassifierArch arch);
ClassifierArch parse_classifier_arch(const std::string& tag);

// ---------------------------------------------------------------------------
// Smoothed ReLU
//
// a(s) = 1(s < 0) * (1 + s / sqrt(s^2 + tau)) + 1(s >= 0) * s / sqrt(s^2 + tau)
//
// used as the backward gate of ReLU while an attack differentiates through
// interpreter gradients. Printed form is discontinuous at 0 (left limit 1,
// value 0); the halved-sigmoid form (1 + s / sqrt(s^2 + tau)) / 2 is the
// continuous alternative.
// ---------------------------------------------------------------------------

enum class GateForm { AsPrinted, HalvedSigmoid };

enum class ActivationMode { StandardRelu, SmoothedRelu };

struct ActivationSettings {
  ActivationMode mode = ActivationMode::StandardRelu;
  double tau = 1e-4;
  GateForm form = GateForm::AsPrinted;
};

double smoothed_relu_gate(double s, double tau, GateForm form = GateForm::AsPrinted);
torch::Tensor smoothed_relu_gate(const torch::Tensor& s, double tau, GateForm form = GateForm::AsPrinted);

/// ReLU in the forward pass. In SmoothedRelu mode the backward pass multiplies
/// incoming gradients by a(s) instead of the step function; the backward is
/// built from differentiable ops, so it supports double backward.
torch::Tensor gated_relu(const torch::Tensor& s, const ActivationSettings& settings);

// ---------------------------------------------------------------------------

struct ClassifierSpec {
  ClassifierArch arch = ClassifierArch::ResidualSmall;
  int64_t in_channels = 3;
  int64_t num_classes = 6;
  int64_t image_height = 32;
  int64_t image_width = 32;
  /// K: channels of the last convolutional feature map.
  int64_t feature_channels = 64;

  nlohmann::json to_json() const;
  static ClassifierSpec from_json(const nlohmann::json& j);
};

/// Last conv feature map A [N, K, h, w] and the logits computed from it.
struct ClassifierOutput {
  torch::Tensor activations;
  torch::Tensor logits;
};

/// Counts forward calls and backward passes that reach the logits.
struct ClassifierCounters {
  std::atomic<int64_t> forward_calls{0};
  std::atomic<int64_t> backward_passes{0};
};

class ClassifierImpl : public torch::nn::Module {
 public:
  explicit ClassifierImpl(ClassifierSpec spec);

  ClassifierOutput forward_with_activations(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x) { return forward_with_activations(x).logits; }

  const ClassifierSpec& spec() const { return spec_; }
  /// Dense head over globally pooled activations: logits = W * GAP(A) + b.
  torch::Tensor head_weight() const { return head_->weight; }
  torch::Tensor head_bias() const { return head_->bias; }

  const ActivationSettings& activation() const { return *activation_; }
  void set_activation(const ActivationSettings& a) { *activation_ = a; }

  ClassifierCounters& counters() { return *counters_; }

 private:
  torch::Tensor features(const torch::Tensor& x);

  ClassifierSpec spec_;
  std::shared_ptr<ActivationSettings> activation_;
  std::shared_ptr<ClassifierCounters> counters_;
  torch::nn::Sequential stem_{nullptr};
  torch::nn::ModuleList body_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Classifier);

/// Switches a classifier's activation mode for the lifetime of the guard.
class ScopedActivation {
 public:
  ScopedActivation(Classifier& model, const ActivationSettings& settings);
  ~ScopedActivation();
  ScopedActivation(const ScopedActivation&) = delete;
  ScopedActivation& operator=(const ScopedActivation&) = delete;

 private:
  Classifier model_;
  ActivationSettings saved_;
};

Classifier make_classifier(const ClassifierSpec& spec, uint64_t seed);

struct TrainConfig {
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  int64_t batch_size = 64;
  int64_t epochs = 20;
  uint64_t seed = 0;
  AugmentConfig augment{.random_crop = true, .crop_padding = 2, .horizontal_flip = true, .flip_probability = 0.5};

  void validate() const;
  nlohmann::json to_json() const;
};

struct TrainedClassifier {
  Classifier model{nullptr};
  double top1 = 0.0;
  std::vector<double> epoch_losses;
};

TrainedClassifier train_classifier(const Split& train, const Split& test, const ClassifierSpec& spec,
                                   const TrainConfig& cfg);

/// Logits in evaluation mode with standard ReLU; no autograd graph.
torch::Tensor predict(Classifier& model, const torch::Tensor& pixels, int64_t chunk = 256);
torch::Tensor predict_labels(Classifier& model, const torch::Tensor& pixels);
double top1_accuracy(Classifier& model, const Split& split);

/// Activations and logits, keeping the autograd graph if grad mode is on.
ClassifierOutput capture_activations(Classifier& model, const torch::Tensor& pixels);

/// Checkpoint = torch archive at `path` plus `path` + ".json" sidecar.
void save_classifier(const fs::path& path, Classifier& model, const nlohmann::json& meta);
Classifier load_classifier(const fs::path& path, nlohmann::json* meta = nullptr);

}  // namespace juap
