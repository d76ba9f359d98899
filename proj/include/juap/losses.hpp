#pragma once

#include <optional>
#include <string>

#include <torch/torch.h>

namespace juap {

enum class ObjectiveKind {
  MaximizeCe,   // -log(CE(f(x_hat), C_x))
  LeastLikely,  // log(CE(f(x_hat), C_min)), C_min from benign logits
  Targeted,     // log(CE(f(x_hat), C_t))
};

std::string to_string(ObjectiveKind kind);
ObjectiveKind parse_objective_kind(const std::string& tag);

/// Floor applied to the batch cross-entropy before taking its log.
inline constexpr double kCrossEntropyFloor = 1e-12;

/// Per-image least-likely class: argmin over benign logits.
torch::Tensor least_likely_classes(const torch::Tensor& benign_logits);

/// Classifier-attack loss on adversarial logits [N, k]. `targets` holds C_x,
/// C_min or C_t depending on `kind`. CE is the batch mean.
torch::Tensor classifier_loss(ObjectiveKind kind, const torch::Tensor& logits, const torch::Tensor& targets);

/// Mean over images of ||map_adv - map_benign||_2. The benign map is treated as a constant.
torch::Tensor interpreter_loss(const torch::Tensor& map_adv, const torch::Tensor& map_benign);

/// Mean over images of ||e(x_hat) - e(x)||_2 on RTS encoder embeddings.
torch::Tensor rts_encoder_loss(const torch::Tensor& embedding_adv, const torch::Tensor& embedding_benign);

/// max(L_cls, delta) + lambda * L_int. Below delta the classifier term is the
/// constant delta and contributes no gradient.
torch::Tensor joint_loss(const torch::Tensor& classifier_term, const torch::Tensor& interpreter_term, double lambda,
                         double delta);

}  // namespace juap
