#include "juap/losses.hpp"

#include "juap/common.hpp"

namespace juap {

std::string to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::MaximizeCe:
      return "maximize-ce";
    case ObjectiveKind::LeastLikely:
      return "least-likely";
    default:
      return "targeted";
  }
}

ObjectiveKind parse_objective_kind(const std::string& tag) {
  if (tag == "maximize-ce" || tag == "ce") return ObjectiveKind::MaximizeCe;
  if (tag == "least-likely" || tag == "cmin") return ObjectiveKind::LeastLikely;
  if (tag == "targeted" || tag == "ct") return ObjectiveKind::Targeted;
  throw InputError("unknown objective kind: " + tag);
}

torch::Tensor least_likely_classes(const torch::Tensor& benign_logits) {
  return benign_logits.detach().argmin(1);
}

torch::Tensor classifier_loss(ObjectiveKind kind, const torch::Tensor& logits, const torch::Tensor& targets) {
  if (logits.dim() != 2 || targets.dim() != 1 || targets.size(0) != logits.size(0)) {
    throw InputError("classifier_loss expects logits [N, k] and targets [N]");
  }
  auto ce = torch::nn::functional::cross_entropy(logits, targets.to(torch::kInt64)).clamp_min(kCrossEntropyFloor);
  return kind == ObjectiveKind::MaximizeCe ? -torch::log(ce) : torch::log(ce);
}

torch::Tensor interpreter_loss(const torch::Tensor& map_adv, const torch::Tensor& map_benign) {
  if (map_adv.sizes() != map_benign.sizes()) throw InputError("interpreter_loss: map shapes differ");
  auto diff = (map_adv - map_benign.detach()).flatten(1);
  return torch::linalg_vector_norm(diff, 2, {1}, false, std::nullopt).mean();
}

torch::Tensor rts_encoder_loss(const torch::Tensor& embedding_adv, const torch::Tensor& embedding_benign) {
  if (embedding_adv.sizes() != embedding_benign.sizes()) throw InputError("rts_encoder_loss: embedding shapes differ");
  auto diff = (embedding_adv - embedding_benign.detach()).flatten(1);
  return torch::linalg_vector_norm(diff, 2, {1}, false, std::nullopt).mean();
}

torch::Tensor joint_loss(const torch::Tensor& classifier_term, const torch::Tensor& interpreter_term, double lambda,
                         double delta) {
  auto floor = torch::full_like(classifier_term, delta);
  return torch::maximum(classifier_term, floor) + lambda * interpreter_term;
}

}  // namespace juap
