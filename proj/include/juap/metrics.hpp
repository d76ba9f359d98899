#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "juap/attack.hpp"
#include "juap/interpreters.hpp"

namespace juap {

/// Fraction of images whose adversarial prediction differs from the benign one.
double fooling_ratio(const torch::Tensor& benign_pred, const torch::Tensor& adv_pred);
double fooling_ratio(Classifier& classifier, const torch::Tensor& images, const Perturbation& pert);

/// Per-image mean absolute difference of two map stacks [N, H, W] -> [N].
torch::Tensor l1_per_image(const torch::Tensor& map_benign, const torch::Tensor& map_adv);
/// Mean over pixels, then over images.
double l1_discrepancy(const torch::Tensor& map_benign, const torch::Tensor& map_adv);

/// |A and B| / |A or B| over all elements; 1.0 when both masks are empty.
double iou_score(const torch::Tensor& mask_a, const torch::Tensor& mask_b);
torch::Tensor iou_per_image(const torch::Tensor& masks_a, const torch::Tensor& masks_b);

struct ImageRecord {
  int64_t index = 0;
  int64_t label = 0;
  int64_t benign_pred = 0;
  int64_t adv_pred = 0;
  double l1 = 0.0;
  double iou = 0.0;
};

struct EvalReport {
  std::string attack_id;
  std::string classifier_id;
  std::string interpreter;
  std::string dataset;
  std::string model;
  double fooling_ratio = 0.0;
  double l1_mean = 0.0;
  double iou_mean = 0.0;
  /// Images that entered the L1/IOU means (all, or the fooled ones only).
  int64_t discrepancy_count = 0;
  std::vector<ImageRecord> records;
  nlohmann::json config = nlohmann::json::object();
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// Throws InputError if a metric is out of bounds.
  void validate() const;
};

struct EvalOptions {
  ThresholdRule threshold;
  /// Average L1/IOU over fooled images only.
  bool fooled_only = false;
  int64_t chunk = 100;
};

/// FR, L1 and IOU over `images`. `pert` is universal [C,H,W] or per-image [N,C,H,W].
/// Maps explain the benign prediction for both benign and adversarial inputs.
EvalReport evaluate_attack(Interpreter& interpreter, const ImageBatch& images, const Perturbation& pert,
                           const EvalOptions& options = {});

/// Area under the ROC curve of a "score above threshold" detector that flags
/// `positives` against `negatives` (Mann-Whitney statistic, ties count 1/2).
double roc_auc(const std::vector<double>& positives, const std::vector<double>& negatives);

struct DetectionRow {
  std::string set_name;
  int64_t count = 0;
  double l1_mean = 0.0;
  double l1_std = 0.0;
  double iou_mean = 0.0;
  double auc_l1 = 0.0;
  double auc_iou = 0.0;
  std::vector<double> l1_scores;
};

struct DetectionGapTable {
  DetectionRow reference;
  std::vector<DetectionRow> rows;

  std::string to_csv() const;
  const DetectionRow& row(const std::string& name) const;
};

struct DetectionOptions {
  ThresholdRule threshold;
  uint64_t seed = 0;
  /// Benign arrivals carry random sign noise of this L-inf magnitude.
  double benign_noise = 10.0 / 255.0;
};

/// Scores each image by the discrepancy between its interpretation and the
/// interpretation of its clean original. Benign arrivals carry random noise
/// (the reference set); each adversarial set is compared against it by AUC.
DetectionGapTable detection_gap_experiment(Interpreter& interpreter, const torch::Tensor& benign_images,
                                           const std::vector<std::pair<std::string, Perturbation>>& adversarial_sets,
                                           const DetectionOptions& options = {});

/// Discrepancy scores of `images + pert` against `images` (L1 and IOU per image).
std::pair<std::vector<double>, std::vector<double>> discrepancy_scores(Interpreter& interpreter,
                                                                       const torch::Tensor& images,
                                                                       const torch::Tensor& pert,
                                                                       const ThresholdRule& threshold);

/// Minimal CSV writer (fields containing , or " are quoted).
std::string to_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

}  // namespace juap
