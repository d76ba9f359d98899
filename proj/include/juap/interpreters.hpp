#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "juap/classifier.hpp"

namespace juap {

enum class InterpreterKind { Cam, GradCam, Rts };

std::string to_string(InterpreterKind kind);
InterpreterKind parse_interpreter_kind(const std::string& tag);

/// Post-processed attribution maps: values [N, H, W] in [0, 1], per-image max 1
/// unless the raw map was identically zero.
struct AttributionMap {
  torch::Tensor values;
  InterpreterKind kind = InterpreterKind::Cam;
  torch::Tensor class_index;
};

/// Shared map pipeline: clamp negatives, bilinear upsample to (H, W), divide by
/// the per-image max. Differentiable; idempotent on its own output.
torch::Tensor postprocess_maps(const torch::Tensor& raw, int64_t height, int64_t width);

/// Class explained per image: the given classes, or the model's prediction.
torch::Tensor select_classes(Classifier& model, const torch::Tensor& pixels,
                             const std::optional<torch::Tensor>& classes);

/// Raw CAM: sum_k W[c, k] * A[k, i, j].
torch::Tensor cam_raw(Classifier& model, const torch::Tensor& pixels, const torch::Tensor& classes);

/// Raw GradCAM with weights (1/V) sum_ij d f_c / d A[k, i, j]. With
/// `create_graph` the result stays differentiable (double backward).
torch::Tensor gradcam_raw(Classifier& model, const torch::Tensor& pixels, const torch::Tensor& classes,
                          bool create_graph);

AttributionMap cam_attribution(Classifier& model, const torch::Tensor& pixels,
                               const std::optional<torch::Tensor>& classes = std::nullopt);
AttributionMap gradcam_attribution(Classifier& model, const torch::Tensor& pixels,
                                   const std::optional<torch::Tensor>& classes = std::nullopt);

// --- RTS --------------------------------------------------------------------

struct RtsSpec {
  int64_t in_channels = 3;
  int64_t image_height = 32;
  int64_t image_width = 32;
  int64_t base_width = 16;
  /// Class count of the classifier the model was trained against.
  int64_t num_classes = 6;

  nlohmann::json to_json() const;
  static RtsSpec from_json(const nlohmann::json& j);
};

/// Saliency mask network: encoder e(x) followed by a decoder ending in a sigmoid.
class RtsModelImpl : public torch::nn::Module {
 public:
  explicit RtsModelImpl(RtsSpec spec);

  torch::Tensor encode(const torch::Tensor& x);
  /// Mask [N, H, W] in [0, 1].
  torch::Tensor forward(const torch::Tensor& x);

  const RtsSpec& spec() const { return spec_; }

 private:
  RtsSpec spec_;
  torch::nn::Conv2d enc1_{nullptr}, enc2_{nullptr}, enc3_{nullptr};
  torch::nn::Conv2d dec1_{nullptr}, dec2_{nullptr}, out_{nullptr};
};
TORCH_MODULE(RtsModel);

enum class BlendBackground { Blur, UniformNoise };

struct RtsTrainConfig {
  double lambda_tv = 1.0;
  double lambda_av = 1.0;
  double lambda_keep = 1.0;  // weight of the destroyed-region term (lambda_3)
  double lambda_power = 1.0;  // exponent on the destroyed-region probability (lambda_4)
  BlendBackground background = BlendBackground::Blur;
  double learning_rate = 1e-3;
  int64_t batch_size = 64;
  int64_t epochs = 10;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct RtsTrainRecord {
  std::vector<double> epoch_losses;
};

/// Background used by the blend: a blurred copy, or seeded uniform noise.
torch::Tensor blend_background(const torch::Tensor& x, BlendBackground kind, uint64_t seed);

/// phi(x, m) = m * x + (1 - m) * background; `mask` is [N, H, W] or [N, 1, H, W].
torch::Tensor blend(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& background);

/// Per-batch RTS objective (mean over images).
torch::Tensor rts_objective(Classifier& classifier, const torch::Tensor& x, const torch::Tensor& mask,
                            const torch::Tensor& classes, const torch::Tensor& background,
                            const RtsTrainConfig& cfg);

RtsModel train_rts(Classifier& classifier, const Split& train, const RtsTrainConfig& cfg,
                   RtsTrainRecord* record = nullptr);

AttributionMap rts_attribution(RtsModel& rts, const torch::Tensor& pixels);

void save_rts(const fs::path& path, RtsModel& model, const nlohmann::json& meta);
RtsModel load_rts(const fs::path& path, nlohmann::json* meta = nullptr);

// --- interpreter bundle --------------------------------------------------------

struct MapsAndLogits {
  torch::Tensor maps;       // post-processed [N, H, W]
  torch::Tensor logits;     // classifier logits [N, k]
  torch::Tensor embedding;  // RTS encoder output when requested
};

/// A classifier plus the interpreter used to explain it.
struct Interpreter {
  InterpreterKind kind = InterpreterKind::Cam;
  Classifier classifier{nullptr};
  RtsModel rts{nullptr};

  /// Post-processed maps [N, H, W]. `differentiable` keeps the graph back to
  /// `pixels` (GradCAM then uses double backward).
  torch::Tensor maps(const torch::Tensor& pixels, const torch::Tensor& classes, bool differentiable);
  AttributionMap explain(const torch::Tensor& pixels, const std::optional<torch::Tensor>& classes = std::nullopt);

  /// Maps and logits from one classifier forward pass (CAM/GradCAM).
  MapsAndLogits maps_and_logits(const torch::Tensor& pixels, const torch::Tensor& classes, bool differentiable,
                                bool want_embedding = false);
};

// --- binarization ---------------------------------------------------------------

struct ThresholdRule {
  enum class Kind { Percentile, Fixed };
  Kind kind = Kind::Percentile;
  /// Percentile: keep the top (1 - value) fraction of pixels. Fixed: keep map >= value.
  double value = 0.8;

  static ThresholdRule top_fraction(double fraction) { return {Kind::Percentile, 1.0 - fraction}; }
  static ThresholdRule fixed(double threshold) { return {Kind::Fixed, threshold}; }
};

/// Boolean masks [N, H, W]. Zero-valued pixels are never selected.
torch::Tensor binarize(const torch::Tensor& maps, const ThresholdRule& rule = {});

/// Exports one [H, W] map as an 8-bit grayscale PNG.
void export_map_png(const fs::path& path, const torch::Tensor& map);

}  // namespace juap
