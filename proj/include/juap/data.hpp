#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "juap/common.hpp"
#include "juap/config.hpp"

namespace juap {

/// Images with labels. Pixels are float32 [N, C, H, W] in [0, 1]; labels int64 [N].
struct ImageBatch {
  torch::Tensor pixels;
  torch::Tensor labels;

  int64_t size() const { return pixels.defined() ? pixels.size(0) : 0; }
  ImageBatch slice(int64_t begin, int64_t end) const;
  ImageBatch select(const torch::Tensor& index) const;
};

/// One side of a train/test split. `indices` are positions in the sorted file list.
struct Split {
  ImageBatch data;
  std::vector<int64_t> indices;

  int64_t size() const { return data.size(); }
};

struct DatasetManifest {
  std::string name = "dataset";
  fs::path root_path;
  /// 0 means "infer from the directory layout".
  int64_t num_classes = 0;
  int64_t image_height = 32;
  int64_t image_width = 32;
  int64_t channels = 3;
  double train_fraction = 0.8;
  double test_fraction = 0.2;
  uint64_t seed = 0;
  /// Only "class-directories" is supported: `root/<class name>/<image>`.
  std::string layout = "class-directories";

  void validate() const;

  /// Reads `dataset.*` keys. Relative root paths resolve against `base_dir`.
  static DatasetManifest from_config(const Config& cfg, const fs::path& base_dir = {});
};

struct Dataset {
  Split train;
  Split test;
  std::vector<std::string> class_names;
  int64_t num_classes = 0;
};

Dataset load_dataset(const DatasetManifest& manifest);

/// Persists `{"train": [...], "test": [...]}` for reproducibility audits.
void save_split_indices(const fs::path& path, const Dataset& dataset);

struct AugmentConfig {
  bool random_crop = false;
  int64_t crop_padding = 4;
  bool horizontal_flip = false;
  double flip_probability = 0.5;

  void validate() const;
};

/// Random crop (zero padding) and horizontal flip, drawn independently per image.
ImageBatch augment(const ImageBatch& batch, const AugmentConfig& cfg, uint64_t seed);

/// Deterministic minibatch schedule: batch `step` is a pure function of
/// (split, batch_size, seed, step), so a run can resume at any step.
class BatchStream {
 public:
  BatchStream(const Split& split, int64_t batch_size, uint64_t seed);

  int64_t batches_per_epoch() const { return batches_per_epoch_; }
  ImageBatch batch(int64_t step) const;

 private:
  const Split* split_;
  int64_t batch_size_;
  uint64_t seed_;
  int64_t batches_per_epoch_;
};

/// Six-class synthetic shapes set: disk, square, triangle, plus, ring, bars.
struct SyntheticShapesSpec {
  int64_t images_per_class = 200;
  int64_t image_size = 32;
  uint64_t seed = 0;
};

const std::vector<std::string>& synthetic_class_names();

/// Renders the set in memory (labels in class order, images interleaved by class).
ImageBatch make_synthetic_shapes(const SyntheticShapesSpec& spec);

/// Writes the set as `root/<class>/<index>.png` plus a `manifest.cfg` next to it.
void write_synthetic_shapes(const fs::path& root, const SyntheticShapesSpec& spec);

}  // namespace juap
