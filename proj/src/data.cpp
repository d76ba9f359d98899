#include "juap/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "juap/image_io.hpp"

namespace juap {

namespace {

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit_uniform(rng); }

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

torch::Tensor conform(torch::Tensor img, const DatasetManifest& m, const fs::path& source) {
  if (img.size(0) == 1 && m.channels == 3) img = img.repeat({3, 1, 1});
  if (img.size(0) == 3 && m.channels == 1) img = img.mean(0, true);
  if (img.size(0) != m.channels) {
    throw InputError("unexpected channel count in " + source.string());
  }
  if (img.size(1) != m.image_height || img.size(2) != m.image_width) {
    img = torch::nn::functional::interpolate(
              img.unsqueeze(0), torch::nn::functional::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{m.image_height, m.image_width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false))
              .squeeze(0)
              .clamp(0.0, 1.0);
  }
  return img;
}

Split gather(const std::vector<torch::Tensor>& images, const std::vector<int64_t>& labels,
             std::vector<int64_t> idx) {
  std::sort(idx.begin(), idx.end());
  Split s;
  s.indices = idx;
  std::vector<torch::Tensor> imgs;
  std::vector<int64_t> labs;
  imgs.reserve(idx.size());
  for (auto i : idx) {
    imgs.push_back(images[static_cast<size_t>(i)]);
    labs.push_back(labels[static_cast<size_t>(i)]);
  }
  if (imgs.empty()) {
    const auto& ref = images.front();
    s.data.pixels = torch::empty({0, ref.size(0), ref.size(1), ref.size(2)});
  } else {
    s.data.pixels = torch::stack(imgs);
  }
  s.data.labels = torch::tensor(labs, torch::kInt64);
  return s;
}

}  // namespace

ImageBatch ImageBatch::slice(int64_t begin, int64_t end) const {
  return {pixels.slice(0, begin, end), labels.slice(0, begin, end)};
}

ImageBatch ImageBatch::select(const torch::Tensor& index) const {
  return {pixels.index_select(0, index), labels.index_select(0, index)};
}

void DatasetManifest::validate() const {
  if (train_fraction < 0 || test_fraction < 0) throw InputError("split fractions must be non-negative");
  if (train_fraction + test_fraction > 1.0 + 1e-12) {
    throw InputError("split fractions sum to more than 1.0");
  }
  if (image_height <= 0 || image_width <= 0) throw InputError("image size must be positive");
  if (channels != 1 && channels != 3) throw InputError("channels must be 1 or 3");
  if (num_classes < 0) throw InputError("num_classes must be non-negative");
  if (layout != "class-directories") throw InputError("unsupported dataset layout: " + layout);
}

DatasetManifest DatasetManifest::from_config(const Config& cfg, const fs::path& base_dir) {
  DatasetManifest m;
  m.name = cfg.get_string("dataset.name", m.name);
  fs::path root = cfg.get_string("dataset.root_path");
  if (root.is_relative() && !base_dir.empty()) root = base_dir / root;
  m.root_path = root;
  m.num_classes = cfg.get_int("dataset.num_classes", 0);
  if (auto size = cfg.find("dataset.image_size")) {
    int64_t h = 0, w = 0;
    char x = 0;
    std::istringstream in(*size);
    if (!(in >> h)) throw InputError("dataset.image_size must look like 32 or 32x32");
    if (in >> x >> w) {
      if (x != 'x') throw InputError("dataset.image_size must look like 32 or 32x32");
    } else {
      w = h;
    }
    m.image_height = h;
    m.image_width = w;
  }
  m.channels = cfg.get_int("dataset.channels", m.channels);
  m.train_fraction = cfg.get_double("dataset.train_fraction", m.train_fraction);
  m.test_fraction = cfg.get_double("dataset.test_fraction", m.test_fraction);
  m.seed = static_cast<uint64_t>(cfg.get_int("dataset.seed", 0));
  m.layout = cfg.get_string("dataset.layout", m.layout);
  m.validate();
  return m;
}

Dataset load_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  if (!fs::is_directory(manifest.root_path)) {
    throw InputError("dataset root not found: " + manifest.root_path.string());
  }
  Dataset ds;
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(manifest.root_path)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw InputError("no class directories under " + manifest.root_path.string());

  const int64_t k = manifest.num_classes > 0 ? manifest.num_classes : static_cast<int64_t>(class_dirs.size());
  if (static_cast<int64_t>(class_dirs.size()) > k) {
    throw InputError("label out of range: found " + std::to_string(class_dirs.size()) +
                     " class directories but num_classes = " + std::to_string(k));
  }
  if (k < 2) throw InputError("a classification dataset needs at least 2 classes");

  std::vector<torch::Tensor> images;
  std::vector<int64_t> labels;
  for (size_t c = 0; c < class_dirs.size(); ++c) {
    ds.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      images.push_back(conform(read_image(f), manifest, f));
      labels.push_back(static_cast<int64_t>(c));
    }
  }
  if (images.empty()) throw InputError("dataset contains no images: " + manifest.root_path.string());
  ds.num_classes = k;

  const auto n = static_cast<int64_t>(images.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(manifest.seed, "split"));
  for (int64_t i = n - 1; i > 0; --i) {
    auto j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const auto n_train = static_cast<int64_t>(std::floor(manifest.train_fraction * n + 1e-9));
  const auto n_test = std::min(n - n_train, static_cast<int64_t>(std::floor(manifest.test_fraction * n + 1e-9)));
  ds.train = gather(images, labels, {order.begin(), order.begin() + n_train});
  ds.test = gather(images, labels, {order.begin() + n_train, order.begin() + n_train + n_test});
  return ds;
}

void save_split_indices(const fs::path& path, const Dataset& dataset) {
  nlohmann::json j;
  j["train"] = dataset.train.indices;
  j["test"] = dataset.test.indices;
  j["class_names"] = dataset.class_names;
  write_file_atomic(path, j.dump(2) + "\n");
}

void AugmentConfig::validate() const {
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    throw InputError("flip probability must lie in [0, 1]");
  }
  if (crop_padding < 0) throw InputError("crop padding must be non-negative");
}

ImageBatch augment(const ImageBatch& batch, const AugmentConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (!cfg.random_crop && !cfg.horizontal_flip) return batch;
  std::mt19937_64 rng(derive_seed(seed, "augment"));
  auto out = batch.pixels.clone();
  const int64_t h = out.size(2), w = out.size(3), pad = cfg.crop_padding;
  for (int64_t i = 0; i < out.size(0); ++i) {
    auto img = out[i];
    if (cfg.random_crop && pad > 0) {
      auto padded = torch::constant_pad_nd(img, {pad, pad, pad, pad}, 0.0);
      const auto oy = static_cast<int64_t>(rng() % static_cast<uint64_t>(2 * pad + 1));
      const auto ox = static_cast<int64_t>(rng() % static_cast<uint64_t>(2 * pad + 1));
      img = padded.slice(1, oy, oy + h).slice(2, ox, ox + w);
    }
    if (cfg.horizontal_flip && unit_uniform(rng) < cfg.flip_probability) img = img.flip({2});
    out[i].copy_(img);
  }
  return {out, batch.labels};
}

BatchStream::BatchStream(const Split& split, int64_t batch_size, uint64_t seed)
    : split_(&split), batch_size_(batch_size), seed_(seed) {
  if (batch_size <= 0) throw InputError("batch size must be positive");
  if (split.size() == 0) throw InputError("cannot stream batches from an empty split");
  batches_per_epoch_ = (split.size() + batch_size - 1) / batch_size;
}

ImageBatch BatchStream::batch(int64_t step) const {
  const int64_t epoch = step / batches_per_epoch_;
  const int64_t within = step % batches_per_epoch_;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed_, "epoch", static_cast<uint64_t>(epoch)));
  auto perm = torch::randperm(split_->size(), gen, torch::kInt64);
  const int64_t begin = within * batch_size_;
  const int64_t end = std::min(begin + batch_size_, split_->size());
  return split_->data.select(perm.slice(0, begin, end));
}

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"0_disk", "1_square", "2_triangle", "3_plus", "4_ring", "5_bars"};
  return names;
}

namespace {

bool inside(int64_t shape, double dx, double dy) {
  const double r2 = dx * dx + dy * dy;
  switch (shape) {
    case 0:
      return r2 <= 1.0;
    case 1:
      return std::max(std::abs(dx), std::abs(dy)) <= 0.8;
    case 2:
      return dy <= 0.75 && dy >= -1.0 && std::abs(dx) <= (dy + 1.0) * 0.95 / 1.75;
    case 3:
      return (std::abs(dx) <= 0.3 && std::abs(dy) <= 1.0) || (std::abs(dy) <= 0.3 && std::abs(dx) <= 1.0);
    case 4:
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    default:
      return std::abs(dx) <= 1.0 && (std::abs(dy - 0.5) <= 0.22 || std::abs(dy + 0.5) <= 0.22);
  }
}

}  // namespace

ImageBatch make_synthetic_shapes(const SyntheticShapesSpec& spec) {
  const int64_t k = static_cast<int64_t>(synthetic_class_names().size());
  const int64_t n = spec.images_per_class * k;
  const int64_t s = spec.image_size;
  auto pixels = torch::empty({n, 3, s, s});
  auto labels = torch::empty({n}, torch::kInt64);
  auto acc = pixels.accessor<float, 4>();
  std::mt19937_64 rng(derive_seed(spec.seed, "synthetic-shapes"));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t shape = i % k;
    labels[i] = shape;
    double bg[3], fg[3], grad[3];
    const double sign = unit_uniform(rng) < 0.5 ? -1.0 : 1.0;
    for (int c = 0; c < 3; ++c) {
      bg[c] = uniform(rng, 0.25, 0.75);
      fg[c] = std::clamp(bg[c] + sign * uniform(rng, 0.15, 0.35), 0.0, 1.0);
      grad[c] = uniform(rng, -0.12, 0.12);
    }
    const double gangle = uniform(rng, 0.0, 2.0 * M_PI);
    const double radius = uniform(rng, 0.2, 0.3) * static_cast<double>(s);
    const double margin = radius + 1.0;
    const double cx = uniform(rng, margin, static_cast<double>(s) - margin);
    const double cy = uniform(rng, margin, static_cast<double>(s) - margin);
    const double rot = uniform(rng, -0.35, 0.35);
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
            const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
            const double dx = (cr * px + sr * py) / radius;
            const double dy = (-sr * px + cr * py) / radius;
            hits += inside(shape, dx, dy) ? 1 : 0;
          }
        }
        const double cov = hits / 4.0;
        const double ramp = (std::cos(gangle) * x + std::sin(gangle) * y) / static_cast<double>(s) - 0.5;
        for (int c = 0; c < 3; ++c) {
          const double noise = uniform(rng, -0.06, 0.06);
          const double v = (bg[c] + grad[c] * ramp) * (1.0 - cov) + fg[c] * cov + noise;
          acc[i][c][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return {pixels, labels};
}

void write_synthetic_shapes(const fs::path& root, const SyntheticShapesSpec& spec) {
  const auto batch = make_synthetic_shapes(spec);
  const auto& names = synthetic_class_names();
  std::vector<int64_t> counters(names.size(), 0);
  for (int64_t i = 0; i < batch.size(); ++i) {
    const auto label = batch.labels[i].item<int64_t>();
    char file[32];
    std::snprintf(file, sizeof(file), "%05lld.png", static_cast<long long>(counters[static_cast<size_t>(label)]++));
    write_png(root / names[static_cast<size_t>(label)] / file, batch.pixels[i]);
  }
  std::ostringstream manifest;
  manifest << "# synthetic shapes, seed " << spec.seed << "\n"
           << "[dataset]\n"
           << "name = synthetic-shapes\n"
           << "root_path = .\n"
           << "num_classes = " << names.size() << "\n"
           << "image_size = " << spec.image_size << "x" << spec.image_size << "\n"
           << "channels = 3\n"
           << "train_fraction = 0.8\n"
           << "test_fraction = 0.2\n"
           << "seed = " << spec.seed << "\n";
  write_file_atomic(root / "manifest.cfg", manifest.str());
}

}  // namespace juap
