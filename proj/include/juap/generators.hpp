#pragma once

#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "juap/common.hpp"

namespace juap {

enum class NormKind { L2, LInf };

std::string to_string(NormKind p);
NormKind parse_norm_kind(const std::string& tag);

/// ||t||_p over all elements, accumulated in double precision.
double norm_of(const torch::Tensor& t, NormKind p);
/// Same, per leading-dimension slice: [N, ...] -> [N].
torch::Tensor batched_norm(const torch::Tensor& t, NormKind p);

/// Budget rescaled for desk resolution. L-inf keeps its per-pixel meaning
/// (10 / 255). L2 keeps per-pixel energy: 2000 / 255 * sqrt(HW / 224^2).
double default_zeta(NormKind p, int64_t height, int64_t width);

enum class GeneratorArch { ResidualGen, UNetGen };

std::string to_string(GeneratorArch arch);
GeneratorArch parse_generator_arch(const std::string& tag);

struct GeneratorSpec {
  GeneratorArch arch = GeneratorArch::ResidualGen;
  int64_t channels = 3;
  int64_t height = 32;
  int64_t width = 32;
  int64_t base_width = 32;

  nlohmann::json to_json() const;
  static GeneratorSpec from_json(const nlohmann::json& j);
};

/// Noise-to-perturbation network; raw output in [-1, 1] (tanh), same shape as input.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec);
  /// [C, H, W] or [1, C, H, W] in, same rank out.
  torch::Tensor forward(const torch::Tensor& noise);
  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorSpec spec_;
  std::shared_ptr<torch::nn::Module> net_;
};
TORCH_MODULE(Generator);

Generator make_generator(const GeneratorSpec& spec, uint64_t seed);

/// n ~ U(0, 1), deterministic per seed.
torch::Tensor sample_noise(const std::vector<int64_t>& shape, uint64_t seed);

/// min(1, zeta / ||g||_p) * g, differentiable in g. A zero-norm input returns
/// zeros. Float rounding is corrected so the result never exceeds zeta.
torch::Tensor scale_to_budget(const torch::Tensor& raw, NormKind p, double zeta);

/// Projection onto the zeta-ball (per image when `batched`).
torch::Tensor project_to_ball(const torch::Tensor& t, NormKind p, double zeta, bool batched = false);

struct Perturbation {
  torch::Tensor values;  // [C, H, W] universal, or [N, C, H, W] per image
  NormKind p = NormKind::L2;
  double zeta = 0.0;
  double achieved_norm = 0.0;  // max over images for per-image perturbations
  nlohmann::json meta = nlohmann::json::object();

  bool per_image() const { return values.dim() == 4; }
  static Perturbation zeros(const std::vector<int64_t>& shape, NormKind p, double zeta);
};

Perturbation generate_perturbation(Generator& gen, const torch::Tensor& noise, NormKind p, double zeta);

/// x_hat = clamp(x + n_hat, 0, 1). A [C, H, W] perturbation is broadcast over the batch.
torch::Tensor apply_perturbation(const torch::Tensor& pixels, const torch::Tensor& perturbation);

/// Raw float array at `path` plus `path`.json sidecar {p, zeta, achieved_norm, ...meta}.
void save_perturbation(const fs::path& path, const Perturbation& pert);
Perturbation load_perturbation(const fs::path& path);
/// Writes 0.5 + a * n_hat (a = 0.5 / max|n_hat|) as PNG; returns a.
double export_perturbation_png(const fs::path& path, const Perturbation& pert);

void save_generator(const fs::path& path, Generator& gen, const nlohmann::json& meta);
Generator load_generator(const fs::path& path, nlohmann::json* meta = nullptr);

}  // namespace juap
