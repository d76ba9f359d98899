#include "juap/generators.hpp"

#include <cmath>
#include <iostream>

#include "juap/image_io.hpp"

namespace juap {

namespace nn = torch::nn;

std::string to_string(NormKind p) { return p == NormKind::L2 ? "2" : "inf"; }

NormKind parse_norm_kind(const std::string& tag) {
  if (tag == "2" || tag == "l2" || tag == "L2") return NormKind::L2;
  if (tag == "inf" || tag == "linf" || tag == "Linf" || tag == "infinity") return NormKind::LInf;
  throw InputError("unknown norm: " + tag + " (expected 2 or inf)");
}

double norm_of(const torch::Tensor& t, NormKind p) {
  auto d = t.detach().to(torch::kFloat64);
  if (d.numel() == 0) return 0.0;
  return p == NormKind::L2 ? d.pow(2).sum().sqrt().item<double>() : d.abs().max().item<double>();
}

torch::Tensor batched_norm(const torch::Tensor& t, NormKind p) {
  auto flat = t.flatten(1);
  return p == NormKind::L2 ? flat.pow(2).sum(1).sqrt() : std::get<0>(flat.abs().max(1));
}

double default_zeta(NormKind p, int64_t height, int64_t width) {
  if (p == NormKind::LInf) return 10.0 / 255.0;
  return 2000.0 / 255.0 * std::sqrt(static_cast<double>(height * width) / (224.0 * 224.0));
}

std::string to_string(GeneratorArch arch) { return arch == GeneratorArch::ResidualGen ? "residual-gen" : "unet-gen"; }

GeneratorArch parse_generator_arch(const std::string& tag) {
  if (tag == "residual-gen") return GeneratorArch::ResidualGen;
  if (tag == "unet-gen") return GeneratorArch::UNetGen;
  throw InputError("unknown generator architecture: " + tag);
}

nlohmann::json GeneratorSpec::to_json() const {
  return {{"architecture_tag", juap::to_string(arch)},
          {"shape", {channels, height, width}},
          {"base_width", base_width}};
}

GeneratorSpec GeneratorSpec::from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  s.arch = parse_generator_arch(j.at("architecture_tag").get<std::string>());
  s.channels = j.at("shape").at(0).get<int64_t>();
  s.height = j.at("shape").at(1).get<int64_t>();
  s.width = j.at("shape").at(2).get<int64_t>();
  s.base_width = j.at("base_width").get<int64_t>();
  return s;
}

namespace {

struct Net : nn::Module {
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
};

nn::Conv2dOptions conv_opts(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2);
}

nn::InstanceNorm2d inorm(int64_t c) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c).affine(true)); }

struct ResBlockHolderImpl : nn::Module {
  explicit ResBlockHolderImpl(int64_t c) {
    body = register_module("body", nn::Sequential(nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(c, c, 3)),
                                                  inorm(c), nn::ReLU(), nn::ReflectionPad2d(1),
                                                  nn::Conv2d(nn::Conv2dOptions(c, c, 3)), inorm(c)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }
  nn::Sequential body{nullptr};
};
TORCH_MODULE(ResBlockHolder);

/// c7s1-w, d2w, d4w, 4 x R4w, u2w, uw, c7s1-C, tanh.
struct ResidualNet : Net {
  explicit ResidualNet(const GeneratorSpec& s) {
    const int64_t w = s.base_width;
    seq = register_module("seq", nn::Sequential());
    seq->push_back(nn::ReflectionPad2d(3));
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(s.channels, w, 7)));
    seq->push_back(inorm(w));
    seq->push_back(nn::ReLU());
    seq->push_back(nn::Conv2d(conv_opts(w, 2 * w, 3, 2)));
    seq->push_back(inorm(2 * w));
    seq->push_back(nn::ReLU());
    seq->push_back(nn::Conv2d(conv_opts(2 * w, 4 * w, 3, 2)));
    seq->push_back(inorm(4 * w));
    seq->push_back(nn::ReLU());
    for (int i = 0; i < 4; ++i) seq->push_back(ResBlockHolder(4 * w));
    seq->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(4 * w, 2 * w, 3).stride(2).padding(1).output_padding(1)));
    seq->push_back(inorm(2 * w));
    seq->push_back(nn::ReLU());
    seq->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * w, w, 3).stride(2).padding(1).output_padding(1)));
    seq->push_back(inorm(w));
    seq->push_back(nn::ReLU());
    seq->push_back(nn::ReflectionPad2d(3));
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(w, s.channels, 7)));
  }
  torch::Tensor forward(const torch::Tensor& x) override { return torch::tanh(seq->forward(x)); }
  nn::Sequential seq{nullptr};
};

/// Five stride-2 encoder convs and mirrored upsampling with skip connections.
struct UNet : Net {
  explicit UNet(const GeneratorSpec& s) {
    const int64_t w = s.base_width;
    const std::vector<int64_t> widths = {w, 2 * w, 4 * w, 8 * w, 8 * w};
    int64_t in = s.channels;
    for (size_t i = 0; i < widths.size(); ++i) {
      down.push_back(register_module("down" + std::to_string(i),
                                     nn::Conv2d(nn::Conv2dOptions(in, widths[i], 4).stride(2).padding(1))));
      in = widths[i];
    }
    // up[i] maps level i+1 back to level i's resolution.
    for (int i = static_cast<int>(widths.size()) - 1; i >= 0; --i) {
      const int64_t from = (i == static_cast<int>(widths.size()) - 1) ? widths[i] : 2 * widths[i];
      const int64_t to = i == 0 ? w : widths[i - 1];
      up.insert(up.begin(), register_module("up" + std::to_string(i),
                                            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(from, to, 4).stride(2).padding(1))));
    }
    out = register_module("out", nn::Conv2d(nn::Conv2dOptions(w + s.channels, s.channels, 3).padding(1)));
  }
  torch::Tensor forward(const torch::Tensor& x) override {
    std::vector<torch::Tensor> skips;
    auto h = x;
    for (auto& d : down) {
      skips.push_back(h);
      h = torch::leaky_relu(d->forward(h), 0.2);
    }
    for (int i = static_cast<int>(up.size()) - 1; i >= 0; --i) {
      h = torch::relu(up[static_cast<size_t>(i)]->forward(h));
      h = torch::cat({h, skips[static_cast<size_t>(i)]}, 1);
    }
    return torch::tanh(out->forward(h));
  }
  std::vector<nn::Conv2d> down;
  std::vector<nn::ConvTranspose2d> up;
  nn::Conv2d out{nullptr};
};

}  // namespace

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(spec) {
  if (spec_.arch == GeneratorArch::UNetGen && (spec_.height % 32 != 0 || spec_.width % 32 != 0)) {
    throw InputError("unet-gen needs image sides divisible by 32");
  }
  if (spec_.arch == GeneratorArch::ResidualGen && (spec_.height % 4 != 0 || spec_.width % 4 != 0)) {
    throw InputError("residual-gen needs image sides divisible by 4");
  }
  if (spec_.arch == GeneratorArch::ResidualGen) {
    net_ = register_module("net", std::make_shared<ResidualNet>(spec_));
  } else {
    net_ = register_module("net", std::make_shared<UNet>(spec_));
  }
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& noise) {
  const bool single = noise.dim() == 3;
  auto x = single ? noise.unsqueeze(0) : noise;
  if (x.dim() != 4 || x.size(1) != spec_.channels || x.size(2) != spec_.height || x.size(3) != spec_.width) {
    throw InputError("noise shape does not match the generator input");
  }
  auto y = std::static_pointer_cast<Net>(net_)->forward(x);
  return single ? y.squeeze(0) : y;
}

Generator make_generator(const GeneratorSpec& spec, uint64_t seed) {
  torch::manual_seed(derive_seed(seed, "generator-init"));
  return Generator(spec);
}

torch::Tensor sample_noise(const std::vector<int64_t>& shape, uint64_t seed) {
  for (auto s : shape) {
    if (s <= 0) throw InputError("noise shape must be positive");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed, "noise"));
  return torch::rand(shape, gen);
}

torch::Tensor scale_to_budget(const torch::Tensor& raw, NormKind p, double zeta) {
  if (!(zeta > 0.0)) throw InputError("zeta must be positive");
  const double raw_norm = norm_of(raw, p);
  if (raw_norm == 0.0) {
    std::cerr << "warning: generator produced an all-zero perturbation\n";
    return raw * 0.0;
  }
  auto norm = p == NormKind::L2 ? raw.pow(2).sum().sqrt() : raw.abs().max();
  auto scaled = raw * torch::clamp_max(zeta / norm, 1.0);
  // float32 rounding can overshoot zeta by an ulp or so.
  double achieved = norm_of(scaled, p);
  double nudge = 1.0;
  while (achieved > zeta) {
    nudge *= (zeta / achieved) * (1.0 - 1e-7);
    achieved = norm_of(scaled * nudge, p);
  }
  return nudge == 1.0 ? scaled : scaled * nudge;
}

torch::Tensor project_to_ball(const torch::Tensor& t, NormKind p, double zeta, bool batched) {
  if (p == NormKind::LInf) return t.clamp(-zeta, zeta);
  if (!batched) {
    const double n = norm_of(t, p);
    return n > zeta ? scale_to_budget(t, p, zeta) : t;
  }
  auto n = batched_norm(t.to(torch::kFloat64), p).to(t.scalar_type());
  std::vector<int64_t> view(static_cast<size_t>(t.dim()), 1);
  view[0] = -1;
  auto factor = torch::clamp_max(zeta * (1.0 - 1e-6) / n.clamp_min(1e-30), 1.0).view(view);
  return t * factor;
}

Perturbation Perturbation::zeros(const std::vector<int64_t>& shape, NormKind p, double zeta) {
  Perturbation out;
  out.values = torch::zeros(shape);
  out.p = p;
  out.zeta = zeta;
  return out;
}

Perturbation generate_perturbation(Generator& gen, const torch::Tensor& noise, NormKind p, double zeta) {
  Perturbation out;
  out.values = scale_to_budget(gen->forward(noise), p, zeta);
  out.p = p;
  out.zeta = zeta;
  out.achieved_norm = norm_of(out.values, p);
  return out;
}

torch::Tensor apply_perturbation(const torch::Tensor& pixels, const torch::Tensor& perturbation) {
  if (perturbation.dim() == 3) {
    if (pixels.dim() != 4 || pixels.sizes().slice(1) != perturbation.sizes()) {
      throw InputError("perturbation shape does not match the images");
    }
    return (pixels + perturbation.unsqueeze(0)).clamp(0.0, 1.0);
  }
  if (pixels.sizes() != perturbation.sizes()) throw InputError("per-image perturbations must match the batch shape");
  return (pixels + perturbation).clamp(0.0, 1.0);
}

void save_perturbation(const fs::path& path, const Perturbation& pert) {
  write_raw_tensor(path, pert.values);
  auto meta = pert.meta;
  meta["p"] = to_string(pert.p);
  meta["zeta"] = pert.zeta;
  meta["achieved_norm"] = pert.achieved_norm;
  meta["shape"] = pert.values.sizes().vec();
  auto side = path;
  side += ".meta.json";
  write_file_atomic(side, meta.dump(2) + "\n");
}

Perturbation load_perturbation(const fs::path& path) {
  auto side = path;
  side += ".meta.json";
  if (!fs::exists(path) || !fs::exists(side)) throw InputError("perturbation not found: " + path.string());
  Perturbation out;
  out.values = read_raw_tensor(path);
  out.meta = nlohmann::json::parse(read_file(side));
  out.p = parse_norm_kind(out.meta.at("p").get<std::string>());
  out.zeta = out.meta.at("zeta").get<double>();
  out.achieved_norm = out.meta.at("achieved_norm").get<double>();
  return out;
}

double export_perturbation_png(const fs::path& path, const Perturbation& pert) {
  auto v = pert.per_image() ? pert.values[0] : pert.values;
  const double peak = v.abs().max().item<double>();
  const double amp = peak > 0 ? 0.5 / peak : 1.0;
  write_png(path, v * amp + 0.5);
  return amp;
}

void save_generator(const fs::path& path, Generator& gen, const nlohmann::json& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  torch::save(gen, tmp.string());
  fs::rename(tmp, path);
  auto sidecar = meta;
  sidecar["generator_spec"] = gen->spec().to_json();
  auto side = path;
  side += ".json";
  write_file_atomic(side, sidecar.dump(2) + "\n");
}

Generator load_generator(const fs::path& path, nlohmann::json* meta) {
  auto side = path;
  side += ".json";
  if (!fs::exists(path) || !fs::exists(side)) throw InputError("generator checkpoint not found: " + path.string());
  const auto j = nlohmann::json::parse(read_file(side));
  Generator gen(GeneratorSpec::from_json(j.at("generator_spec")));
  torch::load(gen, path.string());
  if (meta) *meta = j;
  return gen;
}

}  // namespace juap
