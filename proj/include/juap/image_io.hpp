#pragma once

#include <torch/torch.h>

#include "juap/common.hpp"

namespace juap {

/// Decodes a PNG or JPEG file into a float tensor [C, H, W] with values in
/// [0, 1]. Grayscale files yield C = 1; everything else is converted to RGB.
torch::Tensor read_image(const fs::path& path);

/// Encodes a [C, H, W] (C = 1 or 3) or [H, W] tensor in [0, 1] as an 8-bit PNG.
/// Output bytes depend only on the pixel values.
void write_png(const fs::path& path, const torch::Tensor& image);

}  // namespace juap

namespace juap {

/// Raw little-endian float32 dump of `t` at `path`, shape recorded in `path`.json.
void write_raw_tensor(const fs::path& path, const torch::Tensor& t);
torch::Tensor read_raw_tensor(const fs::path& path);

}  // namespace juap
