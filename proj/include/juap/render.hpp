#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "juap/common.hpp"

namespace juap {

/// One grid row: a label, the images [N, C, H, W] and optional maps [N, H, W]
/// drawn over them as a heat overlay.
struct GridRow {
  std::string label;
  torch::Tensor images;
  torch::Tensor maps;
};

struct GridLayout {
  int64_t rows = 0;
  int64_t columns = 0;
  int64_t tiles = 0;
  int64_t width = 0;
  int64_t height = 0;
};

/// Blue-to-red colormap of a [H, W] map in [0, 1] -> [3, H, W].
torch::Tensor heat_colormap(const torch::Tensor& map);

/// Renders rows as a PNG grid (rows = methods, columns = samples). Output
/// bytes are a pure function of the inputs. Throws before writing anything
/// when `rows` is empty or the rows disagree on image count.
GridLayout render_attribution_grid(const std::vector<GridRow>& rows, const fs::path& out, int64_t scale = 2);

}  // namespace juap
