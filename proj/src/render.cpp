#include "juap/render.hpp"

#include <array>
#include <cctype>

#include "juap/image_io.hpp"

namespace juap {

namespace {

using Glyph = std::array<uint8_t, 7>;

Glyph glyph(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case 'A': return {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
    case 'B': return {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E};
    case 'C': return {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E};
    case 'D': return {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E};
    case 'E': return {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F};
    case 'F': return {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10};
    case 'G': return {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F};
    case 'H': return {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
    case 'I': return {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E};
    case 'J': return {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C};
    case 'K': return {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11};
    case 'L': return {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F};
    case 'M': return {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11};
    case 'N': return {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11};
    case 'O': return {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E};
    case 'P': return {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10};
    case 'Q': return {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D};
    case 'R': return {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11};
    case 'S': return {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E};
    case 'T': return {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04};
    case 'U': return {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E};
    case 'V': return {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04};
    case 'W': return {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A};
    case 'X': return {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11};
    case 'Y': return {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04};
    case 'Z': return {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F};
    case '0': return {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E};
    case '1': return {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E};
    case '2': return {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F};
    case '3': return {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E};
    case '4': return {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02};
    case '5': return {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E};
    case '6': return {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E};
    case '7': return {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08};
    case '8': return {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E};
    case '9': return {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C};
    case '-': return {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00};
    case '_': return {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F};
    case '.': return {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
    case '+': return {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00};
    case '=': return {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00};
    case '(': return {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02};
    case ')': return {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08};
    case '/': return {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00};
    case ' ': return {0, 0, 0, 0, 0, 0, 0};
    default: return {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04};
  }
}

constexpr int64_t kGlyphAdvance = 6;
constexpr int64_t kGap = 2;

void draw_text(torch::TensorAccessor<float, 3> canvas, int64_t x0, int64_t y0, const std::string& text) {
  for (size_t i = 0; i < text.size(); ++i) {
    const auto g = glyph(text[i]);
    for (int64_t row = 0; row < 7; ++row) {
      for (int64_t col = 0; col < 5; ++col) {
        if (!(g[static_cast<size_t>(row)] & (0x10 >> col))) continue;
        const int64_t x = x0 + static_cast<int64_t>(i) * kGlyphAdvance + col, y = y0 + row;
        if (y < 0 || y >= canvas.size(1) || x < 0 || x >= canvas.size(2)) continue;
        for (int64_t c = 0; c < 3; ++c) canvas[c][y][x] = 0.0f;
      }
    }
  }
}

}  // namespace

torch::Tensor heat_colormap(const torch::Tensor& map) {
  auto v = map.detach().to(torch::kFloat32).clamp(0.0, 1.0);
  auto r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
  auto g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
  auto b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
  return torch::stack({r, g, b});
}

GridLayout render_attribution_grid(const std::vector<GridRow>& rows, const fs::path& out, int64_t scale) {
  if (rows.empty()) throw InputError("render_attribution_grid: no rows to render");
  if (scale < 1) throw InputError("render scale must be at least 1");
  const int64_t n = rows.front().images.size(0);
  const int64_t h = rows.front().images.size(2), w = rows.front().images.size(3);
  size_t longest = 0;
  for (const auto& r : rows) {
    if (r.images.dim() != 4 || r.images.size(0) != n || r.images.size(2) != h || r.images.size(3) != w) {
      throw InputError("render_attribution_grid: rows disagree on image count or size");
    }
    if (r.maps.defined() && (r.maps.dim() != 3 || r.maps.size(0) != n)) {
      throw InputError("render_attribution_grid: maps do not match the images");
    }
    longest = std::max(longest, r.label.size());
  }
  if (n == 0) throw InputError("render_attribution_grid: no images to render");

  GridLayout layout;
  layout.rows = static_cast<int64_t>(rows.size());
  layout.columns = n;
  layout.tiles = layout.rows * layout.columns;
  const int64_t tile_h = h * scale, tile_w = w * scale;
  const int64_t label_w = static_cast<int64_t>(longest) * kGlyphAdvance + 2 * kGap;
  layout.width = label_w + n * (tile_w + kGap) + kGap;
  layout.height = layout.rows * (tile_h + kGap) + kGap;

  auto canvas = torch::ones({3, layout.height, layout.width});
  for (int64_t r = 0; r < layout.rows; ++r) {
    const auto& row = rows[static_cast<size_t>(r)];
    const int64_t y0 = kGap + r * (tile_h + kGap);
    for (int64_t i = 0; i < n; ++i) {
      auto img = row.images[i].detach().to(torch::kFloat32);
      if (img.size(0) == 1) img = img.repeat({3, 1, 1});
      if (row.maps.defined()) img = 0.5 * img + 0.5 * heat_colormap(row.maps[i]);
      auto big = img.repeat_interleave(scale, 1).repeat_interleave(scale, 2);
      const int64_t x0 = label_w + i * (tile_w + kGap) + kGap;
      canvas.slice(1, y0, y0 + tile_h).slice(2, x0, x0 + tile_w).copy_(big);
    }
  }
  auto acc = canvas.accessor<float, 3>();
  for (int64_t r = 0; r < layout.rows; ++r) {
    const int64_t y0 = kGap + r * (tile_h + kGap) + (tile_h - 7) / 2;
    draw_text(acc, kGap, y0, rows[static_cast<size_t>(r)].label);
  }
  write_png(out, canvas);
  return layout;
}

}  // namespace juap
