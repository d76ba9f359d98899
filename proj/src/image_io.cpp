#include "juap/image_io.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <csetjmp>
#include <memory>
#include <vector>

namespace juap {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw InputError("cannot open image file: " + path.string());
  return f;
}

torch::Tensor from_interleaved(const std::vector<uint8_t>& data, int64_t h, int64_t w, int64_t c) {
  auto t = torch::from_blob(const_cast<uint8_t*>(data.data()), {h, w, c}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

torch::Tensor read_png(const fs::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("libpng initialization failed for " + path.string());
  }
  std::vector<uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("undecodable PNG image: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if ((color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) &&
      png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_read_update_info(png, info);
  const int64_t w = png_get_image_width(png, info);
  const int64_t h = png_get_image_height(png, info);
  const int64_t c = png_get_channels(png, info);
  pixels.resize(static_cast<size_t>(w * h * c));
  rows.resize(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_interleaved(pixels, h, w, c);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

torch::Tensor read_jpeg(const fs::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<uint8_t> pixels;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw InputError("undecodable JPEG image: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int64_t w = cinfo.output_width;
  const int64_t h = cinfo.output_height;
  const int64_t c = cinfo.output_components;
  pixels.resize(static_cast<size_t>(w * h * c));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<int64_t>(cinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(pixels, h, w, c);
}

}  // namespace

torch::Tensor read_image(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("image not found: " + path.string());
  unsigned char magic[4] = {0, 0, 0, 0};
  {
    auto f = open_file(path, "rb");
    if (std::fread(magic, 1, 4, f.get()) < 2) throw InputError("undecodable image: " + path.string());
  }
  if (magic[0] == 0x89 && magic[1] == 'P') return read_png(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg(path);
  throw InputError("undecodable image (not PNG/JPEG): " + path.string());
}

void write_png(const fs::path& path, const torch::Tensor& image) {
  auto img = image.detach().to(torch::kCPU, torch::kFloat32);
  if (img.dim() == 2) img = img.unsqueeze(0);
  if (img.dim() != 3 || (img.size(0) != 1 && img.size(0) != 3)) {
    throw InputError("write_png expects [H,W], [1,H,W] or [3,H,W]");
  }
  const int64_t c = img.size(0), h = img.size(1), w = img.size(2);
  auto bytes = img.clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  const uint8_t* data = bytes.data_ptr<uint8_t>();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    auto file = open_file(tmp, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw InputError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw InputError("PNG encoding failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < h; ++y) {
      png_write_row(png, const_cast<png_bytep>(data + y * w * c));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, path);
}

}  // namespace juap

#include <json.hpp>

namespace juap {

void write_raw_tensor(const fs::path& path, const torch::Tensor& t) {
  auto data = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  std::string bytes(reinterpret_cast<const char*>(data.data_ptr<float>()),
                    static_cast<size_t>(data.numel()) * sizeof(float));
  write_file_atomic(path, bytes);
  nlohmann::json j;
  j["dtype"] = "float32";
  j["shape"] = data.sizes().vec();
  auto meta = path;
  meta += ".json";
  write_file_atomic(meta, j.dump() + "\n");
}

torch::Tensor read_raw_tensor(const fs::path& path) {
  auto meta = path;
  meta += ".json";
  const auto j = nlohmann::json::parse(read_file(meta));
  const auto shape = j.at("shape").get<std::vector<int64_t>>();
  const auto bytes = read_file(path);
  int64_t numel = 1;
  for (auto s : shape) numel *= s;
  if (static_cast<int64_t>(bytes.size()) != numel * static_cast<int64_t>(sizeof(float))) {
    throw InputError("raw tensor size does not match its shape: " + path.string());
  }
  return torch::from_blob(const_cast<char*>(bytes.data()), shape, torch::kFloat32).clone();
}

}  // namespace juap
