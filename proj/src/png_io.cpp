#include "moc/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "moc/error.hpp"

namespace moc {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

void write_png(const std::filesystem::path& path, const Tensor& t, std::size_t channels,
               int color_type) {
  if (t.rank() != 3 || t.dim(0) != channels) {
    throw DimensionError("png export expects " + std::to_string(channels) + " x H x W, got " +
                         shape_string(t.shape()));
  }
  const std::size_t h = t.dim(1), w = t.dim(2);
  const auto v = t.values();
  std::vector<unsigned char> pixels(channels * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const double s = std::clamp(v[(c * h + y) * w + x], 0.0, 1.0);
        pixels[(y * w + x) * channels + c] = static_cast<unsigned char>(std::lround(s * 255.0));
      }

  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw ValidationError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ValidationError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ValidationError("libpng failed while writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, pixels.data() + y * w * channels);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const Tensor& rgb) {
  write_png(path, rgb, 3, PNG_COLOR_TYPE_RGB);
}

void write_png_gray(const std::filesystem::path& path, const Tensor& gray) {
  write_png(path, gray, 1, PNG_COLOR_TYPE_GRAY);
}

}  // namespace moc
