#pragma once

#include <filesystem>

#include "moc/tensor.hpp"

namespace moc {

/// Writes a 3 x H x W raster as 8-bit RGB. Values are clamped to [0, 1] and scaled by 255.
void write_png_rgb(const std::filesystem::path& path, const Tensor& rgb);

/// Writes a 1 x H x W raster as 8-bit grayscale with the same mapping.
void write_png_gray(const std::filesystem::path& path, const Tensor& gray);

}  // namespace moc
