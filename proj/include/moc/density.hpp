#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moc/taxonomy.hpp"
#include "moc/tensor.hpp"

namespace moc {

struct GaussianKernelSpec {
  double sigma = 2.0;  // bandwidth, pixels
  int size = 5;        // odd extent, pixels

  void validate() const;
};

/// N-channel raster of objects per pixel, channel order given by `category_order`.
struct DensityMap {
  std::vector<std::string> category_order;
  Tensor values;  // N x H x W

  std::size_t channels() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
};

/// Per-channel binary raster: 1 counted, 0 ignored.
struct IgnoreMask {
  Tensor values;  // N x H x W

  static IgnoreMask all_counted(const Shape& shape);
};

struct GroundTruth {
  DensityMap density;
  IgnoreMask mask;
};

/// Sampled isotropic Gaussian on a size x size grid, renormalized to unit sum.
Tensor gaussian_kernel(const GaussianKernelSpec& spec);

/// Stamps one kernel per point. With `conserve`, border-truncated stamps are rescaled so
/// every point contributes exactly unit mass.
Tensor render_channel(const std::vector<PixelPoint>& points, int height, int width,
                      const GaussianKernelSpec& spec, bool conserve = true);

/// Renders each category at image resolution (skipping ignored points), then sum-pools by
/// `out_stride`. A mask cell is ignored when any pixel it covers lies in a same-category box.
GroundTruth generate_gt(const AnnotationSet& a, const GaussianKernelSpec& spec,
                        int out_stride, bool conserve = true);

/// Per-channel masked sums.
std::vector<double> count_from_density(const DensityMap& d, const IgnoreMask& m);

/// Writes `<stem>.density.bin`, `<stem>.mask.bin` and a `<stem>.density.json` sidecar.
void save_ground_truth(const std::filesystem::path& stem, const GroundTruth& gt,
                       const GaussianKernelSpec& spec, int out_stride);
GroundTruth load_ground_truth(const std::filesystem::path& stem);

}  // namespace moc
