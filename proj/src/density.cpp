#include "moc/density.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "moc/error.hpp"

namespace moc {

void GaussianKernelSpec::validate() const {
  if (size < 1 || size % 2 == 0) {
    throw ValidationError("gaussian kernel size must be odd and >= 1, got " +
                          std::to_string(size));
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ValidationError("gaussian kernel sigma must be positive");
  }
}

IgnoreMask IgnoreMask::all_counted(const Shape& shape) {
  return IgnoreMask{Tensor::full(shape, 1.0)};
}

Tensor gaussian_kernel(const GaussianKernelSpec& spec) {
  spec.validate();
  const int s = spec.size;
  const int half = s / 2;
  const double norm = 1.0 / (2.0 * std::numbers::pi * spec.sigma * spec.sigma);
  std::vector<double> v(static_cast<std::size_t>(s) * s);
  double total = 0.0;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double d2 = static_cast<double>((x - half) * (x - half) + (y - half) * (y - half));
      const double g = norm * std::exp(-d2 / (2.0 * spec.sigma * spec.sigma));
      v[static_cast<std::size_t>(y) * s + x] = g;
      total += g;
    }
  }
  for (auto& g : v) g /= total;
  return Tensor(Shape{static_cast<std::size_t>(s), static_cast<std::size_t>(s)}, std::move(v));
}

Tensor render_channel(const std::vector<PixelPoint>& points, int height, int width,
                      const GaussianKernelSpec& spec, bool conserve) {
  if (height <= 0 || width <= 0) throw ValidationError("render_channel: empty raster");
  const auto kernel = gaussian_kernel(spec);
  const auto kv = kernel.values();
  const int s = spec.size;
  const int half = s / 2;
  Tensor out(Shape{static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  auto ov = out.mutable_values();
  for (const auto& p : points) {
    if (p.x < 0 || p.x >= width || p.y < 0 || p.y >= height) {
      throw ValidationError("render_channel: point (" + std::to_string(p.x) + "," +
                            std::to_string(p.y) + ") outside " + std::to_string(width) + "x" +
                            std::to_string(height));
    }
    const int ky0 = std::max(0, half - p.y), ky1 = std::min(s, height - p.y + half);
    const int kx0 = std::max(0, half - p.x), kx1 = std::min(s, width - p.x + half);
    double inside = 1.0;
    if (conserve && (ky0 > 0 || kx0 > 0 || ky1 < s || kx1 < s)) {
      inside = 0.0;
      for (int ky = ky0; ky < ky1; ++ky)
        for (int kx = kx0; kx < kx1; ++kx) inside += kv[static_cast<std::size_t>(ky) * s + kx];
    }
    for (int ky = ky0; ky < ky1; ++ky) {
      const int y = p.y + ky - half;
      for (int kx = kx0; kx < kx1; ++kx) {
        const int x = p.x + kx - half;
        ov[static_cast<std::size_t>(y) * width + x] +=
            kv[static_cast<std::size_t>(ky) * s + kx] / inside;
      }
    }
  }
  return out;
}

GroundTruth generate_gt(const AnnotationSet& a, const GaussianKernelSpec& spec, int out_stride,
                        bool conserve) {
  a.validate();
  if (out_stride < 1 || a.height % out_stride != 0 || a.width % out_stride != 0) {
    throw DimensionError("generate_gt: stride " + std::to_string(out_stride) +
                         " does not divide " + std::to_string(a.width) + "x" +
                         std::to_string(a.height));
  }
  const auto n = a.categories.size();
  const auto h = static_cast<std::size_t>(a.height);
  const auto w = static_cast<std::size_t>(a.width);
  const auto f = static_cast<std::size_t>(out_stride);
  Tensor full(Shape{n, h, w});
  Tensor mask = Tensor::full(Shape{n, h / f, w / f}, 1.0);
  auto fv = full.mutable_values();
  auto mv = mask.mutable_values();
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<PixelPoint> kept;
    for (const auto& p : a.points[c]) {
      if (!a.is_ignored(c, p)) kept.push_back(p);
    }
    const auto plane = render_channel(kept, a.height, a.width, spec, conserve);
    std::copy(plane.values().begin(), plane.values().end(), fv.begin() + c * h * w);
    for (const auto& b : a.ignore_boxes) {
      if (b.category != a.categories[c]) continue;
      const int x0 = std::max(b.x0, 0), x1 = std::min(b.x1, a.width);
      const int y0 = std::max(b.y0, 0), y1 = std::min(b.y1, a.height);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) mv[(c * (h / f) + y / f) * (w / f) + x / f] = 0.0;
    }
  }
  NoGradGuard guard;
  return GroundTruth{DensityMap{a.categories, sum_pool2d(full, f)}, IgnoreMask{mask}};
}

std::vector<double> count_from_density(const DensityMap& d, const IgnoreMask& m) {
  if (d.values.shape() != m.values.shape()) {
    throw DimensionError("count_from_density: density " + shape_string(d.values.shape()) +
                         " vs mask " + shape_string(m.values.shape()));
  }
  const std::size_t n = d.channels();
  const std::size_t plane = d.height() * d.width();
  std::vector<double> out(n, 0.0);
  const auto dv = d.values.values();
  const auto mv = m.values.values();
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c] += dv[c * plane + i] * mv[c * plane + i];
  return out;
}

void save_ground_truth(const std::filesystem::path& stem, const GroundTruth& gt,
                       const GaussianKernelSpec& spec, int out_stride) {
  const std::string base = stem.string();
  save_tensor(base + ".density.bin", gt.density.values);
  save_tensor(base + ".mask.bin", gt.mask.values);
  nlohmann::ordered_json side;
  side["category_order"] = gt.density.category_order;
  side["sigma"] = spec.sigma;
  side["size"] = spec.size;
  side["out_stride"] = out_stride;
  side["density"] = stem.filename().string() + ".density.bin";
  side["mask"] = stem.filename().string() + ".mask.bin";
  std::ofstream out(base + ".density.json");
  if (!out) throw ValidationError("cannot write " + base + ".density.json");
  out << side.dump(1) << '\n';
}

GroundTruth load_ground_truth(const std::filesystem::path& stem) {
  const std::string base = stem.string();
  std::ifstream in(base + ".density.json");
  if (!in) throw ValidationError("cannot open " + base + ".density.json");
  nlohmann::ordered_json side;
  try {
    in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(base + ".density.json: " + e.what());
  }
  GroundTruth gt;
  gt.density.category_order = side.at("category_order").get<std::vector<std::string>>();
  gt.density.values = load_tensor(base + ".density.bin");
  gt.mask.values = load_tensor(base + ".mask.bin");
  if (gt.density.values.shape() != gt.mask.values.shape() ||
      gt.density.values.dim(0) != gt.density.category_order.size()) {
    throw ValidationError(base + ": density, mask and category order disagree");
  }
  return gt;
}

}  // namespace moc
