#include "moc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void SceneConfig::validate() const {
  if (width <= 0 || height <= 0) throw ValidationError("scene extent must be positive");
  if (!(nir_only_fraction >= 0.0 && nir_only_fraction <= 1.0)) {
    throw ValidationError("nir_only_fraction must lie in [0, 1]");
  }
  if (max_total < 1) throw ValidationError("max_total must be at least 1");
  const auto& names = moc14_categories();
  auto known = [&](const std::string& n) {
    return std::find(names.begin(), names.end(), n) != names.end();
  };
  for (const auto& [name, lambda] : category_intensities) {
    if (!known(name)) throw ValidationError("unknown category '" + name + "' in intensities");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ValidationError("intensity for '" + name + "' must be finite and >= 0");
    }
  }
  for (const auto& name : nir_only_categories) {
    if (!known(name)) throw ValidationError("unknown category '" + name + "' in nir_only_categories");
  }
}

ojson SceneConfig::to_json() const {
  ojson j;
  j["width"] = width;
  j["height"] = height;
  j["category_intensities"] = ojson::object();
  for (const auto& [k, v] : category_intensities) j["category_intensities"][k] = v;
  j["nir_only_fraction"] = nir_only_fraction;
  j["nir_only_categories"] = nir_only_categories;
  j["max_total"] = max_total;
  j["seed"] = seed;
  return j;
}

SceneConfig SceneConfig::from_json(const ojson& j) {
  SceneConfig c;
  try {
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    if (j.contains("category_intensities")) {
      for (const auto& [k, v] : j.at("category_intensities").items()) {
        c.category_intensities[k] = v.get<double>();
      }
    }
    c.nir_only_fraction = j.value("nir_only_fraction", c.nir_only_fraction);
    c.nir_only_categories = j.value("nir_only_categories", c.nir_only_categories);
    c.max_total = j.value("max_total", c.max_total);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene config: ") + e.what());
  }
  c.validate();
  return c;
}

const CategoryAppearance& appearance_of(const std::string& category) {
  static const std::map<std::string, CategoryAppearance> kTable = {
      {"Airplane", {{0.55, 0.55, 0.55}, 0.30, 6}},
      {"Boat", {{0.60, 0.10, 0.10}, 0.15, 3}},
      {"Car", {{0.10, 0.10, 0.60}, 0.45, 2}},
      {"Container", {{0.60, 0.40, 0.05}, 0.20, 4}},
      {"Farmland", {{0.25, 0.35, 0.10}, 0.50, 6}},
      {"House", {{0.45, 0.25, 0.20}, 0.20, 4}},
      {"Industrial", {{0.35, 0.35, 0.45}, 0.10, 5}},
      {"Mansion", {{0.50, 0.45, 0.30}, 0.20, 5}},
      {"Pool", {{0.05, 0.35, 0.60}, 0.02, 3}},
      {"Stadium", {{0.20, 0.50, 0.20}, 0.30, 6}},
      {"Tree", {{0.05, 0.35, 0.05}, 0.60, 3}},
      {"Truck", {{0.20, 0.20, 0.45}, 0.35, 3}},
      {"Vessel", {{0.50, 0.05, 0.30}, 0.10, 4}},
      {"Others", {{0.30, 0.30, 0.30}, 0.25, 2}},
  };
  const auto it = kTable.find(category);
  if (it == kTable.end()) throw ValidationError("no appearance for '" + category + "'");
  return it->second;
}

void render_background(const SceneConfig& cfg, Tensor& rgb, Tensor& nir) {
  const auto h = static_cast<std::size_t>(cfg.height);
  const auto w = static_cast<std::size_t>(cfg.width);
  rgb = Tensor(Shape{3, h, w});
  nir = Tensor(Shape{1, h, w});
  std::mt19937_64 rng(mix_seed(cfg.seed, 1));
  std::uniform_real_distribution<double> noise(-0.04, 0.04);
  constexpr double kBase[4] = {0.20, 0.22, 0.18, 0.15};
  auto rv = rgb.mutable_values();
  auto nv = nir.mutable_values();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) rv[c * h * w + i] = kBase[c] + noise(rng);
  for (std::size_t i = 0; i < h * w; ++i) nv[i] = kBase[3] + noise(rng);
}

namespace {

void stamp_blob(std::span<double> plane, int w, int h, PixelPoint at, int radius,
                double amplitude) {
  const double r2 = static_cast<double>(radius) * radius;
  for (int dy = -radius; dy <= radius; ++dy) {
    const int y = at.y + dy;
    if (y < 0 || y >= h) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int x = at.x + dx;
      if (x < 0 || x >= w) continue;
      const double d2 = static_cast<double>(dx * dx + dy * dy);
      if (d2 > r2) continue;
      plane[static_cast<std::size_t>(y) * w + x] += amplitude * (1.0 - d2 / (r2 + 1.0));
    }
  }
}

}  // namespace

Scene synth_scene(const SceneConfig& cfg, const std::string& image_id) {
  cfg.validate();
  Scene s;
  render_background(cfg, s.rgb, s.nir);
  s.annotations = AnnotationSet::empty(image_id, cfg.width, cfg.height, moc14_categories());

  std::mt19937_64 rng(mix_seed(cfg.seed, 2));
  std::uniform_int_distribution<int> px(0, cfg.width - 1);
  std::uniform_int_distribution<int> py(0, cfg.height - 1);
  std::bernoulli_distribution nir_only(cfg.nir_only_fraction);
  const std::size_t plane = static_cast<std::size_t>(cfg.width) * cfg.height;
  auto rv = s.rgb.mutable_values();
  auto nv = s.nir.mutable_values();

  const auto& names = moc14_categories();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto it = cfg.category_intensities.find(names[c]);
    const double lambda = it == cfg.category_intensities.end() ? 0.0 : it->second;
    if (lambda <= 0.0) continue;
    std::poisson_distribution<std::size_t> draw(lambda);
    const std::size_t n = std::min(draw(rng), cfg.max_total);
    const bool nir_scoped =
        cfg.nir_only_categories.empty() ||
        std::find(cfg.nir_only_categories.begin(), cfg.nir_only_categories.end(), names[c]) !=
            cfg.nir_only_categories.end();
    const auto& look = appearance_of(names[c]);
    auto& pts = s.annotations.points[c];
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const PixelPoint p{px(rng), py(rng)};
      const bool hidden = nir_scoped && nir_only(rng);
      pts.push_back(p);
      if (!hidden) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          stamp_blob(rv.subspan(ch * plane, plane), cfg.width, cfg.height, p, look.radius,
                     look.rgb[ch]);
        }
      }
      stamp_blob(nv, cfg.width, cfg.height, p, look.radius, look.nir);
    }
  }
  return s;
}

}  // namespace moc
