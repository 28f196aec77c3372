#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/taxonomy.hpp"
#include "moc/tensor.hpp"

namespace moc {

/// Parameters of the synthetic multi-spectral scene generator.
struct SceneConfig {
  int width = 64;
  int height = 64;
  /// Expected instances per image, keyed by fine-grained category. Missing keys are 0.
  std::map<std::string, double> category_intensities;
  /// Fraction of instances drawn only into the NIR raster.
  double nir_only_fraction = 0.0;
  /// Categories the NIR-only fraction applies to; empty means all.
  std::vector<std::string> nir_only_categories;
  /// Per-category, per-image instance ceiling.
  std::size_t max_total = 3582;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SceneConfig from_json(const nlohmann::ordered_json& j);
};

struct Scene {
  Tensor rgb;  // 3 x H x W
  Tensor nir;  // 1 x H x W
  AnnotationSet annotations;  // fine-grained categories
};

/// Per-category appearance: additive RGB/NIR amplitudes and blob radius in pixels.
struct CategoryAppearance {
  double rgb[3];
  double nir;
  int radius;
};
const CategoryAppearance& appearance_of(const std::string& category);

/// Background texture only; depends on the seed and extent, not on instances.
void render_background(const SceneConfig& cfg, Tensor& rgb, Tensor& nir);

/// Deterministic in cfg: identical config and seed give bit-identical scenes.
Scene synth_scene(const SceneConfig& cfg, const std::string& image_id = "scene");

/// splitmix64 step, used to derive independent per-scene streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace moc
