#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace moc {

/// Fine-grained categories, in canonical order.
const std::vector<std::string>& moc14_categories();

/// Grouping of fine-grained categories into counted groups plus dropped negatives.
struct CategoryTaxonomy {
  std::vector<std::string> fine;  // every fine-grained name, canonical order
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  std::vector<std::string> negatives;

  /// Ship, Vehicle, Building, Container, Tree, Airplane; Farmland and Pool are negatives.
  static CategoryTaxonomy moc6();

  std::vector<std::string> group_names() const;
  /// Throws ValidationError unless groups and negatives partition `fine`.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static CategoryTaxonomy from_json(const nlohmann::ordered_json& j);
};

CategoryTaxonomy load_taxonomy(const std::filesystem::path& path);

struct PixelPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

/// Axis-aligned, half-open rectangle [x0, x1) x [y0, y1) scoped to one category.
struct IgnoreBox {
  std::string category;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(PixelPoint p) const { return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1; }
  friend bool operator==(const IgnoreBox&, const IgnoreBox&) = default;
};

struct AnnotationSet {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<std::string> categories;            // channel order
  std::vector<std::vector<PixelPoint>> points;    // parallel to categories
  std::vector<IgnoreBox> ignore_boxes;

  /// Empty annotation over the given categories.
  static AnnotationSet empty(std::string image_id, int width, int height,
                             std::vector<std::string> categories);

  std::size_t index_of(const std::string& category) const;  // throws ValidationError
  std::vector<PixelPoint>& points_of(const std::string& category);
  const std::vector<PixelPoint>& points_of(const std::string& category) const;
  bool is_ignored(std::size_t category_index, PixelPoint p) const;

  /// Bounds and category checks.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static AnnotationSet from_json(const nlohmann::ordered_json& j,
                                 const std::vector<std::string>& categories);
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

/// Parses an annotation file against the fine-grained category list.
AnnotationSet load_annotations(const std::filesystem::path& path,
                               const std::vector<std::string>& categories = moc14_categories());
void save_annotations(const std::filesystem::path& path, const AnnotationSet& a);

/// Concatenates member point lists per group; negatives and their boxes are dropped.
AnnotationSet group_to_moc6(const AnnotationSet& a, const CategoryTaxonomy& t);

/// Per-category counts excluding points inside same-category ignore boxes.
std::vector<std::size_t> counts(const AnnotationSet& a);

}  // namespace moc
