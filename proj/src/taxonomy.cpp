#include "moc/taxonomy.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

const std::vector<std::string>& moc14_categories() {
  static const std::vector<std::string> kNames = {
      "Airplane", "Boat",     "Car",   "Container", "Farmland", "House", "Industrial",
      "Mansion",  "Pool",     "Stadium", "Tree",    "Truck",    "Vessel", "Others"};
  return kNames;
}

CategoryTaxonomy CategoryTaxonomy::moc6() {
  CategoryTaxonomy t;
  t.fine = moc14_categories();
  t.groups = {
      {"Ship", {"Boat", "Vessel"}},
      {"Vehicle", {"Car", "Truck"}},
      {"Building", {"House", "Industrial", "Mansion", "Stadium", "Others"}},
      {"Container", {"Container"}},
      {"Tree", {"Tree"}},
      {"Airplane", {"Airplane"}},
  };
  t.negatives = {"Farmland", "Pool"};
  return t;
}

std::vector<std::string> CategoryTaxonomy::group_names() const {
  std::vector<std::string> names;
  for (const auto& [name, members] : groups) names.push_back(name);
  return names;
}

void CategoryTaxonomy::validate() const {
  std::map<std::string, int> seen;
  for (const auto& [name, members] : groups) {
    if (members.empty()) throw ValidationError("taxonomy group '" + name + "' has no members");
    for (const auto& m : members) ++seen[m];
  }
  for (const auto& n : negatives) ++seen[n];
  const std::set<std::string> known(fine.begin(), fine.end());
  for (const auto& [name, n] : seen) {
    if (!known.contains(name)) throw ValidationError("taxonomy names unknown category '" + name + "'");
    if (n > 1) throw ValidationError("taxonomy assigns '" + name + "' more than once");
  }
  for (const auto& name : fine) {
    if (!seen.contains(name)) throw ValidationError("taxonomy leaves '" + name + "' unassigned");
  }
  std::set<std::string> group_set;
  for (const auto& [name, members] : groups) {
    if (!group_set.insert(name).second) throw ValidationError("duplicate group '" + name + "'");
  }
}

ojson CategoryTaxonomy::to_json() const {
  ojson j;
  j["groups"] = ojson::object();
  for (const auto& [name, members] : groups) j["groups"][name] = members;
  j["negatives"] = negatives;
  return j;
}

CategoryTaxonomy CategoryTaxonomy::from_json(const ojson& j) {
  CategoryTaxonomy t;
  t.fine = moc14_categories();
  try {
    for (const auto& [name, members] : j.at("groups").items()) {
      t.groups.emplace_back(name, members.get<std::vector<std::string>>());
    }
    t.negatives = j.value("negatives", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("taxonomy: ") + e.what());
  }
  t.validate();
  return t;
}

namespace {

ojson parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + upto, '\n');
    const auto line_start = text.rfind('\n', upto == 0 ? 0 : upto - 1);
    const auto col = upto - (line_start == std::string::npos ? 0 : line_start + 1) + 1;
    const auto end = text.find('\n', upto);
    const auto begin = line_start == std::string::npos ? 0 : line_start + 1;
    throw ParseError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                     ": " + e.what() + "\n  " + text.substr(begin, end - begin));
  }
}

}  // namespace

CategoryTaxonomy load_taxonomy(const std::filesystem::path& path) {
  return CategoryTaxonomy::from_json(parse_file(path));
}

// ---------------------------------------------------------------------------

AnnotationSet AnnotationSet::empty(std::string image_id, int width, int height,
                                   std::vector<std::string> categories) {
  AnnotationSet a;
  a.image_id = std::move(image_id);
  a.width = width;
  a.height = height;
  a.points.resize(categories.size());
  a.categories = std::move(categories);
  return a;
}

std::size_t AnnotationSet::index_of(const std::string& category) const {
  const auto it = std::find(categories.begin(), categories.end(), category);
  if (it == categories.end()) throw ValidationError("unknown category '" + category + "'");
  return static_cast<std::size_t>(it - categories.begin());
}

std::vector<PixelPoint>& AnnotationSet::points_of(const std::string& category) {
  return points[index_of(category)];
}

const std::vector<PixelPoint>& AnnotationSet::points_of(const std::string& category) const {
  return points[index_of(category)];
}

bool AnnotationSet::is_ignored(std::size_t category_index, PixelPoint p) const {
  const auto& name = categories[category_index];
  return std::any_of(ignore_boxes.begin(), ignore_boxes.end(),
                     [&](const IgnoreBox& b) { return b.category == name && b.contains(p); });
}

void AnnotationSet::validate() const {
  if (width <= 0 || height <= 0) {
    throw ValidationError(image_id + ": image extent must be positive");
  }
  if (points.size() != categories.size()) {
    throw ValidationError(image_id + ": point lists do not match categories");
  }
  for (std::size_t c = 0; c < categories.size(); ++c) {
    for (std::size_t i = 0; i < points[c].size(); ++i) {
      const auto& p = points[c][i];
      if (p.x < 0 || p.x >= width || p.y < 0 || p.y >= height) {
        throw ValidationError(image_id + ": " + categories[c] + " point #" + std::to_string(i) +
                              " (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                              ") outside " + std::to_string(width) + "x" +
                              std::to_string(height));
      }
    }
  }
  for (const auto& b : ignore_boxes) {
    index_of(b.category);
    if (b.x1 < b.x0 || b.y1 < b.y0) {
      throw ValidationError(image_id + ": inverted ignore box for " + b.category);
    }
  }
}

ojson AnnotationSet::to_json() const {
  ojson j;
  j["image_id"] = image_id;
  j["width"] = width;
  j["height"] = height;
  j["points"] = ojson::object();
  for (std::size_t c = 0; c < categories.size(); ++c) {
    ojson list = ojson::array();
    for (const auto& p : points[c]) list.push_back({p.x, p.y});
    j["points"][categories[c]] = std::move(list);
  }
  j["ignore_boxes"] = ojson::array();
  for (const auto& b : ignore_boxes) {
    j["ignore_boxes"].push_back(
        {{"category", b.category}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
  }
  return j;
}

AnnotationSet AnnotationSet::from_json(const ojson& j, const std::vector<std::string>& categories) {
  AnnotationSet a;
  try {
    a = empty(j.at("image_id").get<std::string>(), j.at("width").get<int>(),
              j.at("height").get<int>(), categories);
    if (j.contains("points")) {
      for (const auto& [name, list] : j.at("points").items()) {
        auto& dst = a.points_of(name);
        for (const auto& xy : list) {
          if (!xy.is_array() || xy.size() != 2) {
            throw ValidationError(a.image_id + ": " + name + " point must be [x, y]");
          }
          dst.push_back({xy[0].get<int>(), xy[1].get<int>()});
        }
      }
    }
    if (j.contains("ignore_boxes")) {
      for (const auto& b : j.at("ignore_boxes")) {
        a.ignore_boxes.push_back({b.at("category").get<std::string>(), b.at("x0").get<int>(),
                                  b.at("y0").get<int>(), b.at("x1").get<int>(),
                                  b.at("y1").get<int>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("annotation schema: ") + e.what());
  }
  a.validate();
  return a;
}

AnnotationSet load_annotations(const std::filesystem::path& path,
                               const std::vector<std::string>& categories) {
  return AnnotationSet::from_json(parse_file(path), categories);
}

void save_annotations(const std::filesystem::path& path, const AnnotationSet& a) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out << a.to_json().dump(1) << '\n';
  if (!out) throw ValidationError("failed writing " + path.string());
}

AnnotationSet group_to_moc6(const AnnotationSet& a, const CategoryTaxonomy& t) {
  auto out = AnnotationSet::empty(a.image_id, a.width, a.height, t.group_names());
  std::map<std::string, std::string> group_of;
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    for (const auto& m : t.groups[g].second) {
      const auto& src = a.points_of(m);
      out.points[g].insert(out.points[g].end(), src.begin(), src.end());
      group_of[m] = t.groups[g].first;
    }
  }
  // A member's box is relabelled to its group, so after grouping it also hides points of
  // the group's other members that fall inside it.
  for (const auto& b : a.ignore_boxes) {
    const auto it = group_of.find(b.category);
    if (it == group_of.end()) continue;
    IgnoreBox mapped = b;
    mapped.category = it->second;
    out.ignore_boxes.push_back(std::move(mapped));
  }
  return out;
}

std::vector<std::size_t> counts(const AnnotationSet& a) {
  std::vector<std::size_t> n(a.categories.size(), 0);
  for (std::size_t c = 0; c < a.categories.size(); ++c) {
    for (const auto& p : a.points[c]) {
      if (!a.is_ignored(c, p)) ++n[c];
    }
  }
  return n;
}

}  // namespace moc
