#include <algorithm>
#include <map>
#include <random>

#include "doctest.h"
#include "moc/error.hpp"
#include "moc/synth.hpp"
#include "moc/taxonomy.hpp"
#include "test_util.hpp"

using namespace moc;
using moc::testing::TempDir;
using moc::testing::write_file;

namespace {

AnnotationSet random_moc14(std::mt19937_64& rng, int extent = 128, int max_per_category = 30) {
  auto a = AnnotationSet::empty("rand", extent, extent, moc14_categories());
  std::uniform_int_distribution<int> n(0, max_per_category), xy(0, extent - 1);
  for (auto& list : a.points) {
    const int k = n(rng);
    for (int i = 0; i < k; ++i) list.push_back({xy(rng), xy(rng)});
  }
  return a;
}

std::size_t total(const std::vector<std::size_t>& v) {
  std::size_t s = 0;
  for (auto x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("fine-grained list and default grouping") {
  const auto& fine = moc14_categories();
  REQUIRE(fine.size() == 14);
  CHECK(fine.front() == "Airplane");
  CHECK(fine.back() == "Others");

  const auto t = CategoryTaxonomy::moc6();
  CHECK_NOTHROW(t.validate());
  CHECK(t.group_names() ==
        std::vector<std::string>{"Ship", "Vehicle", "Building", "Container", "Tree", "Airplane"});
  CHECK(t.negatives == std::vector<std::string>{"Farmland", "Pool"});

  std::map<std::string, int> seen;
  for (const auto& [g, members] : t.groups)
    for (const auto& m : members) ++seen[m];
  for (const auto& n : t.negatives) ++seen[n];
  CHECK(seen.size() == 14);
  for (const auto& [name, k] : seen) CHECK_MESSAGE(k == 1, name);
}

TEST_CASE("taxonomy validation rejects overlaps and gaps") {
  auto t = CategoryTaxonomy::moc6();
  SUBCASE("duplicate member") {
    t.groups[0].second.push_back("Car");
    CHECK_THROWS_AS(t.validate(), ValidationError);
  }
  SUBCASE("missing member") {
    t.negatives.pop_back();
    CHECK_THROWS_AS(t.validate(), ValidationError);
  }
  SUBCASE("unknown member") {
    t.groups[1].second.push_back("Bicycle");
    CHECK_THROWS_AS(t.validate(), ValidationError);
  }
}

TEST_CASE("taxonomy file round trip and re-validation") {
  TempDir dir("taxonomy");
  const auto t = CategoryTaxonomy::moc6();
  write_file(dir / "t.json", t.to_json().dump());
  const auto back = load_taxonomy(dir / "t.json");
  CHECK(back.group_names() == t.group_names());
  CHECK(back.groups == t.groups);
  CHECK(back.negatives == t.negatives);

  write_file(dir / "bad.json",
             R"({"groups": {"Ship": ["Boat", "Vessel", "Car"], "Vehicle": ["Car", "Truck"]},)"
             R"( "negatives": []})");
  CHECK_THROWS_AS(load_taxonomy(dir / "bad.json"), ValidationError);
}

TEST_CASE("load_annotations") {
  TempDir dir("annotations");
  SUBCASE("empty lists give zero counts for every category") {
    write_file(dir / "a.json",
               R"({"image_id": "x", "width": 32, "height": 32, "points": {}, "ignore_boxes": []})");
    const auto a = load_annotations(dir / "a.json");
    const auto c = counts(a);
    REQUIRE(c.size() == 14);
    CHECK(total(c) == 0);
  }
  SUBCASE("single car") {
    write_file(dir / "a.json",
               R"({"image_id": "x", "width": 1024, "height": 1024,)"
               R"( "points": {"Car": [[10, 20]]}, "ignore_boxes": []})");
    const auto a = load_annotations(dir / "a.json");
    const auto c = counts(a);
    CHECK(c[a.index_of("Car")] == 1);
    CHECK(total(c) == 1);
    CHECK(a.points_of("Car").front() == PixelPoint{10, 20});
  }
  SUBCASE("malformed JSON reports the line") {
    write_file(dir / "a.json", "{\n  \"image_id\": \"x\",\n  \"width\": 32 32\n}\n");
    try {
      load_annotations(dir / "a.json");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("a.json:3:") != std::string::npos);
      CHECK(msg.find("\"width\": 32 32") != std::string::npos);
    }
  }
  SUBCASE("out-of-bounds point is named") {
    write_file(dir / "a.json",
               R"({"image_id": "x", "width": 32, "height": 32,)"
               R"( "points": {"Tree": [[1, 1], [40, 3]]}, "ignore_boxes": []})");
    try {
      load_annotations(dir / "a.json");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("Tree point #1") != std::string::npos);
      CHECK(msg.find("(40,3)") != std::string::npos);
    }
  }
  SUBCASE("unknown category") {
    write_file(dir / "a.json",
               R"({"image_id": "x", "width": 32, "height": 32,)"
               R"( "points": {"Bicycle": [[1, 1]]}, "ignore_boxes": []})");
    CHECK_THROWS_AS(load_annotations(dir / "a.json"), ValidationError);
  }
  SUBCASE("save then load preserves points and boxes") {
    std::mt19937_64 rng(5);
    auto a = random_moc14(rng);
    a.ignore_boxes.push_back({"Tree", 3, 4, 50, 60});
    a.ignore_boxes.push_back({"Car", 0, 0, 1, 1});
    save_annotations(dir / "rt.json", a);
    CHECK(load_annotations(dir / "rt.json") == a);
  }
}

TEST_CASE("group_to_moc6 follows the grouping") {
  const auto t = CategoryTaxonomy::moc6();
  SUBCASE("Boat and Vessel merge into Ship") {
    auto a = AnnotationSet::empty("x", 16, 16, moc14_categories());
    for (int i = 0; i < 3; ++i) a.points_of("Boat").push_back({i, 0});
    for (int i = 0; i < 2; ++i) a.points_of("Vessel").push_back({i, 1});
    const auto g = group_to_moc6(a, t);
    CHECK(g.points_of("Ship").size() == 5);
    CHECK(total(counts(g)) == 5);
  }
  SUBCASE("negatives only give six empty groups") {
    auto a = AnnotationSet::empty("x", 16, 16, moc14_categories());
    for (int i = 0; i < 7; ++i) a.points_of("Farmland").push_back({i, 0});
    for (int i = 0; i < 4; ++i) a.points_of("Pool").push_back({i, 1});
    const auto g = group_to_moc6(a, t);
    REQUIRE(g.categories.size() == 6);
    for (auto c : counts(g)) CHECK(c == 0);
  }
  SUBCASE("random counts match member sums") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const auto a = random_moc14(rng);
      const auto g = group_to_moc6(a, t);
      const auto fine = counts(a);
      const auto grouped = counts(g);
      std::map<std::string, std::size_t> want;
      for (std::size_t i = 0; i < a.categories.size(); ++i) {
        const auto& name = a.categories[i];
        if (name == "Boat" || name == "Vessel") want["Ship"] += fine[i];
        else if (name == "Car" || name == "Truck") want["Vehicle"] += fine[i];
        else if (name == "House" || name == "Industrial" || name == "Mansion" ||
                 name == "Stadium" || name == "Others")
          want["Building"] += fine[i];
        else if (name == "Container" || name == "Tree" || name == "Airplane")
          want[name] += fine[i];
      }
      for (std::size_t k = 0; k < g.categories.size(); ++k)
        CHECK(grouped[k] == want[g.categories[k]]);
      CHECK(total(grouped) == total(fine) - fine[a.index_of("Farmland")] -
                                  fine[a.index_of("Pool")]);
    }
  }
  SUBCASE("member points keep their coordinates") {
    auto a = AnnotationSet::empty("x", 16, 16, moc14_categories());
    a.points_of("Car").push_back({1, 2});
    a.points_of("Truck").push_back({3, 4});
    const auto g = group_to_moc6(a, t);
    CHECK(g.points_of("Vehicle") == std::vector<PixelPoint>{{1, 2}, {3, 4}});
  }
}

TEST_CASE("counts honour category-scoped ignore boxes") {
  auto a = AnnotationSet::empty("x", 32, 32, moc14_categories());
  CHECK(total(counts(a)) == 0);
  a.points_of("Tree") = {{2, 2}, {20, 20}};
  a.points_of("Car") = {{3, 3}};
  a.ignore_boxes.push_back({"Tree", 0, 0, 10, 10});
  const auto c = counts(a);
  CHECK(c[a.index_of("Tree")] == 1);
  CHECK(c[a.index_of("Car")] == 1);  // the box is Tree-scoped

  SUBCASE("boxes are half-open") {
    a.ignore_boxes = {{"Tree", 0, 0, 2, 2}};
    CHECK(counts(a)[a.index_of("Tree")] == 2);
  }
  SUBCASE("random scenes match an independent recount") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> xy(0, 127);
    for (int trial = 0; trial < 20; ++trial) {
      auto r = random_moc14(rng);
      for (int b = 0; b < 4; ++b) {
        int x0 = xy(rng), y0 = xy(rng);
        r.ignore_boxes.push_back({moc14_categories()[b * 3], x0, y0, x0 + 30, y0 + 30});
      }
      const auto got = counts(r);
      for (std::size_t k = 0; k < r.categories.size(); ++k) {
        std::size_t want = 0;
        for (const auto& p : r.points[k]) {
          bool hidden = false;
          for (const auto& b : r.ignore_boxes)
            hidden = hidden || (b.category == r.categories[k] && p.x >= b.x0 && p.x < b.x1 &&
                                p.y >= b.y0 && p.y < b.y1);
          want += hidden ? 0 : 1;
        }
        CHECK(got[k] == want);
      }
    }
  }
}

TEST_CASE("synthetic scenes") {
  SceneConfig cfg;
  cfg.width = 48;
  cfg.height = 32;
  cfg.seed = 9;
  Tensor bg_rgb, bg_nir;
  render_background(cfg, bg_rgb, bg_nir);

  SUBCASE("zero intensities give a background-only scene with no points") {
    const auto s = synth_scene(cfg);
    CHECK(s.rgb.shape() == Shape{3, 32, 48});
    CHECK(s.nir.shape() == Shape{1, 32, 48});
    CHECK(std::equal(s.rgb.values().begin(), s.rgb.values().end(), bg_rgb.values().begin()));
    CHECK(std::equal(s.nir.values().begin(), s.nir.values().end(), bg_nir.values().begin()));
    CHECK(total(counts(s.annotations)) == 0);
  }

  cfg.category_intensities = {{"Tree", 6}, {"Car", 4}, {"Boat", 2}, {"Pool", 1}};
  SUBCASE("identical seeds give identical scenes") {
    const auto a = synth_scene(cfg), b = synth_scene(cfg);
    CHECK(std::equal(a.rgb.values().begin(), a.rgb.values().end(), b.rgb.values().begin()));
    CHECK(std::equal(a.nir.values().begin(), a.nir.values().end(), b.nir.values().begin()));
    CHECK(a.annotations == b.annotations);
    cfg.seed = 10;
    CHECK_FALSE(synth_scene(cfg).annotations == a.annotations);
  }
  SUBCASE("NIR-only instances leave RGB at the background") {
    cfg.nir_only_fraction = 1.0;
    const auto s = synth_scene(cfg);
    CHECK(std::equal(s.rgb.values().begin(), s.rgb.values().end(), bg_rgb.values().begin()));
    // every instance centre carries its blob in NIR
    const auto nv = s.nir.values();
    const auto bv = bg_nir.values();
    std::size_t instances = 0;
    for (std::size_t c = 0; c < s.annotations.categories.size(); ++c) {
      for (const auto& p : s.annotations.points[c]) {
        const auto i = static_cast<std::size_t>(p.y) * 48 + p.x;
        CHECK(nv[i] - bv[i] >= appearance_of(s.annotations.categories[c]).nir - 1e-12);
        ++instances;
      }
    }
    CHECK(instances > 0);
  }
  SUBCASE("NIR-only scope limits hidden instances to listed categories") {
    cfg.nir_only_fraction = 1.0;
    cfg.nir_only_categories = {"Tree"};
    cfg.category_intensities = {{"Tree", 5}};
    const auto only_trees = synth_scene(cfg);
    CHECK(std::equal(only_trees.rgb.values().begin(), only_trees.rgb.values().end(),
                     bg_rgb.values().begin()));
    cfg.category_intensities = {{"Car", 5}};
    const auto cars = synth_scene(cfg);
    CHECK_FALSE(std::equal(cars.rgb.values().begin(), cars.rgb.values().end(),
                           bg_rgb.values().begin()));
  }
  SUBCASE("instance ceiling") {
    cfg.category_intensities = {{"Car", 5000.0}};
    cfg.max_total = 3582;
    const auto s = synth_scene(cfg);
    CHECK(s.annotations.points_of("Car").size() == 3582);
    cfg.max_total = 10;
    CHECK(synth_scene(cfg).annotations.points_of("Car").size() == 10);
  }
  SUBCASE("config validation") {
    cfg.nir_only_fraction = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.nir_only_fraction = 0.0;
    cfg.category_intensities["Tree"] = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.category_intensities = {{"Spaceship", 1.0}};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }
  SUBCASE("config JSON round trip") {
    cfg.nir_only_categories = {"Tree"};
    cfg.nir_only_fraction = 0.5;
    const auto back = SceneConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
  }
}
