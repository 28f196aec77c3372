#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "moc/error.hpp"
#include "moc/losses.hpp"
#include "test_util.hpp"

using namespace moc;
using moc::testing::grad_check;
using moc::testing::random_tensor;

namespace {

double brute_cosine_mean(const Tensor& pred, bool include_diagonal, double eps = 1e-12) {
  const std::size_t n = pred.dim(0), plane = pred.dim(1) * pred.dim(2);
  const auto v = pred.values();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t < plane; ++t) s += v[i * plane + t] * v[i * plane + t];
    norms[i] = std::max(std::sqrt(s), eps);
  }
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j && !include_diagonal) continue;
      double dot = 0.0;
      for (std::size_t t = 0; t < plane; ++t) dot += v[i * plane + t] * v[j * plane + t];
      total += dot / (norms[i] * norms[j]);
      ++terms;
    }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

Tensor permute_channels(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(t.values().begin() + perm[i] * plane, plane, out.begin() + i * plane);
  return Tensor(t.shape(), std::move(out));
}

}  // namespace

TEST_CASE("counting loss") {
  std::mt19937_64 rng(1);
  const auto gt = random_tensor({6, 8, 8}, rng, 0.0, 1.0);
  const auto ones = Tensor::full({6, 8, 8}, 1.0);
  SUBCASE("prediction equal to ground truth") {
    CHECK(counting_loss(gt, gt, ones).item() == 0.0);
  }
  SUBCASE("uniform offset c gives c squared") {
    for (double c : {0.5, -2.0, 3.0}) {
      std::vector<double> shifted(gt.values().begin(), gt.values().end());
      for (auto& v : shifted) v += c;
      CHECK(counting_loss(Tensor(gt.shape(), shifted), gt, ones).item() ==
            doctest::Approx(c * c).epsilon(1e-12));
    }
  }
  SUBCASE("masked mean against brute force") {
    const auto pred = random_tensor({6, 8, 8}, rng, -1.0, 2.0);
    auto mask = random_tensor({6, 8, 8}, rng, 0.0, 1.0);
    for (auto& v : mask.mutable_values()) v = v < 0.3 ? 0.0 : 1.0;
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      if (mask[i] == 0.0) continue;
      s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
      n += 1.0;
    }
    CHECK(counting_loss(pred, gt, mask).item() == doctest::Approx(s / n).epsilon(1e-12));
  }
  SUBCASE("fully ignored map") {
    const auto pred = random_tensor({6, 8, 8}, rng);
    CHECK(counting_loss(pred, gt, Tensor(Shape{6, 8, 8})).item() == 0.0);
  }
  SUBCASE("gradient") {
    const auto pred = random_tensor({3, 4, 4}, rng, -1.0, 1.0, true);
    const auto g = random_tensor({3, 4, 4}, rng);
    auto mask = random_tensor({3, 4, 4}, rng, 0.0, 1.0);
    for (auto& v : mask.mutable_values()) v = v < 0.3 ? 0.0 : 1.0;
    CHECK(grad_check([&] { return counting_loss(pred, g, mask); }, {pred}) <= 1e-4);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(counting_loss(gt, Tensor(Shape{6, 8, 4}), ones), DimensionError);
  }
}

TEST_CASE("cosine similarity") {
  std::mt19937_64 rng(2);
  const auto u = random_tensor({10}, rng), v = random_tensor({10}, rng);
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  CHECK(cosine_similarity(u, v, 1e-12).item() ==
        doctest::Approx(dot / std::sqrt(nu * nv)).epsilon(1e-12));
  CHECK(cosine_similarity(u, u, 1e-12).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cosine_similarity(Tensor(Shape{10}), v, 1e-12).item() == 0.0);
  const auto ug = random_tensor({10}, rng, -1, 1, true), vg = random_tensor({10}, rng, -1, 1, true);
  CHECK(grad_check([&] { return cosine_similarity(ug, vg, 1e-12); }, {ug, vg}, 1e-5) <= 1e-4);
}

TEST_CASE("spatial contrast loss") {
  std::mt19937_64 rng(3);
  const LossConfig cfg;
  SUBCASE("identical channels give 1") {
    const auto plane = random_tensor({1, 5, 5}, rng, 0.0, 1.0);
    const auto p = concat({plane, plane, plane, plane}, 0);
    CHECK(spatial_contrast_loss(p, cfg).item() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("two disjoint channels give one half") {
    std::vector<double> v(2 * 4 * 4, 0.0);
    v[0] = 1.0;
    v[5] = 2.0;
    v[16 + 10] = 3.0;
    CHECK(spatial_contrast_loss(Tensor(Shape{2, 4, 4}, v), cfg).item() ==
          doctest::Approx(0.5).epsilon(1e-14));
    LossConfig off = cfg;
    off.include_diagonal = false;
    CHECK(spatial_contrast_loss(Tensor(Shape{2, 4, 4}, v), off).item() == 0.0);
  }
  SUBCASE("brute-force oracle over random maps") {
    for (int trial = 0; trial < 100; ++trial) {
      std::uniform_int_distribution<std::size_t> n(1, 7), s(1, 6);
      const std::size_t c = n(rng), h = s(rng), w = s(rng);
      const auto p = random_tensor({c, h, w}, rng, trial % 2 ? -1.0 : 0.0, 1.0);
      CHECK(std::abs(spatial_contrast_loss(p, cfg).item() - brute_cosine_mean(p, true)) <= 1e-12);
      LossConfig off = cfg;
      off.include_diagonal = false;
      CHECK(std::abs(spatial_contrast_loss(p, off).item() - brute_cosine_mean(p, false)) <=
            1e-12);
      CHECK(std::abs(mean_offdiagonal_similarity(p) - brute_cosine_mean(p, false)) <= 1e-12);
    }
  }
  SUBCASE("channel permutation and positive scaling leave it unchanged") {
    const auto p = random_tensor({6, 5, 5}, rng, 0.0, 1.0);
    const double base = spatial_contrast_loss(p, cfg).item();
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    for (int t = 0; t < 10; ++t) {
      std::shuffle(perm.begin(), perm.end(), rng);
      CHECK(std::abs(spatial_contrast_loss(permute_channels(p, perm), cfg).item() - base) <=
            1e-12);
    }
    for (double s : {1e-3, 0.5, 7.0, 1e4})
      CHECK(std::abs(spatial_contrast_loss(scale(p, s), cfg).item() - base) <= 1e-12);
  }
  SUBCASE("bounds on nonnegative maps") {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 2 + trial % 6;
      auto p = random_tensor({n, 4, 4}, rng, 0.0, 1.0);
      // sparsify so some channel pairs are nearly disjoint
      for (auto& v : p.mutable_values()) v = v < 0.7 ? 0.0 : v;
      for (std::size_t c = 0; c < n; ++c) p.mutable_values()[c * 16 + c] = 1.0;
      const double l = spatial_contrast_loss(p, cfg).item();
      CHECK(l >= 1.0 / static_cast<double>(n) - 1e-12);
      CHECK(l <= 1.0 + 1e-12);
    }
  }
  SUBCASE("similarity matrix is symmetric with entries in [0, 1]") {
    const auto p = random_tensor({5, 6, 6}, rng, 0.0, 1.0);
    const auto m = similarity_matrix(p, 1e-12);
    REQUIRE(m.shape() == Shape{5, 5});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(m[i * 5 + j] == doctest::Approx(m[j * 5 + i]).epsilon(1e-15));
        CHECK(m[i * 5 + j] >= 0.0);
        CHECK(m[i * 5 + j] <= 1.0 + 1e-12);
      }
  }
  SUBCASE("a single channel") {
    const auto p = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    CHECK(spatial_contrast_loss(p, cfg).item() == doctest::Approx(1.0).epsilon(1e-12));
    LossConfig off = cfg;
    off.include_diagonal = false;
    CHECK(spatial_contrast_loss(p, off).item() == 0.0);
    CHECK(mean_offdiagonal_similarity(p) == 0.0);
  }
  SUBCASE("gradient") {
    const auto p = random_tensor({4, 3, 3}, rng, 0.0, 1.0, true);
    CHECK(grad_check([&] { return spatial_contrast_loss(p, cfg); }, {p}, 1e-5) <= 1e-4);
  }
}

TEST_CASE("flatten_channels") {
  std::mt19937_64 rng(4);
  const auto p = random_tensor({3, 4, 5}, rng);
  const auto rows = flatten_channels(p);
  REQUIRE(rows.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(rows[c].shape() == Shape{20});
    for (std::size_t i = 0; i < 20; ++i) CHECK(rows[c][i] == p[c * 20 + i]);
  }
}

TEST_CASE("total loss") {
  std::mt19937_64 rng(5);
  const auto pred = random_tensor({4, 6, 6}, rng, 0.0, 1.0, true);
  const auto gt = random_tensor({4, 6, 6}, rng, 0.0, 1.0);
  const auto mask = Tensor::full({4, 6, 6}, 1.0);
  LossConfig cfg;
  SUBCASE("gamma zero reduces to the counting term exactly") {
    cfg.gamma = 0.0;
    const auto t = total_loss(pred, gt, mask, cfg);
    CHECK(t.total.item() == counting_loss(pred, gt, mask).item());
  }
  SUBCASE("combination") {
    cfg.gamma = 0.3;
    const auto t = total_loss(pred, gt, mask, cfg);
    CHECK(t.counting.item() == counting_loss(pred, gt, mask).item());
    CHECK(t.spatial.item() == spatial_contrast_loss(pred, cfg).item());
    CHECK(t.total.item() ==
          doctest::Approx(t.counting.item() + 0.3 * t.spatial.item()).epsilon(1e-15));
    CHECK(grad_check([&] { return total_loss(pred, gt, mask, cfg).total; }, {pred}, 1e-5) <=
          1e-4);
  }
  SUBCASE("config validation and JSON") {
    cfg.gamma = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.gamma = 1e-3;
    cfg.include_diagonal = false;
    CHECK(LossConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  }
}
