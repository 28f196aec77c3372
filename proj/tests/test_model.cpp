#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "moc/error.hpp"
#include "moc/losses.hpp"
#include "moc/model.hpp"
#include "test_util.hpp"

using namespace moc;
using moc::testing::grad_check;
using moc::testing::probe;
using moc::testing::random_tensor;
using moc::testing::TempDir;

namespace {

ModelConfig small_config(std::size_t c = 4, std::size_t input = 16, std::size_t n = 3) {
  ModelConfig cfg;
  cfg.base_channels = c;
  cfg.input_size = input;
  cfg.num_categories = n;
  return cfg;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

Tensor kernel1x1(std::size_t out, std::size_t in, std::vector<double> v) {
  return Tensor(Shape{out, in, 1, 1}, std::move(v));
}

/// Step-by-step evaluation of the position attention equations.
std::vector<double> position_oracle(const Tensor& p, const DualAttentionParams& k, double alpha,
                                    std::vector<std::vector<double>>* attn_out = nullptr) {
  const std::size_t c = p.dim(0), n = p.dim(1) * p.dim(2), q = k.k1.dim(0);
  const auto P = p.values();
  auto proj = [&](const Tensor& w, std::size_t rows, std::size_t a, std::size_t i) {
    double s = 0.0;
    for (std::size_t b = 0; b < c; ++b) s += w.values()[a * c + b] * P[b * n + i];
    (void)rows;
    return s;
  };
  std::vector<std::vector<double>> S(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double e = 0.0;
      for (std::size_t a = 0; a < q; ++a) e += proj(k.k1, q, a, i) * proj(k.k2, q, a, j);
      S[j][i] = std::exp(e);
      z += S[j][i];
    }
    for (std::size_t i = 0; i < n; ++i) S[j][i] /= z;
  }
  std::vector<double> out(c * n);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += S[j][i] * proj(k.k3, c, a, i);
      out[a * n + j] = alpha * s + P[a * n + j];
    }
  if (attn_out) *attn_out = S;
  return out;
}

/// Step-by-step evaluation of the channel attention equations.
std::vector<double> channel_oracle(const Tensor& p, double beta) {
  const std::size_t c = p.dim(0), n = p.dim(1) * p.dim(2);
  const auto P = p.values();
  std::vector<std::vector<double>> A(c, std::vector<double>(c));
  for (std::size_t j = 0; j < c; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      double e = 0.0;
      for (std::size_t t = 0; t < n; ++t) e += P[i * n + t] * P[j * n + t];
      A[j][i] = std::exp(e);
      z += A[j][i];
    }
    for (std::size_t i = 0; i < c; ++i) A[j][i] /= z;
  }
  std::vector<double> out(c * n);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t t = 0; t < n; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < c; ++i) s += A[j][i] * P[i * n + t];
      out[j * n + t] = beta * s + P[j * n + t];
    }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double w = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

void check_row_stochastic(const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = m.values()[r * cols + c];
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

}  // namespace

TEST_CASE("model config validation and JSON") {
  auto cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.upsampling = Upsampling::kNearest;
  cfg.attention_reduction = 2;
  const auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  cfg.input_size = 40;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.base_channels = 6;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("assemble_input") {
  const auto cfg = small_config();
  std::mt19937_64 rng(1);
  const auto rgb = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  const auto nir = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  SUBCASE("channels in order R, G, B, NIR, normalized") {
    const auto y = assemble_input(rgb, nir, cfg);
    REQUIRE(y.shape() == Shape{4, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) {
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(y.values()[c * 256 + i] ==
              (rgb.values()[c * 256 + i] - cfg.input_mean[c]) / cfg.input_std[c]);
      CHECK(y.values()[3 * 256 + i] == (nir.values()[i] - cfg.input_mean[3]) / cfg.input_std[3]);
    }
  }
  SUBCASE("RGB-only") {
    auto rgb_cfg = cfg;
    rgb_cfg.use_nir = false;
    CHECK(assemble_input(rgb, std::nullopt, rgb_cfg).shape() == Shape{3, 16, 16});
    CHECK_THROWS_AS(assemble_input(rgb, nir, rgb_cfg), ValidationError);
    CHECK_THROWS_AS(assemble_input(rgb, std::nullopt, cfg), ValidationError);
  }
  SUBCASE("constant rasters stay constant per channel") {
    const auto y = assemble_input(Tensor::full({3, 16, 16}, 0.3), Tensor::full({1, 16, 16}, 0.7),
                                  cfg);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 256; ++i) CHECK(y.values()[c * 256 + i] == y.values()[c * 256]);
  }
  SUBCASE("size mismatch") {
    CHECK_THROWS_AS(assemble_input(rgb, Tensor(Shape{1, 8, 16}), cfg), DimensionError);
    CHECK_THROWS_AS(assemble_input(Tensor(Shape{2, 16, 16}), nir, cfg), DimensionError);
  }
}

TEST_CASE("encoder and pyramid shapes") {
  const auto m = MccModel::init(small_config(16, 64, 6), 3);
  std::mt19937_64 rng(2);
  const auto y = random_tensor({4, 64, 64}, rng);
  const auto f = encode(y, m);
  CHECK(f.f1.shape() == Shape{16, 16, 16});
  CHECK(f.f2.shape() == Shape{32, 8, 8});
  CHECK(f.f3.shape() == Shape{64, 4, 4});
  const auto p = fpn(f, m);
  CHECK(p.p1.shape() == Shape{16, 16, 16});
  CHECK(p.p2.shape() == Shape{16, 8, 8});
  CHECK(p.p3.shape() == Shape{16, 4, 4});
  CHECK(fuse_scales(p).shape() == Shape{48, 16, 16});
  CHECK_THROWS_AS(encode(random_tensor({4, 40, 40}, rng), m), DimensionError);

  SUBCASE("shape contract over several configurations") {
    for (std::size_t c : {4, 8, 12}) {
      for (std::size_t s : {16, 32, 48}) {
        const auto mm = MccModel::init(small_config(c, s, 2), 1);
        const auto out = forward(random_tensor({3, s, s}, rng, 0, 1),
                                 random_tensor({1, s, s}, rng, 0, 1), mm);
        CHECK(out.values.shape() == Shape{2, s / 4, s / 4});
        const auto tr = forward_trace(random_tensor({3, s, s}, rng, 0, 1),
                                      random_tensor({1, s, s}, rng, 0, 1), mm);
        CHECK(tr.features.f3.shape() == Shape{4 * c, s / 16, s / 16});
        CHECK(tr.fused.shape() == Shape{3 * c, s / 4, s / 4});
      }
    }
  }
}

TEST_CASE("encoder zero input with zero biases gives zero features") {
  const auto m = MccModel::init(small_config(), 5);
  const auto f = encode(Tensor(Shape{4, 16, 16}), m);
  for (const auto* t : {&f.f1, &f.f2, &f.f3})
    for (double v : t->values()) CHECK(v == 0.0);
}

TEST_CASE("encoder gradient of sum(F3) with respect to the first stage kernel") {
  const auto m = MccModel::init(small_config(), 6);
  std::mt19937_64 rng(6);
  const auto y = random_tensor({4, 16, 16}, rng);
  CHECK(grad_check([&] { return sum(encode(y, m).f3); }, {m.enc1_w}, 1e-5) <= 1e-4);
}

TEST_CASE("fpn pathway decomposition") {
  auto m = MccModel::init(small_config(), 7);
  std::mt19937_64 rng(7);
  Features f{random_tensor({4, 4, 4}, rng), random_tensor({8, 2, 2}, rng),
             random_tensor({16, 1, 1}, rng)};
  const auto p = fpn(f, m);
  CHECK(bit_equal(p.p3, conv2d(f.f3, m.lat3_w, 1, 0, m.lat3_b)));

  SUBCASE("a zero top-down path leaves only the lateral") {
    m.lat3_w = Tensor(m.lat3_w.shape());
    const auto q = fpn(f, m);
    CHECK(bit_equal(q.p2, conv2d(conv2d(f.f2, m.lat2_w, 1, 0, m.lat2_b), m.smooth2_w, 1, 1,
                                 m.smooth2_b)));
  }
  SUBCASE("identity lateral passes F3 through") {
    // lat3 selecting the first C channels of F3
    std::vector<double> sel(4 * 16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) sel[i * 16 + i] = 1.0;
    m.lat3_w = kernel1x1(4, 16, sel);
    const auto q = fpn(f, m);
    CHECK(bit_equal(q.p3, slice(f.f3, 0, 0, 4)));
  }
}

TEST_CASE("fuse_scales") {
  std::mt19937_64 rng(8);
  Pyramid p{random_tensor({16, 16, 16}, rng), Tensor(Shape{16, 8, 8}), Tensor(Shape{16, 4, 4})};
  const auto f = fuse_scales(p);
  REQUIRE(f.shape() == Shape{48, 16, 16});
  for (std::size_t i = 16 * 256; i < 48 * 256; ++i) CHECK(f.values()[i] == 0.0);
  CHECK(bit_equal(slice(f, 0, 0, 16), p.p1));

  Pyramid c{Tensor::full({4, 8, 8}, 1.5), Tensor::full({4, 4, 4}, 1.5),
            Tensor::full({4, 2, 2}, 1.5)};
  const auto bilinear = fuse_scales(c);
  for (double v : bilinear.values()) CHECK(v == doctest::Approx(1.5).epsilon(1e-15));
  const auto nearest = fuse_scales(c, Upsampling::kNearest);
  for (double v : nearest.values()) CHECK(v == 1.5);
}

TEST_CASE("position attention") {
  std::mt19937_64 rng(9);
  SUBCASE("zero gain is an exact residual") {
    const auto m = MccModel::init(small_config(), 9);
    const auto p = random_tensor({12, 4, 4}, rng);
    const auto r = position_attention(p, m.attention);
    CHECK(bit_equal(r.out, p));
    check_row_stochastic(r.map);
  }
  SUBCASE("2x2x2 input against the scalar oracle") {
    DualAttentionParams k;
    k.k1 = kernel1x1(2, 2, {0.5, -0.3, 0.2, 0.9});
    k.k2 = kernel1x1(2, 2, {1.1, 0.4, -0.7, 0.3});
    k.k3 = kernel1x1(2, 2, {0.6, 0.1, -0.2, 1.3});
    k.alpha = Tensor::scalar(0.75);
    k.beta = Tensor::scalar(0.0);
    const Tensor p(Shape{2, 2, 2}, {0.3, -1.2, 0.8, 0.5, 1.7, -0.4, 0.2, 0.9});
    std::vector<std::vector<double>> S;
    const auto want = position_oracle(p, k, 0.75, &S);
    const auto got = position_attention(p, k);
    CHECK(max_abs_diff(got.out.values(), want) <= 1e-10);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 4; ++i)
        CHECK(std::abs(got.map.values()[j * 4 + i] - S[j][i]) <= 1e-10);
    check_row_stochastic(got.map);
  }
  SUBCASE("random 6x3x3 against the scalar oracle") {
    auto m = MccModel::init(small_config(), 10);
    DualAttentionParams k{random_tensor({6, 6, 1, 1}, rng), random_tensor({6, 6, 1, 1}, rng),
                          random_tensor({6, 6, 1, 1}, rng), Tensor::scalar(-0.4),
                          Tensor::scalar(0.0), {}};
    const auto p = random_tensor({6, 3, 3}, rng);
    CHECK(max_abs_diff(position_attention(p, k).out.values(), position_oracle(p, k, -0.4)) <=
          1e-10);
  }
  SUBCASE("reduced query and key width") {
    auto cfg = small_config();
    cfg.attention_reduction = 4;
    auto m = MccModel::init(cfg, 11);
    CHECK(m.attention.k1.shape() == Shape{3, 12, 1, 1});
    m.attention.alpha = Tensor::scalar(0.3);
    const auto p = random_tensor({12, 2, 2}, rng);
    CHECK(max_abs_diff(position_attention(p, m.attention).out.values(),
                       position_oracle(p, m.attention, 0.3)) <= 1e-10);
  }
}

TEST_CASE("channel attention") {
  std::mt19937_64 rng(12);
  SUBCASE("zero gain is an exact residual") {
    const auto m = MccModel::init(small_config(), 12);
    const auto p = random_tensor({12, 4, 4}, rng);
    const auto r = channel_attention(p, m.attention);
    CHECK(bit_equal(r.out, p));
    CHECK(r.map.shape() == Shape{12, 12});
    check_row_stochastic(r.map);
  }
  SUBCASE("3x2x2 input against the scalar oracle") {
    DualAttentionParams k;
    k.beta = Tensor::scalar(1.25);
    const Tensor p(Shape{3, 2, 2}, {0.3, -1.2, 0.8, 0.5, 1.7, -0.4, 0.2, 0.9, -0.6, 0.1, 0.4, 1.0});
    const auto got = channel_attention(p, k);
    CHECK(max_abs_diff(got.out.values(), channel_oracle(p, 1.25)) <= 1e-10);
    check_row_stochastic(got.map);
  }
}

TEST_CASE("dual_fuse") {
  std::mt19937_64 rng(13);
  const auto f1 = random_tensor({3, 2, 2}, rng), f2 = random_tensor({3, 2, 2}, rng);
  DualAttentionParams k;
  std::vector<double> select(3 * 6, 0.0), average(3 * 6, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    select[i * 6 + i] = 1.0;
    average[i * 6 + i] = 0.5;
    average[i * 6 + 3 + i] = 0.5;
  }
  k.k_out = kernel1x1(3, 6, select);
  CHECK(bit_equal(dual_fuse(f1, f2, k), f1));
  k.k_out = kernel1x1(3, 6, average);
  CHECK(max_abs_diff(dual_fuse(f1, f1, k).values(), f1.values()) <= 1e-15);
  k.k_out = random_tensor({3, 6, 1, 1}, rng);
  const auto w = random_tensor({3, 2, 2}, rng);
  CHECK(grad_check([&] { return probe(dual_fuse(f1, f2, k), w); }, {f1, f2, k.k_out}) <= 1e-4);
  CHECK_THROWS_AS(dual_fuse(f1, random_tensor({3, 2, 1}, rng), k), DimensionError);
}

TEST_CASE("forward") {
  std::mt19937_64 rng(14);
  const auto rgb = random_tensor({3, 64, 64}, rng, 0.0, 1.0);
  const auto nir = random_tensor({1, 64, 64}, rng, 0.0, 1.0);
  SUBCASE("output shape") {
    const auto m = MccModel::init(small_config(8, 64, 6), 1);
    const auto d = forward(rgb, nir, m);
    CHECK(d.values.shape() == Shape{6, 16, 16});
    CHECK(d.category_order.size() == 6);
    CHECK_THROWS_AS(forward(rgb, nir, m, {"a", "b"}), DimensionError);
  }
  SUBCASE("all-zero parameters give zero output") {
    auto m = MccModel::init(small_config(8, 64, 6), 1);
    for (auto [name, t] : m.parameters())
      for (auto& v : t.mutable_values()) v = 0.0;
    const auto out = forward(rgb, nir, m);
    for (double v : out.values.values()) CHECK(v == 0.0);
  }
  SUBCASE("deterministic") {
    const auto a = MccModel::init(small_config(8, 64, 6), 4);
    const auto b = MccModel::init(small_config(8, 64, 6), 4);
    CHECK(bit_equal(forward(rgb, nir, a).values, forward(rgb, nir, b).values));
  }
  SUBCASE("fresh initialization keeps both attention branches at P") {
    const auto m = MccModel::init(small_config(8, 64, 6), 4);
    const auto t = forward_trace(rgb, nir, m);
    CHECK(bit_equal(t.position->out, t.fused));
    CHECK(bit_equal(t.channel->out, t.fused));
    CHECK(bit_equal(t.fused_attention, dual_fuse(t.fused, t.fused, m.attention)));
  }
  SUBCASE("plain reduction path when attention is disabled") {
    auto cfg = small_config(8, 64, 6);
    cfg.use_dual_attention = false;
    const auto m = MccModel::init(cfg, 4);
    const auto t = forward_trace(rgb, nir, m);
    CHECK_FALSE(t.position.has_value());
    CHECK(bit_equal(t.fused_attention, conv2d(t.fused, m.reduce_w)));
    const auto names = m.parameters();
    CHECK(std::none_of(names.begin(), names.end(),
                       [](const auto& p) { return p.first.rfind("attention.", 0) == 0; }));
  }
}

TEST_CASE("end-to-end gradient of the joint loss on a 32x32 input") {
  auto m = MccModel::init(small_config(4, 32, 3), 21);
  m.attention.alpha = Tensor::scalar(0.5);
  m.attention.beta = Tensor::scalar(0.5);
  std::mt19937_64 rng(21);
  const auto rgb = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  const auto nir = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const auto gt = random_tensor({3, 8, 8}, rng, 0.0, 0.5);
  const auto mask = Tensor::full({3, 8, 8}, 1.0);
  LossConfig lc;
  lc.gamma = 0.5;
  std::vector<Tensor> params;
  for (const auto& [name, t] : m.parameters()) params.push_back(t);
  const double err = grad_check(
      [&] { return total_loss(forward(rgb, nir, m).values, gt, mask, lc).total; }, params, 1e-4);
  CHECK(err <= 1e-4);
}

TEST_CASE("parameters, clone and flip") {
  auto m = MccModel::init(small_config(), 30);
  std::set<std::string> names;
  for (const auto& [name, t] : m.parameters()) CHECK(names.insert(name).second);
  CHECK(names.count("attention.alpha") == 1);

  const auto c = m.clone();
  m.proj_w.mutable_values()[0] += 1.0;
  CHECK(c.proj_w.values()[0] != m.proj_w.values()[0]);

  const Tensor t(Shape{1, 2, 3}, {1, 2, 3, 4, 5, 6});
  const auto f = flip_horizontal(t);
  CHECK(std::vector<double>(f.values().begin(), f.values().end()) ==
        std::vector<double>{3, 2, 1, 6, 5, 4});
  CHECK(bit_equal(flip_horizontal(f), t));
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("checkpoint");
  auto m = MccModel::init(small_config(), 31);
  m.attention.alpha = Tensor::scalar(0.25);
  save_checkpoint(dir / "ck", m, 17, nlohmann::ordered_json{{"note", "x"}});
  std::uint64_t step = 0;
  const auto back = load_checkpoint(dir / "ck", &step);
  CHECK(step == 17);
  CHECK(back.config.to_json() == m.config.to_json());
  const auto a = m.parameters(), b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(bit_equal(a[i].second, b[i].second));
  }

  SUBCASE("config mismatch is rejected") {
    auto manifest = nlohmann::ordered_json::parse(moc::testing::read_file(dir / "ck.json"));
    manifest["config"]["base_channels"] = 8;
    moc::testing::write_file(dir / "ck.json", manifest.dump());
    CHECK_THROWS_AS(load_checkpoint(dir / "ck"), ValidationError);
  }
}
