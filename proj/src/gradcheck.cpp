#include "moc/gradcheck.hpp"

#include <algorithm>
#include <random>

#include "moc/error.hpp"
#include "moc/losses.hpp"
#include "moc/model.hpp"

namespace moc {

double check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                       double eps) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  GradTape::current().clear();
  backward(loss());
  double worst = 0.0;
  for (auto& t : wrt) {
    const auto analytic = t.grad();
    const auto numeric = finite_diff_grad([&](const Tensor&) { return loss().item(); }, t, eps);
    worst = std::max(worst, max_relative_error(analytic, numeric.values()));
  }
  for (auto& t : wrt) t.zero_grad();
  return worst;
}

namespace {

struct Unit {
  const char* scope;
  const char* name;
  // returns the worst error and fills the number of checked elements
  std::function<double(std::size_t&)> run;
};

Tensor random(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor probe(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

std::size_t count(const std::vector<Tensor>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.numel();
  return n;
}

double run_probe(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                 std::vector<Tensor> inputs, std::mt19937_64& rng, double eps,
                 std::size_t& elements) {
  Tensor weights;
  {
    NoGradGuard guard;
    weights = random(op(inputs).shape(), rng);
  }
  elements = count(inputs);
  return check_gradients([&] { return probe(op(inputs), weights); }, inputs, eps);
}

ModelConfig toy_config(bool use_nir, bool attention) {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.num_categories = 3;
  cfg.input_size = 16;
  cfg.use_nir = use_nir;
  cfg.use_dual_attention = attention;
  return cfg;
}

MccModel toy_model(bool use_nir, bool attention, std::uint64_t seed) {
  auto m = MccModel::init(toy_config(use_nir, attention), seed);
  // nonzero gains so that the attention kernels receive gradient
  m.attention.alpha = Tensor::scalar(0.5);
  m.attention.beta = Tensor::scalar(0.5);
  std::mt19937_64 rng(seed + 99);
  for (Tensor* b : {&m.enc1_b, &m.enc2_b, &m.enc3_b, &m.lat1_b, &m.lat2_b, &m.lat3_b,
                    &m.smooth1_b, &m.smooth2_b, &m.proj_b}) {
    *b = random(b->shape(), rng, -0.1, 0.1);
  }
  return m;
}

std::vector<Tensor> tensors_of(const MccModel& m) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : m.parameters()) out.push_back(t);
  return out;
}

double forward_unit(bool use_nir, bool attention, std::size_t& elements) {
  std::mt19937_64 rng(attention ? 42 : 43);
  const auto m = toy_model(use_nir, attention, 7);
  const auto rgb = random({3, 16, 16}, rng, 0.0, 1.0);
  const auto nir = random({1, 16, 16}, rng, 0.0, 1.0);
  const auto gt = random({3, 4, 4}, rng, 0.0, 0.5);
  auto mask = Tensor::full({3, 4, 4}, 1.0);
  mask.mutable_values()[5] = 0.0;
  LossConfig lc;
  lc.gamma = 0.5;
  auto params = tensors_of(m);
  elements = count(params);
  const std::optional<Tensor> nir_in = use_nir ? std::optional<Tensor>(nir) : std::nullopt;
  // Some attention-kernel components are ~1e-8 against a loss of ~0.1, so a smaller step
  // lets round-off in the loss dominate the difference quotient.
  return check_gradients(
      [&] { return total_loss(forward(rgb, nir_in, m).values, gt, mask, lc).total; }, params,
      1e-4);
}

const std::vector<Unit>& registry() {
  static const std::vector<Unit> units = {
      {"ops", "add", [](std::size_t& n) {
         std::mt19937_64 rng(1);
         return run_probe([](const auto& x) { return add(x[0], x[1]); },
                          {random({3, 4}, rng), random({3, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "sub", [](std::size_t& n) {
         std::mt19937_64 rng(2);
         return run_probe([](const auto& x) { return sub(x[0], x[1]); },
                          {random({3, 4}, rng), random({3, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "mul", [](std::size_t& n) {
         std::mt19937_64 rng(3);
         return run_probe([](const auto& x) { return mul(x[0], x[1]); },
                          {random({3, 4}, rng), random({3, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "div", [](std::size_t& n) {
         std::mt19937_64 rng(4);
         return run_probe([](const auto& x) { return div(x[0], x[1]); },
                          {random({3, 4}, rng), random({3, 4}, rng, 0.5, 2.0)}, rng, 1e-6, n);
       }},
      {"ops", "mul_scalar", [](std::size_t& n) {
         std::mt19937_64 rng(5);
         return run_probe([](const auto& x) { return mul_scalar(x[0], x[1]); },
                          {random({2, 3, 3}, rng), random({1}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "sqrt", [](std::size_t& n) {
         std::mt19937_64 rng(6);
         return run_probe([](const auto& x) { return sqrt(x[0]); },
                          {random({3, 4}, rng, 0.5, 2.0)}, rng, 1e-6, n);
       }},
      {"ops", "silu", [](std::size_t& n) {
         std::mt19937_64 rng(7);
         return run_probe([](const auto& x) { return silu(x[0]); }, {random({2, 5, 5}, rng, -3, 3)},
                          rng, 1e-5, n);
       }},
      {"ops", "sum_mean", [](std::size_t& n) {
         std::mt19937_64 rng(8);
         return run_probe(
             [](const auto& x) { return add(scale(sum(x[0]), 0.3), mean(mul(x[0], x[0]))); },
             {random({4, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "normalize_rows", [](std::size_t& n) {
         std::mt19937_64 rng(9);
         return run_probe([](const auto& x) { return normalize_rows(x[0], 1e-12); },
                          {random({3, 6}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "transpose_reshape", [](std::size_t& n) {
         std::mt19937_64 rng(10);
         return run_probe([](const auto& x) { return reshape(transpose(x[0]), {2, 6}); },
                          {random({3, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "matmul", [](std::size_t& n) {
         std::mt19937_64 rng(11);
         return run_probe([](const auto& x) { return matmul(x[0], x[1]); },
                          {random({3, 5}, rng), random({5, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "softmax_axis0", [](std::size_t& n) {
         std::mt19937_64 rng(12);
         return run_probe([](const auto& x) { return softmax_axis(x[0], 0); },
                          {random({4, 3}, rng, -2, 2)}, rng, 1e-6, n);
       }},
      {"ops", "softmax_axis1", [](std::size_t& n) {
         std::mt19937_64 rng(13);
         return run_probe([](const auto& x) { return softmax_axis(x[0], 1); },
                          {random({3, 4}, rng, -2, 2)}, rng, 1e-6, n);
       }},
      {"ops", "conv2d", [](std::size_t& n) {
         std::mt19937_64 rng(14);
         return run_probe([](const auto& x) { return conv2d(x[0], x[1], 1, 1, x[2]); },
                          {random({2, 6, 6}, rng), random({2, 2, 3, 3}, rng), random({2}, rng)},
                          rng, 1e-6, n);
       }},
      {"ops", "conv2d_strided", [](std::size_t& n) {
         std::mt19937_64 rng(15);
         return run_probe([](const auto& x) { return conv2d(x[0], x[1], 2, 0); },
                          {random({2, 7, 7}, rng), random({3, 2, 3, 3}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "upsample_bilinear", [](std::size_t& n) {
         std::mt19937_64 rng(16);
         double w = 0.0;
         std::size_t k = 0;
         for (std::size_t f : {2, 4}) {
           w = std::max(w, run_probe([f](const auto& x) { return upsample_bilinear(x[0], f); },
                                     {random({1, 3, 3}, rng)}, rng, 1e-6, k));
           n += k;
         }
         return w;
       }},
      {"ops", "upsample_nearest", [](std::size_t& n) {
         std::mt19937_64 rng(17);
         return run_probe(
             [](const auto& x) { return upsample(x[0], 2, Upsampling::kNearest); },
             {random({2, 3, 3}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "sum_pool2d", [](std::size_t& n) {
         std::mt19937_64 rng(18);
         return run_probe([](const auto& x) { return sum_pool2d(x[0], 2); },
                          {random({2, 4, 4}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "avg_pool2d", [](std::size_t& n) {
         std::mt19937_64 rng(19);
         return run_probe([](const auto& x) { return avg_pool2d(x[0], 4); },
                          {random({2, 8, 8}, rng)}, rng, 1e-6, n);
       }},
      {"ops", "concat_slice", [](std::size_t& n) {
         std::mt19937_64 rng(20);
         return run_probe(
             [](const auto& x) {
               const auto c = concat({x[0], x[1]}, 0);
               return mul(slice(c, 0, 1, 4), slice(c, 0, 0, 3));
             },
             {random({3, 2, 2}, rng), random({1, 2, 2}, rng)}, rng, 1e-6, n);
       }},

      {"model", "encode", [](std::size_t& n) {
         std::mt19937_64 rng(31);
         const auto m = toy_model(true, true, 3);
         std::vector<Tensor> in{random({4, 16, 16}, rng), m.enc1_w, m.enc1_b, m.enc2_w,
                                m.enc2_b, m.enc3_w, m.enc3_b};
         Tensor w1 = random({4, 4, 4}, rng), w2 = random({8, 2, 2}, rng),
                w3 = random({16, 1, 1}, rng);
         n = count(in);
         return check_gradients(
             [&] {
               const auto f = encode(in[0], m);
               return add(add(probe(f.f1, w1), probe(f.f2, w2)), probe(f.f3, w3));
             },
             in, 1e-5);
       }},
      {"model", "fpn", [](std::size_t& n) {
         std::mt19937_64 rng(32);
         const auto m = toy_model(true, true, 4);
         Features f{random({4, 4, 4}, rng), random({8, 2, 2}, rng), random({16, 1, 1}, rng)};
         std::vector<Tensor> in{f.f1, f.f2, f.f3, m.lat1_w, m.lat1_b, m.lat2_w, m.lat2_b,
                                m.lat3_w, m.lat3_b, m.smooth1_w, m.smooth1_b, m.smooth2_w,
                                m.smooth2_b};
         Tensor w = random({12, 4, 4}, rng);
         n = count(in);
         return check_gradients(
             [&] { return probe(fuse_scales(fpn(f, m)), w); }, in, 1e-6);
       }},
      {"model", "position_attention", [](std::size_t& n) {
         std::mt19937_64 rng(33);
         auto params = toy_model(true, true, 5).attention;
         Tensor p = random({12, 4, 4}, rng);
         Tensor w = random({12, 4, 4}, rng);
         std::vector<Tensor> in{p, params.k1, params.k2, params.k3, params.alpha};
         n = count(in);
         return check_gradients([&] { return probe(position_attention(p, params).out, w); },
                                in, 1e-5);
       }},
      {"model", "channel_attention", [](std::size_t& n) {
         std::mt19937_64 rng(34);
         auto params = toy_model(true, true, 6).attention;
         Tensor p = random({12, 4, 4}, rng, -0.5, 0.5);
         Tensor w = random({12, 4, 4}, rng);
         std::vector<Tensor> in{p, params.beta};
         n = count(in);
         return check_gradients([&] { return probe(channel_attention(p, params).out, w); },
                                in, 1e-5);
       }},
      {"model", "dual_fuse", [](std::size_t& n) {
         std::mt19937_64 rng(35);
         auto params = toy_model(true, true, 7).attention;
         Tensor f1 = random({12, 4, 4}, rng), f2 = random({12, 4, 4}, rng);
         Tensor w = random({12, 4, 4}, rng);
         std::vector<Tensor> in{f1, f2, params.k_out};
         n = count(in);
         return check_gradients([&] { return probe(dual_fuse(f1, f2, params), w); }, in, 1e-6);
       }},
      {"model", "forward", [](std::size_t& n) { return forward_unit(true, true, n); }},
      {"model", "forward_rgb_plain", [](std::size_t& n) { return forward_unit(false, false, n); }},

      {"losses", "counting_loss", [](std::size_t& n) {
         std::mt19937_64 rng(51);
         Tensor pred = random({2, 4, 4}, rng), gt = random({2, 4, 4}, rng);
         auto mask = random({2, 4, 4}, rng, 0.0, 1.0);
         for (auto& v : mask.mutable_values()) v = v < 0.3 ? 0.0 : 1.0;
         n = pred.numel();
         return check_gradients([&] { return counting_loss(pred, gt, mask); }, {pred}, 1e-6);
       }},
      {"losses", "cosine_similarity", [](std::size_t& n) {
         std::mt19937_64 rng(52);
         Tensor u = random({8}, rng), v = random({8}, rng);
         n = 16;
         return check_gradients([&] { return cosine_similarity(u, v, 1e-12); }, {u, v}, 1e-6);
       }},
      {"losses", "spatial_contrast_loss", [](std::size_t& n) {
         std::mt19937_64 rng(53);
         Tensor pred = random({3, 4, 4}, rng, 0.0, 1.0);
         double worst = 0.0;
         for (bool diag : {true, false}) {
           LossConfig cfg;
           cfg.include_diagonal = diag;
           worst = std::max(worst, check_gradients(
                                       [&] { return spatial_contrast_loss(pred, cfg); }, {pred},
                                       1e-6));
         }
         n = 2 * pred.numel();
         return worst;
       }},
      {"losses", "total_loss", [](std::size_t& n) {
         std::mt19937_64 rng(54);
         Tensor pred = random({2, 4, 4}, rng, 0.0, 1.0), gt = random({2, 4, 4}, rng, 0.0, 1.0);
         auto mask = Tensor::full({2, 4, 4}, 1.0);
         LossConfig cfg;
         cfg.gamma = 0.1;
         n = pred.numel();
         return check_gradients([&] { return total_loss(pred, gt, mask, cfg).total; }, {pred},
                                1e-6);
       }},
  };
  return units;
}

bool in_scope(const Unit& u, const std::string& scope) {
  return scope == "all" || scope == u.scope;
}

void check_scope(const std::string& scope) {
  if (scope != "all" && scope != "ops" && scope != "model" && scope != "losses") {
    throw ValidationError("unknown gradcheck scope '" + scope + "' (ops, model, losses, all)");
  }
}

}  // namespace

std::vector<std::string> gradcheck_units(const std::string& scope) {
  check_scope(scope);
  std::vector<std::string> out;
  for (const auto& u : registry())
    if (in_scope(u, scope)) out.push_back(std::string(u.scope) + "/" + u.name);
  return out;
}

std::vector<GradcheckOutcome> run_gradcheck(const std::string& scope, double tolerance) {
  check_scope(scope);
  std::vector<GradcheckOutcome> out;
  for (const auto& u : registry()) {
    if (!in_scope(u, scope)) continue;
    GradcheckOutcome o;
    o.scope = u.scope;
    o.unit = u.name;
    o.worst_error = u.run(o.elements);
    o.passed = o.worst_error <= tolerance;
    out.push_back(o);
  }
  return out;
}

}  // namespace moc
