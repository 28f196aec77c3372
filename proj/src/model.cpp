#include "moc/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

void ModelConfig::validate() const {
  if (base_channels < 4 || base_channels % 4 != 0) {
    throw ValidationError("base_channels must be >= 4 and divisible by 4");
  }
  if (input_size == 0 || input_size % 16 != 0) {
    throw ValidationError("input_size must be a positive multiple of 16");
  }
  if (num_categories < 1) throw ValidationError("num_categories must be >= 1");
  if (attention_reduction < 1 || (3 * base_channels) % attention_reduction != 0) {
    throw ValidationError("attention_reduction must divide 3 * base_channels");
  }
  for (double s : input_std) {
    if (!(s > 0.0)) throw ValidationError("input_std entries must be positive");
  }
}

ojson ModelConfig::to_json() const {
  ojson j;
  j["base_channels"] = base_channels;
  j["num_categories"] = num_categories;
  j["use_nir"] = use_nir;
  j["use_dual_attention"] = use_dual_attention;
  j["input_size"] = input_size;
  j["upsampling"] = upsampling == Upsampling::kBilinear ? "bilinear" : "nearest";
  j["attention_reduction"] = attention_reduction;
  j["input_mean"] = input_mean;
  j["input_std"] = input_std;
  return j;
}

ModelConfig ModelConfig::from_json(const ojson& j) {
  ModelConfig c;
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.num_categories = j.value("num_categories", c.num_categories);
    c.use_nir = j.value("use_nir", c.use_nir);
    c.use_dual_attention = j.value("use_dual_attention", c.use_dual_attention);
    c.input_size = j.value("input_size", c.input_size);
    const auto mode = j.value("upsampling", std::string("bilinear"));
    if (mode == "bilinear") {
      c.upsampling = Upsampling::kBilinear;
    } else if (mode == "nearest") {
      c.upsampling = Upsampling::kNearest;
    } else {
      throw ValidationError("upsampling must be 'bilinear' or 'nearest'");
    }
    c.attention_reduction = j.value("attention_reduction", c.attention_reduction);
    c.input_mean = j.value("input_mean", c.input_mean);
    c.input_std = j.value("input_std", c.input_std);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

Tensor uniform_kernel(Shape shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  return conv2d(x, w, 1, 0, b);
}

}  // namespace

MccModel MccModel::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = cfg.base_channels;
  const std::size_t cin = cfg.input_channels();
  const std::size_t p = 3 * c;
  const std::size_t q = p / cfg.attention_reduction;
  MccModel m;
  m.config = cfg;
  m.enc1_w = uniform_kernel({c, cin, 3, 3}, rng);
  m.enc1_b = Tensor(Shape{c});
  m.enc2_w = uniform_kernel({2 * c, c, 3, 3}, rng);
  m.enc2_b = Tensor(Shape{2 * c});
  m.enc3_w = uniform_kernel({4 * c, 2 * c, 3, 3}, rng);
  m.enc3_b = Tensor(Shape{4 * c});
  m.lat1_w = uniform_kernel({c, c, 1, 1}, rng);
  m.lat1_b = Tensor(Shape{c});
  m.lat2_w = uniform_kernel({c, 2 * c, 1, 1}, rng);
  m.lat2_b = Tensor(Shape{c});
  m.lat3_w = uniform_kernel({c, 4 * c, 1, 1}, rng);
  m.lat3_b = Tensor(Shape{c});
  m.smooth1_w = uniform_kernel({c, c, 3, 3}, rng);
  m.smooth1_b = Tensor(Shape{c});
  m.smooth2_w = uniform_kernel({c, c, 3, 3}, rng);
  m.smooth2_b = Tensor(Shape{c});
  m.attention.k1 = uniform_kernel({q, p, 1, 1}, rng);
  m.attention.k2 = uniform_kernel({q, p, 1, 1}, rng);
  m.attention.k3 = uniform_kernel({p, p, 1, 1}, rng);
  m.attention.alpha = Tensor::scalar(0.0);
  m.attention.beta = Tensor::scalar(0.0);
  m.attention.k_out = uniform_kernel({p, 2 * p, 1, 1}, rng);
  m.reduce_w = uniform_kernel({p, p, 1, 1}, rng);
  m.proj_w = uniform_kernel({cfg.num_categories, p, 1, 1}, rng);
  m.proj_b = Tensor(Shape{cfg.num_categories});
  return m;
}

std::vector<std::pair<std::string, Tensor>> MccModel::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"encoder.stage1.weight", enc1_w}, {"encoder.stage1.bias", enc1_b},
      {"encoder.stage2.weight", enc2_w}, {"encoder.stage2.bias", enc2_b},
      {"encoder.stage3.weight", enc3_w}, {"encoder.stage3.bias", enc3_b},
      {"fpn.lateral1.weight", lat1_w},   {"fpn.lateral1.bias", lat1_b},
      {"fpn.lateral2.weight", lat2_w},   {"fpn.lateral2.bias", lat2_b},
      {"fpn.lateral3.weight", lat3_w},   {"fpn.lateral3.bias", lat3_b},
      {"fpn.smooth1.weight", smooth1_w}, {"fpn.smooth1.bias", smooth1_b},
      {"fpn.smooth2.weight", smooth2_w}, {"fpn.smooth2.bias", smooth2_b},
  };
  if (config.use_dual_attention) {
    out.insert(out.end(), {{"attention.query", attention.k1},
                           {"attention.key", attention.k2},
                           {"attention.value", attention.k3},
                           {"attention.alpha", attention.alpha},
                           {"attention.beta", attention.beta},
                           {"attention.fuse", attention.k_out}});
  } else {
    out.emplace_back("reduce.weight", reduce_w);
  }
  out.emplace_back("projector.weight", proj_w);
  out.emplace_back("projector.bias", proj_b);
  return out;
}

void MccModel::set_requires_grad(bool flag) const {
  for (auto [name, t] : parameters()) t.set_requires_grad(flag);
}

void MccModel::zero_grad() const {
  for (auto [name, t] : parameters()) t.zero_grad();
}

MccModel MccModel::clone() const {
  MccModel m = *this;
  for (Tensor* t : {&m.enc1_w, &m.enc1_b, &m.enc2_w, &m.enc2_b, &m.enc3_w, &m.enc3_b,
                    &m.lat1_w, &m.lat1_b, &m.lat2_w, &m.lat2_b, &m.lat3_w, &m.lat3_b,
                    &m.smooth1_w, &m.smooth1_b, &m.smooth2_w, &m.smooth2_b, &m.attention.k1,
                    &m.attention.k2, &m.attention.k3, &m.attention.alpha, &m.attention.beta,
                    &m.attention.k_out, &m.reduce_w, &m.proj_w, &m.proj_b}) {
    const bool rg = t->requires_grad();
    *t = t->detach();
    t->set_requires_grad(rg);
  }
  return m;
}

// ---------------------------------------------------------------------------

Tensor assemble_input(const Tensor& rgb, const std::optional<Tensor>& nir,
                      const ModelConfig& cfg) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw DimensionError("assemble_input: rgb must be 3 x H x W, got " +
                         shape_string(rgb.shape()));
  }
  if (cfg.use_nir != nir.has_value()) {
    throw ValidationError(cfg.use_nir ? "assemble_input: model expects an NIR raster"
                                      : "assemble_input: NIR supplied to an RGB-only model");
  }
  std::vector<Tensor> parts{rgb};
  if (nir) {
    if (nir->rank() != 3 || nir->dim(0) != 1 || nir->dim(1) != rgb.dim(1) ||
        nir->dim(2) != rgb.dim(2)) {
      throw DimensionError("assemble_input: nir " + shape_string(nir->shape()) +
                           " does not match rgb " + shape_string(rgb.shape()));
    }
    parts.push_back(*nir);
  }
  const auto y = concat(parts, 0);
  const std::size_t channels = y.dim(0);
  const std::size_t plane = y.dim(1) * y.dim(2);
  std::vector<double> v(y.values().begin(), y.values().end());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      v[c * plane + i] = (v[c * plane + i] - cfg.input_mean[c]) / cfg.input_std[c];
  return Tensor(y.shape(), std::move(v));
}

Features encode(const Tensor& y, const MccModel& m) {
  if (y.rank() != 3 || y.dim(1) % 16 != 0 || y.dim(2) % 16 != 0) {
    throw DimensionError("encode: spatial extent must be divisible by 16, got " +
                         shape_string(y.shape()));
  }
  Features f;
  f.f1 = avg_pool2d(silu(conv2d(y, m.enc1_w, 1, 1, m.enc1_b)), 4);
  f.f2 = avg_pool2d(silu(conv2d(f.f1, m.enc2_w, 1, 1, m.enc2_b)), 2);
  f.f3 = avg_pool2d(silu(conv2d(f.f2, m.enc3_w, 1, 1, m.enc3_b)), 2);
  return f;
}

Pyramid fpn(const Features& f, const MccModel& m) {
  const auto mode = m.config.upsampling;
  Pyramid p;
  p.p3 = conv1x1(f.f3, m.lat3_w, m.lat3_b);
  const auto merged2 = add(conv1x1(f.f2, m.lat2_w, m.lat2_b), upsample(p.p3, 2, mode));
  p.p2 = conv2d(merged2, m.smooth2_w, 1, 1, m.smooth2_b);
  const auto merged1 = add(conv1x1(f.f1, m.lat1_w, m.lat1_b), upsample(p.p2, 2, mode));
  p.p1 = conv2d(merged1, m.smooth1_w, 1, 1, m.smooth1_b);
  return p;
}

Tensor fuse_scales(const Pyramid& p, Upsampling mode) {
  return concat({p.p1, upsample(p.p2, 2, mode), upsample(p.p3, 4, mode)}, 0);
}

AttentionOutput position_attention(const Tensor& p, const DualAttentionParams& params) {
  const std::size_t c = p.dim(0), hw = p.dim(1) * p.dim(2);
  const auto query = conv1x1(p, params.k1);
  const auto key = conv1x1(p, params.k2);
  const auto value = reshape(conv1x1(p, params.k3), {c, hw});
  const auto q = reshape(query, {query.dim(0), hw});
  const auto k = reshape(key, {key.dim(0), hw});
  // energy[j][i] = <query_i, key_j>; softmax over i
  const auto attn = softmax_axis(matmul(transpose(k), q), 1);
  // out[:, j] = sum_i attn[j][i] * value[:, i]
  const auto gathered = reshape(matmul(value, transpose(attn)), p.shape());
  return {add(mul_scalar(gathered, params.alpha), p), attn};
}

AttentionOutput channel_attention(const Tensor& p, const DualAttentionParams& params) {
  const std::size_t c = p.dim(0), hw = p.dim(1) * p.dim(2);
  const auto flat = reshape(p, {c, hw});
  // energy[j][i] = <p_i, p_j>; normalized over the channel index i
  const auto attn = softmax_axis(matmul(flat, transpose(flat)), 1);
  const auto gathered = reshape(matmul(attn, flat), p.shape());
  return {add(mul_scalar(gathered, params.beta), p), attn};
}

Tensor dual_fuse(const Tensor& f1, const Tensor& f2, const DualAttentionParams& params) {
  if (f1.shape() != f2.shape()) throw DimensionError("dual_fuse: f1 and f2 differ in shape");
  return conv1x1(concat({f1, f2}, 0), params.k_out);
}

ForwardTrace forward_trace(const Tensor& rgb, const std::optional<Tensor>& nir,
                           const MccModel& m) {
  ForwardTrace t;
  t.input = assemble_input(rgb, nir, m.config);
  t.features = encode(t.input, m);
  t.pyramid = fpn(t.features, m);
  t.fused = fuse_scales(t.pyramid, m.config.upsampling);
  if (m.config.use_dual_attention) {
    t.position = position_attention(t.fused, m.attention);
    t.channel = channel_attention(t.fused, m.attention);
    t.fused_attention = dual_fuse(t.position->out, t.channel->out, m.attention);
  } else {
    t.fused_attention = conv1x1(t.fused, m.reduce_w);
  }
  t.prediction = conv1x1(t.fused_attention, m.proj_w, m.proj_b);
  return t;
}

DensityMap forward(const Tensor& rgb, const std::optional<Tensor>& nir, const MccModel& m,
                   std::vector<std::string> category_order) {
  auto trace = forward_trace(rgb, nir, m);
  if (category_order.empty()) {
    for (std::size_t i = 0; i < m.config.num_categories; ++i)
      category_order.push_back("ch" + std::to_string(i));
  }
  if (category_order.size() != m.config.num_categories) {
    throw DimensionError("forward: category order has " + std::to_string(category_order.size()) +
                         " names for " + std::to_string(m.config.num_categories) + " channels");
  }
  return DensityMap{std::move(category_order), trace.prediction};
}

Tensor flip_horizontal(const Tensor& t) {
  if (t.rank() != 3) throw DimensionError("flip_horizontal expects c x h x w");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const auto v = t.values();
  std::vector<double> out(v.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * h + y) * w + x] = v[(ch * h + y) * w + (w - 1 - x)];
  return Tensor(t.shape(), std::move(out));
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& stem, const MccModel& m, std::uint64_t step,
                     const ojson& extra) {
  const std::string base = stem.string();
  std::ofstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw ValidationError("cannot write " + base + ".bin");
  ojson manifest;
  manifest["config"] = m.config.to_json();
  manifest["step"] = step;
  manifest["weights"] = stem.filename().string() + ".bin";
  manifest["parameters"] = ojson::array();
  for (const auto& [name, t] : m.parameters()) {
    write_tensor(bin, t);
    manifest["parameters"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  if (!extra.is_null()) manifest["extra"] = extra;
  std::ofstream js(base + ".json");
  if (!js) throw ValidationError("cannot write " + base + ".json");
  js << manifest.dump(1) << '\n';
}

MccModel load_checkpoint(const std::filesystem::path& stem, std::uint64_t* step) {
  const std::string base = stem.string();
  std::ifstream js(base + ".json");
  if (!js) throw ValidationError("cannot open checkpoint manifest " + base + ".json");
  ojson manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(base + ".json: " + e.what());
  }
  auto m = MccModel::init(ModelConfig::from_json(manifest.at("config")), 0);
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw ValidationError("cannot open checkpoint weights " + base + ".bin");
  const auto params = m.parameters();
  const auto& listed = manifest.at("parameters");
  if (listed.size() != params.size()) {
    throw ValidationError("checkpoint lists " + std::to_string(listed.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto [name, t] = params[i];
    if (listed[i].at("name").get<std::string>() != name) {
      throw ValidationError("checkpoint parameter " + std::to_string(i) + " is '" +
                            listed[i].at("name").get<std::string>() + "', expected '" + name + "'");
    }
    const auto loaded = read_tensor(bin);
    if (loaded.shape() != t.shape()) {
      throw ValidationError("checkpoint parameter '" + name + "' has shape " +
                            shape_string(loaded.shape()) + ", expected " +
                            shape_string(t.shape()));
    }
    std::copy(loaded.values().begin(), loaded.values().end(), t.mutable_values().begin());
  }
  if (step) *step = manifest.value("step", std::uint64_t{0});
  return m;
}

}  // namespace moc
