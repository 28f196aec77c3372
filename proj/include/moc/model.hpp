#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moc/density.hpp"
#include "moc/tensor.hpp"

namespace moc {

struct ModelConfig {
  std::size_t base_channels = 16;  // C
  std::size_t num_categories = 6;  // N
  bool use_nir = true;
  bool use_dual_attention = true;
  std::size_t input_size = 64;
  Upsampling upsampling = Upsampling::kBilinear;
  /// Channel reduction of the query/key 1x1 convolutions in position attention.
  std::size_t attention_reduction = 1;
  /// Fixed normalization constants for R, G, B, NIR.
  std::array<double, 4> input_mean{0.25, 0.26, 0.22, 0.22};
  std::array<double, 4> input_std{0.12, 0.10, 0.10, 0.12};

  void validate() const;
  std::size_t input_channels() const { return use_nir ? 4 : 3; }
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
};

struct DualAttentionParams {
  Tensor k1, k2, k3;  // 1x1 kernels on the fused map (query, key, value)
  Tensor alpha;       // scalar, starts at 0
  Tensor beta;        // scalar, starts at 0
  Tensor k_out;       // 1x1, 2c -> c
};

struct MccModel {
  ModelConfig config;
  // encoder: three conv stages
  Tensor enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b;
  // fpn: laterals and top-down smoothing
  Tensor lat1_w, lat1_b, lat2_w, lat2_b, lat3_w, lat3_b;
  Tensor smooth1_w, smooth1_b, smooth2_w, smooth2_b;
  DualAttentionParams attention;
  Tensor reduce_w;  // plain 1x1 path used when dual attention is disabled
  Tensor proj_w, proj_b;

  /// Uniform +-1/sqrt(fan_in) kernels, zero biases, alpha = beta = 0.
  static MccModel init(const ModelConfig& cfg, std::uint64_t seed);

  /// Every parameter in a fixed order; handles share storage with the model.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  void set_requires_grad(bool flag) const;
  void zero_grad() const;
  MccModel clone() const;
};

struct Features {
  Tensor f1, f2, f3;
};

struct Pyramid {
  Tensor p1, p2, p3;
};

struct AttentionOutput {
  Tensor out;  // c x h x w
  Tensor map;  // row-stochastic attention matrix
};

/// Concatenates R, G, B (and NIR) and normalizes each channel with the config constants.
Tensor assemble_input(const Tensor& rgb, const std::optional<Tensor>& nir,
                      const ModelConfig& cfg);

Features encode(const Tensor& y, const MccModel& m);
Pyramid fpn(const Features& f, const MccModel& m);
Tensor fuse_scales(const Pyramid& p, Upsampling mode = Upsampling::kBilinear);
AttentionOutput position_attention(const Tensor& p, const DualAttentionParams& params);
AttentionOutput channel_attention(const Tensor& p, const DualAttentionParams& params);
Tensor dual_fuse(const Tensor& f1, const Tensor& f2, const DualAttentionParams& params);

struct ForwardTrace {
  Tensor input;
  Features features;
  Pyramid pyramid;
  Tensor fused;  // P
  std::optional<AttentionOutput> position, channel;
  Tensor fused_attention;  // F, or the plain reduction of P
  Tensor prediction;       // N x H/4 x W/4
};

ForwardTrace forward_trace(const Tensor& rgb, const std::optional<Tensor>& nir,
                           const MccModel& m);
/// Y^Pred; values are not clamped and may be negative.
DensityMap forward(const Tensor& rgb, const std::optional<Tensor>& nir, const MccModel& m,
                   std::vector<std::string> category_order = {});

/// Mirror a c x h x w raster left-right (data only, not recorded).
Tensor flip_horizontal(const Tensor& t);

/// `<stem>.bin` holds the parameters in order; `<stem>.json` is the manifest.
void save_checkpoint(const std::filesystem::path& stem, const MccModel& m, std::uint64_t step,
                     const nlohmann::ordered_json& extra = {});
MccModel load_checkpoint(const std::filesystem::path& stem, std::uint64_t* step = nullptr);

}  // namespace moc
