#include "moc/losses.hpp"

#include <cmath>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

void LossConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ValidationError("gamma must be >= 0");
  if (!(norm_epsilon > 0.0)) throw ValidationError("norm_epsilon must be > 0");
}

ojson LossConfig::to_json() const {
  return ojson{{"gamma", gamma},
               {"norm_epsilon", norm_epsilon},
               {"include_diagonal", include_diagonal}};
}

LossConfig LossConfig::from_json(const ojson& j) {
  LossConfig c;
  try {
    c.gamma = j.value("gamma", c.gamma);
    c.norm_epsilon = j.value("norm_epsilon", c.norm_epsilon);
    c.include_diagonal = j.value("include_diagonal", c.include_diagonal);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("loss config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor counting_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  if (pred.shape() != gt.shape() || pred.shape() != mask.shape()) {
    throw DimensionError("counting_loss: pred " + shape_string(pred.shape()) + ", gt " +
                         shape_string(gt.shape()) + ", mask " + shape_string(mask.shape()));
  }
  double counted = 0.0;
  for (double m : mask.values()) counted += m;
  const auto diff = mul(sub(pred, gt), mask);
  const auto total = sum(mul(diff, diff));
  return scale(total, counted > 0.0 ? 1.0 / counted : 0.0);
}

std::vector<Tensor> flatten_channels(const Tensor& pred) {
  if (pred.rank() != 3) throw DimensionError("flatten_channels expects N x h x w");
  const std::size_t n = pred.dim(0), len = pred.dim(1) * pred.dim(2);
  const auto flat = reshape(pred, {n, len});
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(reshape(slice(flat, 0, i, i + 1), {len}));
  return out;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps) {
  if (u.numel() != v.numel()) throw DimensionError("cosine_similarity: length mismatch");
  const auto rows = normalize_rows(concat({reshape(u, {1, u.numel()}), reshape(v, {1, v.numel()})}, 0), eps);
  return sum(mul(slice(rows, 0, 0, 1), slice(rows, 0, 1, 2)));
}

Tensor similarity_matrix(const Tensor& pred, double eps) {
  if (pred.rank() != 3) throw DimensionError("similarity_matrix expects N x h x w");
  const std::size_t n = pred.dim(0), len = pred.dim(1) * pred.dim(2);
  const auto unit = normalize_rows(reshape(pred, {n, len}), eps);
  return matmul(unit, transpose(unit));
}

Tensor spatial_contrast_loss(const Tensor& pred, const LossConfig& cfg) {
  const auto m = similarity_matrix(pred, cfg.norm_epsilon);
  const std::size_t n = m.dim(0);
  if (cfg.include_diagonal) return mean(m);
  if (n < 2) return scale(sum(m), 0.0);
  Tensor off_diagonal = Tensor::full({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_diagonal.mutable_values()[i * n + i] = 0.0;
  return scale(sum(mul(m, off_diagonal)), 1.0 / static_cast<double>(n * n - n));
}

double mean_offdiagonal_similarity(const Tensor& pred, double eps) {
  NoGradGuard guard;
  LossConfig cfg;
  cfg.norm_epsilon = eps;
  cfg.include_diagonal = false;
  return spatial_contrast_loss(pred, cfg).item();
}

LossTerms total_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                     const LossConfig& cfg) {
  cfg.validate();
  LossTerms t;
  t.counting = counting_loss(pred, gt, mask);
  t.spatial = spatial_contrast_loss(pred, cfg);
  t.total = cfg.gamma == 0.0 ? t.counting : add(t.counting, scale(t.spatial, cfg.gamma));
  return t;
}

}  // namespace moc
