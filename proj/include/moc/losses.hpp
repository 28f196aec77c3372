#pragma once

#include <vector>

#include "json.hpp"
#include "moc/density.hpp"
#include "moc/tensor.hpp"

namespace moc {

struct LossConfig {
  double gamma = 1e-4;
  double norm_epsilon = 1e-12;
  bool include_diagonal = true;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static LossConfig from_json(const nlohmann::ordered_json& j);
};

/// Mean squared difference over counted cells. A fully ignored map yields 0.
Tensor counting_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask);
inline Tensor counting_loss(const DensityMap& pred, const DensityMap& gt, const IgnoreMask& m) {
  return counting_loss(pred.values, gt.values, m.values);
}

/// One row-major vector of length h*w per channel.
std::vector<Tensor> flatten_channels(const Tensor& pred);

/// <u, v> / (max(|u|, eps) * max(|v|, eps))
Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps);

/// N x N matrix of channel cosine similarities.
Tensor similarity_matrix(const Tensor& pred, double eps);

/// Mean of the similarity matrix (off-diagonal mean when the diagonal is excluded).
Tensor spatial_contrast_loss(const Tensor& pred, const LossConfig& cfg);
inline Tensor spatial_contrast_loss(const DensityMap& pred, const LossConfig& cfg) {
  return spatial_contrast_loss(pred.values, cfg);
}

/// Mean off-diagonal cosine similarity of a prediction; 0 for a single channel.
double mean_offdiagonal_similarity(const Tensor& pred, double eps = 1e-12);

struct LossTerms {
  Tensor total;
  Tensor counting;
  Tensor spatial;
};

/// counting + gamma * spatial
LossTerms total_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                     const LossConfig& cfg);

}  // namespace moc
