#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace moc {

struct CountRecord {
  std::string image_id;
  std::vector<double> gt;    // X_i, one entry per category
  std::vector<double> pred;  // predicted X_i, may be negative
};

/// Records sharing one category order.
struct CountTable {
  std::vector<std::string> categories;
  std::vector<CountRecord> records;

  /// Throws ValidationError on an empty table or a ragged record.
  void validate() const;
};

double mae(const CountTable& t, std::size_t category);
double rmse(const CountTable& t, std::size_t category);
double mse(const CountTable& t, std::size_t category);

/// Mean over categories of the per-category MSE.
double mse_bar(const CountTable& t);
/// Mean over categories of the per-category RMSE.
double rmse_mean(const CountTable& t);

enum class WeightMode { kPaper, kInverseFrequency };

struct CategoryWeights {
  std::vector<std::string> categories;
  std::vector<double> weights;
  std::vector<double> counts;  // split-level totals C_i
  double median = 0.0;         // M(C)
  WeightMode mode = WeightMode::kPaper;
};

/// Softmax of 1 / (sign(d_i) max(|d_i|, eps)) with d_i = ln((C_i + 1) / (M + 1)).
/// The inverse-frequency mode uses softmax(-ln(C_i + 1)) instead.
CategoryWeights category_weights(const std::vector<std::string>& categories,
                                 const std::vector<double>& counts, double eps = 1e-6,
                                 WeightMode mode = WeightMode::kPaper);

/// (1/N) * sum_i w_i * MSE_i
double wmse(const CountTable& t, const CategoryWeights& w);

struct MetricReport {
  std::vector<std::string> categories;
  std::vector<double> mae, rmse, mse;
  double mse_bar = 0.0;
  double rmse_mean = 0.0;
  double wmse = 0.0;
  CategoryWeights weights;
  std::size_t n_images = 0;
  /// Images whose predicted count for the category is negative.
  std::vector<std::size_t> negative_predictions;
  /// Categories with no ground-truth objects anywhere in the split.
  std::vector<bool> empty_categories;

  nlohmann::ordered_json to_json() const;
  static MetricReport from_json(const nlohmann::ordered_json& j);
  /// Columns category, MAE, RMSE, MSE, weight; footer rows for mean-MSE and WMSE.
  std::string to_csv() const;
};

MetricReport build_report(const CountTable& t, double eps = 1e-6,
                          WeightMode mode = WeightMode::kPaper);

std::string to_string(WeightMode mode);
WeightMode weight_mode_from_string(const std::string& s);

/// Shortest text that reads back to the same double.
std::string format_real(double v);

}  // namespace moc
