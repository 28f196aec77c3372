#include "moc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

void CountTable::validate() const {
  if (records.empty()) throw ValidationError("metrics need at least one record");
  if (categories.empty()) throw ValidationError("metrics need at least one category");
  for (const auto& r : records) {
    if (r.gt.size() != categories.size() || r.pred.size() != categories.size()) {
      throw ValidationError("record '" + r.image_id + "' has " + std::to_string(r.gt.size()) +
                            " ground-truth and " + std::to_string(r.pred.size()) +
                            " predicted counts for " + std::to_string(categories.size()) +
                            " categories");
    }
  }
}

namespace {

void check_category(const CountTable& t, std::size_t category) {
  t.validate();
  if (category >= t.categories.size()) {
    throw ValidationError("category index " + std::to_string(category) + " out of range");
  }
}

}  // namespace

double mae(const CountTable& t, std::size_t category) {
  check_category(t, category);
  double s = 0.0;
  for (const auto& r : t.records) s += std::abs(r.pred[category] - r.gt[category]);
  return s / static_cast<double>(t.records.size());
}

double mse(const CountTable& t, std::size_t category) {
  check_category(t, category);
  double s = 0.0;
  for (const auto& r : t.records) {
    const double e = r.pred[category] - r.gt[category];
    s += e * e;
  }
  return s / static_cast<double>(t.records.size());
}

double rmse(const CountTable& t, std::size_t category) { return std::sqrt(mse(t, category)); }

double mse_bar(const CountTable& t) {
  t.validate();
  double s = 0.0;
  for (std::size_t i = 0; i < t.categories.size(); ++i) s += mse(t, i);
  return s / static_cast<double>(t.categories.size());
}

double rmse_mean(const CountTable& t) {
  t.validate();
  double s = 0.0;
  for (std::size_t i = 0; i < t.categories.size(); ++i) s += rmse(t, i);
  return s / static_cast<double>(t.categories.size());
}

CategoryWeights category_weights(const std::vector<std::string>& categories,
                                 const std::vector<double>& counts, double eps,
                                 WeightMode mode) {
  if (categories.size() != counts.size() || counts.empty()) {
    throw ValidationError("category_weights: " + std::to_string(counts.size()) +
                          " counts for " + std::to_string(categories.size()) + " categories");
  }
  if (!(eps > 0.0)) throw ValidationError("category_weights: eps must be > 0");
  for (double c : counts) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw ValidationError("category counts must be >= 0");
  }
  CategoryWeights w;
  w.categories = categories;
  w.counts = counts;
  w.mode = mode;

  auto sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  w.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (mode == WeightMode::kInverseFrequency) {
      logits[i] = -std::log(counts[i] + 1.0);
    } else {
      const double d = std::log((counts[i] + 1.0) / (w.median + 1.0));
      const double sign = d < 0.0 ? -1.0 : 1.0;
      logits[i] = 1.0 / (sign * std::max(std::abs(d), eps));
    }
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  w.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) z += (w.weights[i] = std::exp(logits[i] - top));
  for (auto& v : w.weights) v /= z;
  return w;
}

double wmse(const CountTable& t, const CategoryWeights& w) {
  t.validate();
  if (w.categories != t.categories || w.weights.size() != t.categories.size()) {
    throw ValidationError("wmse: weight categories do not match the records");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < t.categories.size(); ++i) s += w.weights[i] * mse(t, i);
  return s / static_cast<double>(t.categories.size());
}

MetricReport build_report(const CountTable& t, double eps, WeightMode mode) {
  t.validate();
  const std::size_t n = t.categories.size();
  MetricReport r;
  r.categories = t.categories;
  r.n_images = t.records.size();
  std::vector<double> totals(n, 0.0);
  r.negative_predictions.assign(n, 0);
  for (const auto& rec : t.records) {
    for (std::size_t i = 0; i < n; ++i) {
      totals[i] += rec.gt[i];
      if (rec.pred[i] < 0.0) ++r.negative_predictions[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    r.mae.push_back(mae(t, i));
    r.mse.push_back(mse(t, i));
    r.rmse.push_back(std::sqrt(r.mse.back()));
    r.empty_categories.push_back(totals[i] == 0.0);
  }
  r.mse_bar = mse_bar(t);
  r.rmse_mean = rmse_mean(t);
  r.weights = category_weights(t.categories, totals, eps, mode);
  r.wmse = wmse(t, r.weights);
  return r;
}

std::string to_string(WeightMode mode) {
  return mode == WeightMode::kPaper ? "paper" : "inverse-frequency";
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "paper") return WeightMode::kPaper;
  if (s == "inverse-frequency") return WeightMode::kInverseFrequency;
  throw ValidationError("unknown weight mode '" + s + "'");
}

std::string format_real(double v) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

ojson MetricReport::to_json() const {
  ojson per = ojson::array();
  for (std::size_t i = 0; i < categories.size(); ++i) {
    per.push_back({{"category", categories[i]},
                   {"mae", mae[i]},
                   {"rmse", rmse[i]},
                   {"mse", mse[i]},
                   {"weight", weights.weights[i]},
                   {"total_count", weights.counts[i]},
                   {"negative_predictions", negative_predictions[i]},
                   {"empty", static_cast<bool>(empty_categories[i])}});
  }
  return ojson{{"n_images", n_images},
               {"categories", per},
               {"mse_bar", mse_bar},
               {"rmse_mean", rmse_mean},
               {"wmse", wmse},
               {"weight_mode", to_string(weights.mode)},
               {"median_count", weights.median}};
}

MetricReport MetricReport::from_json(const ojson& j) {
  MetricReport r;
  try {
    r.n_images = j.at("n_images").get<std::size_t>();
    r.mse_bar = j.at("mse_bar").get<double>();
    r.rmse_mean = j.at("rmse_mean").get<double>();
    r.wmse = j.at("wmse").get<double>();
    r.weights.mode = weight_mode_from_string(j.at("weight_mode").get<std::string>());
    r.weights.median = j.at("median_count").get<double>();
    for (const auto& c : j.at("categories")) {
      r.categories.push_back(c.at("category").get<std::string>());
      r.mae.push_back(c.at("mae").get<double>());
      r.rmse.push_back(c.at("rmse").get<double>());
      r.mse.push_back(c.at("mse").get<double>());
      r.weights.weights.push_back(c.at("weight").get<double>());
      r.weights.counts.push_back(c.at("total_count").get<double>());
      r.negative_predictions.push_back(c.at("negative_predictions").get<std::size_t>());
      r.empty_categories.push_back(c.at("empty").get<bool>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metric report: ") + e.what());
  }
  r.weights.categories = r.categories;
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "category,MAE,RMSE,MSE,weight\n";
  for (std::size_t i = 0; i < categories.size(); ++i) {
    out << categories[i] << ',' << format_real(mae[i]) << ',' << format_real(rmse[i]) << ','
        << format_real(mse[i]) << ',' << format_real(weights.weights[i]) << '\n';
  }
  out << "mean-MSE,,," << format_real(mse_bar) << ",\n";
  out << "WMSE,,," << format_real(wmse) << ",\n";
  return out.str();
}

}  // namespace moc
