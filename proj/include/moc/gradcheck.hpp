#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moc/tensor.hpp"

namespace moc {

/// Worst of |analytic - numeric| / (|numeric| + 1e-8) over every element of every tensor in
/// `wrt`, where analytic gradients come from backward() and numeric ones from central
/// differences with step `eps`.
double check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                       double eps);

struct GradcheckOutcome {
  std::string scope;
  std::string unit;
  double worst_error = 0.0;
  std::size_t elements = 0;
  bool passed = false;
};

inline constexpr double kGradcheckTolerance = 1e-4;

/// Scopes: "ops", "model", "losses", or "all".
std::vector<std::string> gradcheck_units(const std::string& scope);
std::vector<GradcheckOutcome> run_gradcheck(const std::string& scope,
                                            double tolerance = kGradcheckTolerance);

}  // namespace moc
