#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "unifin/errors.hpp"

namespace unifin::datapipe {

class InsufficientTailDataError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Lower empirical q-quantile: the smallest sample x with #{x_i <= x} >= q n.
inline double empirical_quantile(std::vector<double> x, double q) {
  if (x.empty()) throw EmptyInputError("empirical_quantile: no samples");
  if (!(q > 0.0 && q <= 1.0)) throw ContractError("empirical_quantile: q must lie in (0, 1]");
  std::sort(x.begin(), x.end());
  const double k = std::ceil(q * static_cast<double>(x.size()));
  const std::size_t idx = k < 1.0 ? 0 : static_cast<std::size_t>(k) - 1;
  return x[std::min(idx, x.size() - 1)];
}

/// Empirical CoVaR: q-quantile of system returns over the steps where the
/// institution's return is at or below its own q-quantile.
inline double empirical_covar(const std::vector<double>& system, const std::vector<double>& institution, double q) {
  if (system.size() != institution.size()) throw DimensionError("empirical_covar: series lengths differ");
  if (!(q > 0.0 && q < 1.0)) throw ContractError("empirical_covar: q must lie in (0, 1)");
  if (static_cast<double>(system.size()) < 1.0 / q)
    throw ContractError("empirical_covar: need at least 1/q samples");
  const double var = empirical_quantile(institution, q);
  std::vector<double> tail;
  for (std::size_t i = 0; i < system.size(); ++i)
    if (institution[i] <= var) tail.push_back(system[i]);
  if (tail.empty()) throw InsufficientTailDataError("empirical_covar: empty conditional set");
  return empirical_quantile(tail, q);
}

/// Mean system return over crisis-flagged steps.
inline double systemic_expected_shortfall(const std::vector<double>& system, const std::vector<std::uint8_t>& crisis) {
  if (system.size() != crisis.size()) throw DimensionError("systemic_expected_shortfall: length mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < system.size(); ++i)
    if (crisis[i]) {
      s += system[i];
      ++n;
    }
  if (n == 0) throw ContractError("systemic_expected_shortfall: crisis mask is empty");
  return s / static_cast<double>(n);
}

}  // namespace unifin::datapipe
