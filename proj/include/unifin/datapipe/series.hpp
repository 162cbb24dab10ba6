#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "unifin/errors.hpp"

namespace unifin::datapipe {

enum class Frequency { daily, monthly, quarterly };

inline const char* to_string(Frequency f) {
  switch (f) {
    case Frequency::daily: return "daily";
    case Frequency::monthly: return "monthly";
    case Frequency::quarterly: return "quarterly";
  }
  return "?";
}

inline Frequency frequency_from_string(const std::string& s) {
  if (s == "daily") return Frequency::daily;
  if (s == "monthly") return Frequency::monthly;
  if (s == "quarterly") return Frequency::quarterly;
  throw ContractError("unknown frequency: " + s);
}

/// Business-day calendar: step i is the i-th weekday on or after `start`.
class Calendar {
 public:
  Calendar(std::size_t steps, std::chrono::year_month_day start = std::chrono::year{2010} / 1 / 4) {
    using namespace std::chrono;
    days_.reserve(steps);
    sys_days d{start};
    while (days_.size() < steps) {
      const weekday wd{d};
      if (wd != Saturday && wd != Sunday) days_.push_back(d);
      d += std::chrono::days{1};
    }
  }

  std::size_t size() const { return days_.size(); }

  std::string date(std::size_t step) const {
    const std::chrono::year_month_day ymd{days_.at(step)};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
  }

  /// Period index of a step at the given frequency (monotone in step).
  std::int64_t period(std::size_t step, Frequency f) const {
    if (f == Frequency::daily) return static_cast<std::int64_t>(step);
    const std::chrono::year_month_day ymd{days_.at(step)};
    const std::int64_t m = static_cast<int>(ymd.year()) * 12LL + static_cast<unsigned>(ymd.month()) - 1;
    return f == Frequency::monthly ? m : m / 3;
  }

  /// First step of every period, in order.
  std::vector<std::int64_t> period_starts(Frequency f) const {
    std::vector<std::int64_t> out;
    for (std::size_t t = 0; t < days_.size(); ++t)
      if (t == 0 || period(t, f) != period(t - 1, f)) out.push_back(static_cast<std::int64_t>(t));
    return out;
  }

 private:
  std::vector<std::chrono::sys_days> days_;
};

/// One series on its native grid. `steps[i]` is the daily step at which the
/// i-th value is published; a missing value is a gap.
struct RawSeries {
  std::string name;
  Frequency frequency = Frequency::daily;
  std::vector<std::int64_t> steps;
  std::vector<std::optional<double>> values;

  std::size_t observed() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto& v) { return v.has_value(); }));
  }
};

/// A series carried onto the daily grid.
struct AlignedColumn {
  std::string name;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;
  /// Step of the observation each value came from (-1 when missing).
  std::vector<std::int64_t> source_step;
};

/// Forward-fills `series` onto steps [0, n_steps) using only observations
/// published at or before each step.
inline AlignedColumn align_temporal(const RawSeries& series, std::size_t n_steps) {
  if (series.steps.empty()) throw EmptyInputError("align_temporal: empty series '" + series.name + "'");
  if (series.steps.size() != series.values.size()) throw DimensionError("align_temporal: steps/values length mismatch");
  for (std::size_t i = 1; i < series.steps.size(); ++i)
    if (series.steps[i] <= series.steps[i - 1])
      throw ContractError("align_temporal: timestamps not strictly increasing in '" + series.name + "'");
  AlignedColumn col{series.name, std::vector<double>(n_steps, 0.0), std::vector<std::uint8_t>(n_steps, 1),
                    std::vector<std::int64_t>(n_steps, -1)};
  std::size_t next = 0;
  std::optional<double> cur;
  std::int64_t cur_step = -1;
  for (std::size_t t = 0; t < n_steps; ++t) {
    while (next < series.steps.size() && series.steps[next] <= static_cast<std::int64_t>(t)) {
      if (series.values[next]) {
        cur = series.values[next];
        cur_step = series.steps[next];
      }
      ++next;
    }
    if (cur) {
      col.values[t] = *cur;
      col.missing[t] = 0;
      col.source_step[t] = cur_step;
    }
  }
  return col;
}

struct LocalLevelVariances {
  double observation = 0.0;
  double process = 0.0;
};

/// Method-of-moments estimate for y = level + noise, level a random walk:
/// Var(dy) = q + 2r and Cov(dy_t, dy_{t-1}) = -r.
inline LocalLevelVariances estimate_local_level(const std::vector<double>& obs) {
  LocalLevelVariances v;
  if (obs.size() < 2) return v;
  std::vector<double> d;
  for (std::size_t i = 1; i < obs.size(); ++i) d.push_back(obs[i] - obs[i - 1]);
  double m = 0.0;
  for (double x : d) m += x;
  m /= static_cast<double>(d.size());
  double g0 = 0.0, g1 = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    g0 += (d[i] - m) * (d[i] - m);
    if (i > 0) g1 += (d[i] - m) * (d[i - 1] - m);
  }
  g0 /= static_cast<double>(d.size());
  g1 = d.size() > 1 ? g1 / static_cast<double>(d.size() - 1) : 0.0;
  v.observation = std::max(0.0, -g1);
  v.process = std::max(0.0, g0 - 2.0 * v.observation);
  return v;
}

/// Fills interior gaps of `series` with the local-level Kalman filter's
/// predicted state mean, fitted on the `window` grid points preceding each
/// gap. Observed values are never modified. Gaps before the first
/// observation stay missing.
inline RawSeries kalman_impute(const RawSeries& series, std::size_t window = 60) {
  if (series.observed() < 2) throw ContractError("kalman_impute: need at least two observed points in '" + series.name + "'");
  if (window < 2) throw ContractError("kalman_impute: window must be at least 2");
  RawSeries out = series;
  const std::size_t n = series.values.size();
  std::size_t first = 0;
  while (!series.values[first]) ++first;
  for (std::size_t i = first + 1; i < n; ++i) {
    if (series.values[i]) continue;
    const std::size_t lo = i > window ? i - window : 0;
    std::vector<double> seen;
    for (std::size_t j = lo; j < i; ++j)
      if (series.values[j]) seen.push_back(*series.values[j]);
    if (seen.empty()) throw ContractError("kalman_impute: degenerate window (all missing) before index " + std::to_string(i) + " of '" + series.name + "'");
    auto var = estimate_local_level(seen);
    const double scale = std::max(1e-12, var.observation + var.process);
    if (var.process <= 0.0) var.process = 1e-9 * scale;
    // Filter over the window using only raw observations.
    std::size_t j = lo;
    while (!series.values[j]) ++j;
    double level = *series.values[j];
    double p = var.observation + var.process;
    for (++j; j < i; ++j) {
      p += var.process;
      if (series.values[j]) {
        const double k = p / (p + var.observation);
        level += k * (*series.values[j] - level);
        p *= (1.0 - k);
      }
    }
    out.values[i] = level;
  }
  return out;
}

}  // namespace unifin::datapipe
