#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unifin/errors.hpp"

namespace unifin::datapipe {

/// open, high, low, close, volume
using Bar = std::array<double, 5>;
enum BarField : std::size_t { kOpen = 0, kHigh = 1, kLow = 2, kClose = 3, kVolume = 4 };

inline bool bar_consistent(const Bar& b) {
  return b[kHigh] >= std::max(b[kOpen], b[kClose]) && std::min(b[kOpen], b[kClose]) >= b[kLow] && b[kVolume] >= 0.0;
}

/// Column order of the indicator matrix.
inline const std::vector<std::string>& indicator_names() {
  static const std::vector<std::string> names = {"sma10", "sma20", "rsi14", "macd", "macd_signal", "volatility20", "turnover20"};
  return names;
}
inline constexpr std::size_t kIndicatorCount = 7;
/// Rows before this index have at least one indicator still warming up.
inline constexpr std::size_t kIndicatorWarmup = 33;

struct IndicatorMatrix {
  std::vector<std::array<double, kIndicatorCount>> rows;
  std::vector<std::uint8_t> warmup;
};

namespace detail {
inline std::vector<double> ema(const std::vector<double>& x, std::size_t span) {
  std::vector<double> out(x.size());
  const double a = 2.0 / (static_cast<double>(span) + 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = i == 0 ? x[0] : a * x[i] + (1.0 - a) * out[i - 1];
  return out;
}
}  // namespace detail

/// Moving averages (10/20), Wilder RSI-14, MACD 12/26 with 9-step signal,
/// 20-step sample stdev of simple returns, and volume over its 20-step mean.
/// Values in warmup rows are computed from whatever history exists (0 where
/// nothing is defined yet) and flagged.
inline IndicatorMatrix compute_indicators(const std::vector<Bar>& bars) {
  const std::size_t n = bars.size();
  IndicatorMatrix m;
  m.rows.assign(n, {});
  m.warmup.assign(n, 0);
  if (n == 0) return m;
  std::vector<double> close(n), vol(n);
  for (std::size_t t = 0; t < n; ++t) {
    close[t] = bars[t][kClose];
    vol[t] = bars[t][kVolume];
  }
  auto rolling_mean = [&](const std::vector<double>& x, std::size_t t, std::size_t w) {
    const std::size_t lo = t + 1 >= w ? t + 1 - w : 0;
    double s = 0.0;
    for (std::size_t i = lo; i <= t; ++i) s += x[i];
    return s / static_cast<double>(t + 1 - lo);
  };
  const auto e12 = detail::ema(close, 12);
  const auto e26 = detail::ema(close, 26);
  std::vector<double> macd(n);
  for (std::size_t t = 0; t < n; ++t) macd[t] = e12[t] - e26[t];
  const auto signal = detail::ema(macd, 9);

  double avg_gain = 0.0, avg_loss = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    auto& r = m.rows[t];
    r[0] = rolling_mean(close, t, 10);
    r[1] = rolling_mean(close, t, 20);
    // RSI: seeded with the plain mean of the first 14 changes, then Wilder smoothing.
    double rsi = 50.0;
    if (t >= 1) {
      const double ch = close[t] - close[t - 1];
      const double gain = ch > 0 ? ch : 0.0, loss = ch < 0 ? -ch : 0.0;
      if (t <= 14) {
        avg_gain += gain / 14.0;
        avg_loss += loss / 14.0;
      } else {
        avg_gain = (avg_gain * 13.0 + gain) / 14.0;
        avg_loss = (avg_loss * 13.0 + loss) / 14.0;
      }
      if (t >= 14) {
        if (avg_loss == 0.0)
          rsi = avg_gain == 0.0 ? 50.0 : 100.0;
        else
          rsi = 100.0 - 100.0 / (1.0 + avg_gain / avg_loss);
      }
    }
    r[2] = rsi;
    r[3] = macd[t];
    r[4] = signal[t];
    // Volatility over up to the last 20 simple returns.
    double v = 0.0;
    if (t >= 2) {
      const std::size_t lo = t >= 20 ? t - 19 : 1;
      std::vector<double> rets;
      for (std::size_t i = lo; i <= t; ++i) rets.push_back(close[i] / close[i - 1] - 1.0);
      double mu = 0.0;
      for (double x : rets) mu += x;
      mu /= static_cast<double>(rets.size());
      for (double x : rets) v += (x - mu) * (x - mu);
      v = std::sqrt(v / static_cast<double>(rets.size() - 1));
    }
    r[5] = v;
    const double mv = rolling_mean(vol, t, 20);
    r[6] = mv > 0.0 ? vol[t] / mv : 0.0;
    m.warmup[t] = t < kIndicatorWarmup ? 1 : 0;
  }
  return m;
}

}  // namespace unifin::datapipe
