#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "unifin/errors.hpp"
#include "unifin/heads.hpp"
#include "unifin/numcore/ops.hpp"

namespace unifin::training {

using numcore::Node;
using numcore::Tensor;

struct LossWeights {
  double forecast = 1.0;
  double risk = 1.0;
  double align = 0.5;
  double rl = 0.1;

  void validate() const {
    for (double l : {forecast, risk, align, rl})
      if (!(l >= 0.0) || !std::isfinite(l)) throw ContractError("loss.lambda_* must be finite and >= 0");
    if (forecast + risk + align + rl == 0.0) throw ContractError("loss.lambda_*: at least one weight must be positive");
  }
};

inline void check_level(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("quantile level must lie strictly inside (0, 1)");
}

/// Pinball loss of one residual e = y - yhat.
inline double quantile_loss(double y, double yhat, double tau) {
  check_level(tau);
  const double e = y - yhat;
  return e >= 0.0 ? tau * e : (tau - 1.0) * e;
}

/// Mean pinball loss of predictions q [B] against targets y.
inline Tensor pinball(const Tensor& q, const std::vector<double>& y, double tau) {
  check_level(tau);
  const std::size_t n = q.size();
  if (y.size() != n) throw DimensionError("pinball: one target per prediction required");
  if (n == 0) throw EmptyInputError("pinball: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += quantile_loss(y[i], q[i], tau);
  return numcore::make_op("pinball", {}, {total / static_cast<double>(n)}, {q}, [n, y, tau](Node& self) {
    auto& g = numcore::detail::in_grad(self, 0);
    const auto& Q = numcore::detail::in_value(self, 0);
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += s * (y[i] - Q[i] >= 0.0 ? -tau : 1.0 - tau);
  });
}

struct ForecastLossConfig {
  std::vector<double> quantile_levels = {0.1, 0.5, 0.9};
  double mse_weight = 1.0;
  /// Targets and forecasts are divided by this before the loss is taken.
  double unit = 1.0;

  void validate() const {
    for (double t : quantile_levels) check_level(t);
    if (!(mse_weight >= 0.0)) throw ContractError("loss.mse_weight must be >= 0");
    if (!(unit > 0.0)) throw ContractError("forecast loss unit must be positive");
  }
};

/// mse_weight * MSE(point, y) + sum over levels of mean pinball(quantile, y).
/// `quantiles` holds one [B] prediction per configured level.
inline Tensor forecast_loss(const std::vector<double>& y, const Tensor& point, const std::vector<Tensor>& quantiles,
                            const ForecastLossConfig& cfg) {
  cfg.validate();
  if (y.empty()) throw ContractError("forecast_loss: empty batch");
  if (point.size() != y.size()) throw DimensionError("forecast_loss: one point forecast per target required");
  if (quantiles.size() != cfg.quantile_levels.size()) throw DimensionError("forecast_loss: one quantile forecast per level required");
  std::vector<double> ys(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) ys[i] = y[i] / cfg.unit;
  const double inv = 1.0 / cfg.unit;
  Tensor loss = scale(numcore::mse(scale(point, inv), ys), cfg.mse_weight);
  for (std::size_t k = 0; k < quantiles.size(); ++k) loss = add(loss, pinball(scale(quantiles[k], inv), ys, cfg.quantile_levels[k]));
  return loss;
}

/// Same loss with the quantiles read off the forecast mixture.
inline Tensor forecast_loss(const std::vector<double>& y, const heads::MicroBatch& m, const ForecastLossConfig& cfg) {
  std::vector<Tensor> q;
  for (double tau : cfg.quantile_levels) q.push_back(heads::mixture_quantile(m.weights, m.means, m.stdevs, tau));
  return forecast_loss(y, m.point, q, cfg);
}

/// BCE of the risk score against crisis flags plus MSE against the continuous stress level.
inline Tensor risk_loss(const Tensor& score, const std::vector<std::uint8_t>& crisis, const std::vector<double>& stress) {
  if (score.size() != crisis.size() || score.size() != stress.size()) throw DimensionError("risk_loss: label counts do not match scores");
  if (crisis.empty()) throw EmptyInputError("risk_loss: empty batch");
  std::vector<double> flags;
  for (auto c : crisis) {
    if (c > 1) throw ContractError("risk_loss: crisis flags must be 0 or 1");
    flags.push_back(c);
  }
  return add(numcore::binary_cross_entropy(score, flags), numcore::mse(score, stress));
}

/// Per-node distress classification from node contributions.
inline Tensor node_loss(const Tensor& contributions, const std::vector<std::uint8_t>& distress) {
  std::vector<double> t;
  for (auto d : distress) {
    if (d > 1) throw ContractError("node_loss: distress flags must be 0 or 1");
    t.push_back(d);
  }
  return numcore::binary_cross_entropy(contributions, t);
}

/// Loss components; undefined tensors count as zero.
struct LossComponents {
  Tensor forecast, risk, align, rl;
};

inline double total_loss(double forecast, double risk, double align, double rl, const LossWeights& w) {
  return w.forecast * forecast + w.risk * risk + w.align * align + w.rl * rl;
}

inline Tensor total_loss(const LossComponents& c, const LossWeights& w) {
  Tensor total;
  auto acc = [&](const Tensor& t, double lambda) {
    if (!t.defined() || lambda == 0.0) return;
    const Tensor term = scale(t, lambda);
    total = total.defined() ? add(total, term) : term;
  };
  acc(c.forecast, w.forecast);
  acc(c.risk, w.risk);
  acc(c.align, w.align);
  acc(c.rl, w.rl);
  return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace unifin::training
