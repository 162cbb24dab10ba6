#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "unifin/errors.hpp"
#include "unifin/numcore/params.hpp"

namespace unifin::training {

struct ScheduleConfig {
  double peak = 1e-3;
  std::size_t warmup = 0;
  std::size_t total = 1;
  /// Floor as a fraction of the peak.
  double floor_fraction = 0.01;

  double floor() const { return peak * floor_fraction; }
  void validate() const {
    if (!(peak > 0.0)) throw ContractError("train.peak_lr must be positive");
    if (total == 0) throw ContractError("schedule needs at least one step");
    if (warmup >= total) throw ContractError("train.warmup_steps must be smaller than the total step count");
  }
};

/// Linear ramp 0 -> peak over the warmup steps, then a half-cosine from peak to
/// the floor over the remaining steps.
inline double lr_schedule(std::size_t step, const ScheduleConfig& c) {
  c.validate();
  if (step < c.warmup) return c.peak * static_cast<double>(step) / static_cast<double>(c.warmup);
  const double span = static_cast<double>(c.total - c.warmup);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup) / span);
  return c.floor() + (c.peak - c.floor()) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

/// Decoupled-weight-decay Adam update in place.
inline void adamw_step(std::span<double> p, std::span<const double> g, AdamState& s, double lr, const AdamWConfig& cfg) {
  if (g.size() != p.size()) throw DimensionError("adamw_step: gradient shape does not match parameter");
  if (s.m.empty()) s.m.assign(p.size(), 0.0), s.v.assign(p.size(), 0.0);
  if (s.m.size() != p.size()) throw DimensionError("adamw_step: optimizer state shape does not match parameter");
  ++s.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
    p[i] -= lr * cfg.weight_decay * p[i] + lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// AdamW over named parameters of a ParamStore; only the listed names move.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Scales gradients so their joint L2 norm is at most `clip` (0 disables),
  /// then steps each listed parameter. Returns the pre-clip norm.
  double step(numcore::ParamStore& ps, const std::vector<std::string>& names, double lr, double clip = 0.0) {
    double sq = 0.0;
    for (const auto& n : names)
      for (double g : ps.get(n).grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm");
    const double k = clip > 0.0 && norm > clip ? clip / norm : 1.0;
    for (const auto& n : names) {
      auto& p = ps.get(n);
      auto g = p.grad();
      if (k != 1.0)
        for (auto& x : g) x *= k;
      adamw_step(p.mutable_values(), g, state_[n], lr, cfg_);
    }
    return norm;
  }

  std::map<std::string, AdamState>& state() { return state_; }
  const std::map<std::string, AdamState>& state() const { return state_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, AdamState> state_;
};

}  // namespace unifin::training
