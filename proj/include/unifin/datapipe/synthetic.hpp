#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "unifin/datapipe/indicators.hpp"
#include "unifin/datapipe/series.hpp"
#include "unifin/errors.hpp"

namespace unifin::datapipe {

// ---------------------------------------------------------------------------
// Event-token vocabulary
// ---------------------------------------------------------------------------

enum class EventClass : std::uint8_t { down = 0, flat = 1, up = 2, calm_policy = 3, stress_policy = 4, filler = 5 };

inline constexpr std::size_t kVocabSize = 64;

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> w = {
        "EARN_BEAT", "UPGRADE", "BUYBACK", "GUIDANCE_RAISE", "CONTRACT_WIN", "INSIDER_BUY", "PRODUCT_LAUNCH", "ANALYST_BULLISH",
        "EARN_MISS", "DOWNGRADE", "DILUTION", "GUIDANCE_CUT", "LAWSUIT", "INSIDER_SELL", "RECALL", "ANALYST_BEARISH",
        "HOLD_RATING", "INLINE_RESULTS", "MGMT_COMMENT", "CONFERENCE", "DIVIDEND_UNCHANGED", "ROUTINE_FILING", "INDEX_REVIEW", "NO_GUIDANCE",
        "RATE_HOLD", "POLICY_EASE", "GROWTH_UPBEAT", "CREDIT_STABLE",
        "POLICY_TIGHTEN", "LIQUIDITY_STRESS", "BANK_RESCUE", "CONTAGION_ALERT"};
    for (int i = 0; i < 32; ++i) w.push_back("TOPIC_" + std::string(i < 10 ? "0" : "") + std::to_string(i));
    return w;
  }();
  return v;
}

inline EventClass event_class(std::size_t token) {
  if (token < 8) return EventClass::up;
  if (token < 16) return EventClass::down;
  if (token < 24) return EventClass::flat;
  if (token < 28) return EventClass::calm_policy;
  if (token < 32) return EventClass::stress_policy;
  return EventClass::filler;
}

/// Direction class of a return given the flat band: 0 down, 1 flat, 2 up.
inline int direction_class(double r, double flat_band) {
  if (r >= flat_band) return 2;
  if (r <= -flat_band) return 0;
  return 1;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t n_assets = 4;
  std::size_t n_steps = 500;
  /// Probability of remaining in the stress regime from one step to the next.
  double stress_persistence = 0.95;
  /// Stationary probability of the stress regime (= crisis flag base rate).
  double crisis_rate = 0.12;
  /// Probability that an asset's event token reveals its next-step direction.
  double text_signal = 0.8;
  /// Probability that the market policy token reveals the current regime.
  double policy_signal = 0.5;
  std::size_t graph_nodes = 8;
  double edge_density = 0.3;
  std::size_t tokens_per_step = 8;
  /// Probability that a macro observation is missing.
  double gap_rate = 0.05;
  double flat_band = 0.0005;
  std::uint64_t seed = 7;

  void validate() const {
    auto prob = [](double p, const char* field) {
      if (!(p >= 0.0 && p <= 1.0)) throw ContractError(std::string("synthetic.") + field + " must lie in [0, 1]");
    };
    prob(stress_persistence, "stress_persistence");
    prob(crisis_rate, "crisis_rate");
    prob(text_signal, "text_signal");
    prob(policy_signal, "policy_signal");
    prob(edge_density, "edge_density");
    prob(gap_rate, "gap_rate");
    if (crisis_rate >= 1.0) throw ContractError("synthetic.crisis_rate must be below 1");
    if (crisis_rate > 0.0 && crisis_rate / (1.0 - crisis_rate) * (1.0 - stress_persistence) > 1.0)
      throw ContractError("synthetic.crisis_rate is unreachable with this stress_persistence");
    if (n_assets < 1) throw ContractError("synthetic.n_assets must be at least 1");
    if (n_steps < 1) throw ContractError("synthetic.n_steps must be at least 1");
    if (graph_nodes < 1) throw ContractError("synthetic.graph_nodes must be at least 1");
    if (tokens_per_step < 1) throw ContractError("synthetic.tokens_per_step must be at least 1");
    if (!(flat_band >= 0.0)) throw ContractError("synthetic.flat_band must be non-negative");
  }
};

/// Macro slot names and their factor groups (growth, inflation, credit, market stress).
inline const std::vector<std::string>& macro_names() {
  static const std::vector<std::string> n = {"gdp_growth", "m2_growth", "cpi_inflation", "bond_yield",
                                             "credit_spread", "interbank_rate", "vix_proxy", "ted_spread"};
  return n;
}
inline const std::vector<std::string>& macro_group_names() {
  static const std::vector<std::string> g = {"growth", "inflation", "credit", "market_stress"};
  return g;
}
inline constexpr std::size_t kMacroSlots = 8;
inline constexpr std::size_t kMacroGroups = 4;
inline constexpr std::size_t kNodeFeatures = 4;

struct GraphSnapshot {
  std::size_t nodes = 0;
  std::vector<double> features;   ///< nodes x kNodeFeatures
  std::vector<double> adjacency;  ///< nodes x nodes, nonnegative
};

/// Raw generator output before alignment and imputation.
struct SyntheticData {
  SyntheticConfig config;
  std::vector<std::string> dates;
  std::vector<std::vector<Bar>> asset_bars;                 ///< [asset][step]
  std::vector<std::vector<double>> asset_returns;           ///< close-to-close, [asset][step], length n_steps + 1
  std::vector<std::vector<std::vector<std::size_t>>> asset_tokens;  ///< [asset][step][token]
  std::vector<Bar> market_bars;
  std::vector<double> market_returns;                       ///< length n_steps + 1
  std::vector<std::vector<std::size_t>> market_tokens;
  std::vector<RawSeries> macro;
  std::vector<GraphSnapshot> graphs;
  std::vector<std::vector<double>> institution_returns;     ///< [step][node]
  std::vector<std::vector<std::uint8_t>> node_distress;     ///< [step][node]
  std::vector<std::uint8_t> regime;                         ///< 1 = stress
  std::vector<double> stress;                               ///< in [0, 1]
};

namespace detail {

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

inline Bar make_bar(double prev_close, double ret, double sigma, double volume_base, double stress, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  const double close = prev_close * (1.0 + ret);
  const double open = prev_close * std::exp(0.2 * sigma * z(rng));
  const double hi = std::max(open, close) * (1.0 + std::abs(0.5 * sigma * z(rng)));
  const double lo = std::min(open, close) * std::max(0.5, 1.0 - std::abs(0.5 * sigma * z(rng)));
  const double vol = volume_base * std::exp(0.25 * z(rng) + 0.8 * stress);
  return {open, hi, lo, close, vol};
}

inline std::vector<std::size_t> make_tokens(std::size_t len, std::size_t signal_token, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> filler(32, kVocabSize - 1);
  std::uniform_int_distribution<std::size_t> pos(0, len - 1);
  std::vector<std::size_t> t(len);
  for (auto& x : t) x = filler(rng);
  t[pos(rng)] = signal_token;
  return t;
}

}  // namespace detail

/// Two-regime market with planted cross-modal structure. Pure function of cfg.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_steps;
  const std::size_t total = n + 1;  // one extra step so every label exists
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  SyntheticData d;
  d.config = cfg;
  Calendar cal(total);
  for (std::size_t t = 0; t < n; ++t) d.dates.push_back(cal.date(t));

  // Regime chain started from its stationary law.
  const double p_sc = 1.0 - cfg.stress_persistence;
  const double p_cs = cfg.crisis_rate > 0.0 ? cfg.crisis_rate / (1.0 - cfg.crisis_rate) * p_sc : 0.0;
  d.regime.resize(total);
  d.stress.resize(total);
  d.regime[0] = u(rng) < cfg.crisis_rate ? 1 : 0;
  for (std::size_t t = 1; t < total; ++t) {
    const double r = u(rng);
    d.regime[t] = d.regime[t - 1] ? (r < cfg.stress_persistence ? 1 : 0) : (r < p_cs ? 1 : 0);
  }
  double s = d.regime[0] ? 0.85 : 0.15;
  for (std::size_t t = 0; t < total; ++t) {
    s = detail::clamp01(0.6 * s + 0.4 * (d.regime[t] ? 0.85 : 0.15) + 0.03 * z(rng));
    d.stress[t] = s;
  }

  // Market index.
  d.market_returns.resize(total);
  std::vector<double> mkt_sigma(total);
  for (std::size_t t = 0; t < total; ++t) {
    mkt_sigma[t] = d.regime[t] ? 0.02 : 0.008;
    d.market_returns[t] = (d.regime[t] ? -0.0015 : 0.0005) + mkt_sigma[t] * z(rng);
  }
  {
    double c = 1000.0;
    for (std::size_t t = 0; t < n; ++t) {
      d.market_bars.push_back(detail::make_bar(c, d.market_returns[t], mkt_sigma[t], 5e8, d.stress[t], rng));
      c = d.market_bars.back()[kClose];
    }
  }
  // Policy tokens: a regime-revealing policy event with probability policy_signal.
  for (std::size_t t = 0; t < n; ++t) {
    const bool reveal = u(rng) < cfg.policy_signal;
    const bool stressed = reveal ? d.regime[t] != 0 : u(rng) < 0.5;
    const std::size_t tok = (stressed ? 28 : 24) + static_cast<std::size_t>(u(rng) * 4.0);
    d.market_tokens.push_back(detail::make_tokens(cfg.tokens_per_step, std::min<std::size_t>(tok, stressed ? 31 : 27), rng));
  }

  // Assets.
  d.asset_bars.resize(cfg.n_assets);
  d.asset_returns.resize(cfg.n_assets);
  d.asset_tokens.resize(cfg.n_assets);
  for (std::size_t a = 0; a < cfg.n_assets; ++a) {
    const double beta = 0.7 + 0.6 * u(rng);
    const double idio = 0.008 + 0.004 * u(rng);
    auto& ret = d.asset_returns[a];
    ret.resize(total);
    std::vector<double> sig(total);
    for (std::size_t t = 0; t < total; ++t) {
      sig[t] = idio * (d.regime[t] ? 1.8 : 1.0);
      ret[t] = beta * d.market_returns[t] + sig[t] * z(rng);
    }
    double c = 20.0 + 80.0 * u(rng);
    const double vbase = 1e6 * (0.5 + u(rng));
    for (std::size_t t = 0; t < n; ++t) {
      d.asset_bars[a].push_back(detail::make_bar(c, ret[t], std::hypot(beta * mkt_sigma[t], sig[t]), vbase, d.stress[t], rng));
      c = d.asset_bars[a].back()[kClose];
      // Event token for the return realized over (t, t+1].
      const int truth = direction_class(ret[t + 1], cfg.flat_band);
      const int cls = u(rng) < cfg.text_signal ? truth : std::min(2, static_cast<int>(u(rng) * 3.0));
      const std::size_t base = cls == 2 ? 0 : (cls == 0 ? 8 : 16);
      const std::size_t tok = base + std::min<std::size_t>(7, static_cast<std::size_t>(u(rng) * 8.0));
      d.asset_tokens[a].push_back(detail::make_tokens(cfg.tokens_per_step, tok, rng));
    }
  }

  // Macro series on native grids, values set by the stress level at publication.
  const std::vector<Frequency> freq = {Frequency::quarterly, Frequency::monthly, Frequency::monthly, Frequency::monthly,
                                       Frequency::monthly,   Frequency::monthly, Frequency::daily,   Frequency::daily};
  const std::vector<std::array<double, 3>> law = {  // level, stress loading, noise
      {2.5, -3.0, 0.3}, {6.0, -2.0, 0.5}, {2.2, 0.5, 0.2}, {3.0, -1.0, 0.2},
      {1.2, 3.0, 0.2},  {2.0, 1.0, 0.2},  {14.0, 25.0, 2.0}, {0.3, 1.2, 0.08}};
  for (std::size_t k = 0; k < kMacroSlots; ++k) {
    RawSeries rs;
    rs.name = macro_names()[k];
    rs.frequency = freq[k];
    Calendar grid(n);
    for (auto step : grid.period_starts(freq[k])) {
      rs.steps.push_back(step);
      const double v = law[k][0] + law[k][1] * d.stress[static_cast<std::size_t>(step)] + law[k][2] * z(rng);
      const bool gap = rs.values.size() > 0 && u(rng) < cfg.gap_rate;
      rs.values.push_back(gap ? std::nullopt : std::optional<double>(v));
    }
    d.macro.push_back(std::move(rs));
  }

  // Interbank network: fixed topology, exposures scaled up under stress.
  const std::size_t N = cfg.graph_nodes;
  std::vector<double> base_adj(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      if (i != j && u(rng) < cfg.edge_density) base_adj[i * N + j] = 0.2 + 0.8 * u(rng);
  std::vector<double> lev0(N), beta_i(N), fragility(N);
  for (std::size_t i = 0; i < N; ++i) {
    lev0[i] = 8.0 + 8.0 * u(rng);
    beta_i[i] = 0.8 + 0.5 * u(rng);
    fragility[i] = 0.5 + u(rng);
  }
  std::vector<double> dist(N, 0.2), prev(N, 0.2);
  for (std::size_t t = 0; t < n; ++t) {
    prev = dist;
    for (std::size_t i = 0; i < N; ++i) {
      double row = 0.0, spill = 0.0;
      for (std::size_t j = 0; j < N; ++j) row += base_adj[i * N + j];
      for (std::size_t j = 0; j < N; ++j)
        if (row > 0.0) spill += base_adj[i * N + j] / row * prev[j];
      const double neigh = row > 0.0 ? spill - prev[i] : 0.0;
      dist[i] = detail::clamp01(0.7 * prev[i] + 0.3 * fragility[i] * (0.05 + 0.75 * d.stress[t]) + 0.25 * neigh + 0.04 * z(rng));
    }
    GraphSnapshot g;
    g.nodes = N;
    g.adjacency.resize(N * N);
    for (std::size_t k = 0; k < N * N; ++k) g.adjacency[k] = base_adj[k] * (1.0 + 0.5 * d.stress[t]);
    std::vector<double> iret(N);
    std::vector<std::uint8_t> flags(N);
    for (std::size_t i = 0; i < N; ++i) {
      iret[i] = beta_i[i] * d.market_returns[t] + 0.01 * z(rng) - 0.05 * (dist[i] - prev[i]);
      flags[i] = dist[i] > 0.55 ? 1 : 0;
      g.features.push_back(dist[i]);
      g.features.push_back(lev0[i] * (1.0 + 0.3 * dist[i]) + 0.2 * z(rng));
      g.features.push_back(iret[i]);
      g.features.push_back(1.0 - dist[i] + 0.05 * z(rng));
    }
    d.graphs.push_back(std::move(g));
    d.institution_returns.push_back(std::move(iret));
    d.node_distress.push_back(std::move(flags));
  }
  d.regime.resize(n);
  d.stress.resize(n);
  return d;
}

}  // namespace unifin::datapipe
