#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "unifin/encoders.hpp"
#include "unifin/errors.hpp"
#include "unifin/modal.hpp"
#include "unifin/numcore/ops.hpp"
#include "unifin/numcore/params.hpp"

namespace unifin::heads {

using encoders::GATLayer;
using encoders::TransformerBlock;
using numcore::Linear;
using numcore::Node;
using numcore::ParamStore;
using numcore::Tensor;

inline constexpr std::size_t kDirections = 3;  ///< down, flat, up

// ---------------------------------------------------------------------------
// Mixture primitives
// ---------------------------------------------------------------------------

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

namespace detail {
inline void check_mixture(const Tensor& w, const Tensor& mu, const Tensor& sigma) {
  if (w.shape() != mu.shape() || w.shape() != sigma.shape() || w.rank() != 2)
    throw DimensionError("mixture: weights, means and stdevs must share a [B x K] shape");
  for (double s : sigma.values())
    if (!(s > 0.0)) throw ContractError("mixture: every sigma must be positive");
}
}  // namespace detail

/// Mean over rows of -log sum_k w_k N(y; mu_k, sigma_k).
inline Tensor mdn_nll(const Tensor& w, const Tensor& mu, const Tensor& sigma, const std::vector<double>& y) {
  detail::check_mixture(w, mu, sigma);
  const std::size_t B = w.rows(), K = w.cols();
  if (y.size() != B) throw DimensionError("mdn_nll: one target per row required");
  if (B == 0) throw EmptyInputError("mdn_nll: empty batch");
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<double> logn(B * K), lse(B);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      const double z = (y[b] - mu[b * K + k]) / sigma[b * K + k];
      logn[b * K + k] = -0.5 * z * z - std::log(sigma[b * K + k]) - half_log_2pi;
      if (w[b * K + k] > 0.0) mx = std::max(mx, std::log(w[b * K + k]) + logn[b * K + k]);
    }
    if (!std::isfinite(mx)) throw ContractError("mdn_nll: mixture weights are all zero");
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (w[b * K + k] > 0.0) s += std::exp(std::log(w[b * K + k]) + logn[b * K + k] - mx);
    lse[b] = mx + std::log(s);
    loss -= lse[b];
  }
  loss /= static_cast<double>(B);
  return numcore::make_op("mdn_nll", {}, {loss}, {w, mu, sigma}, [B, K, y, logn = std::move(logn), lse = std::move(lse)](Node& self) {
    const auto& W = numcore::detail::in_value(self, 0);
    const auto& M = numcore::detail::in_value(self, 1);
    const auto& S = numcore::detail::in_value(self, 2);
    const double g = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = b * K + k;
        const double dens = std::exp(logn[i] - lse[b]);  // N_k / sum_j w_j N_j
        const double resp = W[i] * dens;
        const double e = y[b] - M[i];
        if (numcore::detail::wants_grad(self, 0)) numcore::detail::in_grad(self, 0)[i] -= g * dens;
        if (numcore::detail::wants_grad(self, 1)) numcore::detail::in_grad(self, 1)[i] -= g * resp * e / (S[i] * S[i]);
        if (numcore::detail::wants_grad(self, 2))
          numcore::detail::in_grad(self, 2)[i] -= g * resp * (e * e / (S[i] * S[i] * S[i]) - 1.0 / S[i]);
      }
  });
}

/// Value of the mixture CDF at q for row b.
inline double mixture_cdf(const double* w, const double* mu, const double* sigma, std::size_t K, double q) {
  double F = 0.0;
  for (std::size_t k = 0; k < K; ++k) F += w[k] * normal_cdf((q - mu[k]) / sigma[k]);
  return F;
}

/// Per-row tau-quantile of the mixture by bisection on its CDF. The gradient
/// follows from the implicit function F(q; w, mu, sigma) = tau.
inline Tensor mixture_quantile(const Tensor& w, const Tensor& mu, const Tensor& sigma, double tau) {
  detail::check_mixture(w, mu, sigma);
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("mixture_quantile: tau must lie in (0, 1)");
  const std::size_t B = w.rows(), K = w.cols();
  const auto W = w.values(), M = mu.values(), S = sigma.values();
  std::vector<double> q(B);
  for (std::size_t b = 0; b < B; ++b) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      lo = std::min(lo, M[b * K + k] - 12.0 * S[b * K + k]);
      hi = std::max(hi, M[b * K + k] + 12.0 * S[b * K + k]);
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(lo)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (mixture_cdf(&W[b * K], &M[b * K], &S[b * K], K, mid) < tau ? lo : hi) = mid;
    }
    q[b] = 0.5 * (lo + hi);
  }
  return numcore::make_op("mixture_quantile", {B}, q, {w, mu, sigma}, [B, K, q](Node& self) {
    const auto& Wv = numcore::detail::in_value(self, 0);
    const auto& Mv = numcore::detail::in_value(self, 1);
    const auto& Sv = numcore::detail::in_value(self, 2);
    for (std::size_t b = 0; b < B; ++b) {
      double dens = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = b * K + k;
        dens += Wv[i] * normal_pdf((q[b] - Mv[i]) / Sv[i]) / Sv[i];
      }
      if (!(dens > 0.0)) continue;
      const double g = self.grad[b] / dens;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = b * K + k;
        const double z = (q[b] - Mv[i]) / Sv[i];
        const double phi = normal_pdf(z);
        // dq/dθ = -(dF/dθ) / f(q)
        if (numcore::detail::wants_grad(self, 0)) numcore::detail::in_grad(self, 0)[i] -= g * normal_cdf(z);
        if (numcore::detail::wants_grad(self, 1)) numcore::detail::in_grad(self, 1)[i] += g * Wv[i] * phi / Sv[i];
        if (numcore::detail::wants_grad(self, 2)) numcore::detail::in_grad(self, 2)[i] += g * Wv[i] * phi * z / Sv[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Micro head
// ---------------------------------------------------------------------------

struct MicroHeadConfig {
  std::size_t mixture = 3;
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  /// Number of fused steps the decoder conditions on.
  std::size_t history = 4;
  /// Unit of the mixture means and stdevs (typical daily return magnitude).
  double return_scale = 0.01;

  void validate() const {
    if (mixture == 0) throw ContractError("micro.mixture must be at least 1");
    if (history == 0) throw ContractError("micro.history must be at least 1");
    if (layers == 0) throw ContractError("micro.layers must be at least 1");
    if (!(return_scale > 0.0)) throw ContractError("micro.return_scale must be positive");
  }
};

struct MicroComponent {
  double weight = 0.0;
  double mean = 0.0;
  double stdev = 1.0;
};

struct MicroForecast {
  std::size_t horizon = 1;
  double point = 0.0;
  std::array<double, kDirections> direction{};  ///< down, flat, up
  std::vector<MicroComponent> mixture;

  std::size_t direction_class() const {
    return static_cast<std::size_t>(std::max_element(direction.begin(), direction.end()) - direction.begin());
  }
};

/// Batched micro outputs for one horizon.
struct MicroBatch {
  Tensor weights;     ///< [B x K]
  Tensor means;       ///< [B x K]
  Tensor stdevs;      ///< [B x K]
  Tensor dir_logits;  ///< [B x 3]
  Tensor point;       ///< [B], mixture mean
  std::size_t horizon = 1;

  std::size_t size() const { return point.size(); }

  MicroForecast at(std::size_t b) const {
    MicroForecast f;
    f.horizon = horizon;
    f.point = point[b];
    const Tensor p = numcore::softmax(numcore::slice_rows(dir_logits, b, 1).detach());
    for (std::size_t c = 0; c < kDirections; ++c) f.direction[c] = p[c];
    const std::size_t K = weights.cols();
    for (std::size_t k = 0; k < K; ++k) f.mixture.push_back({weights.at(b, k), means.at(b, k), stdevs.at(b, k)});
    return f;
  }
};

struct MicroHead {
  Linear input;
  Tensor feedback;  ///< [1 x d], scales the fed-back point forecast
  std::vector<TransformerBlock> blocks;
  Tensor out_gain, out_bias;
  Linear mdn, direction;
  std::size_t d = 0, K = 0;
  double return_scale = 0.01;

  static MicroHead create(ParamStore& ps, std::size_t d, const MicroHeadConfig& cfg) {
    cfg.validate();
    if (d % cfg.heads != 0) throw ContractError("micro.heads must divide model.d_model");
    MicroHead h;
    h.d = d;
    h.K = cfg.mixture;
    h.return_scale = cfg.return_scale;
    h.input = Linear::create(ps, "micro.in", d, d);
    h.feedback = ps.add_normal("micro.feedback", {1, d}, 0.1);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      h.blocks.push_back(TransformerBlock::create(ps, "micro.l" + std::to_string(l), d, cfg.heads, cfg.ffn_mult));
    h.out_gain = ps.add_vector("micro.lnf.g", d, 1.0);
    h.out_bias = ps.add_vector("micro.lnf.b", d);
    h.mdn = Linear::create(ps, "micro.mdn", d, 3 * cfg.mixture);
    h.direction = Linear::create(ps, "micro.dir", d, kDirections);
    return h;
  }

  /// Decoder tokens for B histories of L fused steps ([B*L x d]).
  Tensor tokens(const Tensor& z_history) const { return input(z_history); }

  /// Runs the causal decoder over B groups of L tokens and reads the last step.
  MicroBatch decode(const Tensor& toks, std::size_t L, std::size_t horizon = 1) const {
    if (L == 0 || toks.rows() % L != 0) throw DimensionError("micro_forecast: token rows not divisible by history length");
    const std::size_t B = toks.rows() / L;
    Tensor h = add(toks, encoders::tile_constant(numcore::sinusoidal_positions(L, d), B));
    numcore::AttentionOptions opts;
    opts.group = L;
    opts.causal = true;
    for (const auto& b : blocks) h = b.forward(h, opts);
    std::vector<std::size_t> last(B);
    for (std::size_t b = 0; b < B; ++b) last[b] = b * L + L - 1;
    const Tensor o = numcore::layer_norm(numcore::gather_rows(h, last), out_gain, out_bias);
    const Tensor raw = mdn(o);
    MicroBatch m;
    m.horizon = horizon;
    m.weights = numcore::softmax(numcore::slice_cols(raw, 0, K));
    m.means = scale(numcore::slice_cols(raw, K, K), return_scale);
    m.stdevs = scale(numcore::exp(numcore::slice_cols(raw, 2 * K, K)), return_scale);
    m.dir_logits = direction(o);
    m.point = numcore::row_sum(mul(m.weights, m.means));
    return m;
  }

  /// Appends one token per group: input(z_last) + point * feedback.
  Tensor extend(const Tensor& toks, std::size_t L, const Tensor& z_last, const Tensor& point) const {
    const std::size_t B = toks.rows() / L;
    const Tensor next = add(input(z_last), numcore::matmul(reshape(point, {B, 1}), feedback));
    std::vector<std::size_t> order;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < L; ++i) order.push_back(b * L + i);
      order.push_back(B * L + b);
    }
    return numcore::gather_rows(numcore::concat_rows({toks, next}), order);
  }

  /// Rolls the decoder k steps over B histories of L fused steps, feeding each
  /// point forecast back as the next input.
  MicroBatch forecast(const Tensor& z_history, std::size_t L, long k) const {
    if (k <= 0) throw ContractError("micro_forecast: horizon k must be at least 1");
    if (L == 0 || z_history.rows() % L != 0 || z_history.rows() == 0)
      throw DimensionError("micro_forecast: need B groups of L fused steps");
    const std::size_t B = z_history.rows() / L;
    std::vector<std::size_t> last(B);
    for (std::size_t b = 0; b < B; ++b) last[b] = b * L + L - 1;
    const Tensor z_last = numcore::gather_rows(z_history, last);
    Tensor toks = tokens(z_history);
    std::size_t len = L;
    MicroBatch m = decode(toks, len, 1);
    for (long step = 2; step <= k; ++step) {
      toks = extend(toks, len, z_last, m.point);
      ++len;
      m = decode(toks, len, static_cast<std::size_t>(step));
    }
    return m;
  }
};

/// Value-level NLL of one realized return under a forecast's mixture.
inline double mdn_nll(const MicroForecast& f, double y) {
  const std::size_t K = f.mixture.size();
  std::vector<double> w, m, s;
  for (const auto& c : f.mixture) {
    w.push_back(c.weight);
    m.push_back(c.mean);
    s.push_back(c.stdev);
  }
  return mdn_nll(Tensor({1, K}, w), Tensor({1, K}, m), Tensor({1, K}, s), {y}).item();
}

// ---------------------------------------------------------------------------
// Macro head
// ---------------------------------------------------------------------------

struct MacroHeadConfig {
  std::size_t layers = 1;
  std::size_t heads = 1;
  double warning_threshold = 0.5;

  void validate() const {
    if (layers == 0) throw ContractError("macro.layers must be at least 1");
    if (!(warning_threshold >= 0.0 && warning_threshold <= 1.0)) throw ContractError("macro.warning_threshold must lie in [0, 1]");
  }
};

struct SystemicRiskOutput {
  double score = 0.0;
  bool warning = false;
  std::vector<double> contributions;
};

/// Batched macro outputs.
struct RiskBatch {
  Tensor score;          ///< [B] in [0, 1]
  Tensor contributions;  ///< [B*N] sigmoid per-node scores
  std::size_t nodes = 0;
  double threshold = 0.5;

  SystemicRiskOutput at(std::size_t b) const {
    SystemicRiskOutput r;
    r.score = score[b];
    r.warning = r.score >= threshold;
    for (std::size_t i = 0; i < nodes; ++i) r.contributions.push_back(contributions[b * nodes + i]);
    return r;
  }
};

struct MacroHead {
  Linear node_in;
  Linear z_in;
  std::vector<GATLayer> layers;
  Linear node_out;
  Tensor log_gain;  ///< calibration slope exp(a) > 0
  Tensor offset;
  double threshold = 0.5;

  static MacroHead create(ParamStore& ps, std::size_t d, std::size_t node_features, const MacroHeadConfig& cfg) {
    cfg.validate();
    if (cfg.heads == 0 || d % cfg.heads != 0) throw ContractError("macro.heads must divide model.d_model");
    MacroHead h;
    h.threshold = cfg.warning_threshold;
    h.node_in = Linear::create(ps, "macro.node_in", node_features, d);
    h.z_in = Linear::create(ps, "macro.z_in", d, d, false);
    for (std::size_t l = 0; l < cfg.layers; ++l) h.layers.push_back(GATLayer::create(ps, "macro.l" + std::to_string(l), d, d, cfg.heads));
    h.node_out = Linear::create(ps, "macro.node_out", d, 1);
    h.log_gain = ps.add_vector("macro.cal.a", 1, std::log(4.0));
    h.offset = ps.add_vector("macro.cal.b", 1, -2.0);
    return h;
  }

  /// Node states conditioned on z, propagated through the graph layers.
  Tensor propagate(const Tensor& z, const Tensor& node_features, const std::vector<std::uint8_t>& mask, std::size_t N) const {
    if (N == 0 || node_features.rows() == 0) throw ContractError("macro_risk: empty graph");
    if (node_features.rows() != z.rows() * N) throw DimensionError("macro_risk: node rows must equal B * N");
    Tensor h = add(node_in(node_features), numcore::repeat_rows(z_in(z), N));
    for (const auto& l : layers) h = numcore::elu(l.forward(h, mask, N));
    return h;
  }

  /// Pools per-node contributions into a calibrated score.
  RiskBatch readout(const Tensor& h, std::size_t N) const {
    RiskBatch r;
    r.nodes = N;
    r.threshold = threshold;
    r.contributions = reshape(numcore::sigmoid(node_out(h)), {h.rows()});
    const Tensor m = reshape(numcore::mean_groups(reshape(r.contributions, {h.rows(), 1}), N), {h.rows() / N});
    r.score = numcore::sigmoid(add(mul(m, numcore::exp(log_gain)), offset));
    return r;
  }

  RiskBatch risk(const Tensor& z, const Tensor& node_features, const std::vector<std::uint8_t>& mask, std::size_t N) const {
    return readout(propagate(z, node_features, mask, N), N);
  }

  RiskBatch risk(const Tensor& z, const std::vector<const FinancialGraph*>& graphs) const {
    if (graphs.empty() || graphs[0]->nodes == 0) throw ContractError("macro_risk: empty graph");
    const std::size_t N = graphs[0]->nodes;
    std::vector<double> flat;
    std::vector<const std::vector<double>*> adj;
    for (const auto* g : graphs) {
      g->validate();
      if (g->nodes != N) throw DimensionError("macro_risk: graphs in a batch must share N");
      flat.insert(flat.end(), g->features.begin(), g->features.end());
      adj.push_back(&g->adjacency);
    }
    const std::size_t F = flat.size() / (graphs.size() * N);
    return risk(z, Tensor({graphs.size() * N, F}, std::move(flat)), encoders::neighbourhood_mask(adj, N), N);
  }
};

// ---------------------------------------------------------------------------
// Bulletin
// ---------------------------------------------------------------------------

enum class RiskBand { low, elevated, high };

/// Terciles of [0, 1].
inline RiskBand risk_band(double score) {
  if (score >= 2.0 / 3.0) return RiskBand::high;
  if (score >= 1.0 / 3.0) return RiskBand::elevated;
  return RiskBand::low;
}

inline const char* to_string(RiskBand b) {
  switch (b) {
    case RiskBand::low: return "LOW";
    case RiskBand::elevated: return "ELEVATED";
    case RiskBand::high: return "HIGH";
  }
  return "?";
}

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Node indices ordered by descending contribution (ties by index), first `k`.
inline std::vector<std::size_t> top_nodes(const std::vector<double>& contributions, std::size_t k) {
  std::vector<std::size_t> idx(contributions.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return contributions[a] > contributions[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

struct PolicyBulletin {
  std::string text;
  RiskBand band = RiskBand::low;
  std::vector<std::size_t> top;
  std::size_t up = 0, down = 0, flat = 0;
};

/// Fills the fixed markdown template from model outputs.
inline PolicyBulletin generate_bulletin(const SystemicRiskOutput& risk, const std::vector<MicroForecast>& forecasts,
                                        const std::vector<std::string>& node_names, const std::string& date = "") {
  if (node_names.empty()) throw ContractError("generate_bulletin: empty node list");
  if (node_names.size() != risk.contributions.size())
    throw DimensionError("generate_bulletin: node names do not match contribution count");
  if (!std::isfinite(risk.score)) throw NumericError("generate_bulletin: non-finite risk score");
  for (double c : risk.contributions)
    if (!std::isfinite(c)) throw NumericError("generate_bulletin: non-finite contribution");
  PolicyBulletin b;
  b.band = risk_band(risk.score);
  b.top = top_nodes(risk.contributions, 3);
  for (const auto& f : forecasts) {
    switch (f.direction_class()) {
      case 0: ++b.down; break;
      case 1: ++b.flat; break;
      default: ++b.up; break;
    }
  }
  std::ostringstream os;
  os << "# Systemic risk bulletin" << (date.empty() ? "" : " " + date) << "\n\n";
  os << "## Headline\n\n";
  os << "Risk level: " << to_string(b.band) << " (score " << format_number(risk.score) << ")\n";
  os << "Early warning: " << (risk.warning ? "RAISED" : "not raised") << "\n\n";
  os << "## Top contributing nodes\n\n";
  for (std::size_t r = 0; r < b.top.size(); ++r)
    os << r + 1 << ". " << node_names[b.top[r]] << ": " << format_number(risk.contributions[b.top[r]]) << "\n";
  os << "\n## Micro outlook\n\n";
  os << "Up: " << b.up << ", Down: " << b.down << ", Flat: " << b.flat << " (of " << forecasts.size() << " forecasts)\n";
  os << "\n## Metric snapshot\n\n";
  double mean = 0.0;
  for (double c : risk.contributions) mean += c;
  mean /= static_cast<double>(risk.contributions.size());
  os << "| metric | value |\n|---|---|\n";
  os << "| risk score | " << format_number(risk.score) << " |\n";
  os << "| mean node contribution | " << format_number(mean) << " |\n";
  os << "| nodes | " << risk.contributions.size() << " |\n";
  b.text = os.str();
  return b;
}

}  // namespace unifin::heads
