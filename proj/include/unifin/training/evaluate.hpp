#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/datapipe/synthetic.hpp"
#include "unifin/errors.hpp"
#include "unifin/heads.hpp"
#include "unifin/metrics.hpp"
#include "unifin/model.hpp"
#include "unifin/training/data.hpp"

namespace unifin::training {

struct MicroRow {
  std::size_t asset = 0, step = 0;
  double close = 0.0;  ///< price at the forecast origin
  double truth = 0.0;  ///< realized next-step return
  double point = 0.0;  ///< forecast next-step return
  std::array<double, heads::kDirections> direction{};
};

struct MacroRow {
  std::size_t step = 0;
  double score = 0.0;
  bool warning = false;
  std::uint8_t crisis = 0;
  double stress = 0.0;
  std::vector<double> contributions;
  std::vector<std::uint8_t> distress;
};

struct Predictions {
  Split split = Split::test;
  std::vector<MicroRow> micro;
  std::vector<MacroRow> macro;
};

/// One-step forecasts for `asset` at every step in [lo, hi), in chunks.
inline std::vector<MicroRow> predict_micro(const Model& model, const TaskData& data, std::size_t asset, std::size_t lo, std::size_t hi,
                                           std::size_t chunk = 64) {
  const std::size_t H = data.history;
  if (lo + 1 < data.in.first_step + H) throw ContractError("predict_micro: step has no full forecast history");
  std::vector<MicroRow> out;
  for (std::size_t s = lo; s < hi; s += chunk) {
    const std::size_t e = std::min(hi, s + chunk), B = e - s;
    std::vector<const ModalBundle*> bs;
    for (std::size_t t = s + 1 - H; t < e; ++t) bs.push_back(&data.assets[asset][t]);
    const auto z = model.fuse(bs).z;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t h = 0; h < H; ++h) idx.push_back(i + h);
    const auto m = model.micro.forecast(numcore::gather_rows(z, idx), H, 1);
    for (std::size_t i = 0; i < B; ++i) {
      const auto f = m.at(i);
      MicroRow r;
      r.asset = asset;
      r.step = s + i;
      r.close = data.ds.records[asset][s + i].ohlcv[3];
      r.truth = data.next_return(asset, s + i);
      r.point = f.point;
      r.direction = f.direction;
      out.push_back(r);
    }
  }
  return out;
}

/// Systemic-risk outputs for every step in [lo, hi), in chunks.
inline std::vector<MacroRow> predict_macro(const Model& model, const TaskData& data, std::size_t lo, std::size_t hi,
                                           std::size_t chunk = 64) {
  if (lo < data.in.first_step) throw ContractError("predict_macro: step before the first usable step");
  std::vector<MacroRow> out;
  for (std::size_t s = lo; s < hi; s += chunk) {
    const std::size_t e = std::min(hi, s + chunk);
    std::vector<const ModalBundle*> bs;
    std::vector<const FinancialGraph*> gs;
    for (std::size_t t = s; t < e; ++t) bs.push_back(&data.market[t]), gs.push_back(&data.market[t].graph);
    const auto r = model.macro.risk(model.fuse(bs).z, gs);
    for (std::size_t i = 0; i < e - s; ++i) {
      const auto o = r.at(i);
      const auto& d = data.ds.dates[s + i];
      out.push_back({s + i, o.score, o.warning, d.crisis, d.stress, o.contributions, d.node_distress});
    }
  }
  return out;
}

inline Predictions predict(const Model& model, const TaskData& data, Split split) {
  Predictions p;
  p.split = split;
  const auto [lo, hi] = data.micro_range(split);
  for (std::size_t a = 0; a < data.n_assets(); ++a) {
    auto rows = predict_micro(model, data, a, lo, hi);
    p.micro.insert(p.micro.end(), rows.begin(), rows.end());
  }
  const auto [mlo, mhi] = data.macro_range(split);
  p.macro = predict_macro(model, data, mlo, mhi);
  return p;
}

/// Forecasts k steps ahead for every asset from `step`.
inline std::vector<heads::MicroForecast> forecasts_at(const Model& model, const TaskData& data, std::size_t step, long k) {
  const std::size_t H = data.history;
  if (step >= data.in.steps || step + 1 < data.in.first_step + H)
    throw IndexError("forecast: step " + std::to_string(step) + " is outside the usable range");
  std::vector<const ModalBundle*> bs;
  for (std::size_t a = 0; a < data.n_assets(); ++a)
    for (std::size_t t = step + 1 - H; t <= step; ++t) bs.push_back(&data.assets[a][t]);
  const auto m = model.micro.forecast(model.fuse(bs).z, H, k);
  std::vector<heads::MicroForecast> out;
  for (std::size_t a = 0; a < data.n_assets(); ++a) out.push_back(m.at(a));
  return out;
}

inline heads::SystemicRiskOutput risk_at(const Model& model, const TaskData& data, std::size_t step) {
  if (step >= data.in.steps || step < data.in.first_step)
    throw IndexError("risk: step " + std::to_string(step) + " is outside the usable range");
  const auto row = predict_macro(model, data, step, step + 1).front();
  return {row.score, row.warning, row.contributions};
}

struct ScoreOptions {
  double flat_band = 0.0005;
  /// Minimum |forecast| for a step to count toward the hit ratio.
  double hit_threshold = 0.0005;
  double node_threshold = 0.5;
};

/// Metrics of every task whose metrics are defined on these predictions.
inline metrics::MetricMap score(const Predictions& p, const ScoreOptions& o) {
  metrics::MetricMap out;
  if (!p.micro.empty()) {
    std::vector<double> truth, pred, price_true, price_pred;
    for (const auto& r : p.micro) {
      truth.push_back(r.truth);
      pred.push_back(r.point);
      price_true.push_back(r.close * (1.0 + r.truth));
      price_pred.push_back(r.close * (1.0 + r.point));
    }
    out["micro.directional_accuracy"] = metrics::directional_accuracy(truth, pred, o.flat_band);
    out["micro.mape"] = metrics::mape(price_true, price_pred).value;
    if (auto h = metrics::hit_ratio(truth, pred, o.hit_threshold, o.flat_band)) out["micro.hit_ratio"] = *h;
  }
  if (!p.macro.empty()) {
    std::vector<double> node_scores, scores;
    std::vector<std::uint8_t> node_pred, node_truth, warn, crisis;
    for (const auto& r : p.macro) {
      for (std::size_t i = 0; i < r.contributions.size(); ++i) {
        node_scores.push_back(r.contributions[i]);
        node_pred.push_back(r.contributions[i] >= o.node_threshold ? 1 : 0);
        node_truth.push_back(r.distress.at(i));
      }
      scores.push_back(r.score);
      warn.push_back(r.warning ? 1 : 0);
      crisis.push_back(r.crisis);
    }
    out["credit.accuracy"] = metrics::accuracy(node_pred, node_truth);
    out["credit.f1"] = metrics::precision_recall_f1(node_pred, node_truth).f1;
    try {
      out["credit.roc_auc"] = metrics::roc_auc(node_scores, node_truth);
      out["credit.pr_auc"] = metrics::pr_auc(node_scores, node_truth);
    } catch (const UndefinedMetricError&) {
    }
    out["macro.accuracy"] = metrics::accuracy(warn, crisis);
    out["macro.f1"] = metrics::precision_recall_f1(warn, crisis).f1;
    try {
      out["macro.roc_auc"] = metrics::roc_auc(scores, crisis);
    } catch (const UndefinedMetricError&) {
    }
  }
  return out;
}

inline nlohmann::json to_json(const Predictions& p, const TaskData& data) {
  nlohmann::json micro = nlohmann::json::array(), macro = nlohmann::json::array();
  for (const auto& r : p.micro)
    micro.push_back({{"asset", data.ds.assets[r.asset]}, {"step", r.step}, {"date", data.ds.dates[r.step].date}, {"truth", r.truth},
                     {"point", r.point}, {"direction", r.direction}});
  for (const auto& r : p.macro)
    macro.push_back({{"step", r.step}, {"date", data.ds.dates[r.step].date}, {"score", r.score}, {"warning", r.warning},
                     {"crisis", r.crisis}, {"contributions", r.contributions}});
  return {{"split", to_string(p.split)}, {"micro", micro}, {"macro", macro}};
}

}  // namespace unifin::training
