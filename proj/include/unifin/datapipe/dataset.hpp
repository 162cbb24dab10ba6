#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/datapipe/indicators.hpp"
#include "unifin/datapipe/normalize.hpp"
#include "unifin/datapipe/series.hpp"
#include "unifin/datapipe/synthetic.hpp"
#include "unifin/errors.hpp"
#include "unifin/modal.hpp"

namespace unifin::datapipe {

inline constexpr int kDatasetSchemaVersion = 1;

struct AssetRecord {
  Bar ohlcv{};
  std::array<double, kIndicatorCount> indicators{};
  std::uint8_t warmup = 0;
  std::vector<std::size_t> tokens;
  double next_return = 0.0;
};

struct DateRecord {
  std::string date;
  std::vector<double> macro;
  std::vector<std::uint8_t> macro_missing;
  GraphSnapshot graph;
  Bar market{};
  std::array<double, kIndicatorCount> market_indicators{};
  std::vector<std::size_t> market_tokens;
  double market_return = 0.0;       ///< realized over (t-1, t]
  double market_next_return = 0.0;  ///< realized over (t, t+1]
  std::vector<double> institution_returns;
  std::uint8_t crisis = 0;
  double stress = 0.0;
  std::vector<std::uint8_t> node_distress;
};

/// Daily-aligned, imputed, unnormalized dataset; the unit of serialization.
struct AlignedDataset {
  int schema_version = kDatasetSchemaVersion;
  std::uint64_t seed = 0;
  double flat_band = 0.0005;
  std::vector<std::string> assets;
  std::vector<DateRecord> dates;
  std::vector<std::vector<AssetRecord>> records;  ///< [asset][step]

  std::size_t steps() const { return dates.size(); }
  std::size_t n_assets() const { return assets.size(); }
  std::size_t graph_nodes() const { return dates.empty() ? 0 : dates[0].graph.nodes; }
};

struct PipelineOptions {
  bool impute = true;
  std::size_t kalman_window = 60;
};

/// Imputes, aligns and enriches raw generator output.
inline AlignedDataset build_aligned(const SyntheticData& raw, const PipelineOptions& opt = {}) {
  const std::size_t n = raw.dates.size();
  AlignedDataset ds;
  ds.seed = raw.config.seed;
  ds.flat_band = raw.config.flat_band;
  for (std::size_t a = 0; a < raw.asset_bars.size(); ++a) ds.assets.push_back("A" + std::to_string(a));

  std::vector<AlignedColumn> macro;
  for (const auto& s : raw.macro) macro.push_back(align_temporal(opt.impute && s.observed() >= 2 ? kalman_impute(s, opt.kalman_window) : s, n));

  const auto mkt_ind = compute_indicators(raw.market_bars);
  ds.dates.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto& r = ds.dates[t];
    r.date = raw.dates[t];
    for (const auto& c : macro) {
      r.macro.push_back(c.values[t]);
      r.macro_missing.push_back(c.missing[t]);
    }
    r.graph = raw.graphs[t];
    r.market = raw.market_bars[t];
    r.market_indicators = mkt_ind.rows[t];
    r.market_tokens = raw.market_tokens[t];
    r.market_return = raw.market_returns[t];
    r.market_next_return = raw.market_returns[t + 1];
    r.institution_returns = raw.institution_returns[t];
    r.crisis = raw.regime[t];
    r.stress = raw.stress[t];
    r.node_distress = raw.node_distress[t];
  }
  ds.records.resize(raw.asset_bars.size());
  for (std::size_t a = 0; a < raw.asset_bars.size(); ++a) {
    const auto ind = compute_indicators(raw.asset_bars[a]);
    for (std::size_t t = 0; t < n; ++t) {
      AssetRecord rec;
      rec.ohlcv = raw.asset_bars[a][t];
      rec.indicators = ind.rows[t];
      rec.warmup = ind.warmup[t];
      rec.tokens = raw.asset_tokens[a][t];
      rec.next_return = raw.asset_returns[a][t + 1];
      ds.records[a].push_back(std::move(rec));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model inputs
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPriceFeatures = 12;

/// Scale-free per-step price features from raw bars and indicators; uses only
/// rows t and t-1.
inline std::vector<double> price_feature_row(const Bar& bar, const Bar& prev, const std::array<double, kIndicatorCount>& ind) {
  const double pc = prev[kClose];
  const double pv = std::max(prev[kVolume], 1.0);
  const double c = bar[kClose];
  return {std::log(bar[kOpen] / pc), std::log(bar[kHigh] / pc), std::log(bar[kLow] / pc), std::log(c / pc),
          std::log(std::max(bar[kVolume], 1.0) / pv), ind[0] / c - 1.0, ind[1] / c - 1.0, ind[2] / 100.0 - 0.5,
          ind[3] / c, ind[4] / c, ind[5], ind[6] - 1.0};
}

struct FeatureOptions {
  std::size_t window = 10;
  double train_fraction = 0.7;
};

struct NormalizationState {
  Normalizer price;
  Normalizer market;
  Normalizer macro;
  Normalizer node;
};

/// Normalized per-step feature rows ready for bundle assembly.
struct ModelInputs {
  std::size_t window = 0;
  std::size_t first_step = 0;  ///< earliest step with a full window and no indicator warmup
  std::size_t train_end = 0;   ///< train = [first_step, train_end), test = [train_end, steps)
  std::size_t steps = 0;
  std::size_t nodes = 0;
  std::vector<std::vector<std::vector<double>>> asset;  ///< [asset][step] -> kPriceFeatures
  std::vector<std::vector<double>> market;              ///< [step] -> kPriceFeatures
  std::vector<std::vector<double>> macro;               ///< [step] -> kMacroSlots
  std::vector<std::vector<double>> node;                ///< [step] -> nodes * kNodeFeatures
  NormalizationState norm;
};

inline std::size_t first_usable_step(std::size_t window) { return std::max<std::size_t>(kIndicatorWarmup, window - 1); }

namespace detail {
inline std::vector<std::vector<double>> raw_price_rows(const std::vector<Bar>& bars,
                                                       const std::vector<std::array<double, kIndicatorCount>>& ind) {
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < bars.size(); ++t) rows.push_back(price_feature_row(bars[t], bars[t == 0 ? 0 : t - 1], ind[t]));
  return rows;
}
}  // namespace detail

/// Fits normalizers on the training range (or reuses `fitted`) and applies
/// them to every step.
inline ModelInputs prepare_inputs(const AlignedDataset& ds, const FeatureOptions& opt,
                                  const NormalizationState* fitted = nullptr) {
  const std::size_t n = ds.steps();
  ModelInputs in;
  in.window = opt.window;
  in.steps = n;
  in.nodes = ds.graph_nodes();
  in.first_step = first_usable_step(opt.window);
  if (in.first_step + 2 > n) throw ContractError("dataset too short for window " + std::to_string(opt.window));
  in.train_end = in.first_step + static_cast<std::size_t>(std::floor(static_cast<double>(n - in.first_step) * opt.train_fraction));
  in.train_end = std::clamp(in.train_end, in.first_step + 1, n);

  std::vector<std::vector<std::vector<double>>> asset_raw;
  for (const auto& recs : ds.records) {
    std::vector<Bar> bars;
    std::vector<std::array<double, kIndicatorCount>> ind;
    for (const auto& r : recs) {
      bars.push_back(r.ohlcv);
      ind.push_back(r.indicators);
    }
    asset_raw.push_back(detail::raw_price_rows(bars, ind));
  }
  std::vector<Bar> mbars;
  std::vector<std::array<double, kIndicatorCount>> mind;
  std::vector<std::vector<double>> macro_raw, node_raw;
  for (const auto& d : ds.dates) {
    mbars.push_back(d.market);
    mind.push_back(d.market_indicators);
    macro_raw.push_back(d.macro);
  }
  const auto market_raw = detail::raw_price_rows(mbars, mind);

  if (fitted) {
    in.norm = *fitted;
  } else {
    std::vector<std::vector<double>> pooled;
    for (const auto& rows : asset_raw)
      for (std::size_t t = in.first_step; t < in.train_end; ++t) pooled.push_back(rows[t]);
    in.norm.price = Normalizer::fit(pooled, 0, pooled.size());
    in.norm.market = Normalizer::fit(market_raw, in.first_step, in.train_end);
    in.norm.macro = Normalizer::fit(macro_raw, in.first_step, in.train_end);
    std::vector<std::vector<double>> node_rows;
    for (std::size_t t = in.first_step; t < in.train_end; ++t) {
      const auto& g = ds.dates[t].graph;
      for (std::size_t i = 0; i < g.nodes; ++i)
        node_rows.emplace_back(g.features.begin() + static_cast<std::ptrdiff_t>(i * kNodeFeatures),
                               g.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * kNodeFeatures));
    }
    in.norm.node = Normalizer::fit(node_rows, 0, node_rows.size());
  }
  for (const auto& rows : asset_raw) {
    std::vector<std::vector<double>> out;
    for (const auto& r : rows) out.push_back(in.norm.price.apply(r));
    in.asset.push_back(std::move(out));
  }
  for (const auto& r : market_raw) in.market.push_back(in.norm.market.apply(r));
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> m = in.norm.macro.apply(ds.dates[t].macro);
    // Slots with no observation yet sit at the training mean.
    for (std::size_t k = 0; k < m.size(); ++k)
      if (ds.dates[t].macro_missing[k]) m[k] = 0.0;
    in.macro.push_back(std::move(m));
    const auto& g = ds.dates[t].graph;
    std::vector<double> nf;
    for (std::size_t i = 0; i < g.nodes; ++i) {
      std::vector<double> row(g.features.begin() + static_cast<std::ptrdiff_t>(i * kNodeFeatures),
                              g.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * kNodeFeatures));
      for (double v : in.norm.node.apply(row)) nf.push_back(v);
    }
    in.node.push_back(std::move(nf));
  }
  return in;
}

/// Which instrument a bundle describes: an asset index or the market index.
struct Subject {
  static constexpr std::size_t kMarket = static_cast<std::size_t>(-1);
  std::size_t asset = kMarket;
  bool is_market() const { return asset == kMarket; }
};

/// Assembles the bundle for (step, subject) from data published at or before step.
inline ModalBundle make_bundle(const ModelInputs& in, const AlignedDataset& ds, std::size_t step, Subject who) {
  if (step >= in.steps || step < in.first_step) throw ContractError("make_bundle: step outside usable range");
  ModalBundle b;
  const auto& rows = who.is_market() ? in.market : in.asset.at(who.asset);
  for (std::size_t t = step + 1 - in.window; t <= step; ++t) b.price.features.push_back(rows[t]);
  b.text.ids = who.is_market() ? ds.dates[step].market_tokens : ds.records[who.asset][step].tokens;
  b.macro.values = in.macro[step];
  b.graph.nodes = in.nodes;
  b.graph.features = in.node[step];
  b.graph.adjacency = ds.dates[step].graph.adjacency;
  return b;
}

// ---------------------------------------------------------------------------
// JSON-lines serialization
// ---------------------------------------------------------------------------

namespace detail {
template <class C>
nlohmann::json arr(const C& c) {
  return nlohmann::json(std::vector<typename C::value_type>(c.begin(), c.end()));
}
inline nlohmann::json graph_json(const GraphSnapshot& g) {
  nlohmann::json feats = nlohmann::json::array();
  for (std::size_t i = 0; i < g.nodes; ++i)
    feats.push_back(std::vector<double>(g.features.begin() + static_cast<std::ptrdiff_t>(i * kNodeFeatures),
                                        g.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * kNodeFeatures)));
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i < g.nodes; ++i)
    for (std::size_t j = 0; j < g.nodes; ++j)
      if (g.adjacency[i * g.nodes + j] != 0.0) edges.push_back({i, j, g.adjacency[i * g.nodes + j]});
  return {{"nodes", g.nodes}, {"features", feats}, {"edges", edges}};
}
inline GraphSnapshot graph_from_json(const nlohmann::json& j) {
  GraphSnapshot g;
  g.nodes = j.at("nodes").get<std::size_t>();
  for (const auto& row : j.at("features"))
    for (double v : row) g.features.push_back(v);
  g.adjacency.assign(g.nodes * g.nodes, 0.0);
  for (const auto& e : j.at("edges")) {
    const auto i = e.at(0).get<std::size_t>(), k = e.at(1).get<std::size_t>();
    if (i >= g.nodes || k >= g.nodes) throw SchemaError("edge references unknown node");
    g.adjacency[i * g.nodes + k] = e.at(2).get<double>();
  }
  return g;
}
inline void check_version(const nlohmann::json& j) {
  const int v = j.at("schema_version").get<int>();
  if (v != kDatasetSchemaVersion)
    throw SchemaError("dataset schema_version " + std::to_string(v) + " is not supported (expected " +
                      std::to_string(kDatasetSchemaVersion) + ")");
}
}  // namespace detail

/// One JSON object per (date, asset).
inline void write_asset_records(std::ostream& os, const AlignedDataset& ds) {
  for (std::size_t t = 0; t < ds.steps(); ++t)
    for (std::size_t a = 0; a < ds.n_assets(); ++a) {
      const auto& r = ds.records[a][t];
      nlohmann::json j = {{"schema_version", ds.schema_version},
                          {"date", ds.dates[t].date},
                          {"step", t},
                          {"asset", ds.assets[a]},
                          {"ohlcv", detail::arr(r.ohlcv)},
                          {"indicators", detail::arr(r.indicators)},
                          {"warmup", r.warmup},
                          {"tokens", r.tokens},
                          {"macro", ds.dates[t].macro},
                          {"label", {{"next_return", r.next_return}}}};
      os << j.dump() << '\n';
    }
}

/// One JSON object per date: graph edge list, market index, system labels.
inline void write_date_records(std::ostream& os, const AlignedDataset& ds) {
  for (std::size_t t = 0; t < ds.steps(); ++t) {
    const auto& d = ds.dates[t];
    nlohmann::json j = {{"schema_version", ds.schema_version},
                        {"date", d.date},
                        {"step", t},
                        {"graph", detail::graph_json(d.graph)},
                        {"macro", d.macro},
                        {"macro_missing", d.macro_missing},
                        {"market",
                         {{"ohlcv", detail::arr(d.market)},
                          {"indicators", detail::arr(d.market_indicators)},
                          {"tokens", d.market_tokens},
                          {"return", d.market_return},
                          {"next_return", d.market_next_return}}},
                        {"institution_returns", d.institution_returns},
                        {"labels", {{"crisis", d.crisis}, {"stress", d.stress}, {"node_distress", d.node_distress}}}};
    os << j.dump() << '\n';
  }
}

inline AlignedDataset read_dataset_unchecked(std::istream& assets_in, std::istream& dates_in, std::uint64_t seed,
                                            double flat_band) {
  AlignedDataset ds;
  ds.seed = seed;
  ds.flat_band = flat_band;
  std::string line;
  while (std::getline(dates_in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    detail::check_version(j);
    DateRecord d;
    d.date = j.at("date").get<std::string>();
    d.graph = detail::graph_from_json(j.at("graph"));
    d.macro = j.at("macro").get<std::vector<double>>();
    d.macro_missing = j.at("macro_missing").get<std::vector<std::uint8_t>>();
    const auto& m = j.at("market");
    const auto o = m.at("ohlcv").get<std::vector<double>>();
    const auto ind = m.at("indicators").get<std::vector<double>>();
    if (o.size() != 5 || ind.size() != kIndicatorCount) throw SchemaError("market record has wrong field widths");
    std::copy(o.begin(), o.end(), d.market.begin());
    std::copy(ind.begin(), ind.end(), d.market_indicators.begin());
    d.market_tokens = m.at("tokens").get<std::vector<std::size_t>>();
    d.market_return = m.at("return").get<double>();
    d.market_next_return = m.at("next_return").get<double>();
    d.institution_returns = j.at("institution_returns").get<std::vector<double>>();
    d.crisis = j.at("labels").at("crisis").get<std::uint8_t>();
    d.stress = j.at("labels").at("stress").get<double>();
    d.node_distress = j.at("labels").at("node_distress").get<std::vector<std::uint8_t>>();
    if (j.at("step").get<std::size_t>() != ds.dates.size()) throw SchemaError("date records out of order");
    ds.dates.push_back(std::move(d));
  }
  while (std::getline(assets_in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    detail::check_version(j);
    const auto name = j.at("asset").get<std::string>();
    auto it = std::find(ds.assets.begin(), ds.assets.end(), name);
    std::size_t a = static_cast<std::size_t>(it - ds.assets.begin());
    if (it == ds.assets.end()) {
      ds.assets.push_back(name);
      ds.records.emplace_back();
    }
    AssetRecord r;
    const auto o = j.at("ohlcv").get<std::vector<double>>();
    const auto ind = j.at("indicators").get<std::vector<double>>();
    if (o.size() != 5 || ind.size() != kIndicatorCount) throw SchemaError("asset record has wrong field widths");
    std::copy(o.begin(), o.end(), r.ohlcv.begin());
    std::copy(ind.begin(), ind.end(), r.indicators.begin());
    r.warmup = j.at("warmup").get<std::uint8_t>();
    r.tokens = j.at("tokens").get<std::vector<std::size_t>>();
    r.next_return = j.at("label").at("next_return").get<double>();
    if (j.at("step").get<std::size_t>() != ds.records[a].size()) throw SchemaError("asset records out of order");
    ds.records[a].push_back(std::move(r));
  }
  for (const auto& recs : ds.records)
    if (recs.size() != ds.dates.size()) throw SchemaError("asset record count does not match date count");
  return ds;
}

/// Reads the two JSON-lines streams; malformed records raise SchemaError.
inline AlignedDataset read_dataset(std::istream& assets_in, std::istream& dates_in, std::uint64_t seed, double flat_band) {
  try {
    return read_dataset_unchecked(assets_in, dates_in, seed, flat_band);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed dataset record: ") + e.what());
  }
}

}  // namespace unifin::datapipe
