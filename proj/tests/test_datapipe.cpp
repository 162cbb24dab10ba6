#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "unifin/datapipe/dataset.hpp"
#include "unifin/datapipe/indicators.hpp"
#include "unifin/datapipe/normalize.hpp"
#include "unifin/datapipe/risk_measures.hpp"
#include "unifin/datapipe/series.hpp"
#include "unifin/datapipe/synthetic.hpp"

using namespace unifin;
using namespace unifin::datapipe;
using Catch::Approx;

namespace {

std::string dump(const AlignedDataset& ds) {
  std::ostringstream a, d;
  write_asset_records(a, ds);
  write_date_records(d, ds);
  return a.str() + d.str();
}

/// Plug-in mutual information (nats) between two discrete samples.
double mutual_information(const std::vector<int>& x, const std::vector<int>& y) {
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> px, py;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[{x[i], y[i]}] += 1.0 / n;
    px[x[i]] += 1.0 / n;
    py[y[i]] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (px[k.first] * py[k.second]));
  return mi;
}

/// Direction class carried by the single signal token in a step's token list.
int token_direction(const std::vector<std::size_t>& tokens) {
  for (auto t : tokens) {
    switch (event_class(t)) {
      case EventClass::up: return 2;
      case EventClass::down: return 0;
      case EventClass::flat: return 1;
      default: break;
    }
  }
  return -1;
}

/// Smallest sample value whose count of samples at or below it reaches q n.
double quantile_by_count(const std::vector<double>& x, double q) {
  double best = INFINITY;
  for (double c : x) {
    std::size_t k = 0;
    for (double y : x) k += y <= c ? 1 : 0;
    if (static_cast<double>(k) >= q * static_cast<double>(x.size()) && c < best) best = c;
  }
  return best;
}

std::vector<Bar> bars_from_close(const std::vector<double>& close, double volume = 1000.0) {
  std::vector<Bar> out;
  for (double c : close) out.push_back({c, c, c, c, volume});
  return out;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic per seed", "[datapipe][synthetic]") {
  SyntheticConfig cfg;
  cfg.n_steps = 120;
  const auto a = dump(build_aligned(generate_synthetic(cfg)));
  const auto b = dump(build_aligned(generate_synthetic(cfg)));
  CHECK(a == b);
  cfg.seed = 8;
  CHECK(dump(build_aligned(generate_synthetic(cfg))) != a);
}

TEST_CASE("synthetic bars are consistent and labels well formed", "[datapipe][synthetic]") {
  SyntheticConfig cfg;
  cfg.n_steps = 300;
  const auto d = generate_synthetic(cfg);
  REQUIRE(d.dates.size() == 300);
  for (const auto& bars : d.asset_bars)
    for (const auto& b : bars) CHECK(bar_consistent(b));
  for (const auto& b : d.market_bars) CHECK(bar_consistent(b));
  for (double s : d.stress) {
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  for (const auto& g : d.graphs) {
    CHECK(g.adjacency.size() == cfg.graph_nodes * cfg.graph_nodes);
    for (std::size_t i = 0; i < g.nodes; ++i) CHECK(g.adjacency[i * g.nodes + i] == 0.0);
  }
  for (const auto& toks : d.asset_tokens[0]) {
    CHECK(toks.size() == cfg.tokens_per_step);
    CHECK(token_direction(toks) >= 0);
  }
  // Stress level tracks the regime.
  double calm = 0.0, stressed = 0.0;
  std::size_t nc = 0, ns = 0;
  for (std::size_t t = 0; t < d.stress.size(); ++t) (d.regime[t] ? (stressed += d.stress[t], ++ns) : (calm += d.stress[t], ++nc));
  if (ns > 0 && nc > 0) CHECK(stressed / static_cast<double>(ns) > calm / static_cast<double>(nc) + 0.3);
}

TEST_CASE("synthetic config validation names the offending field", "[datapipe][synthetic]") {
  SyntheticConfig cfg;
  cfg.crisis_rate = 1.5;
  CHECK_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("crisis_rate"));
  cfg = {};
  cfg.text_signal = -0.1;
  CHECK_THROWS_AS(generate_synthetic(cfg), ContractError);
  cfg = {};
  cfg.n_assets = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = {};
  cfg.graph_nodes = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("zero text signal carries no information about direction", "[datapipe][synthetic][slow]") {
  SyntheticConfig cfg;
  cfg.n_assets = 4;
  cfg.n_steps = 25000;
  cfg.graph_nodes = 2;
  cfg.text_signal = 0.0;
  const auto d = generate_synthetic(cfg);
  std::vector<int> tok, dir;
  for (std::size_t a = 0; a < cfg.n_assets; ++a)
    for (std::size_t t = 0; t < cfg.n_steps; ++t) {
      tok.push_back(token_direction(d.asset_tokens[a][t]));
      dir.push_back(direction_class(d.asset_returns[a][t + 1], cfg.flat_band));
    }
  REQUIRE(tok.size() == 100000);
  // Plug-in bias for a 3x3 table is about 4 / (2n) nats = 2e-5.
  CHECK(mutual_information(tok, dir) < 2e-4);

  cfg.text_signal = 0.8;
  cfg.n_steps = 5000;
  const auto s = generate_synthetic(cfg);
  tok.clear();
  dir.clear();
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    tok.push_back(token_direction(s.asset_tokens[0][t]));
    dir.push_back(direction_class(s.asset_returns[0][t + 1], cfg.flat_band));
  }
  CHECK(mutual_information(tok, dir) > 0.2);
}

TEST_CASE("crisis flag frequency matches the configured base rate", "[datapipe][synthetic][slow]") {
  SyntheticConfig cfg;
  cfg.n_assets = 1;
  cfg.n_steps = 100000;
  cfg.graph_nodes = 1;
  cfg.tokens_per_step = 1;
  for (double rate : {0.12, 0.3}) {
    cfg.crisis_rate = rate;
    const auto d = generate_synthetic(cfg);
    double f = 0.0;
    for (auto r : d.regime) f += r;
    f /= static_cast<double>(d.regime.size());
    CHECK(std::abs(f - rate) <= 0.02);
  }
}

TEST_CASE("forward fill carries lower-frequency values", "[datapipe][align]") {
  Calendar cal(140);
  RawSeries q{"q", Frequency::quarterly, {}, {}};
  for (auto s : cal.period_starts(Frequency::quarterly)) {
    q.steps.push_back(s);
    q.values.push_back(static_cast<double>(s) + 0.5);
  }
  const auto col = align_temporal(q, 140);
  for (std::size_t t = 0; t < 140; ++t) {
    CHECK_FALSE(col.missing[t]);
    CHECK(cal.period(static_cast<std::size_t>(col.source_step[t]), Frequency::quarterly) == cal.period(t, Frequency::quarterly));
    CHECK(col.values[t] == static_cast<double>(col.source_step[t]) + 0.5);
  }

  RawSeries daily{"d", Frequency::daily, {0, 1, 2, 3}, {1.0, 2.0, 3.0, 4.0}};
  CHECK(align_temporal(daily, 4).values == std::vector<double>{1, 2, 3, 4});

  RawSeries late{"late", Frequency::monthly, {3, 7}, {1.0, 2.0}};
  const auto lc = align_temporal(late, 9);
  CHECK(lc.missing == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(lc.values[8] == 2.0);

  CHECK_THROWS_AS(align_temporal(RawSeries{"e", Frequency::daily, {}, {}}, 3), EmptyInputError);
  CHECK_THROWS_AS(align_temporal(RawSeries{"u", Frequency::daily, {2, 1}, {1.0, 2.0}}, 3), ContractError);
}

TEST_CASE("no aligned step carries a future observation", "[datapipe][align]") {
  SyntheticConfig cfg;
  cfg.n_steps = 400;
  cfg.gap_rate = 0.2;
  const auto d = generate_synthetic(cfg);
  for (const auto& s : d.macro) {
    const auto col = align_temporal(s, cfg.n_steps);
    for (std::size_t t = 0; t < cfg.n_steps; ++t) {
      if (col.missing[t]) continue;
      CHECK(col.source_step[t] <= static_cast<std::int64_t>(t));
      // The carried value is the latest published observation.
      std::optional<double> latest;
      for (std::size_t i = 0; i < s.steps.size() && s.steps[i] <= static_cast<std::int64_t>(t); ++i)
        if (s.values[i]) latest = s.values[i];
      REQUIRE(latest);
      CHECK(col.values[t] == *latest);
    }
  }
}

TEST_CASE("kalman imputation", "[datapipe][kalman]") {
  RawSeries flat{"flat", Frequency::daily, {0, 1, 2, 3}, {5.0, 5.0, std::nullopt, 5.0}};
  const auto f = kalman_impute(flat);
  CHECK(*f.values[2] == Approx(5.0).margin(1e-12));

  RawSeries ramp{"ramp", Frequency::daily, {}, {}};
  for (int i = 0; i < 40; ++i) {
    ramp.steps.push_back(i);
    ramp.values.push_back(i == 30 ? std::nullopt : std::optional<double>(10.0 + 0.5 * i));
  }
  const auto r = kalman_impute(ramp);
  CHECK(std::abs(*r.values[30] - 25.0) <= 0.05 * 25.0);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  RawSeries noisy{"noisy", Frequency::daily, {}, {}};
  for (int i = 0; i < 200; ++i) {
    noisy.steps.push_back(i);
    noisy.values.push_back(i % 7 == 3 ? std::nullopt : std::optional<double>(nd(rng)));
  }
  const auto n = kalman_impute(noisy, 30);
  for (std::size_t i = 0; i < noisy.values.size(); ++i) {
    REQUIRE(n.values[i].has_value());
    if (noisy.values[i]) CHECK(*n.values[i] == *noisy.values[i]);
  }

  CHECK_THROWS_AS(kalman_impute(RawSeries{"one", Frequency::daily, {0, 1}, {1.0, std::nullopt}}), ContractError);
  RawSeries hole{"hole", Frequency::daily, {}, {}};
  for (int i = 0; i < 10; ++i) {
    hole.steps.push_back(i);
    hole.values.push_back(i < 2 ? std::optional<double>(1.0) : std::nullopt);
  }
  CHECK_THROWS_WITH(kalman_impute(hole, 3), Catch::Matchers::ContainsSubstring("degenerate window"));
}

TEST_CASE("indicator examples", "[datapipe][indicators]") {
  std::vector<double> up;
  for (int i = 0; i < 15; ++i) up.push_back(100.0 + i);
  CHECK(compute_indicators(bars_from_close(up)).rows[14][2] == 100.0);

  std::vector<double> alt;
  for (int i = 0; i < 41; ++i) alt.push_back(i % 2 == 0 ? 100.0 : 101.0);
  const auto am = compute_indicators(bars_from_close(alt));
  CHECK(am.rows[14][2] == Approx(50.0).margin(1e-12));

  const auto cm = compute_indicators(bars_from_close(std::vector<double>(60, 42.0)));
  for (std::size_t t = 0; t < 60; ++t) {
    CHECK(cm.rows[t][3] == 0.0);
    CHECK(cm.rows[t][4] == 0.0);
    CHECK(cm.rows[t][5] == 0.0);
    CHECK(cm.rows[t][0] == 42.0);
    CHECK(cm.rows[t][6] == 1.0);
    CHECK(cm.warmup[t] == (t < kIndicatorWarmup ? 1 : 0));
  }
}

TEST_CASE("indicators match direct formulas and ignore volume scale", "[datapipe][indicators]") {
  SyntheticConfig cfg;
  cfg.n_steps = 120;
  const auto d = generate_synthetic(cfg);
  const auto& bars = d.asset_bars[0];
  const auto m = compute_indicators(bars);
  const std::size_t t = 80;
  double s10 = 0.0;
  for (std::size_t i = t - 9; i <= t; ++i) s10 += bars[i][kClose];
  CHECK(m.rows[t][0] == Approx(s10 / 10.0).epsilon(1e-12));
  std::vector<double> rets;
  for (std::size_t i = t - 19; i <= t; ++i) rets.push_back(bars[i][kClose] / bars[i - 1][kClose] - 1.0);
  double mu = 0.0, var = 0.0;
  for (double x : rets) mu += x / 20.0;
  for (double x : rets) var += (x - mu) * (x - mu) / 19.0;
  CHECK(m.rows[t][5] == Approx(std::sqrt(var)).epsilon(1e-10));

  auto scaled = bars;
  for (auto& b : scaled) b[kVolume] *= 10.0;
  const auto ms = compute_indicators(scaled);
  for (std::size_t i = 0; i < bars.size(); ++i)
    for (std::size_t k = 0; k < kIndicatorCount; ++k) CHECK(ms.rows[i][k] == Approx(m.rows[i][k]).epsilon(1e-12));
}

TEST_CASE("normalization", "[datapipe][normalize]") {
  const std::vector<std::vector<double>> rows = {{1.0, 7.0}, {2.0, 7.0}, {3.0, 7.0}};
  const auto n = Normalizer::fit(rows, 0, 3);
  const double z = 1.0 / std::sqrt(2.0 / 3.0);
  CHECK(n.apply({1.0, 7.0})[0] == Approx(-z).margin(1e-12));
  CHECK(n.apply({2.0, 7.0})[0] == Approx(0.0).margin(1e-12));
  CHECK(n.apply({3.0, 7.0})[0] == Approx(z).margin(1e-12));
  CHECK(std::abs(z - 1.2247) < 1e-4);
  CHECK(n.constant_columns() == std::vector<std::uint8_t>{0, 1});
  CHECK(n.apply({3.0, 7.0})[1] == 0.0);

  std::vector<std::vector<double>> zs;
  for (const auto& r : rows) zs.push_back(n.apply(r));
  const auto again = Normalizer::fit(zs, 0, 3);
  for (const auto& r : zs) CHECK(again.apply(r)[0] == Approx(r[0]).margin(1e-12));

  // Statistics come from the fit range only.
  std::vector<std::vector<double>> series = {{1.0}, {2.0}, {3.0}, {100.0}, {200.0}};
  const auto train = Normalizer::fit(series, 0, 3);
  CHECK(train.stats()[0].mean == 2.0);
  CHECK(train.apply({100.0})[0] == Approx((100.0 - 2.0) / std::sqrt(2.0 / 3.0)));

  CHECK_THROWS_AS(Normalizer::fit(series, 2, 2), EmptyInputError);
  CHECK_THROWS_AS(n.apply({1.0}), DimensionError);
}

TEST_CASE("empirical CoVaR", "[datapipe][risk]") {
  const std::vector<double> sys = {-0.05, 0.01, -0.02, 0.03, -0.01};
  const std::vector<double> inst = {-0.04, 0.02, -0.03, 0.01, 0.00};
  CHECK(empirical_covar(sys, inst, 0.4) == -0.05);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(30), i(30);
    for (auto& x : s) x = nd(rng);
    for (auto& x : i) x = nd(rng);
    for (double q : {0.1, 0.25, 0.5}) {
      const double var = quantile_by_count(i, q);
      std::vector<double> tail;
      for (std::size_t k = 0; k < s.size(); ++k)
        if (i[k] <= var) tail.push_back(s[k]);
      CHECK(empirical_covar(s, i, q) == quantile_by_count(tail, q));
      // Institution identical to the system.
      std::vector<double> self;
      const double sv = quantile_by_count(s, q);
      for (double x : s)
        if (x <= sv) self.push_back(x);
      CHECK(empirical_covar(s, s, q) == quantile_by_count(self, q));
    }
  }

  std::vector<double> s(100000), i(100000);
  for (auto& x : s) x = nd(rng);
  for (auto& x : i) x = nd(rng);
  CHECK(empirical_covar(s, i, 0.05) == Approx(empirical_quantile(s, 0.05)).margin(0.1));

  CHECK_THROWS_AS(empirical_covar({1.0, 2.0}, {1.0}, 0.5), DimensionError);
  CHECK_THROWS_AS(empirical_covar({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}, 0.1), ContractError);
}

TEST_CASE("systemic expected shortfall", "[datapipe][risk]") {
  CHECK(systemic_expected_shortfall({0.01, -0.03, 0.02}, {0, 1, 0}) == -0.03);
  CHECK(systemic_expected_shortfall({1.0, 2.0, 6.0}, {1, 1, 1}) == Approx(3.0));
  const std::vector<double> r = {0.01, -0.02, -0.04, 0.03, -0.01, 0.02};
  CHECK(systemic_expected_shortfall(r, {0, 1, 1, 0, 1, 0}) == Approx((-0.02 - 0.04 - 0.01) / 3.0).margin(1e-15));
  CHECK_THROWS_AS(systemic_expected_shortfall({1.0}, {0}), ContractError);
}

TEST_CASE("dataset round trips through JSON lines", "[datapipe][io]") {
  SyntheticConfig cfg;
  cfg.n_steps = 80;
  const auto ds = build_aligned(generate_synthetic(cfg));
  std::ostringstream a, d;
  write_asset_records(a, ds);
  write_date_records(d, ds);
  std::istringstream ai(a.str()), di(d.str());
  const auto back = read_dataset(ai, di, ds.seed, ds.flat_band);
  CHECK(dump(back) == dump(ds));
  CHECK(back.records[1][40].next_return == ds.records[1][40].next_return);
  CHECK(back.dates[50].graph.adjacency == ds.dates[50].graph.adjacency);

  std::string bumped = d.str();
  bumped.replace(bumped.find("\"schema_version\":1"), 18, "\"schema_version\":9");
  std::istringstream a2(a.str()), d2(bumped);
  CHECK_THROWS_AS(read_dataset(a2, d2, 0, 0.0), SchemaError);
  std::istringstream a3("{not json"), d3(d.str());
  CHECK_THROWS_AS(read_dataset(a3, d3, 0, 0.0), SchemaError);
}

TEST_CASE("pipeline outputs at step t ignore raw data after t", "[datapipe][leakage]") {
  SyntheticConfig cfg;
  cfg.n_steps = 260;
  const auto raw = generate_synthetic(cfg);
  const auto base = build_aligned(raw);
  const FeatureOptions fo{10, 0.7};
  const auto in = prepare_inputs(base, fo);
  for (std::size_t cut : {std::size_t{60}, std::size_t{150}, std::size_t{230}}) {
    auto p = raw;
    std::mt19937_64 rng(cut);
    std::uniform_real_distribution<double> u(0.5, 2.0);
    for (auto& bars : p.asset_bars)
      for (std::size_t t = cut + 1; t < bars.size(); ++t)
        for (auto& v : bars[t]) v *= u(rng);
    for (std::size_t t = cut + 1; t < p.market_bars.size(); ++t)
      for (auto& v : p.market_bars[t]) v *= u(rng);
    for (auto& s : p.macro)
      for (std::size_t i = 0; i < s.steps.size(); ++i)
        if (s.steps[i] > static_cast<std::int64_t>(cut) && s.values[i]) *s.values[i] += 10.0 * u(rng);
    for (std::size_t t = cut + 1; t < p.graphs.size(); ++t) {
      for (auto& v : p.graphs[t].features) v *= u(rng);
      for (auto& v : p.graphs[t].adjacency) v *= u(rng);
      for (auto& tok : p.asset_tokens[0][t]) tok = 40;
    }
    const auto pert = build_aligned(p);
    const auto pin = prepare_inputs(pert, fo, &in.norm);
    for (std::size_t t = in.first_step; t <= cut; ++t) {
      for (std::size_t a = 0; a < base.n_assets(); ++a) {
        CHECK(pin.asset[a][t] == in.asset[a][t]);
        CHECK(pert.records[a][t].indicators == base.records[a][t].indicators);
        const auto b0 = make_bundle(in, base, t, Subject{a});
        const auto b1 = make_bundle(pin, pert, t, Subject{a});
        CHECK(b0.price.features == b1.price.features);
        CHECK(b0.text.ids == b1.text.ids);
        CHECK(b0.macro.values == b1.macro.values);
        CHECK(b0.graph.features == b1.graph.features);
        CHECK(b0.graph.adjacency == b1.graph.adjacency);
      }
      CHECK(pin.market[t] == in.market[t]);
    }
  }
}

TEST_CASE("model inputs use the training range for statistics", "[datapipe][features]") {
  SyntheticConfig cfg;
  cfg.n_steps = 200;
  const auto ds = build_aligned(generate_synthetic(cfg));
  const auto in = prepare_inputs(ds, {10, 0.7});
  CHECK(in.first_step == kIndicatorWarmup);
  CHECK(in.train_end == in.first_step + static_cast<std::size_t>(std::floor((200.0 - 33.0) * 0.7)));
  CHECK(prepare_inputs(ds, {40, 0.7}).first_step == 39);
  double mean = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < ds.n_assets(); ++a)
    for (std::size_t t = in.first_step; t < in.train_end; ++t) {
      mean += in.asset[a][t][3];
      ++count;
    }
  CHECK(mean / static_cast<double>(count) == Approx(0.0).margin(1e-9));
  const auto b = make_bundle(in, ds, 100, Subject{});
  CHECK(b.price.features.size() == 10);
  CHECK(b.price.features.back() == in.market[100]);
  CHECK(b.macro.values.size() == kMacroSlots);
  CHECK(b.graph.nodes == cfg.graph_nodes);
  CHECK_THROWS_AS(make_bundle(in, ds, 5, Subject{0}), ContractError);
  CHECK_THROWS_AS(prepare_inputs(ds, {200, 0.7}), ContractError);
}
