#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/errors.hpp"

namespace unifin::metrics {

namespace detail {
inline void check_lengths(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": inputs have different lengths");
}
/// -1, 0 or +1 with |x| < band treated as flat.
inline int banded_sign(double x, double band) {
  if (x >= band && x > 0.0) return 1;
  if (x <= -band && x < 0.0) return -1;
  return 0;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Point forecasts
// ---------------------------------------------------------------------------

/// Fraction of steps whose banded sign of the prediction matches the truth's.
inline double directional_accuracy(const std::vector<double>& truth, const std::vector<double>& pred, double flat_band = 0.0) {
  detail::check_lengths(truth.size(), pred.size(), "directional_accuracy");
  if (truth.empty()) throw EmptyInputError("directional_accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    hit += detail::banded_sign(truth[i], flat_band) == detail::banded_sign(pred[i], flat_band);
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

struct MapeResult {
  double value = 0.0;  ///< percent
  std::size_t used = 0;
  std::size_t excluded = 0;  ///< points with |truth| below the cutoff
};

inline MapeResult mape(const std::vector<double>& truth, const std::vector<double>& pred, double cutoff = 1e-8) {
  detail::check_lengths(truth.size(), pred.size(), "mape");
  MapeResult r;
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (std::abs(truth[i]) < cutoff) {
      ++r.excluded;
      continue;
    }
    total += std::abs(truth[i] - pred[i]) / std::abs(truth[i]);
    ++r.used;
  }
  if (r.used == 0) throw UndefinedMetricError("mape: every point has a near-zero truth");
  r.value = 100.0 * total / static_cast<double>(r.used);
  return r;
}

/// Directional accuracy over the actionable steps |pred| >= threshold; empty
/// when no step is actionable.
inline std::optional<double> hit_ratio(const std::vector<double>& truth, const std::vector<double>& pred, double threshold,
                                       double flat_band = 0.0) {
  detail::check_lengths(truth.size(), pred.size(), "hit_ratio");
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (std::abs(pred[i]) < threshold) continue;
    ++n;
    hit += detail::banded_sign(truth[i], flat_band) == detail::banded_sign(pred[i], flat_band);
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

inline Confusion confusion(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  detail::check_lengths(pred.size(), truth.size(), "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || truth[i] > 1) throw ContractError("confusion: flags must be 0 or 1");
    if (pred[i]) truth[i] ? ++c.tp : ++c.fp;
    else truth[i] ? ++c.fn : ++c.tn;
  }
  return c;
}

struct PrecisionRecallF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Zero where a denominator vanishes.
inline PrecisionRecallF1 precision_recall_f1(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  const Confusion c = confusion(pred, truth);
  PrecisionRecallF1 r;
  if (c.tp + c.fp) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline double accuracy(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  const Confusion c = confusion(pred, truth);
  if (c.total() == 0) throw EmptyInputError("accuracy: empty input");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// P(score+ > score-) + P(tie) / 2 over all positive/negative pairs, from tie-aware
/// ranks. The pair count is accumulated in half-units so the result is exact.
inline double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  detail::check_lengths(scores.size(), labels.size(), "roc_auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, twice_wins = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] > 1) throw ContractError("roc_auc: labels must be 0 or 1");
      labels[order[j]] ? ++p : ++n;
      ++j;
    }
    twice_wins += 2 * p * neg_below + p * n;
    neg_below += n;
    pos += p, neg += n;
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("roc_auc: both classes must be present");
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Area under the precision-recall step curve: sum over distinct score
/// thresholds, from high to low, of (recall gain) x (precision at that threshold).
inline double pr_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  detail::check_lengths(scores.size(), labels.size(), "pr_auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t pos = 0;
  for (auto l : labels) {
    if (l > 1) throw ContractError("pr_auc: labels must be 0 or 1");
    pos += l;
  }
  if (pos == 0) throw UndefinedMetricError("pr_auc: no positive labels");
  double area = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, gained = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] ? ++gained : ++fp;
      ++j;
    }
    tp += gained;
    if (gained)
      area += (static_cast<double>(gained) / static_cast<double>(pos)) * (static_cast<double>(tp) / static_cast<double>(tp + fp));
    i = j;
  }
  return area;
}

struct EarlyWarning {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double roc_auc = 0.0;
};

inline EarlyWarning early_warning_metrics(const std::vector<std::uint8_t>& warnings, const std::vector<std::uint8_t>& crisis,
                                          const std::vector<double>& scores) {
  detail::check_lengths(scores.size(), crisis.size(), "early_warning_metrics");
  const auto prf = precision_recall_f1(warnings, crisis);
  return {accuracy(warnings, crisis), prf.precision, prf.recall, prf.f1, roc_auc(scores, crisis)};
}

// ---------------------------------------------------------------------------
// Seed aggregation
// ---------------------------------------------------------------------------

using MetricMap = std::map<std::string, double>;

struct MetricSummary {
  std::vector<double> values;  ///< one per seed, in seed order
  double mean = 0.0;
  std::optional<double> stdev;  ///< sample standard deviation; empty for one seed
};

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, MetricSummary> metrics;

  const MetricSummary& at(const std::string& name) const {
    auto it = metrics.find(name);
    if (it == metrics.end()) throw ContractError("EvalReport: no metric named " + name);
    return it->second;
  }
};

inline EvalReport aggregate_seeds(const std::vector<MetricMap>& runs, std::vector<std::uint64_t> seeds = {}) {
  if (runs.empty()) throw EmptyInputError("aggregate_seeds: no reports");
  if (seeds.empty())
    for (std::size_t i = 0; i < runs.size(); ++i) seeds.push_back(i);
  if (seeds.size() != runs.size()) throw DimensionError("aggregate_seeds: one seed per report required");
  EvalReport rep;
  rep.seeds = std::move(seeds);
  for (const auto& run : runs) {
    if (run.size() != runs[0].size()) throw ContractError("aggregate_seeds: reports have different metric keys");
    for (const auto& [k, v] : run) {
      if (!runs[0].count(k)) throw ContractError("aggregate_seeds: metric " + k + " is missing from the first report");
      rep.metrics[k].values.push_back(v);
    }
  }
  for (auto& [k, s] : rep.metrics) {
    // Welford's update keeps identical values at exactly zero spread.
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double delta = s.values[i] - mean;
      mean += delta / static_cast<double>(i + 1);
      m2 += delta * (s.values[i] - mean);
    }
    s.mean = mean;
    if (s.values.size() > 1) s.stdev = std::sqrt(m2 / static_cast<double>(s.values.size() - 1));
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["seeds"] = r.seeds;
  j["seed_count"] = r.seeds.size();
  for (const auto& [k, s] : r.metrics) {
    j["metrics"][k] = {{"values", s.values}, {"mean", s.mean}};
    j["metrics"][k]["std"] = s.stdev ? nlohmann::json(*s.stdev) : nlohmann::json(nullptr);
  }
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& [k, v] : j.at("metrics").items()) {
    MetricSummary s;
    s.values = v.at("values").get<std::vector<double>>();
    s.mean = v.at("mean").get<double>();
    if (!v.at("std").is_null()) s.stdev = v.at("std").get<double>();
    r.metrics[k] = std::move(s);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Plain-text tables
// ---------------------------------------------------------------------------

/// How a metric is shown in a table cell.
enum class CellStyle { percent, fixed1, fixed3 };

struct Column {
  std::string header;
  std::string metric;  ///< key in the report
  CellStyle style = CellStyle::fixed3;
};

inline std::string format_cell(double v, CellStyle style) {
  std::ostringstream os;
  os << std::fixed;
  switch (style) {
    case CellStyle::percent: os << std::setprecision(1) << 100.0 * v << '%'; break;
    case CellStyle::fixed1: os << std::setprecision(1) << v; break;
    case CellStyle::fixed3: os << std::setprecision(3) << v; break;
  }
  return os.str();
}

/// One row per report: "mean ± std" cells, or the bare mean for a single seed.
inline std::string render_table(const std::string& title, const std::vector<Column>& cols,
                                const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head = {"Model"};
  for (const auto& c : cols) head.push_back(c.header);
  cells.push_back(head);
  for (const auto& [name, rep] : rows) {
    std::vector<std::string> line = {name};
    for (const auto& c : cols) {
      auto it = rep.metrics.find(c.metric);
      if (it == rep.metrics.end()) {
        line.push_back("n/a");
        continue;
      }
      std::string cell = format_cell(it->second.mean, c.style);
      if (it->second.stdev) cell += " ± " + format_cell(*it->second.stdev, c.style);
      line.push_back(cell);
    }
    cells.push_back(line);
  }
  // Column widths count code points so the ± sign does not skew alignment.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) w[i] = std::max(w[i], width(line[i]));
  std::ostringstream os;
  os << title << '\n';
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      os << (i ? "  " : "") << cells[r][i];
      if (i + 1 < cells[r].size()) os << std::string(w[i] - width(cells[r][i]), ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x;
      os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
    }
  }
  return os.str();
}

inline const std::vector<Column>& micro_columns() {
  static const std::vector<Column> c = {{"Directional Accuracy", "micro.directional_accuracy", CellStyle::percent},
                                        {"MAPE", "micro.mape", CellStyle::fixed1},
                                        {"Hit Ratio", "micro.hit_ratio", CellStyle::percent}};
  return c;
}
inline const std::vector<Column>& credit_columns() {
  static const std::vector<Column> c = {{"Accuracy", "credit.accuracy", CellStyle::percent},
                                        {"F1-Score", "credit.f1", CellStyle::percent},
                                        {"ROC-AUC", "credit.roc_auc", CellStyle::fixed3},
                                        {"PR-AUC", "credit.pr_auc", CellStyle::fixed3}};
  return c;
}
inline const std::vector<Column>& macro_columns() {
  static const std::vector<Column> c = {{"Accuracy", "macro.accuracy", CellStyle::percent},
                                        {"F1-Score", "macro.f1", CellStyle::percent},
                                        {"ROC-AUC", "macro.roc_auc", CellStyle::fixed3}};
  return c;
}

}  // namespace unifin::metrics
