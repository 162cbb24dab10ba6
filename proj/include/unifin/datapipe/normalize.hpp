#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "unifin/errors.hpp"

namespace unifin::datapipe {

struct ColumnStats {
  double mean = 0.0;
  double std = 1.0;
  bool constant = false;
};

/// Per-column z-scoring whose statistics come from a fit range only.
class Normalizer {
 public:
  Normalizer() = default;
  explicit Normalizer(std::vector<ColumnStats> stats) : stats_(std::move(stats)) {}

  /// Fits on rows [begin, end) of a row-major table. Population std.
  static Normalizer fit(const std::vector<std::vector<double>>& rows, std::size_t begin, std::size_t end) {
    if (begin >= end || end > rows.size()) throw EmptyInputError("Normalizer::fit: empty fit range");
    const std::size_t cols = rows[begin].size();
    std::vector<ColumnStats> st(cols);
    const double n = static_cast<double>(end - begin);
    for (std::size_t c = 0; c < cols; ++c) {
      double m = 0.0;
      for (std::size_t r = begin; r < end; ++r) m += rows[r].at(c);
      m /= n;
      double v = 0.0;
      for (std::size_t r = begin; r < end; ++r) v += (rows[r][c] - m) * (rows[r][c] - m);
      v /= n;
      st[c].mean = m;
      st[c].std = std::sqrt(v);
      st[c].constant = !(st[c].std > 1e-12 * std::max(1.0, std::abs(m)));
      if (st[c].constant) st[c].std = 1.0;
    }
    return Normalizer(std::move(st));
  }

  std::vector<double> apply(const std::vector<double>& row) const {
    if (row.size() != stats_.size()) throw DimensionError("Normalizer::apply: column count mismatch");
    std::vector<double> out(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = (row[c] - stats_[c].mean) / stats_[c].std;
    return out;
  }

  std::vector<std::uint8_t> constant_columns() const {
    std::vector<std::uint8_t> out;
    for (const auto& s : stats_) out.push_back(s.constant ? 1 : 0);
    return out;
  }

  const std::vector<ColumnStats>& stats() const { return stats_; }
  std::size_t width() const { return stats_.size(); }

 private:
  std::vector<ColumnStats> stats_;
};

}  // namespace unifin::datapipe
