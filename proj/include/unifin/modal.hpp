#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unifin/datapipe/indicators.hpp"
#include "unifin/errors.hpp"

namespace unifin {

enum class Modality : std::size_t { price = 0, text = 1, macro = 2, graph = 3 };
inline constexpr std::size_t kModalityCount = 4;

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::price: return "price";
    case Modality::text: return "text";
    case Modality::macro: return "macro";
    case Modality::graph: return "graph";
  }
  return "?";
}

/// T consecutive steps of one instrument. `features` is the model-ready,
/// normalized T x F matrix; `ohlcv` and `indicators` are the raw rows it was
/// derived from and may be left empty when only features are needed.
struct PriceWindow {
  std::vector<std::string> dates;
  std::vector<datapipe::Bar> ohlcv;
  std::vector<std::vector<double>> indicators;
  std::vector<std::vector<double>> features;

  std::size_t length() const { return features.size(); }

  void validate() const {
    if (features.empty()) throw EmptyInputError("PriceWindow: T = 0");
    for (const auto& b : ohlcv)
      if (!datapipe::bar_consistent(b)) throw ContractError("PriceWindow: inconsistent OHLCV row");
  }
};

struct TokenSequence {
  std::vector<std::size_t> ids;
};

enum class MacroFrequency { monthly, quarterly };

/// Fixed-width macro indicator vector; all slots must be resolved (finite).
struct MacroVector {
  std::vector<double> values;
  MacroFrequency frequency = MacroFrequency::monthly;
};

/// N nodes with F features each and an N x N nonnegative adjacency.
struct FinancialGraph {
  std::size_t nodes = 0;
  std::vector<double> features;
  std::vector<double> adjacency;

  std::size_t feature_width() const { return nodes == 0 ? 0 : features.size() / nodes; }

  void validate() const {
    if (adjacency.size() != nodes * nodes) throw DimensionError("FinancialGraph: adjacency is not N x N");
    if (nodes > 0 && features.size() % nodes != 0) throw DimensionError("FinancialGraph: feature rows do not match node count");
    for (double a : adjacency)
      if (!(a >= 0.0) || !std::isfinite(a)) throw ContractError("FinancialGraph: adjacency must be finite and nonnegative");
  }
};

/// One aligned step's inputs; absent modalities are masked out.
struct ModalBundle {
  PriceWindow price;
  TokenSequence text;
  MacroVector macro;
  FinancialGraph graph;
  std::array<bool, kModalityCount> present{true, true, true, true};

  bool has(Modality m) const { return present[static_cast<std::size_t>(m)]; }
  std::size_t present_count() const {
    std::size_t n = 0;
    for (bool p : present) n += p ? 1 : 0;
    return n;
  }
};

}  // namespace unifin
