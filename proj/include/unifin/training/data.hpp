#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "unifin/datapipe/dataset.hpp"
#include "unifin/errors.hpp"
#include "unifin/modal.hpp"

namespace unifin::training {

enum class Split { train, test, all };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::all: return "all";
  }
  return "?";
}

/// Dataset, normalized inputs and every assembled bundle, ready for batching.
struct TaskData {
  datapipe::AlignedDataset ds;
  datapipe::ModelInputs in;
  std::size_t history = 1;
  std::vector<std::vector<ModalBundle>> assets;  ///< [asset][step]; default bundles before first_step
  std::vector<ModalBundle> market;               ///< [step]

  std::size_t n_assets() const { return assets.size(); }

  /// Steps with a full forecast history; the training range stops one step
  /// early so no label is realized inside the test range.
  std::pair<std::size_t, std::size_t> micro_range(Split s) const {
    const std::size_t lo = in.first_step + history - 1;
    switch (s) {
      case Split::train: return {lo, std::max(lo, in.train_end - 1)};
      case Split::test: return {std::max(lo, in.train_end), in.steps};
      case Split::all: return {lo, in.steps};
    }
    return {lo, lo};
  }

  std::pair<std::size_t, std::size_t> macro_range(Split s) const {
    switch (s) {
      case Split::train: return {in.first_step, in.train_end};
      case Split::test: return {in.train_end, in.steps};
      case Split::all: return {in.first_step, in.steps};
    }
    return {in.first_step, in.first_step};
  }

  double flat_band() const { return ds.flat_band; }
  double next_return(std::size_t asset, std::size_t step) const { return ds.records.at(asset).at(step).next_return; }
};

/// Normalizes the dataset and assembles all bundles. Modalities switched off
/// in `modalities` are masked in every bundle.
inline TaskData build_task_data(datapipe::AlignedDataset ds, const datapipe::FeatureOptions& feat, std::size_t history,
                                const std::array<bool, kModalityCount>& modalities,
                                const datapipe::NormalizationState* fitted = nullptr) {
  if (history == 0) throw ContractError("micro.history must be at least 1");
  TaskData d;
  d.in = datapipe::prepare_inputs(ds, feat, fitted);
  d.ds = std::move(ds);
  d.history = history;
  if (d.in.first_step + history + 1 > d.in.train_end) throw ContractError("training range is too short for the forecast history");
  auto mask = [&](ModalBundle b) {
    for (std::size_t m = 0; m < kModalityCount; ++m) b.present[m] = modalities[m];
    return b;
  };
  d.assets.resize(d.ds.n_assets());
  for (std::size_t a = 0; a < d.ds.n_assets(); ++a) {
    d.assets[a].resize(d.in.steps);
    for (std::size_t t = d.in.first_step; t < d.in.steps; ++t) d.assets[a][t] = mask(datapipe::make_bundle(d.in, d.ds, t, {a}));
  }
  d.market.resize(d.in.steps);
  for (std::size_t t = d.in.first_step; t < d.in.steps; ++t) d.market[t] = mask(datapipe::make_bundle(d.in, d.ds, t, {}));
  return d;
}

/// Deterministic generator for one (seed, stage, epoch) triple.
inline std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t stage, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stage),
                    static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

/// Fisher-Yates with an explicit uniform draw, so the order only depends on the generator.
template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace unifin::training
