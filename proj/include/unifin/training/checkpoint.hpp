#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/datapipe/dataset.hpp"
#include "unifin/errors.hpp"
#include "unifin/model.hpp"
#include "unifin/training/optim.hpp"

namespace unifin::training {

/// Binary parameter file: 8-byte magic, u32 version, u32 entry count, then per
/// entry a u32-prefixed name, u32 rank, u64 dims and raw little-endian doubles.
inline constexpr char kBlobMagic[8] = {'U', 'N', 'I', 'F', 'I', 'N', 'P', 'B'};
inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr int kCheckpointVersion = 1;

struct BlobEntry {
  std::string name;
  numcore::Shape shape;
  std::vector<double> values;
};

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}
template <class T>
T get(std::istream& is) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw IoError("parameter file is truncated");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}
}  // namespace detail

inline void write_blob(std::ostream& os, const std::vector<BlobEntry>& entries) {
  os.write(kBlobMagic, sizeof kBlobMagic);
  detail::put<std::uint32_t>(os, kBlobVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (numcore::shape_size(e.shape) != e.values.size()) throw DimensionError("write_blob: shape does not match values for " + e.name);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put<std::uint64_t>(os, d);
    for (double v : e.values) detail::put<double>(os, v);
  }
  if (!os) throw IoError("failed writing parameter file");
}

inline std::vector<BlobEntry> read_blob(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic)) throw IoError("parameter file is truncated");
  if (std::memcmp(magic, kBlobMagic, sizeof magic) != 0) throw SchemaError("not a parameter file (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kBlobVersion)
    throw SchemaError("parameter file version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kBlobVersion) + ")");
  const auto n = detail::get<std::uint32_t>(is);
  std::vector<BlobEntry> out(n);
  for (auto& e : out) {
    e.name.resize(detail::get<std::uint32_t>(is));
    if (!is.read(e.name.data(), static_cast<std::streamsize>(e.name.size()))) throw IoError("parameter file is truncated");
    e.shape.resize(detail::get<std::uint32_t>(is));
    for (auto& d : e.shape) d = static_cast<std::size_t>(detail::get<std::uint64_t>(is));
    e.values.resize(numcore::shape_size(e.shape));
    for (auto& v : e.values) v = detail::get<double>(is);
  }
  return out;
}

/// Parameters ("p/"), and when given the optimizer moments ("m/", "v/") and step counts ("t/").
inline std::vector<BlobEntry> snapshot(const Model& model, const AdamW* opt = nullptr) {
  std::vector<BlobEntry> out;
  const auto& names = model.params.names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& p = model.params.tensors()[i];
    out.push_back({"p/" + names[i], p.shape(), p.to_vector()});
  }
  if (opt)
    for (const auto& [name, s] : opt->state()) {
      out.push_back({"m/" + name, {s.m.size()}, s.m});
      out.push_back({"v/" + name, {s.v.size()}, s.v});
      out.push_back({"t/" + name, {1}, {static_cast<double>(s.t)}});
    }
  return out;
}

/// Inverse of snapshot(); every model parameter must be present with its shape.
inline void restore(Model& model, AdamW* opt, const std::vector<BlobEntry>& entries) {
  std::size_t found = 0;
  if (opt) opt->state().clear();
  for (const auto& e : entries) {
    const std::string kind = e.name.substr(0, 2), name = e.name.substr(2);
    if (kind == "p/") {
      if (!model.params.contains(name)) throw SchemaError("checkpoint has unknown parameter " + name);
      auto& p = model.params.get(name);
      if (p.shape() != e.shape) throw SchemaError("checkpoint shape mismatch for " + name);
      auto v = p.mutable_values();
      std::copy(e.values.begin(), e.values.end(), v.begin());
      ++found;
    } else if (opt && kind == "m/") {
      opt->state()[name].m = e.values;
    } else if (opt && kind == "v/") {
      opt->state()[name].v = e.values;
    } else if (opt && kind == "t/") {
      opt->state()[name].t = static_cast<std::uint64_t>(e.values.at(0));
    }
  }
  if (found != model.params.size()) throw SchemaError("checkpoint is missing model parameters");
}

inline void save_blob_file(const std::filesystem::path& path, const std::vector<BlobEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_blob(os, entries);
}

inline std::vector<BlobEntry> load_blob_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return read_blob(is);
}

// ---------------------------------------------------------------------------
// Normalization state as JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const datapipe::Normalizer& n) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : n.stats()) j.push_back({s.mean, s.std, s.constant});
  return j;
}

inline datapipe::Normalizer normalizer_from_json(const nlohmann::json& j) {
  std::vector<datapipe::ColumnStats> st;
  for (const auto& c : j) st.push_back({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<bool>()});
  return datapipe::Normalizer(std::move(st));
}

inline nlohmann::json to_json(const datapipe::NormalizationState& s) {
  return {{"price", to_json(s.price)}, {"market", to_json(s.market)}, {"macro", to_json(s.macro)}, {"node", to_json(s.node)}};
}

inline datapipe::NormalizationState normalization_from_json(const nlohmann::json& j) {
  return {normalizer_from_json(j.at("price")), normalizer_from_json(j.at("market")), normalizer_from_json(j.at("macro")),
          normalizer_from_json(j.at("node"))};
}

}  // namespace unifin::training
