#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "unifin/datapipe/dataset.hpp"
#include "unifin/datapipe/synthetic.hpp"
#include "unifin/errors.hpp"
#include "unifin/model.hpp"
#include "unifin/rl.hpp"
#include "unifin/training/checkpoint.hpp"
#include "unifin/training/config.hpp"
#include "unifin/training/data.hpp"
#include "unifin/training/trainer.hpp"

namespace unifin::training {

inline constexpr const char* kCheckpointFormat = "unifin-checkpoint";

inline datapipe::AlignedDataset generate_dataset(const RunConfig& cfg) {
  return datapipe::build_aligned(datapipe::generate_synthetic(cfg.synthetic), cfg.pipeline);
}

inline TaskData make_task_data(const RunConfig& cfg, datapipe::AlignedDataset ds, const datapipe::NormalizationState* fitted = nullptr) {
  return build_task_data(std::move(ds), cfg.features, cfg.model.micro.history, cfg.model.modalities, fitted);
}

/// Writes `text` to `path` through a temporary file so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp);
    os << text;
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

inline constexpr const char* kDatasetFormat = "unifin-dataset";

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Hash of the resolved configuration; the output directory does not take part.
inline std::uint64_t config_hash(RunConfig cfg) {
  cfg.output_dir.clear();
  return fnv1a(echo_config(cfg));
}

/// Writes assets.jsonl, dates.jsonl and manifest.json into `dir`; returns the manifest.
inline nlohmann::json write_dataset_dir(const std::filesystem::path& dir, const RunConfig& cfg, const datapipe::AlignedDataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream assets, dates;
  datapipe::write_asset_records(assets, ds);
  datapipe::write_date_records(dates, ds);
  write_file_atomic(dir / "assets.jsonl", assets.str());
  write_file_atomic(dir / "dates.jsonl", dates.str());
  const nlohmann::json m = {{"format", kDatasetFormat},
                            {"schema_version", ds.schema_version},
                            {"seed", ds.seed},
                            {"flat_band", ds.flat_band},
                            {"config_hash", hex64(config_hash(cfg))},
                            {"records", {{"assets", ds.steps() * ds.n_assets()}, {"dates", ds.steps()}}},
                            {"files", {{"assets.jsonl", hex64(fnv1a(assets.str()))}, {"dates.jsonl", hex64(fnv1a(dates.str()))}}}};
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

/// Reads a dataset directory, checking the manifest's version, hashes and counts.
inline datapipe::AlignedDataset read_dataset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) throw IoError("no dataset at " + dir.string() + " (manifest.json missing)");
  const auto assets = read_file(dir / "assets.jsonl");
  const auto dates = read_file(dir / "dates.jsonl");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (m.at("format").get<std::string>() != kDatasetFormat) throw SchemaError("not a dataset manifest: " + dir.string());
    datapipe::detail::check_version(m);
    if (m.at("files").at("assets.jsonl").get<std::string>() != hex64(fnv1a(assets)) ||
        m.at("files").at("dates.jsonl").get<std::string>() != hex64(fnv1a(dates)))
      throw SchemaError("dataset files in " + dir.string() + " do not match their manifest hashes");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed dataset manifest: ") + e.what());
  }
  std::istringstream ai(assets), di(dates);
  auto ds = datapipe::read_dataset(ai, di, m.at("seed").get<std::uint64_t>(), m.at("flat_band").get<double>());
  if (ds.steps() != m.at("records").at("dates").get<std::size_t>() ||
      ds.steps() * ds.n_assets() != m.at("records").at("assets").get<std::size_t>())
    throw SchemaError("dataset record counts do not match the manifest");
  return ds;
}

inline nlohmann::json config_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_keys()) j[k.name] = k.get(cfg);
  return j;
}

/// The configuration as stored in a checkpoint: everything except the output
/// location, so a run directory can be moved or copied.
inline nlohmann::json checkpoint_config_json(const RunConfig& cfg) {
  auto j = config_json(cfg);
  j.erase("output.dir");
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (const auto& [k, v] : j.items()) set_value(cfg, k, v.get<std::string>());
  return cfg;
}

/// Model parameters, optimizer state, curriculum position and the
/// normalization fitted on the training range.
struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  Progress progress;
  std::vector<EpochLog> history;
  datapipe::NormalizationState normalization;
  std::vector<BlobEntry> blob;
};

inline void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, std::uint64_t seed, const Model& model,
                            const Trainer* trainer, const TaskData& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream blob;
  write_blob(blob, snapshot(model, trainer ? &trainer->optimizer() : nullptr));
  write_file_atomic(dir / "params.bin", blob.str());
  nlohmann::json hist = nlohmann::json::array();
  Progress p{kStageCount, 0};
  if (trainer) {
    for (const auto& e : trainer->history()) hist.push_back(to_json(e));
    p = trainer->progress();
  }
  const nlohmann::json j = {{"format", kCheckpointFormat},
                            {"version", kCheckpointVersion},
                            {"dataset_schema_version", datapipe::kDatasetSchemaVersion},
                            {"seed", seed},
                            {"config", checkpoint_config_json(cfg)},
                            {"progress", {{"stage", p.stage}, {"epoch", p.epoch}}},
                            {"history", hist},
                            {"normalization", to_json(data.in.norm)}};
  write_file_atomic(dir / "checkpoint.json", j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto text = read_file(dir / "checkpoint.json");
  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw SchemaError("not a checkpoint: " + dir.string());
    const int v = j.at("version").get<int>();
    if (v != kCheckpointVersion)
      throw SchemaError("checkpoint version " + std::to_string(v) + " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    if (j.at("dataset_schema_version").get<int>() != datapipe::kDatasetSchemaVersion)
      throw SchemaError("checkpoint was written for another dataset schema version");
    c.config = config_from_json(j.at("config"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.progress = {j.at("progress").at("stage").get<std::size_t>(), j.at("progress").at("epoch").get<std::size_t>()};
    for (const auto& e : j.at("history")) c.history.push_back(epoch_log_from_json(e));
    c.normalization = normalization_from_json(j.at("normalization"));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint: ") + e.what());
  }
  c.blob = load_blob_file(dir / "params.bin");
  return c;
}

/// Rebuilds the model stored in a checkpoint.
inline Model model_from_checkpoint(const Checkpoint& c) {
  Model m = Model::create(c.config.model, c.seed);
  restore(m, nullptr, c.blob);
  return m;
}

/// Trains one seed; with `dir` set, checkpoints after every epoch and resumes
/// from an existing checkpoint in `dir` when `resume` is true.
inline Model train_model(const RunConfig& cfg, const TaskData& data, std::uint64_t seed, std::vector<EpochLog>* history = nullptr,
                         const std::optional<std::filesystem::path>& dir = std::nullopt, bool resume = false,
                         std::optional<std::size_t> stop_after = std::nullopt) {
  Model model = Model::create(cfg.model, seed);
  Trainer trainer(model, data, cfg.trainer, seed);
  if (resume && dir && std::filesystem::exists(*dir / "checkpoint.json")) {
    auto ck = load_checkpoint(*dir);
    if (checkpoint_config_json(ck.config) != checkpoint_config_json(cfg) || ck.seed != seed)
      throw ConfigError("checkpoint in " + dir->string() + " was written with a different configuration or seed");
    restore(model, &trainer.optimizer(), ck.blob);
    trainer.resume(ck.progress, std::move(ck.history));
  }
  std::size_t ran = 0;
  struct Stop {};
  try {
    trainer.run([&](const Trainer& t, const EpochLog&) {
      if (dir) save_checkpoint(*dir, cfg, seed, model, &t, data);
      if (stop_after && ++ran >= *stop_after) throw Stop{};
    });
  } catch (const Stop&) {
  }
  if (dir && ran == 0) save_checkpoint(*dir, cfg, seed, model, &trainer, data);
  if (history) *history = trainer.history();
  return model;
}

// ---------------------------------------------------------------------------
// Risk-penalty sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  double beta = 0.0;
  rl::PolicyStats stats;  ///< averaged over the per-asset training paths
  double final_objective = 0.0;  ///< last epoch's mean negated discounted return
};

/// Reruns the RL stage once per beta from the checkpoint's representations
/// with the policy reset to its seeded initial weights. With `trace_dir` set,
/// writes one sampled episode per asset to traces-beta-<beta>.jsonl.
inline std::vector<SweepPoint> beta_sweep(const Checkpoint& ck, const TaskData& data, const std::vector<double>& betas,
                                          const std::optional<std::filesystem::path>& trace_dir = std::nullopt) {
  if (ck.progress.stage < static_cast<std::size_t>(Stage::rl))
    throw ConfigError("checkpoint has not finished the joint stage; train it further before a beta sweep");
  const auto rl_idx = static_cast<std::size_t>(Stage::rl);
  if (ck.config.trainer.train.stage_epochs()[rl_idx] == 0)
    throw ConfigError("train.rl_mode=joint leaves no RL stage epochs to sweep; use train.rl_mode=staged");
  const Model fresh = Model::create(ck.config.model, ck.seed);
  std::vector<SweepPoint> out;
  for (double beta : betas) {
    Model model = model_from_checkpoint(ck);
    const auto init = fresh.params.get("rl.policy.w").values();
    auto w = model.params.get("rl.policy.w").mutable_values();
    std::copy(init.begin(), init.end(), w.begin());
    TrainerConfig tc = ck.config.trainer;
    tc.rl.beta = beta;
    Trainer trainer(model, data, tc, ck.seed);
    trainer.resume({rl_idx, 0}, {});
    const auto logs = trainer.run_stage(Stage::rl);
    auto paths = trainer.build_paths();
    SweepPoint pt;
    pt.beta = beta;
    pt.final_objective = logs.empty() ? 0.0 : logs.back().rl.value_or(0.0);
    const double n = static_cast<double>(paths.envs.size());
    for (const auto& env : paths.envs) {
      const auto s = rl::evaluate_policy(env, model.policy);
      pt.stats.mean_abs_position += s.mean_abs_position / n;
      pt.stats.stress_abs_position += s.stress_abs_position / n;
      pt.stats.calm_abs_position += s.calm_abs_position / n;
      pt.stats.stress_steps += s.stress_steps;
      pt.stats.greedy_reward += s.greedy_reward / n;
      pt.stats.greedy_profit += s.greedy_profit / n;
    }
    if (trace_dir) {
      std::ostringstream os;
      std::mt19937_64 rng(ck.seed);
      for (std::size_t a = 0; a < paths.envs.size(); ++a)
        rl::write_trace(os, rl::rollout(paths.envs[a], model.policy, tc.rl.episode_length, rng), tc.rl, a);
      write_file_atomic(*trace_dir / ("traces-beta-" + heads::format_number(beta) + ".jsonl"), os.str());
    }
    out.push_back(pt);
  }
  return out;
}

}  // namespace unifin::training
