#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "unifin/datapipe/dataset.hpp"
#include "unifin/datapipe/synthetic.hpp"
#include "unifin/errors.hpp"
#include "unifin/model.hpp"
#include "unifin/training/trainer.hpp"

namespace unifin::training {

/// Malformed, unknown or out-of-range configuration.
class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Everything a run needs: data generation, pipeline, model, training and evaluation.
struct RunConfig {
  datapipe::SyntheticConfig synthetic;
  datapipe::PipelineOptions pipeline;
  datapipe::FeatureOptions features;
  ModelConfig model;
  TrainerConfig trainer;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> beta_sweep = {0.0, 0.5, 2.0};
  double hit_threshold = 0.0005;
  std::string output_dir = "out";

  void validate() const {
    try {
      synthetic.validate();
      model.validate();
      trainer.validate();
      if (features.window < 2) throw ContractError("features.window must be at least 2");
      if (!(features.train_fraction > 0.0 && features.train_fraction < 1.0))
        throw ContractError("features.train_fraction must lie in (0, 1)");
      if (seeds.empty()) throw ContractError("train.seeds must be nonempty");
      for (double b : beta_sweep)
        if (!(b >= 0.0)) throw ContractError("rl.beta_sweep entries must be >= 0");
      if (!(hit_threshold >= 0.0)) throw ContractError("eval.hit_threshold must be >= 0");
      if (model.encoder.vocab_size < datapipe::kVocabSize) throw ContractError("model.vocab_size is smaller than the token vocabulary");
      if (synthetic.tokens_per_step > model.encoder.max_tokens) throw ContractError("model.max_tokens is below synthetic.tokens_per_step");
      if (model.encoder.graph_features != datapipe::kNodeFeatures) throw ContractError("model.graph_features must match the node feature width");
    } catch (const ConfigError&) {
      throw;
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <class T>
ConfigKey size_key(std::string name, T RunConfig::*group, std::size_t T::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { (c.*group).*field = static_cast<std::size_t>(to_uint(name, v)); },
          [=](const RunConfig& c) { return std::to_string((c.*group).*field); }};
}
template <class T>
ConfigKey real_key(std::string name, T RunConfig::*group, double T::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { (c.*group).*field = to_double(name, v); },
          [=](const RunConfig& c) { return fmt((c.*group).*field); }};
}
template <class F, class G>
ConfigKey key(std::string name, F set, G get) {
  return {name, [=](RunConfig& c, const std::string& v) { set(c, name, v); }, get};
}

inline Modality parse_modality(const std::string& s) {
  for (std::size_t m = 0; m < kModalityCount; ++m)
    if (s == to_string(static_cast<Modality>(m))) return static_cast<Modality>(m);
  throw ConfigError("unknown modality '" + s + "'");
}

inline std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

}  // namespace detail

/// Every recognized key in echo order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  using datapipe::SyntheticConfig;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    // Synthetic data.
    k.push_back(size_key("synthetic.n_assets", &RunConfig::synthetic, &SyntheticConfig::n_assets));
    k.push_back(size_key("synthetic.n_steps", &RunConfig::synthetic, &SyntheticConfig::n_steps));
    k.push_back(real_key("synthetic.stress_persistence", &RunConfig::synthetic, &SyntheticConfig::stress_persistence));
    k.push_back(real_key("synthetic.crisis_rate", &RunConfig::synthetic, &SyntheticConfig::crisis_rate));
    k.push_back(real_key("synthetic.text_signal", &RunConfig::synthetic, &SyntheticConfig::text_signal));
    k.push_back(real_key("synthetic.policy_signal", &RunConfig::synthetic, &SyntheticConfig::policy_signal));
    k.push_back(size_key("synthetic.graph_nodes", &RunConfig::synthetic, &SyntheticConfig::graph_nodes));
    k.push_back(real_key("synthetic.edge_density", &RunConfig::synthetic, &SyntheticConfig::edge_density));
    k.push_back(size_key("synthetic.tokens_per_step", &RunConfig::synthetic, &SyntheticConfig::tokens_per_step));
    k.push_back(real_key("synthetic.gap_rate", &RunConfig::synthetic, &SyntheticConfig::gap_rate));
    k.push_back(real_key("synthetic.flat_band", &RunConfig::synthetic, &SyntheticConfig::flat_band));
    k.push_back(key(
        "synthetic.seed", [](RunConfig& c, const std::string& n, const std::string& v) { c.synthetic.seed = to_uint(n, v); },
        [](const RunConfig& c) { return std::to_string(c.synthetic.seed); }));
    // Pipeline.
    k.push_back(key(
        "pipeline.impute", [](RunConfig& c, const std::string& n, const std::string& v) { c.pipeline.impute = to_bool(n, v); },
        [](const RunConfig& c) { return std::string(c.pipeline.impute ? "true" : "false"); }));
    k.push_back(size_key("pipeline.kalman_window", &RunConfig::pipeline, &datapipe::PipelineOptions::kalman_window));
    k.push_back(size_key("features.window", &RunConfig::features, &datapipe::FeatureOptions::window));
    k.push_back(real_key("features.train_fraction", &RunConfig::features, &datapipe::FeatureOptions::train_fraction));
    // Model.
    auto enc = [](std::string name, std::size_t encoders::EncoderConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.model.encoder.*f = static_cast<std::size_t>(to_uint(n, v)); },
          [f](const RunConfig& c) { return std::to_string(c.model.encoder.*f); });
    };
    k.push_back(enc("model.d_model", &encoders::EncoderConfig::d_model));
    k.push_back(enc("model.heads", &encoders::EncoderConfig::heads));
    k.push_back(enc("model.layers", &encoders::EncoderConfig::layers));
    k.push_back(enc("model.ffn_mult", &encoders::EncoderConfig::ffn_mult));
    k.push_back(enc("model.vocab_size", &encoders::EncoderConfig::vocab_size));
    k.push_back(enc("model.max_tokens", &encoders::EncoderConfig::max_tokens));
    k.push_back(enc("model.macro_group_width", &encoders::EncoderConfig::macro_group_width));
    k.push_back(enc("model.graph_features", &encoders::EncoderConfig::graph_features));
    k.push_back(enc("model.graph_heads", &encoders::EncoderConfig::graph_heads));
    k.push_back(enc("model.graph_layers", &encoders::EncoderConfig::graph_layers));
    k.push_back(key(
        "model.modalities",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          std::array<bool, kModalityCount> on{};
          for (const auto& item : split_list(v)) {
            bool found = false;
            for (std::size_t m = 0; m < kModalityCount; ++m)
              if (item == to_string(static_cast<Modality>(m))) on[m] = found = true;
            if (!found) throw ConfigError(n + ": unknown modality '" + item + "'");
          }
          c.model.modalities = on;
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (std::size_t m = 0; m < kModalityCount; ++m)
            if (c.model.modalities[m]) parts.push_back(to_string(static_cast<Modality>(m)));
          return join(parts);
        }));
    auto fus = [](std::string name, std::size_t fusion::FusionConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.model.fusion.*f = static_cast<std::size_t>(to_uint(n, v)); },
          [f](const RunConfig& c) { return std::to_string(c.model.fusion.*f); });
    };
    k.push_back(fus("fusion.heads", &fusion::FusionConfig::heads));
    k.push_back(fus("fusion.layers", &fusion::FusionConfig::layers));
    k.push_back(fus("fusion.ffn_mult", &fusion::FusionConfig::ffn_mult));
    auto mic = [](std::string name, std::size_t heads::MicroHeadConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.model.micro.*f = static_cast<std::size_t>(to_uint(n, v)); },
          [f](const RunConfig& c) { return std::to_string(c.model.micro.*f); });
    };
    k.push_back(mic("micro.mixture", &heads::MicroHeadConfig::mixture));
    k.push_back(mic("micro.layers", &heads::MicroHeadConfig::layers));
    k.push_back(mic("micro.heads", &heads::MicroHeadConfig::heads));
    k.push_back(mic("micro.ffn_mult", &heads::MicroHeadConfig::ffn_mult));
    k.push_back(mic("micro.history", &heads::MicroHeadConfig::history));
    k.push_back(key(
        "micro.return_scale", [](RunConfig& c, const std::string& n, const std::string& v) { c.model.micro.return_scale = to_double(n, v); },
        [](const RunConfig& c) { return fmt(c.model.micro.return_scale); }));
    k.push_back(key(
        "macro.layers",
        [](RunConfig& c, const std::string& n, const std::string& v) { c.model.macro.layers = static_cast<std::size_t>(to_uint(n, v)); },
        [](const RunConfig& c) { return std::to_string(c.model.macro.layers); }));
    k.push_back(key(
        "macro.heads", [](RunConfig& c, const std::string& n, const std::string& v) { c.model.macro.heads = static_cast<std::size_t>(to_uint(n, v)); },
        [](const RunConfig& c) { return std::to_string(c.model.macro.heads); }));
    k.push_back(key(
        "macro.warning_threshold",
        [](RunConfig& c, const std::string& n, const std::string& v) { c.model.macro.warning_threshold = to_double(n, v); },
        [](const RunConfig& c) { return fmt(c.model.macro.warning_threshold); }));
    // Losses.
    auto lam = [](std::string name, double LossWeights::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.weights.*f = to_double(n, v); },
          [f](const RunConfig& c) { return fmt(c.trainer.weights.*f); });
    };
    k.push_back(lam("loss.lambda_forecast", &LossWeights::forecast));
    k.push_back(lam("loss.lambda_risk", &LossWeights::risk));
    k.push_back(lam("loss.lambda_align", &LossWeights::align));
    k.push_back(lam("loss.lambda_rl", &LossWeights::rl));
    k.push_back(key(
        "loss.quantiles",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.trainer.forecast.quantile_levels.clear();
          for (const auto& item : split_list(v)) c.trainer.forecast.quantile_levels.push_back(to_double(n, item));
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (double q : c.trainer.forecast.quantile_levels) parts.push_back(fmt(q));
          return join(parts);
        }));
    k.push_back(key(
        "loss.mse_weight", [](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.forecast.mse_weight = to_double(n, v); },
        [](const RunConfig& c) { return fmt(c.trainer.forecast.mse_weight); }));
    auto trr = [](std::string name, double TrainingConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.train.*f = to_double(n, v); },
          [f](const RunConfig& c) { return fmt(c.trainer.train.*f); });
    };
    auto trs = [](std::string name, std::size_t TrainingConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.train.*f = static_cast<std::size_t>(to_uint(n, v)); },
          [f](const RunConfig& c) { return std::to_string(c.trainer.train.*f); });
    };
    k.push_back(trr("loss.direction_weight", &TrainingConfig::direction_weight));
    k.push_back(trr("loss.nll_weight", &TrainingConfig::nll_weight));
    k.push_back(trr("loss.node_weight", &TrainingConfig::node_weight));
    k.push_back(key(
        "align.temperature", [](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.align.temperature = to_double(n, v); },
        [](const RunConfig& c) { return fmt(c.trainer.align.temperature); }));
    k.push_back(key(
        "align.pairs",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.trainer.align.pairs.clear();
          for (const auto& item : split_list(v)) {
            const auto dash = item.find('-');
            if (dash == std::string::npos) throw ConfigError(n + ": pair '" + item + "' is not of the form a-b");
            try {
              c.trainer.align.pairs.emplace_back(parse_modality(item.substr(0, dash)), parse_modality(item.substr(dash + 1)));
            } catch (const ContractError& e) {
              throw ConfigError(n + ": " + e.what());
            }
          }
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (const auto& [a, b] : c.trainer.align.pairs) parts.push_back(std::string(to_string(a)) + "-" + to_string(b));
          return join(parts);
        }));
    // Training.
    k.push_back(trs("train.epochs", &TrainingConfig::epochs));
    k.push_back(key(
        "train.stage_split",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          const auto parts = split_list(v);
          if (parts.size() != kStageCount) throw ConfigError(n + ": expected " + std::to_string(kStageCount) + " comma-separated shares");
          for (std::size_t i = 0; i < kStageCount; ++i) c.trainer.train.stage_split[i] = to_double(n, parts[i]);
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (double s : c.trainer.train.stage_split) parts.push_back(fmt(s));
          return join(parts);
        }));
    k.push_back(trs("train.micro_batch", &TrainingConfig::micro_batch));
    k.push_back(trs("train.macro_batch", &TrainingConfig::macro_batch));
    k.push_back(trr("train.peak_lr", &TrainingConfig::peak_lr));
    k.push_back(trs("train.warmup_steps", &TrainingConfig::warmup_steps));
    k.push_back(trr("train.weight_decay", &TrainingConfig::weight_decay));
    k.push_back(trr("train.grad_clip", &TrainingConfig::grad_clip));
    k.push_back(key(
        "train.rl_mode",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          if (v != "staged" && v != "joint") throw ConfigError(n + ": expected staged or joint");
          c.trainer.train.rl_joint = v == "joint";
        },
        [](const RunConfig& c) { return std::string(c.trainer.train.rl_joint ? "joint" : "staged"); }));
    k.push_back(trs("train.rl_updates_per_epoch", &TrainingConfig::rl_updates_per_epoch));
    k.push_back(trr("train.rl_peak_lr", &TrainingConfig::rl_peak_lr));
    k.push_back(trs("train.joint_rollouts", &TrainingConfig::joint_rollouts));
    k.push_back(key(
        "train.seeds",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.seeds.clear();
          for (const auto& item : split_list(v)) c.seeds.push_back(to_uint(n, item));
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (auto s : c.seeds) parts.push_back(std::to_string(s));
          return join(parts);
        }));
    // Reinforcement learning.
    auto rlr = [](std::string name, double rl::RLConfig::*f) {
      return key(
          name, [f](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.rl.*f = to_double(n, v); },
          [f](const RunConfig& c) { return fmt(c.trainer.rl.*f); });
    };
    k.push_back(rlr("rl.alpha", &rl::RLConfig::alpha));
    k.push_back(rlr("rl.beta", &rl::RLConfig::beta));
    k.push_back(rlr("rl.gamma", &rl::RLConfig::gamma));
    k.push_back(rlr("rl.risk_unit", &rl::RLConfig::risk_unit));
    k.push_back(key(
        "rl.episode_length",
        [](RunConfig& c, const std::string& n, const std::string& v) { c.trainer.rl.episode_length = static_cast<std::size_t>(to_uint(n, v)); },
        [](const RunConfig& c) { return std::to_string(c.trainer.rl.episode_length); }));
    k.push_back(key(
        "rl.episodes_per_update",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.trainer.rl.episodes_per_update = static_cast<std::size_t>(to_uint(n, v));
        },
        [](const RunConfig& c) { return std::to_string(c.trainer.rl.episodes_per_update); }));
    k.push_back(key(
        "rl.actions",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.trainer.rl.actions.clear();
          for (const auto& item : split_list(v)) c.trainer.rl.actions.push_back(to_double(n, item));
          c.model.actions = c.trainer.rl.actions.size();
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (double a : c.trainer.rl.actions) parts.push_back(fmt(a));
          return join(parts);
        }));
    k.push_back(key(
        "rl.risk_source",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          if (v == "stress")
            c.trainer.rl.risk_source = rl::RiskSource::stress;
          else if (v == "macro_head")
            c.trainer.rl.risk_source = rl::RiskSource::macro_head;
          else
            throw ConfigError(n + ": expected stress or macro_head");
        },
        [](const RunConfig& c) { return std::string(rl::to_string(c.trainer.rl.risk_source)); }));
    k.push_back(key(
        "rl.beta_sweep",
        [](RunConfig& c, const std::string& n, const std::string& v) {
          c.beta_sweep.clear();
          for (const auto& item : split_list(v)) c.beta_sweep.push_back(to_double(n, item));
        },
        [](const RunConfig& c) {
          std::vector<std::string> parts;
          for (double b : c.beta_sweep) parts.push_back(fmt(b));
          return join(parts);
        }));
    // Evaluation and output.
    k.push_back(key(
        "eval.hit_threshold", [](RunConfig& c, const std::string& n, const std::string& v) { c.hit_threshold = to_double(n, v); },
        [](const RunConfig& c) { return fmt(c.hit_threshold); }));
    k.push_back(key(
        "output.dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; },
        [](const RunConfig& c) { return c.output_dir; }));
    return k;
  }();
  return keys;
}

/// Applies one `key = value` assignment.
inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) return k.set(c, detail::trim(value));
  throw ConfigError("unknown configuration key '" + key + "'");
}

/// Applies a `key=value` override as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_value(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Reads `key = value` lines over the defaults; '#' starts a comment.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_value(base, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

/// The fully resolved configuration, one key per line; parses back to the same values.
inline std::string echo_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace unifin::training
