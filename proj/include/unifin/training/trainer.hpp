#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/errors.hpp"
#include "unifin/model.hpp"
#include "unifin/rl.hpp"
#include "unifin/training/data.hpp"
#include "unifin/training/losses.hpp"
#include "unifin/training/optim.hpp"

namespace unifin::training {

enum class Stage { unimodal = 0, align = 1, joint = 2, rl = 3 };
inline constexpr std::size_t kStageCount = 4;

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::unimodal: return "unimodal";
    case Stage::align: return "align";
    case Stage::joint: return "joint";
    case Stage::rl: return "rl";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kStageCount; ++i)
    if (s == to_string(static_cast<Stage>(i))) return static_cast<Stage>(i);
  throw ContractError("unknown training stage '" + s + "'");
}

/// A stage was requested out of order.
class ScheduleError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A loss or gradient became non-finite during training.
class DivergenceError : public NumericError {
 public:
  DivergenceError(Stage stage, std::size_t epoch, std::size_t step, const std::string& what)
      : NumericError(std::string("training diverged in stage ") + to_string(stage) + ", epoch " + std::to_string(epoch) + ", step " +
                     std::to_string(step) + ": " + what),
        stage_(stage),
        epoch_(epoch),
        step_(step) {}
  Stage stage() const { return stage_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  Stage stage_;
  std::size_t epoch_, step_;
};

struct TrainingConfig {
  std::size_t epochs = 80;
  /// Share of the epochs given to each stage, in stage order.
  std::array<double, kStageCount> stage_split = {0.25, 0.125, 0.5, 0.125};
  std::size_t micro_batch = 32;
  std::size_t macro_batch = 16;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  /// Extra terms inside the forecast loss: direction cross-entropy and mixture NLL.
  double direction_weight = 1.0;
  double nll_weight = 0.0;
  /// Weight of the per-node distress loss inside the risk loss.
  double node_weight = 1.0;
  /// Train the policy with the backbone during the joint stage instead of in its own stage.
  bool rl_joint = false;
  std::size_t rl_updates_per_epoch = 20;
  double rl_peak_lr = 0.02;
  /// Sampled trajectories per micro batch when the policy trains jointly.
  std::size_t joint_rollouts = 4;

  void validate() const {
    double total = 0.0;
    for (double s : stage_split) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw ContractError("train.stage_split entries must be finite and >= 0");
      total += s;
    }
    if (!(total > 0.0)) throw ContractError("train.stage_split must have a positive entry");
    if (micro_batch == 0 || macro_batch == 0) throw ContractError("train.micro_batch and train.macro_batch must be >= 1");
    if (!(peak_lr > 0.0) || !(rl_peak_lr > 0.0)) throw ContractError("train.peak_lr and train.rl_peak_lr must be positive");
    if (!(weight_decay >= 0.0)) throw ContractError("train.weight_decay must be >= 0");
    if (!(grad_clip >= 0.0)) throw ContractError("train.grad_clip must be >= 0");
    if (!(direction_weight >= 0.0) || !(nll_weight >= 0.0) || !(node_weight >= 0.0))
      throw ContractError("loss.direction_weight, loss.nll_weight and loss.node_weight must be >= 0");
    if (rl_updates_per_epoch == 0) throw ContractError("train.rl_updates_per_epoch must be >= 1");
    if (joint_rollouts < 2) throw ContractError("train.joint_rollouts must be >= 2");
  }

  /// Epochs per stage: the split scaled to `epochs` with largest-remainder rounding.
  std::array<std::size_t, kStageCount> stage_epochs() const {
    validate();
    double total = 0.0;
    for (double s : stage_split) total += s;
    std::array<std::size_t, kStageCount> out{};
    std::array<double, kStageCount> rem{};
    std::size_t used = 0;
    for (std::size_t i = 0; i < kStageCount; ++i) {
      const double exact = static_cast<double>(epochs) * stage_split[i] / total;
      out[i] = static_cast<std::size_t>(std::floor(exact));
      rem[i] = exact - static_cast<double>(out[i]);
      used += out[i];
    }
    while (used < epochs) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < kStageCount; ++i)
        if (rem[i] > rem[best]) best = i;
      ++out[best];
      rem[best] = -1.0;
      ++used;
    }
    if (rl_joint) {
      out[static_cast<std::size_t>(Stage::joint)] += out[static_cast<std::size_t>(Stage::rl)];
      out[static_cast<std::size_t>(Stage::rl)] = 0;
    }
    return out;
  }
};

struct TrainerConfig {
  TrainingConfig train;
  LossWeights weights;
  ForecastLossConfig forecast;
  fusion::AlignConfig align;
  rl::RLConfig rl;

  void validate() const {
    train.validate();
    weights.validate();
    forecast.validate();
    align.validate();
    rl.validate();
  }
};

/// Mean loss components over one epoch; absent components were not trained.
struct EpochLog {
  Stage stage = Stage::unimodal;
  std::size_t epoch = 0;
  std::size_t batches = 0;
  double lr = 0.0;
  std::optional<double> forecast, risk, align, rl;
  double total = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"stage", to_string(e.stage)}, {"epoch", e.epoch},        {"batches", e.batches}, {"lr", e.lr},
          {"forecast", opt(e.forecast)}, {"risk", opt(e.risk)},     {"align", opt(e.align)}, {"rl", opt(e.rl)},
          {"total", e.total}};
}

inline EpochLog epoch_log_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) { return j.at(k).is_null() ? std::optional<double>{} : std::optional<double>(j.at(k).get<double>()); };
  EpochLog e;
  e.stage = stage_from_string(j.at("stage").get<std::string>());
  e.epoch = j.at("epoch").get<std::size_t>();
  e.batches = j.at("batches").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.forecast = opt("forecast");
  e.risk = opt("risk");
  e.align = opt("align");
  e.rl = opt("rl");
  e.total = j.at("total").get<double>();
  return e;
}

/// Next stage to run and how many of its epochs are already done.
struct Progress {
  std::size_t stage = 0;
  std::size_t epoch = 0;
  bool done() const { return stage >= kStageCount; }
};

enum class Task { micro, credit, macro, align };

/// One optimizer step worth of data.
struct Batch {
  Task task = Task::micro;
  std::size_t asset = 0;                ///< micro: the asset
  std::vector<std::size_t> steps;       ///< micro: contiguous steps; others: any steps
  std::vector<std::size_t> assets;      ///< align: asset of each step
  int modality = -1;                    ///< >= 0 keeps only this modality
};

/// Per-asset trading paths over the training range, built from frozen representations.
struct RLPaths {
  std::vector<rl::MarketEnv> envs;
};

/// Runs the staged curriculum over one model. Stages must run in order; a
/// stage with zero epochs is skipped.
class Trainer {
 public:
  using EpochHook = std::function<void(const Trainer&, const EpochLog&)>;

  Trainer(Model& model, const TaskData& data, TrainerConfig cfg, std::uint64_t seed)
      : model_(model), data_(data), cfg_(std::move(cfg)), seed_(seed), opt_(AdamWConfig{0.9, 0.999, 1e-8, cfg_.train.weight_decay}) {
    cfg_.validate();
    cfg_.forecast.unit = model_.micro.return_scale;
    if (data_.history != model_.config.micro.history) throw ContractError("task data history does not match micro.history");
    epochs_ = cfg_.train.stage_epochs();
  }

  const TrainerConfig& config() const { return cfg_; }
  const Progress& progress() const { return progress_; }
  const std::vector<EpochLog>& history() const { return history_; }
  const std::array<std::size_t, kStageCount>& stage_epochs() const { return epochs_; }
  AdamW& optimizer() { return opt_; }
  const AdamW& optimizer() const { return opt_; }
  Model& model() { return model_; }

  /// Restores the position reached by an earlier run of the same configuration.
  void resume(Progress p, std::vector<EpochLog> history) {
    progress_ = p;
    history_ = std::move(history);
    normalize_progress();
  }

  /// Runs every remaining epoch of `s`.
  std::vector<EpochLog> run_stage(Stage s, const EpochHook& hook = {}) {
    const auto idx = static_cast<std::size_t>(s);
    normalize_progress();
    if (epochs_[idx] == 0) return {};
    if (idx < progress_.stage) throw ScheduleError(std::string("stage ") + to_string(s) + " has already run");
    for (std::size_t i = progress_.stage; i < idx; ++i)
      if (epochs_[i] > 0)
        throw ScheduleError(std::string("stage ") + to_string(s) + " requested before stage " + to_string(static_cast<Stage>(i)));
    progress_ = {idx, progress_.stage == idx ? progress_.epoch : 0};
    std::vector<EpochLog> out;
    while (progress_.stage == idx && progress_.epoch < epochs_[idx]) {
      const EpochLog log = s == Stage::rl ? rl_epoch(progress_.epoch) : epoch(s, progress_.epoch);
      out.push_back(log);
      history_.push_back(log);
      ++progress_.epoch;
      if (progress_.epoch >= epochs_[idx]) progress_ = {idx + 1, 0};
      normalize_progress();
      if (hook) hook(*this, log);
    }
    return out;
  }

  /// Runs all remaining stages.
  std::vector<EpochLog> run(const EpochHook& hook = {}) {
    std::vector<EpochLog> out;
    normalize_progress();
    while (!progress_.done()) {
      auto part = run_stage(static_cast<Stage>(progress_.stage), hook);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  /// The batches of one epoch, in order.
  std::vector<Batch> plan(Stage s, std::size_t epoch) const {
    auto rng = epoch_rng(seed_, static_cast<std::size_t>(s), epoch);
    std::vector<Batch> out;
    if (s == Stage::align) {
      if (!align_active()) return out;
      std::vector<std::pair<std::size_t, std::size_t>> items;
      const auto [lo, hi] = data_.micro_range(Split::train);
      for (std::size_t a = 0; a < data_.n_assets(); ++a)
        for (std::size_t t = lo; t < hi; ++t) items.emplace_back(a, t);
      shuffle(items, rng);
      for (std::size_t i = 0; i + 1 < items.size(); i += cfg_.train.micro_batch) {
        Batch b;
        b.task = Task::align;
        for (std::size_t j = i; j < std::min(items.size(), i + cfg_.train.micro_batch); ++j) {
          b.assets.push_back(items[j].first);
          b.steps.push_back(items[j].second);
        }
        if (b.steps.size() >= 2) out.push_back(std::move(b));
      }
      return out;
    }
    std::vector<Batch> micro, credit, macro;
    const auto [lo, hi] = data_.micro_range(Split::train);
    for (std::size_t a = 0; a < data_.n_assets(); ++a)
      for (std::size_t t = lo; t < hi; t += cfg_.train.micro_batch) {
        Batch b;
        b.task = Task::micro;
        b.asset = a;
        for (std::size_t u = t; u < std::min(hi, t + cfg_.train.micro_batch); ++u) b.steps.push_back(u);
        micro.push_back(std::move(b));
      }
    shuffle(micro, rng);
    auto chunks = [&](Task task, std::vector<Batch>& into) {
      const auto [mlo, mhi] = data_.macro_range(Split::train);
      std::vector<std::size_t> steps;
      for (std::size_t t = mlo; t < mhi; ++t) steps.push_back(t);
      shuffle(steps, rng);
      for (std::size_t i = 0; i < steps.size(); i += cfg_.train.macro_batch) {
        Batch b;
        b.task = task;
        b.steps.assign(steps.begin() + static_cast<long>(i), steps.begin() + static_cast<long>(std::min(steps.size(), i + cfg_.train.macro_batch)));
        into.push_back(std::move(b));
      }
    };
    chunks(Task::credit, credit);
    chunks(Task::macro, macro);
    // Round-robin over the three tasks.
    const std::size_t rounds = std::max({micro.size(), credit.size(), macro.size()});
    for (std::size_t r = 0; r < rounds; ++r)
      for (auto* list : {&micro, &credit, &macro})
        if (r < list->size()) out.push_back((*list)[r]);
    if (s == Stage::unimodal) {
      std::vector<int> enabled;
      for (std::size_t m = 0; m < kModalityCount; ++m)
        if (model_.config.modalities[m]) enabled.push_back(static_cast<int>(m));
      for (std::size_t i = 0; i < out.size(); ++i) out[i].modality = enabled[i % enabled.size()];
    }
    return out;
  }

  /// Whether the alignment objective has a modality pair to work on.
  bool align_active() const {
    for (const auto& [a, b] : cfg_.align.pairs)
      if (model_.config.modalities[static_cast<std::size_t>(a)] && model_.config.modalities[static_cast<std::size_t>(b)]) return true;
    return false;
  }

  /// Trading environments over the training range of every asset, observed
  /// through the current (frozen) backbone.
  RLPaths build_paths() const {
    RLPaths out;
    const auto [lo, hi] = data_.macro_range(Split::train);
    const std::size_t end = hi - 1;  // the last training step's return is realized in the test range
    std::vector<double> risk;
    std::vector<std::uint8_t> flags;
    if (cfg_.rl.risk_source == rl::RiskSource::macro_head) {
      for (std::size_t s = lo; s < end; s += 64) {
        std::vector<const ModalBundle*> bs;
        std::vector<const FinancialGraph*> gs;
        for (std::size_t t = s; t < std::min(end, s + 64); ++t) bs.push_back(&data_.market[t]), gs.push_back(&data_.market[t].graph);
        const auto r = model_.macro.risk(model_.fuse(bs).z, gs);
        for (double v : r.score.values()) risk.push_back(v);
      }
    }
    for (std::size_t t = lo; t < end; ++t) {
      if (cfg_.rl.risk_source == rl::RiskSource::stress) risk.push_back(data_.ds.dates[t].stress);
      flags.push_back(data_.ds.dates[t].crisis);
    }
    for (std::size_t a = 0; a < data_.n_assets(); ++a) {
      std::vector<numcore::Tensor> parts;
      std::vector<double> rets;
      for (std::size_t s = lo; s < end; s += 64) {
        std::vector<const ModalBundle*> bs;
        for (std::size_t t = s; t < std::min(end, s + 64); ++t) bs.push_back(&data_.assets[a][t]);
        parts.push_back(model_.fuse(bs).z.detach());
      }
      for (std::size_t t = lo; t < end; ++t) rets.push_back(data_.next_return(a, t));
      out.envs.emplace_back(numcore::concat_rows(parts).detach(), std::move(rets), risk, flags, cfg_.rl);
    }
    return out;
  }

  /// Runs one micro batch forward and returns the forecast loss; exposed for tests.
  numcore::Tensor micro_loss(const Batch& b, numcore::Tensor* z_last = nullptr, fusion::FusedBatch* fused_out = nullptr) const {
    const std::size_t H = data_.history, B = b.steps.size();
    std::vector<ModalBundle> kept;
    std::vector<const ModalBundle*> bs;
    const std::size_t first = b.steps.front() + 1 - H;
    if (b.modality >= 0) kept.reserve(B + H - 1);
    for (std::size_t t = first; t <= b.steps.back(); ++t) {
      if (b.modality >= 0) {
        kept.push_back(only(data_.assets[b.asset][t], b.modality));
        bs.push_back(&kept.back());
      } else {
        bs.push_back(&data_.assets[b.asset][t]);
      }
    }
    auto fused = model_.fuse(bs);
    std::vector<std::size_t> idx, last;
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t h = 0; h < H; ++h) idx.push_back(i + h);
      last.push_back(i + H - 1);
    }
    const auto m = model_.micro.forecast(numcore::gather_rows(fused.z, idx), H, 1);
    std::vector<double> y;
    std::vector<std::size_t> cls;
    for (auto t : b.steps) {
      y.push_back(data_.next_return(b.asset, t));
      cls.push_back(static_cast<std::size_t>(datapipe::direction_class(y.back(), data_.flat_band())));
    }
    Tensor loss = forecast_loss(y, m, cfg_.forecast);
    if (cfg_.train.direction_weight > 0.0)
      loss = add(loss, scale(numcore::cross_entropy(m.dir_logits, cls), cfg_.train.direction_weight));
    if (cfg_.train.nll_weight > 0.0) {
      const double inv = 1.0 / cfg_.forecast.unit;
      std::vector<double> ys;
      for (double v : y) ys.push_back(v * inv);
      loss = add(loss, scale(heads::mdn_nll(m.weights, scale(m.means, inv), scale(m.stdevs, inv), ys), cfg_.train.nll_weight));
    }
    if (z_last) *z_last = numcore::gather_rows(fused.z, last);
    if (fused_out) *fused_out = std::move(fused);
    return loss;
  }

  /// Risk-side loss of a credit or macro batch.
  numcore::Tensor risk_batch_loss(const Batch& b) const {
    std::vector<ModalBundle> kept;
    std::vector<const ModalBundle*> bs;
    std::vector<const FinancialGraph*> gs;
    if (b.modality >= 0) kept.reserve(b.steps.size());
    for (auto t : b.steps) {
      if (b.modality >= 0) {
        kept.push_back(only(data_.market[t], b.modality));
        bs.push_back(&kept.back());
      } else {
        bs.push_back(&data_.market[t]);
      }
      gs.push_back(&data_.market[t].graph);
    }
    const auto r = model_.macro.risk(model_.fuse(bs).z, gs);
    if (b.task == Task::credit) {
      std::vector<std::uint8_t> distress;
      for (auto t : b.steps) {
        const auto& d = data_.ds.dates[t].node_distress;
        distress.insert(distress.end(), d.begin(), d.end());
      }
      return scale(node_loss(r.contributions, distress), cfg_.train.node_weight);
    }
    std::vector<std::uint8_t> crisis;
    std::vector<double> stress;
    for (auto t : b.steps) {
      crisis.push_back(data_.ds.dates[t].crisis);
      stress.push_back(data_.ds.dates[t].stress);
    }
    return risk_loss(r.score, crisis, stress);
  }

  /// Contrastive loss of an align batch over the enabled modality pairs.
  numcore::Tensor align_batch_loss(const Batch& b) const {
    std::vector<const ModalBundle*> bs;
    for (std::size_t i = 0; i < b.steps.size(); ++i) bs.push_back(&data_.assets[b.assets[i]][b.steps[i]]);
    std::array<numcore::Tensor, kModalityCount> emb;
    Tensor total;
    for (const auto& [m1, m2] : cfg_.align.pairs) {
      const auto i1 = static_cast<std::size_t>(m1), i2 = static_cast<std::size_t>(m2);
      if (!model_.config.modalities[i1] || !model_.config.modalities[i2]) continue;
      for (auto i : {i1, i2})
        if (!emb[i].defined()) emb[i] = encode(static_cast<Modality>(i), bs);
      const Tensor l = fusion::align_loss(emb[i1], emb[i2], cfg_.align);
      total = total.defined() ? add(total, l) : l;
    }
    return total;
  }

 private:
  static ModalBundle only(const ModalBundle& b, int modality) {
    ModalBundle out = b;
    for (std::size_t m = 0; m < kModalityCount; ++m) out.present[m] = b.present[m] && static_cast<int>(m) == modality;
    return out;
  }

  numcore::Tensor encode(Modality m, const std::vector<const ModalBundle*>& bs) const {
    switch (m) {
      case Modality::price: return encoders::encode_price_batch(model_.enc, bs);
      case Modality::text: return encoders::encode_text_batch(model_.enc, bs);
      case Modality::macro: return encoders::encode_macro_batch(model_.enc, bs);
      case Modality::graph: return encoders::encode_graph_batch(model_.enc, bs).pooled;
    }
    return {};
  }

  /// Skips stages without epochs.
  void normalize_progress() {
    while (!progress_.done() && progress_.epoch >= epochs_[progress_.stage]) progress_ = {progress_.stage + 1, 0};
  }

  std::vector<std::string> trainable(Stage s) const {
    switch (s) {
      case Stage::unimodal: return model_.names_with({"enc.", "fusion.", "micro.", "macro."});
      case Stage::align: return model_.names_with({"enc."});
      case Stage::joint:
        return cfg_.train.rl_joint ? model_.names_with({"enc.", "fusion.", "micro.", "macro.", "rl."})
                                   : model_.names_with({"enc.", "fusion.", "micro.", "macro."});
      case Stage::rl: return model_.names_with({"rl."});
    }
    return {};
  }

  ScheduleConfig schedule(Stage s, std::size_t steps_per_epoch, double peak) const {
    ScheduleConfig c;
    c.peak = peak;
    c.total = std::max<std::size_t>(1, steps_per_epoch * epochs_[static_cast<std::size_t>(s)]);
    c.warmup = std::min(cfg_.train.warmup_steps, c.total / 5);
    return c;
  }

  void check_finite(double v, Stage s, std::size_t epoch, std::size_t step, const char* what) const {
    if (!std::isfinite(v)) throw DivergenceError(s, epoch, step, std::string(what) + " loss is " + std::to_string(v));
  }

  double apply(const Tensor& loss, const std::vector<std::string>& names, double lr, Stage s, std::size_t epoch, std::size_t step) {
    model_.params.zero_grad();
    numcore::Tape::active()->backward(loss);
    try {
      return opt_.step(model_.params, names, lr, cfg_.train.grad_clip);
    } catch (const NumericError& e) {
      throw DivergenceError(s, epoch, step, e.what());
    }
  }

  EpochLog epoch(Stage s, std::size_t epoch) {
    const auto batches = plan(s, epoch);
    const auto names = trainable(s);
    const auto sched = schedule(s, batches.size(), cfg_.train.peak_lr);
    const bool with_align = s == Stage::joint && align_active() && cfg_.weights.align > 0.0;
    const bool with_rl = s == Stage::joint && cfg_.train.rl_joint && cfg_.weights.rl > 0.0;
    auto rng = epoch_rng(seed_ ^ 0x5bd1e995u, static_cast<std::size_t>(s), epoch);
    double f_sum = 0, c_sum = 0, m_sum = 0, a_sum = 0, r_sum = 0;
    std::size_t f_n = 0, c_n = 0, m_n = 0, a_n = 0, r_n = 0;
    double lr = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const auto& b = batches[i];
      const std::size_t step = epoch * batches.size() + i;
      lr = lr_schedule(step, sched);
      try {
        numcore::Tape tape;
        numcore::Tape::Scope scope(tape);
        Tensor loss;
        if (b.task == Task::align) {
          const Tensor l = align_batch_loss(b);
          if (!l.defined()) continue;
          check_finite(l.item(), s, epoch, step, "align");
          a_sum += l.item(), ++a_n;
          loss = scale(l, cfg_.weights.align);
        } else if (b.task == Task::micro) {
          Tensor z_last;
          fusion::FusedBatch fused;
          const Tensor lf = micro_loss(b, &z_last, &fused);
          check_finite(lf.item(), s, epoch, step, "forecast");
          f_sum += lf.item(), ++f_n;
          loss = scale(lf, cfg_.weights.forecast);
          if (with_align && b.steps.size() + data_.history - 1 >= 2) {
            Tensor la;
            for (const auto& [m1, m2] : cfg_.align.pairs) {
              const auto& e1 = fused.embeddings[static_cast<std::size_t>(m1)];
              const auto& e2 = fused.embeddings[static_cast<std::size_t>(m2)];
              if (!e1.defined() || !e2.defined()) continue;
              const Tensor l = fusion::align_loss(e1, e2, cfg_.align);
              la = la.defined() ? add(la, l) : l;
            }
            if (la.defined()) {
              check_finite(la.item(), s, epoch, step, "align");
              a_sum += la.item(), ++a_n;
              loss = add(loss, scale(la, cfg_.weights.align));
            }
          }
          if (with_rl) {
            const Tensor lr_term = joint_rl_loss(b, z_last, rng);
            check_finite(lr_term.item(), s, epoch, step, "rl");
            r_sum += last_joint_return_, ++r_n;
            loss = add(loss, scale(lr_term, cfg_.weights.rl));
          }
        } else {
          const Tensor l = risk_batch_loss(b);
          check_finite(l.item(), s, epoch, step, "risk");
          (b.task == Task::credit ? c_sum : m_sum) += l.item();
          ++(b.task == Task::credit ? c_n : m_n);
          loss = scale(l, cfg_.weights.risk);
        }
        apply(loss, names, lr, s, epoch, step);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& e) {
        throw DivergenceError(s, epoch, step, e.what());
      }
    }
    EpochLog log;
    log.stage = s;
    log.epoch = epoch;
    log.batches = batches.size();
    log.lr = lr;
    if (f_n) log.forecast = f_sum / static_cast<double>(f_n);
    if (c_n || m_n) log.risk = (c_n ? c_sum / static_cast<double>(c_n) : 0.0) + (m_n ? m_sum / static_cast<double>(m_n) : 0.0);
    if (a_n) log.align = a_sum / static_cast<double>(a_n);
    if (r_n) log.rl = -r_sum / static_cast<double>(r_n);
    log.total = total_loss(log.forecast.value_or(0.0), log.risk.value_or(0.0), log.align.value_or(0.0), log.rl.value_or(0.0), cfg_.weights);
    return log;
  }

  /// Policy-gradient surrogate over one micro batch, differentiable through
  /// the fused representations.
  Tensor joint_rl_loss(const Batch& b, const Tensor& z_last, std::mt19937_64& rng) {
    rl::RLConfig rc = cfg_.rl;
    rc.episode_length = b.steps.size();
    std::vector<double> rets, risk;
    std::vector<std::uint8_t> flags;
    for (auto t : b.steps) {
      rets.push_back(data_.next_return(b.asset, t));
      risk.push_back(data_.ds.dates[t].stress);
      flags.push_back(data_.ds.dates[t].crisis);
    }
    rl::MarketEnv env(z_last.detach(), rets, risk, flags, rc);
    const auto trajs = rl::rollouts(env, model_.policy, cfg_.train.joint_rollouts, b.steps.size(), rng);
    double total = 0.0;
    std::vector<Tensor> rows;
    for (const auto& tr : trajs) {
      total += rl::discounted_return(tr.rewards(), rc.gamma);
      rows.push_back(z_last);
    }
    last_joint_return_ = total / static_cast<double>(trajs.size());
    const Tensor states = numcore::concat_rows(rows);
    return rl::surrogate_loss(trajs, model_.policy, rc.gamma, &states);
  }

  EpochLog rl_epoch(std::size_t epoch) {
    if (!paths_) paths_ = build_paths();
    const auto names = trainable(Stage::rl);
    const std::size_t updates = cfg_.train.rl_updates_per_epoch;
    const auto sched = schedule(Stage::rl, updates, cfg_.train.rl_peak_lr);
    auto rng = epoch_rng(seed_, static_cast<std::size_t>(Stage::rl), epoch);
    double ret_sum = 0.0;
    std::size_t ret_n = 0;
    double lr = 0.0;
    for (std::size_t u = 0; u < updates; ++u) {
      const std::size_t step = epoch * updates + u;
      lr = lr_schedule(step, sched);
      std::vector<rl::Trajectory> trajs;
      for (std::size_t e = 0; e < cfg_.rl.episodes_per_update; ++e) {
        const std::size_t a = std::uniform_int_distribution<std::size_t>(0, paths_->envs.size() - 1)(rng);
        trajs.push_back(rl::rollout(paths_->envs[a], model_.policy, cfg_.rl.episode_length, rng));
        ret_sum += rl::discounted_return(trajs.back().rewards(), cfg_.rl.gamma);
        ++ret_n;
      }
      numcore::Tape tape;
      numcore::Tape::Scope scope(tape);
      try {
        const Tensor loss = rl::surrogate_loss(trajs, model_.policy, cfg_.rl.gamma);
        check_finite(loss.item(), Stage::rl, epoch, step, "rl");
        apply(loss, names, lr, Stage::rl, epoch, step);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& e) {
        throw DivergenceError(Stage::rl, epoch, step, e.what());
      }
    }
    EpochLog log;
    log.stage = Stage::rl;
    log.epoch = epoch;
    log.batches = updates;
    log.lr = lr;
    log.rl = -ret_sum / static_cast<double>(ret_n);
    log.total = cfg_.weights.rl * *log.rl;
    return log;
  }

  Model& model_;
  const TaskData& data_;
  TrainerConfig cfg_;
  std::uint64_t seed_;
  AdamW opt_;
  std::array<std::size_t, kStageCount> epochs_{};
  Progress progress_;
  std::vector<EpochLog> history_;
  std::optional<RLPaths> paths_;
  double last_joint_return_ = 0.0;
};

}  // namespace unifin::training
