#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "unifin/errors.hpp"
#include "unifin/numcore/ops.hpp"
#include "unifin/numcore/params.hpp"

namespace unifin::rl {

using numcore::ParamStore;
using numcore::Tensor;

/// Where the environment's systemic-risk reading comes from.
enum class RiskSource { stress, macro_head };

inline const char* to_string(RiskSource s) { return s == RiskSource::stress ? "stress" : "macro_head"; }

struct RLConfig {
  double alpha = 1.0;   ///< profit weight
  double beta = 0.5;    ///< systemic-risk penalty weight
  double gamma = 0.99;  ///< discount
  std::size_t episode_length = 64;
  /// Position for each action index.
  std::vector<double> actions = {-1.0, 0.0, 1.0};
  /// Converts a unit stress reading into return units: r_sys = |position| * risk * risk_unit.
  double risk_unit = 0.01;
  RiskSource risk_source = RiskSource::stress;
  std::size_t episodes_per_update = 16;
  std::size_t updates = 200;
  double learning_rate = 0.5;

  void validate() const {
    if (!(alpha >= 0.0)) throw ContractError("rl.alpha must be >= 0");
    if (!(beta >= 0.0)) throw ContractError("rl.beta must be >= 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ContractError("rl.gamma must lie in [0, 1)");
    if (episode_length == 0) throw ContractError("rl.episode_length must be >= 1");
    if (actions.empty()) throw ContractError("rl.actions must be nonempty");
    if (!(risk_unit >= 0.0)) throw ContractError("rl.risk_unit must be >= 0");
    if (episodes_per_update == 0) throw ContractError("rl.episodes_per_update must be >= 1");
    if (!(learning_rate > 0.0)) throw ContractError("rl.learning_rate must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// Linear softmax policy; `weight` is [d_model x actions].
struct PolicyParams {
  Tensor weight;

  static PolicyParams create(ParamStore& ps, std::size_t d_model, std::size_t actions) {
    return {ps.add("rl.policy.w", {d_model, actions}, std::vector<double>(d_model * actions, 0.0))};
  }
  static PolicyParams bind(const ParamStore& ps) { return {ps.get("rl.policy.w")}; }

  std::size_t state_width() const { return weight.shape()[0]; }
  std::size_t action_count() const { return weight.shape()[1]; }
};

/// Action distribution per row of z [B x d].
inline Tensor policy(const Tensor& z, const PolicyParams& p) { return numcore::softmax(numcore::matmul(z, p.weight)); }

inline std::vector<double> policy(const std::vector<double>& z, const PolicyParams& p) {
  return policy(Tensor::matrix(1, z.size(), z), p).to_vector();
}

inline double reward(double profit, double r_sys, const RLConfig& cfg) { return cfg.alpha * profit - cfg.beta * r_sys; }

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct Step {
  std::vector<double> state;
  std::size_t action = 0;
  double reward = 0.0;
  double profit = 0.0;
  double r_sys = 0.0;
  std::size_t t = 0;  ///< environment step index
};

struct Trajectory {
  std::vector<Step> steps;
  bool terminal = false;

  std::size_t size() const { return steps.size(); }
  std::vector<double> rewards() const {
    std::vector<double> r;
    r.reserve(steps.size());
    for (const auto& s : steps) r.push_back(s.reward);
    return r;
  }
};

/// G_t = r_t + gamma G_{t+1} for every t.
inline std::vector<double> returns_to_go(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

inline double discounted_return(const std::vector<double>& rewards, double gamma) {
  double total = 0.0, w = 1.0;
  for (double r : rewards) {
    total += w * r;
    w *= gamma;
  }
  return total;
}
inline double discounted_return(const Trajectory& traj, double gamma) { return discounted_return(traj.rewards(), gamma); }

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

struct Transition {
  std::vector<double> state;  ///< next observation
  double reward = 0.0;
  double profit = 0.0;
  double r_sys = 0.0;
  std::size_t t = 0;  ///< index of the step that produced this transition
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t action_count() const = 0;
  virtual std::vector<double> reset(std::mt19937_64& rng) = 0;
  virtual Transition step(std::size_t action, std::mt19937_64& rng) = 0;
};

/// Outcome of taking an action at a fixed step of the market path.
struct EnvStep {
  std::size_t next = 0;
  double profit = 0.0;
  double r_sys = 0.0;
};

/// Replays a fixed market path: observations are fused representations, the
/// profit of a position is position x next-step return, and the systemic-risk
/// reading scales with the size of the position held.
class MarketEnv : public Environment {
 public:
  /// states [T x d]; next_returns, risk and stressed have length T.
  MarketEnv(Tensor states, std::vector<double> next_returns, std::vector<double> risk, std::vector<std::uint8_t> stressed,
            RLConfig cfg)
      : states_(std::move(states)),
        returns_(std::move(next_returns)),
        risk_(std::move(risk)),
        stressed_(std::move(stressed)),
        cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t T = states_.rows();
    if (T == 0) throw EmptyInputError("MarketEnv: empty path");
    if (returns_.size() != T || risk_.size() != T || stressed_.size() != T)
      throw DimensionError("MarketEnv: returns, risk and stress flags need one entry per state");
  }

  std::size_t steps() const { return states_.rows(); }
  std::size_t action_count() const override { return cfg_.actions.size(); }
  const RLConfig& config() const { return cfg_; }
  const Tensor& states() const { return states_; }
  bool stressed(std::size_t t) const { return stressed_.at(t) != 0; }

  std::vector<double> observe(std::size_t t) const {
    const std::size_t d = states_.cols();
    const auto v = states_.values().subspan(t * d, d);
    return {v.begin(), v.end()};
  }

  EnvStep env_step(std::size_t t, std::size_t action) const {
    if (t >= steps()) throw IndexError("MarketEnv: step " + std::to_string(t) + " is past the end of the path");
    if (action >= cfg_.actions.size()) throw IndexError("MarketEnv: action " + std::to_string(action) + " is not in the action set");
    const double pos = cfg_.actions[action];
    return {t + 1, pos * returns_[t], std::abs(pos) * risk_[t] * cfg_.risk_unit};
  }

  std::vector<double> reset(std::mt19937_64& rng) override {
    const std::size_t L = cfg_.episode_length;
    const std::size_t last = steps() > L ? steps() - L : 0;
    t_ = std::uniform_int_distribution<std::size_t>(0, last)(rng);
    left_ = std::min(L, steps() - t_);
    return observe(t_);
  }

  Transition step(std::size_t action, std::mt19937_64&) override {
    if (left_ == 0) throw ContractError("MarketEnv: step() after the episode ended; call reset()");
    const auto s = env_step(t_, action);
    Transition tr;
    tr.t = t_;
    tr.profit = s.profit;
    tr.r_sys = s.r_sys;
    tr.reward = reward(s.profit, s.r_sys, cfg_);
    --left_;
    tr.done = left_ == 0 || s.next >= steps();
    t_ = s.next;
    if (!tr.done) tr.state = observe(t_);
    return tr;
  }

 private:
  Tensor states_;
  std::vector<double> returns_;
  std::vector<double> risk_;
  std::vector<std::uint8_t> stressed_;
  RLConfig cfg_;
  std::size_t t_ = 0;
  std::size_t left_ = 0;
};

inline std::size_t sample_action(const std::vector<double>& probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t a = 0; a + 1 < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return a;
  }
  return probs.size() - 1;
}

inline Trajectory rollout(Environment& env, const PolicyParams& p, std::size_t max_steps, std::mt19937_64& rng) {
  if (env.action_count() != p.action_count())
    throw DimensionError("rollout: policy has " + std::to_string(p.action_count()) + " actions, environment " +
                         std::to_string(env.action_count()));
  Trajectory traj;
  std::vector<double> s = env.reset(rng);
  for (std::size_t i = 0; i < max_steps; ++i) {
    Step st;
    st.state = s;
    st.action = sample_action(policy(s, p), rng);
    const Transition tr = env.step(st.action, rng);
    st.reward = tr.reward;
    st.profit = tr.profit;
    st.r_sys = tr.r_sys;
    st.t = tr.t;
    traj.steps.push_back(std::move(st));
    if (tr.done) {
      traj.terminal = true;
      break;
    }
    s = tr.state;
  }
  return traj;
}

inline std::vector<Trajectory> rollouts(Environment& env, const PolicyParams& p, std::size_t count, std::size_t max_steps,
                                        std::mt19937_64& rng) {
  std::vector<Trajectory> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(rollout(env, p, max_steps, rng));
  return out;
}

// ---------------------------------------------------------------------------
// REINFORCE
// ---------------------------------------------------------------------------

/// Per-step weights gamma^t (G_t - b_t). The baseline b_t is the mean reward-to-go
/// at step t over the other trajectories that reach t, which keeps the
/// estimator unbiased; a lone trajectory gets no baseline.
inline std::vector<std::vector<double>> advantages(const std::vector<Trajectory>& trajs, double gamma) {
  if (trajs.empty()) throw ContractError("REINFORCE needs at least one trajectory");
  std::vector<std::vector<double>> G;
  std::size_t horizon = 0;
  for (const auto& tr : trajs) {
    G.push_back(returns_to_go(tr.rewards(), gamma));
    horizon = std::max(horizon, tr.size());
  }
  std::vector<double> total(horizon, 0.0);
  std::vector<std::size_t> count(horizon, 0);
  for (const auto& g : G)
    for (std::size_t t = 0; t < g.size(); ++t) total[t] += g[t], ++count[t];
  std::vector<std::vector<double>> adv(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) {
    double disc = 1.0;
    for (std::size_t t = 0; t < G[i].size(); ++t) {
      const double b = count[t] > 1 ? (total[t] - G[i][t]) / static_cast<double>(count[t] - 1) : 0.0;
      adv[i].push_back(disc * (G[i][t] - b));
      disc *= gamma;
    }
  }
  return adv;
}

/// Scalar whose negative gradient is the REINFORCE estimate of dJ/dW, averaged
/// over trajectories. `states` may replace the recorded observations with
/// differentiable rows in step order.
inline Tensor surrogate_loss(const std::vector<Trajectory>& trajs, const PolicyParams& p, double gamma,
                             const Tensor* states = nullptr) {
  const auto adv = advantages(trajs, gamma);
  const std::size_t A = p.action_count(), d = p.state_width();
  std::vector<double> flat, coef;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i)
    for (std::size_t t = 0; t < trajs[i].size(); ++t) {
      const auto& st = trajs[i].steps[t];
      if (!states) {
        if (st.state.size() != d) throw DimensionError("REINFORCE: state width does not match the policy");
        flat.insert(flat.end(), st.state.begin(), st.state.end());
      }
      std::vector<double> row(A, 0.0);
      row.at(st.action) = -adv[i][t] / static_cast<double>(trajs.size());
      coef.insert(coef.end(), row.begin(), row.end());
      ++rows;
    }
  if (rows == 0) return Tensor::scalar(0.0);
  const Tensor Z = states ? *states : Tensor::matrix(rows, d, std::move(flat));
  if (Z.rows() != rows) throw DimensionError("REINFORCE: state rows do not match the trajectory steps");
  const Tensor logp = numcore::log_softmax(numcore::matmul(Z, p.weight));
  return numcore::sum(numcore::mul(logp, Tensor::matrix(rows, A, std::move(coef))));
}

/// REINFORCE estimate of dJ/dW as a flat [d x actions] vector.
inline std::vector<double> reinforce_gradient(const std::vector<Trajectory>& trajs, const PolicyParams& p, const RLConfig& cfg) {
  Tensor w(p.weight.shape(), p.weight.to_vector(), true);
  numcore::Tape tape;
  {
    numcore::Tape::Scope scope(tape);
    tape.backward(surrogate_loss(trajs, {w}, cfg.gamma));
  }
  auto g = w.grad();
  for (auto& x : g) x = -x;
  return g;
}

/// One gradient-ascent step on the expected discounted return.
inline void reinforce_update(const std::vector<Trajectory>& trajs, PolicyParams& p, const RLConfig& cfg, double learning_rate) {
  const auto g = reinforce_gradient(trajs, p, cfg);
  auto w = p.weight.mutable_values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += learning_rate * g[i];
}

// ---------------------------------------------------------------------------
// Evaluation and export
// ---------------------------------------------------------------------------

struct PolicyStats {
  double mean_abs_position = 0.0;
  double stress_abs_position = 0.0;  ///< over stress-flagged steps; 0 when there are none
  double calm_abs_position = 0.0;
  std::size_t stress_steps = 0;
  double greedy_reward = 0.0;  ///< cumulative undiscounted reward of the argmax policy
  double greedy_profit = 0.0;
};

/// Expected |position| under the policy on every step of the path, split by
/// the environment's stress flag, plus the greedy policy's realized reward.
inline PolicyStats evaluate_policy(const MarketEnv& env, const PolicyParams& p) {
  const Tensor probs = policy(env.states(), p);
  const auto& acts = env.config().actions;
  const std::size_t A = acts.size();
  PolicyStats s;
  double calm = 0.0;
  std::size_t n_calm = 0;
  for (std::size_t t = 0; t < env.steps(); ++t) {
    double e = 0.0;
    std::size_t best = 0;
    for (std::size_t a = 0; a < A; ++a) {
      e += probs.at(t, a) * std::abs(acts[a]);
      if (probs.at(t, a) > probs.at(t, best)) best = a;
    }
    s.mean_abs_position += e;
    if (env.stressed(t)) s.stress_abs_position += e, ++s.stress_steps;
    else calm += e, ++n_calm;
    const auto r = env.env_step(t, best);
    s.greedy_reward += reward(r.profit, r.r_sys, env.config());
    s.greedy_profit += r.profit;
  }
  s.mean_abs_position /= static_cast<double>(env.steps());
  if (s.stress_steps) s.stress_abs_position /= static_cast<double>(s.stress_steps);
  if (n_calm) s.calm_abs_position = calm / static_cast<double>(n_calm);
  return s;
}

/// One JSON object per step.
inline void write_trace(std::ostream& os, const Trajectory& traj, const RLConfig& cfg, std::size_t episode = 0) {
  for (const auto& s : traj.steps) {
    nlohmann::json j = {{"episode", episode}, {"t", s.t},           {"action", s.action}, {"position", cfg.actions.at(s.action)},
                        {"profit", s.profit}, {"r_sys", s.r_sys}, {"reward", s.reward}};
    os << j.dump() << '\n';
  }
}

}  // namespace unifin::rl
