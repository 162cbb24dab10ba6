#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "unifin/numcore/grad_check.hpp"
#include "unifin/rl.hpp"
#include "unifin/training/run.hpp"

namespace unifin::training {

struct GradCheckResult {
  std::string group;    ///< parameter-name prefix
  std::size_t coords = 0;
  double error = 0.0;   ///< worst relative error over the group
};

/// Small configuration for finite-difference checks through the whole model.
inline RunConfig grad_check_config(std::size_t d_model, std::uint64_t seed) {
  RunConfig c;
  c.synthetic.n_steps = 80;
  c.synthetic.n_assets = 2;
  c.synthetic.graph_nodes = 3;
  c.synthetic.seed = seed;
  c.features.window = 5;
  c.model.encoder.d_model = d_model;
  c.model.encoder.heads = 2;
  c.model.encoder.layers = 1;
  c.model.encoder.macro_group_width = 4;
  c.model.encoder.graph_layers = 1;
  c.model.micro.history = 2;
  c.model.micro.mixture = 2;
  c.model.macro.layers = 1;
  c.model.fusion.layers = 1;
  c.trainer.rl.episode_length = 4;
  return c;
}

/// Checks the joint loss (forecast, node, crisis and contrastive terms) against
/// central differences for every parameter group, and the policy surrogate
/// against the policy weights.
inline std::vector<GradCheckResult> end_to_end_grad_check(std::size_t d_model = 8, std::uint64_t seed = 1) {
  const RunConfig cfg = grad_check_config(d_model, seed);
  const TaskData data = make_task_data(cfg, generate_dataset(cfg));
  Model model = Model::create(cfg.model, seed);
  Trainer trainer(model, data, cfg.trainer, seed);

  const auto [lo, hi] = data.micro_range(Split::train);
  const auto [mlo, mhi] = data.macro_range(Split::train);
  if (hi < lo + 3 || mhi < mlo + 2) throw ContractError("grad check: dataset too short");
  Batch micro{Task::micro, 1, {lo, lo + 1, lo + 2}, {}, -1};
  Batch credit{Task::credit, 0, {mlo, mhi - 1}, {}, -1};
  Batch macro{Task::macro, 0, {mlo + 1, mhi - 2}, {}, -1};
  Batch align{Task::align, 0, {lo, lo + 4, lo + 7}, {0, 1, 0}, -1};
  const auto& w = cfg.trainer.weights;
  auto joint = [&] {
    Tensor l = numcore::add(numcore::scale(trainer.micro_loss(micro), w.forecast),
                            numcore::scale(numcore::add(trainer.risk_batch_loss(credit), trainer.risk_batch_loss(macro)), w.risk));
    if (trainer.align_active()) l = numcore::add(l, numcore::scale(trainer.align_batch_loss(align), w.align));
    return l;
  };

  std::vector<GradCheckResult> out;
  for (const std::string prefix : {"enc.", "fusion.", "micro.", "macro."}) {
    std::vector<Tensor> ps;
    std::size_t n = 0;
    for (const auto& name : model.names_with({prefix})) {
      ps.push_back(model.params.get(name));
      n += ps.back().size();
    }
    out.push_back({prefix, n, numcore::grad_check(joint, ps)});
  }

  // Policy surrogate on fixed sampled trajectories.
  auto paths = trainer.build_paths();
  std::mt19937_64 rng(seed);
  std::vector<rl::Trajectory> trajs;
  for (auto& env : paths.envs) trajs.push_back(rl::rollout(env, model.policy, cfg.trainer.rl.episode_length, rng));
  Tensor& pw = model.params.get("rl.policy.w");
  out.push_back({"rl.", pw.size(), numcore::grad_check([&] { return rl::surrogate_loss(trajs, model.policy, cfg.trainer.rl.gamma); }, {pw})});
  return out;
}

}  // namespace unifin::training
