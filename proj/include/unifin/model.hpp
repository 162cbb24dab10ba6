#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "unifin/encoders.hpp"
#include "unifin/errors.hpp"
#include "unifin/fusion.hpp"
#include "unifin/heads.hpp"
#include "unifin/modal.hpp"
#include "unifin/numcore/params.hpp"
#include "unifin/rl.hpp"

namespace unifin {

struct ModelConfig {
  encoders::EncoderConfig encoder;
  fusion::FusionConfig fusion;
  heads::MicroHeadConfig micro;
  heads::MacroHeadConfig macro;
  /// Modalities the model may see; the others are masked in every bundle.
  std::array<bool, kModalityCount> modalities{true, true, true, true};
  std::size_t actions = 3;

  void validate() const {
    encoder.validate();
    micro.validate();
    macro.validate();
    bool any = false;
    for (bool m : modalities) any = any || m;
    if (!any) throw ContractError("model.modalities must enable at least one modality");
    if (actions == 0) throw ContractError("rl.actions must be nonempty");
  }
};

/// Encoders, fusion backbone, both heads and the trading policy over one
/// parameter store. Copies share parameter storage.
struct Model {
  ModelConfig config;
  numcore::ParamStore params;
  encoders::Encoders enc;
  fusion::FusionBackbone fusion;
  heads::MicroHead micro;
  heads::MacroHead macro;
  rl::PolicyParams policy;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.params = numcore::ParamStore(seed);
    const std::size_t d = cfg.encoder.d_model;
    m.enc = encoders::Encoders::create(m.params, cfg.encoder);
    m.fusion = fusion::FusionBackbone::create(m.params, d, cfg.fusion);
    m.micro = heads::MicroHead::create(m.params, d, cfg.micro);
    m.macro = heads::MacroHead::create(m.params, d, cfg.encoder.graph_features, cfg.macro);
    m.policy = rl::PolicyParams::create(m.params, d, cfg.actions);
    return m;
  }

  std::size_t d_model() const { return config.encoder.d_model; }

  /// Copy of `b` with disabled modalities masked out.
  ModalBundle restrict(const ModalBundle& b) const {
    ModalBundle out = b;
    for (std::size_t m = 0; m < kModalityCount; ++m) out.present[m] = b.present[m] && config.modalities[m];
    return out;
  }

  fusion::FusedBatch fuse(const std::vector<const ModalBundle*>& bundles) const { return fusion::fuse(bundles, enc, fusion); }

  /// Parameter names whose prefix is in `prefixes`.
  std::vector<std::string> names_with(const std::vector<std::string>& prefixes) const {
    std::vector<std::string> out;
    for (const auto& n : params.names())
      for (const auto& p : prefixes)
        if (n.rfind(p, 0) == 0) {
          out.push_back(n);
          break;
        }
    return out;
  }
};

}  // namespace unifin
