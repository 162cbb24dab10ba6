#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "unifin/encoders.hpp"
#include "unifin/errors.hpp"
#include "unifin/modal.hpp"
#include "unifin/numcore/ops.hpp"
#include "unifin/numcore/params.hpp"

namespace unifin::fusion {

using encoders::Encoders;
using encoders::TransformerBlock;
using numcore::Linear;
using numcore::ParamStore;
using numcore::Tensor;

struct FusionConfig {
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::size_t ffn_mult = 2;
};

struct AlignConfig {
  double temperature = 0.1;
  std::vector<std::pair<Modality, Modality>> pairs = {{Modality::price, Modality::text}};

  void validate() const {
    if (!(temperature > 0.0)) throw ContractError("align.temperature must be positive");
    if (pairs.empty()) throw ContractError("align.pairs must name at least one modality pair");
  }
};

/// Batch of fused representations.
struct FusedBatch {
  Tensor z;        ///< [B x d]
  Tensor weights;  ///< [B x G] pooling weights over modality tokens
  /// Per-modality embeddings [B x d]; undefined where no bundle had it.
  std::array<Tensor, kModalityCount> embeddings;
};

struct FusionBackbone {
  Tensor type_embedding;  ///< [4 x d]
  std::vector<TransformerBlock> blocks;
  Tensor out_gain, out_bias;
  Tensor query;  ///< [d x 1]
  Linear pool_key, pool_value;
  std::size_t d = 0;

  static FusionBackbone create(ParamStore& ps, std::size_t d, const FusionConfig& cfg) {
    if (cfg.heads == 0 || d % cfg.heads != 0) throw ContractError("fusion.heads must divide model.d_model");
    FusionBackbone f;
    f.d = d;
    f.type_embedding = ps.add_normal("fusion.type", {kModalityCount, d}, 0.1);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      f.blocks.push_back(TransformerBlock::create(ps, "fusion.l" + std::to_string(l), d, cfg.heads, cfg.ffn_mult));
    f.out_gain = ps.add_vector("fusion.lnf.g", d, 1.0);
    f.out_bias = ps.add_vector("fusion.lnf.b", d);
    f.query = ps.add_matrix("fusion.query", d, 1);
    f.pool_key = Linear::create(ps, "fusion.pool.k", d, d);
    f.pool_value = Linear::create(ps, "fusion.pool.v", d, d);
    return f;
  }

  /// Fuses B groups of G modality tokens ([B*G x d], sample-major). `types`
  /// gives each row's modality; `present` (B*G, may be empty) masks tokens.
  std::pair<Tensor, Tensor> fuse_tokens(const Tensor& tokens, const std::vector<std::size_t>& types, std::size_t G,
                                        const std::vector<std::uint8_t>& present = {}) const {
    const std::size_t R = tokens.rows();
    if (G == 0 || R % G != 0) throw DimensionError("fuse: token rows not divisible by group size");
    if (types.size() != R) throw DimensionError("fuse: one modality type per token row required");
    const std::size_t B = R / G;
    Tensor x = add(tokens, numcore::gather_rows(type_embedding, types));
    numcore::AttentionOptions opts;
    opts.group = G;
    opts.key_mask = present;
    for (const auto& b : blocks) x = b.forward(x, opts);
    x = numcore::layer_norm(x, out_gain, out_bias);
    const Tensor scores = reshape(scale(numcore::matmul(pool_key(x), query), 1.0 / std::sqrt(static_cast<double>(d))), {B, G});
    const Tensor w = present.empty() ? numcore::softmax(scores) : numcore::masked_softmax(scores, present);
    const Tensor pooled = scale(numcore::mean_groups(numcore::scale_rows(pool_value(x), reshape(w, {R})), G), static_cast<double>(G));
    return {pooled, w};
  }
};

namespace detail {
/// Places rows of `sub` (one per listed sample) into a [B x d] matrix with zero rows elsewhere.
inline Tensor scatter_rows(const Tensor& sub, const std::vector<std::size_t>& at, std::size_t B, std::size_t d) {
  if (at.size() == B) return sub;
  std::vector<std::size_t> idx(B, at.size());
  for (std::size_t i = 0; i < at.size(); ++i) idx[at[i]] = i;
  return numcore::gather_rows(numcore::concat_rows({sub, Tensor::zeros({1, d})}), idx);
}
}  // namespace detail

/// Encodes every present modality and fuses the four-token sequences.
inline FusedBatch fuse(const std::vector<const ModalBundle*>& bundles, const Encoders& enc, const FusionBackbone& fb) {
  if (bundles.empty()) throw EmptyInputError("fuse: empty batch");
  const std::size_t B = bundles.size(), G = kModalityCount, d = fb.d;
  for (const auto* b : bundles)
    if (b->present_count() == 0) throw EmptyInputError("fuse: bundle has no modality present");
  FusedBatch out;
  std::vector<Tensor> per_modality;
  for (std::size_t m = 0; m < G; ++m) {
    std::vector<const ModalBundle*> sub;
    std::vector<std::size_t> at;
    for (std::size_t i = 0; i < B; ++i)
      if (bundles[i]->present[m]) {
        sub.push_back(bundles[i]);
        at.push_back(i);
      }
    if (sub.empty()) {
      per_modality.push_back(Tensor::zeros({B, d}));
      continue;
    }
    Tensor e;
    switch (static_cast<Modality>(m)) {
      case Modality::price: e = encoders::encode_price_batch(enc, sub); break;
      case Modality::text: e = encoders::encode_text_batch(enc, sub); break;
      case Modality::macro: e = encoders::encode_macro_batch(enc, sub); break;
      case Modality::graph: e = encoders::encode_graph_batch(enc, sub).pooled; break;
    }
    out.embeddings[m] = detail::scatter_rows(e, at, B, d);
    per_modality.push_back(out.embeddings[m]);
  }
  // Modality-major rows -> sample-major groups of G.
  std::vector<std::size_t> order(B * G), types(B * G);
  std::vector<std::uint8_t> mask(B * G);
  bool all_present = true;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t m = 0; m < G; ++m) {
      order[i * G + m] = m * B + i;
      types[i * G + m] = m;
      mask[i * G + m] = bundles[i]->present[m] ? 1 : 0;
      all_present = all_present && mask[i * G + m];
    }
  const Tensor tokens = numcore::gather_rows(numcore::concat_rows(per_modality), order);
  auto [z, w] = fb.fuse_tokens(tokens, types, G, all_present ? std::vector<std::uint8_t>{} : mask);
  out.z = z;
  out.weights = w;
  return out;
}

inline FusedBatch fuse(const ModalBundle& bundle, const Encoders& enc, const FusionBackbone& fb) {
  return fuse(std::vector<const ModalBundle*>{&bundle}, enc, fb);
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// Cosine similarity of two nonzero vectors.
inline double similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw ContractError("similarity: degenerate input (zero vector)");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Pairwise cosine similarities [N x N] between rows of a and rows of b.
inline Tensor similarity_matrix(const Tensor& a, const Tensor& b) {
  return numcore::matmul(numcore::normalize_rows(a), numcore::transpose(numcore::normalize_rows(b)));
}

/// Symmetric InfoNCE over N positive pairs (row i of a with row i of b).
inline Tensor align_loss(const Tensor& a, const Tensor& b, const AlignConfig& cfg) {
  cfg.validate();
  if (a.rows() == 0) throw EmptyInputError("align_loss: empty batch");
  if (a.shape() != b.shape()) throw DimensionError("align_loss: paired embeddings must share shape");
  const std::size_t N = a.rows();
  std::vector<std::size_t> diag(N);
  for (std::size_t i = 0; i < N; ++i) diag[i] = i;
  const Tensor s = scale(similarity_matrix(a, b), 1.0 / cfg.temperature);
  return scale(add(numcore::cross_entropy(s, diag), numcore::cross_entropy(numcore::transpose(s), diag)), 0.5);
}

/// Mean align_loss over the configured modality pairs.
inline Tensor align_loss(const FusedBatch& f, const AlignConfig& cfg) {
  cfg.validate();
  std::vector<Tensor> terms;
  for (const auto& [m1, m2] : cfg.pairs) {
    const auto& a = f.embeddings[static_cast<std::size_t>(m1)];
    const auto& b = f.embeddings[static_cast<std::size_t>(m2)];
    if (!a.defined() || !b.defined())
      throw ContractError(std::string("align_loss: modality pair ") + to_string(m1) + "-" + to_string(m2) + " not encoded");
    terms.push_back(align_loss(a, b, cfg));
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace unifin::fusion
