#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unifin/errors.hpp"
#include "unifin/modal.hpp"
#include "unifin/numcore/ops.hpp"
#include "unifin/numcore/params.hpp"

namespace unifin::encoders {

using numcore::AttentionOptions;
using numcore::Linear;
using numcore::ParamStore;
using numcore::Shape;
using numcore::Tensor;

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn_mult = 2;
  std::size_t price_features = 12;
  std::size_t vocab_size = 64;
  std::size_t max_tokens = 512;
  /// Slot indices of each macro factor group.
  std::vector<std::vector<std::size_t>> macro_groups = {{0, 1}, {2, 3}, {4, 5}, {6, 7}};
  std::size_t macro_group_width = 16;
  std::size_t graph_features = 4;
  std::size_t graph_heads = 1;
  std::size_t graph_layers = 2;

  std::size_t macro_slots() const {
    std::size_t n = 0;
    for (const auto& g : macro_groups)
      for (auto s : g) n = std::max(n, s + 1);
    return n;
  }

  void validate() const {
    if (d_model == 0) throw ContractError("model.d_model must be positive");
    if (heads == 0 || d_model % heads != 0) throw ContractError("model.heads must divide model.d_model");
    if (graph_heads == 0 || d_model % graph_heads != 0) throw ContractError("model.graph_heads must divide model.d_model");
    if (layers == 0 || graph_layers == 0) throw ContractError("model.layers and model.graph_layers must be at least 1");
    if (macro_groups.empty()) throw ContractError("model.macro_groups must be nonempty");
    for (const auto& g : macro_groups)
      if (g.empty()) throw ContractError("model.macro_groups: empty group");
    if (vocab_size == 0 || max_tokens == 0) throw ContractError("model.vocab_size and model.max_tokens must be positive");
  }
};

/// Repeats a constant [L x d] block `times` times: [times*L x d].
inline Tensor tile_constant(const Tensor& block, std::size_t times) {
  const auto v = block.values();
  std::vector<double> out;
  out.reserve(v.size() * times);
  for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), v.begin(), v.end());
  return Tensor({block.rows() * times, block.cols()}, std::move(out));
}

// ---------------------------------------------------------------------------
// Transformer block (pre-norm, GELU feed-forward)
// ---------------------------------------------------------------------------

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Linear q, k, v, o, ff1, ff2;
  std::size_t heads = 1;

  static TransformerBlock create(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads,
                                 std::size_t ffn_mult) {
    TransformerBlock b;
    b.heads = heads;
    b.ln1_gain = ps.add_vector(name + ".ln1.g", d, 1.0);
    b.ln1_bias = ps.add_vector(name + ".ln1.b", d);
    b.q = Linear::create(ps, name + ".q", d, d);
    b.k = Linear::create(ps, name + ".k", d, d);
    b.v = Linear::create(ps, name + ".v", d, d);
    b.o = Linear::create(ps, name + ".o", d, d);
    b.ln2_gain = ps.add_vector(name + ".ln2.g", d, 1.0);
    b.ln2_bias = ps.add_vector(name + ".ln2.b", d);
    b.ff1 = Linear::create(ps, name + ".ff1", d, d * ffn_mult);
    b.ff2 = Linear::create(ps, name + ".ff2", d * ffn_mult, d);
    return b;
  }

  /// `opts.heads` is overridden by the block's head count.
  Tensor forward(const Tensor& x, AttentionOptions opts, std::vector<double>* weights = nullptr) const {
    opts.heads = heads;
    const Tensor n1 = numcore::layer_norm(x, ln1_gain, ln1_bias);
    auto att = numcore::grouped_attention(q(n1), k(n1), v(n1), opts);
    if (weights) *weights = std::move(att.weights);
    const Tensor h = add(x, o(att.output));
    const Tensor n2 = numcore::layer_norm(h, ln2_gain, ln2_bias);
    return add(h, ff2(numcore::gelu(ff1(n2))));
  }
};

/// Encoder output for a batch: one width-d row per sample.
struct Encoding {
  Tensor embedding;
  /// Attention probabilities of the last layer, [rows x heads x group].
  std::vector<double> attention;
};

// ---------------------------------------------------------------------------
// Price
// ---------------------------------------------------------------------------

struct PriceEncoder {
  Linear input;
  std::vector<TransformerBlock> blocks;
  Tensor out_gain, out_bias;
  std::size_t d = 0;

  static PriceEncoder create(ParamStore& ps, const std::string& name, const EncoderConfig& cfg) {
    PriceEncoder e;
    e.d = cfg.d_model;
    e.input = Linear::create(ps, name + ".in", cfg.price_features, cfg.d_model);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      e.blocks.push_back(TransformerBlock::create(ps, name + ".l" + std::to_string(l), cfg.d_model, cfg.heads, cfg.ffn_mult));
    e.out_gain = ps.add_vector(name + ".lnf.g", cfg.d_model, 1.0);
    e.out_bias = ps.add_vector(name + ".lnf.b", cfg.d_model);
    return e;
  }

  /// `x` is [B*T x F]: B windows of T consecutive steps, oldest first.
  Encoding encode(const Tensor& x, std::size_t T) const {
    if (T == 0 || x.rows() == 0) throw EmptyInputError("encode_price: empty window");
    if (x.cols() != input.weight.rows()) throw DimensionError("encode_price: feature width does not match parameters");
    if (x.rows() % T != 0) throw DimensionError("encode_price: rows not divisible by window length");
    const std::size_t B = x.rows() / T;
    Tensor h = add(input(x), tile_constant(numcore::sinusoidal_positions(T, d), B));
    AttentionOptions opts;
    opts.group = T;
    Encoding out;
    for (const auto& b : blocks) h = b.forward(h, opts, &out.attention);
    h = numcore::layer_norm(h, out_gain, out_bias);
    out.embedding = numcore::mean_groups(h, T);
    return out;
  }

  Encoding encode(const PriceWindow& w) const {
    w.validate();
    std::vector<double> flat;
    for (const auto& row : w.features) flat.insert(flat.end(), row.begin(), row.end());
    return encode(Tensor({w.features.size(), w.features[0].size()}, std::move(flat)), w.features.size());
  }
};

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

struct TextEncoder {
  Tensor embedding;
  std::vector<TransformerBlock> blocks;
  Tensor out_gain, out_bias;
  std::size_t d = 0;
  std::size_t max_tokens = 0;

  static TextEncoder create(ParamStore& ps, const std::string& name, const EncoderConfig& cfg) {
    TextEncoder e;
    e.d = cfg.d_model;
    e.max_tokens = cfg.max_tokens;
    e.embedding = ps.add_normal(name + ".emb", {cfg.vocab_size, cfg.d_model}, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    for (std::size_t l = 0; l < cfg.layers; ++l)
      e.blocks.push_back(TransformerBlock::create(ps, name + ".l" + std::to_string(l), cfg.d_model, cfg.heads, cfg.ffn_mult));
    e.out_gain = ps.add_vector(name + ".lnf.g", cfg.d_model, 1.0);
    e.out_bias = ps.add_vector(name + ".lnf.b", cfg.d_model);
    return e;
  }

  /// `ids` holds B sequences of length L back to back.
  Encoding encode(const std::vector<std::size_t>& ids, std::size_t L) const {
    if (L == 0 || ids.empty()) throw EmptyInputError("encode_text: empty token sequence");
    if (L > max_tokens) throw ContractError("encode_text: sequence longer than max_tokens");
    if (ids.size() % L != 0) throw DimensionError("encode_text: ids not divisible by sequence length");
    for (auto id : ids)
      if (id >= embedding.rows()) throw IndexError("encode_text: token id " + std::to_string(id) + " outside the vocabulary");
    const std::size_t B = ids.size() / L;
    Tensor h = add(numcore::gather_rows(embedding, ids), tile_constant(numcore::sinusoidal_positions(L, d), B));
    AttentionOptions opts;
    opts.group = L;
    Encoding out;
    for (const auto& b : blocks) h = b.forward(h, opts, &out.attention);
    h = numcore::layer_norm(h, out_gain, out_bias);
    out.embedding = numcore::mean_groups(h, L);
    return out;
  }

  Encoding encode(const TokenSequence& s) const { return encode(s.ids, s.ids.size()); }
};

// ---------------------------------------------------------------------------
// Macro (factor-group attention gate + MLP)
// ---------------------------------------------------------------------------

struct MacroEncoding {
  Tensor embedding;      ///< [B x d]
  Tensor group_weights;  ///< [B x G], rows sum to 1
  Tensor hidden_pre;     ///< first MLP layer pre-activation [B x d]
};

struct MacroEncoder {
  std::vector<std::vector<std::size_t>> groups;
  std::vector<Linear> group_proj;
  std::vector<Tensor> gate_vec;  ///< [width x 1] per group
  Tensor gate_bias;              ///< [G]
  Linear mlp1, mlp2;
  std::size_t slots = 0;

  static MacroEncoder create(ParamStore& ps, const std::string& name, const EncoderConfig& cfg) {
    MacroEncoder e;
    e.groups = cfg.macro_groups;
    e.slots = cfg.macro_slots();
    const std::size_t w = cfg.macro_group_width;
    for (std::size_t g = 0; g < e.groups.size(); ++g) {
      const auto gs = std::to_string(g);
      e.group_proj.push_back(Linear::create(ps, name + ".g" + gs, e.groups[g].size(), w));
      e.gate_vec.push_back(ps.add_matrix(name + ".gate" + gs, w, 1));
    }
    e.gate_bias = ps.add_vector(name + ".gate.b", e.groups.size());
    e.mlp1 = Linear::create(ps, name + ".mlp1", w * e.groups.size(), cfg.d_model);
    e.mlp2 = Linear::create(ps, name + ".mlp2", cfg.d_model, cfg.d_model);
    return e;
  }

  /// `x` is [B x M] with every slot resolved.
  MacroEncoding encode(const Tensor& x) const {
    if (x.cols() != slots) throw DimensionError("encode_macro: slot count does not match parameters");
    const std::size_t B = x.rows(), G = groups.size();
    std::vector<Tensor> emb, logits;
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<Tensor> cols;
      for (auto s : groups[g]) cols.push_back(numcore::slice_cols(x, s, 1));
      const Tensor e = numcore::tanh(group_proj[g](numcore::concat_cols(cols)));
      emb.push_back(e);
      logits.push_back(numcore::matmul(e, gate_vec[g]));
    }
    MacroEncoding out;
    out.group_weights = numcore::softmax(add(numcore::concat_cols(logits), gate_bias));
    std::vector<Tensor> scaled;
    for (std::size_t g = 0; g < G; ++g)
      scaled.push_back(numcore::scale_rows(emb[g], reshape(numcore::slice_cols(out.group_weights, g, 1), {B})));
    out.hidden_pre = mlp1(numcore::concat_cols(scaled));
    out.embedding = mlp2(numcore::gelu(out.hidden_pre));
    return out;
  }

  MacroEncoding encode(const MacroVector& m) const {
    check_resolved(m.values);
    return encode(Tensor({1, m.values.size()}, m.values));
  }

  void check_resolved(const std::vector<double>& v) const {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw ContractError("encode_macro: slot " + std::to_string(i % std::max<std::size_t>(slots, 1)) +
                            " is missing; impute before encoding");
  }
};

// ---------------------------------------------------------------------------
// Graph attention
// ---------------------------------------------------------------------------

/// Self-loop-augmented neighbourhood mask for B graphs of N nodes; an edge
/// i -> j exists where adjacency[i][j] > 0.
inline std::vector<std::uint8_t> neighbourhood_mask(const std::vector<const std::vector<double>*>& adjacency, std::size_t N) {
  std::vector<std::uint8_t> m(adjacency.size() * N * N, 0);
  for (std::size_t b = 0; b < adjacency.size(); ++b) {
    if (adjacency[b]->size() != N * N) throw DimensionError("graph attention: adjacency is not N x N");
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) m[(b * N + i) * N + j] = (i == j || (*adjacency[b])[i * N + j] > 0.0) ? 1 : 0;
  }
  return m;
}

/// One multi-head additive graph-attention layer (heads concatenated).
struct GATLayer {
  std::vector<Tensor> weight;  ///< [in x d/H] per head
  std::vector<Tensor> a_src;   ///< [d/H x 1]
  std::vector<Tensor> a_dst;
  Tensor bias;

  static GATLayer create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t heads) {
    GATLayer l;
    const std::size_t dh = out / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto hs = std::to_string(h);
      l.weight.push_back(ps.add_matrix(name + ".w" + hs, in, dh));
      l.a_src.push_back(ps.add_matrix(name + ".as" + hs, dh, 1));
      l.a_dst.push_back(ps.add_matrix(name + ".ad" + hs, dh, 1));
    }
    l.bias = ps.add_vector(name + ".b", out);
    return l;
  }

  /// Pre-activation output; `weights` receives one coefficient table per head.
  Tensor forward(const Tensor& x, const std::vector<std::uint8_t>& mask, std::size_t N,
                 std::vector<std::vector<double>>* weights = nullptr) const {
    const std::size_t R = x.rows();
    std::vector<Tensor> parts;
    if (weights) weights->clear();
    for (std::size_t h = 0; h < weight.size(); ++h) {
      const Tensor z = numcore::matmul(x, weight[h]);
      auto r = numcore::block_graph_attention(z, reshape(numcore::matmul(z, a_src[h]), {R}),
                                              reshape(numcore::matmul(z, a_dst[h]), {R}), mask, N);
      if (weights) weights->push_back(std::move(r.weights));
      parts.push_back(r.output);
    }
    return add(parts.size() == 1 ? parts[0] : numcore::concat_cols(parts), bias);
  }
};

struct GraphEncoding {
  Tensor nodes;   ///< [B*N x d]
  Tensor pooled;  ///< [B x d]
  /// Coefficients per layer, per head: [B*N x N].
  std::vector<std::vector<std::vector<double>>> coefficients;
};

struct GraphEncoder {
  std::vector<GATLayer> layers;
  std::size_t features = 0;

  static GraphEncoder create(ParamStore& ps, const std::string& name, const EncoderConfig& cfg) {
    GraphEncoder e;
    e.features = cfg.graph_features;
    for (std::size_t l = 0; l < cfg.graph_layers; ++l)
      e.layers.push_back(GATLayer::create(ps, name + ".l" + std::to_string(l), l == 0 ? cfg.graph_features : cfg.d_model,
                                          cfg.d_model, cfg.graph_heads));
    return e;
  }

  /// `x` is [B*N x F]; `mask` from neighbourhood_mask.
  GraphEncoding encode(const Tensor& x, const std::vector<std::uint8_t>& mask, std::size_t N) const {
    if (N == 0 || x.rows() == 0) throw EmptyInputError("encode_graph: empty graph");
    if (x.cols() != features) throw DimensionError("encode_graph: node feature width does not match parameters");
    GraphEncoding out;
    Tensor h = x;
    for (const auto& l : layers) {
      out.coefficients.emplace_back();
      h = numcore::elu(l.forward(h, mask, N, &out.coefficients.back()));
    }
    out.nodes = h;
    out.pooled = numcore::mean_groups(h, N);
    return out;
  }

  GraphEncoding encode(const FinancialGraph& g) const {
    g.validate();
    if (g.nodes == 0) throw EmptyInputError("encode_graph: empty graph");
    if (g.feature_width() != features) throw DimensionError("encode_graph: node feature width does not match parameters");
    return encode(Tensor({g.nodes, features}, g.features), neighbourhood_mask({&g.adjacency}, g.nodes), g.nodes);
  }
};

// ---------------------------------------------------------------------------
// All four encoders
// ---------------------------------------------------------------------------

struct Encoders {
  PriceEncoder price;
  TextEncoder text;
  MacroEncoder macro;
  GraphEncoder graph;

  static Encoders create(ParamStore& ps, const EncoderConfig& cfg) {
    cfg.validate();
    return {PriceEncoder::create(ps, "enc.price", cfg), TextEncoder::create(ps, "enc.text", cfg),
            MacroEncoder::create(ps, "enc.macro", cfg), GraphEncoder::create(ps, "enc.graph", cfg)};
  }
};

/// Batched encoders over a set of bundles; each returns [B x d].
inline Tensor encode_price_batch(const Encoders& e, const std::vector<const ModalBundle*>& bs) {
  const std::size_t T = bs.at(0)->price.length();
  std::vector<double> flat;
  std::size_t F = 0;
  for (const auto* b : bs) {
    if (b->price.length() != T) throw DimensionError("encode_price: windows in a batch must share T");
    b->price.validate();
    for (const auto& row : b->price.features) {
      F = row.size();
      flat.insert(flat.end(), row.begin(), row.end());
    }
  }
  return e.price.encode(Tensor({bs.size() * T, F}, std::move(flat)), T).embedding;
}

inline Tensor encode_text_batch(const Encoders& e, const std::vector<const ModalBundle*>& bs) {
  const std::size_t L = bs.at(0)->text.ids.size();
  bool same = true;
  for (const auto* b : bs) same = same && b->text.ids.size() == L;
  if (!same) {
    std::vector<Tensor> rows;
    for (const auto* b : bs) rows.push_back(e.text.encode(b->text).embedding);
    return numcore::concat_rows(rows);
  }
  std::vector<std::size_t> ids;
  for (const auto* b : bs) ids.insert(ids.end(), b->text.ids.begin(), b->text.ids.end());
  return e.text.encode(ids, L).embedding;
}

inline Tensor encode_macro_batch(const Encoders& e, const std::vector<const ModalBundle*>& bs) {
  std::vector<double> flat;
  for (const auto* b : bs) {
    if (b->macro.values.size() != e.macro.slots) throw DimensionError("encode_macro: slot count does not match parameters");
    e.macro.check_resolved(b->macro.values);
    flat.insert(flat.end(), b->macro.values.begin(), b->macro.values.end());
  }
  return e.macro.encode(Tensor({bs.size(), e.macro.slots}, std::move(flat))).embedding;
}

inline GraphEncoding encode_graph_batch(const Encoders& e, const std::vector<const ModalBundle*>& bs) {
  const std::size_t N = bs.at(0)->graph.nodes;
  std::vector<double> flat;
  std::vector<const std::vector<double>*> adj;
  for (const auto* b : bs) {
    if (b->graph.nodes != N) throw DimensionError("encode_graph: graphs in a batch must share N");
    b->graph.validate();
    if (b->graph.feature_width() != e.graph.features) throw DimensionError("encode_graph: node feature width does not match parameters");
    flat.insert(flat.end(), b->graph.features.begin(), b->graph.features.end());
    adj.push_back(&b->graph.adjacency);
  }
  return e.graph.encode(Tensor({bs.size() * N, e.graph.features}, std::move(flat)), neighbourhood_mask(adj, N), N);
}

}  // namespace unifin::encoders
