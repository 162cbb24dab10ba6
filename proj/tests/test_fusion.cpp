#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "unifin/fusion.hpp"
#include "unifin/numcore/grad_check.hpp"

using namespace unifin;
using namespace unifin::fusion;
using namespace unifin::numcore;
using Catch::Approx;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double s = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, s);
  std::vector<double> v(r * c);
  for (auto& x : v) x = nd(rng);
  return Tensor({r, c}, std::move(v));
}

encoders::EncoderConfig small_config() {
  encoders::EncoderConfig c;
  c.d_model = 8;
  c.layers = 1;
  c.macro_group_width = 4;
  c.graph_layers = 1;
  return c;
}

ModalBundle random_bundle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, 63);
  ModalBundle b;
  const auto p = random_matrix(4, 12, seed).to_vector();
  for (std::size_t t = 0; t < 4; ++t) b.price.features.emplace_back(p.begin() + static_cast<long>(t * 12), p.begin() + static_cast<long>(t * 12 + 12));
  for (int i = 0; i < 5; ++i) b.text.ids.push_back(tok(rng));
  b.macro.values = random_matrix(1, 8, seed + 1).to_vector();
  b.graph.nodes = 3;
  b.graph.features = random_matrix(3, 4, seed + 2).to_vector();
  b.graph.adjacency = {0, 1, 0, 1, 0, 1, 0, 0.5, 0};
  return b;
}

}  // namespace

TEST_CASE("cosine similarity", "[fusion][similarity]") {
  const std::vector<double> v = {0.3, -2.0, 1.5};
  CHECK(similarity(v, v) == Approx(1.0).margin(1e-15));
  CHECK(similarity(v, {-0.3, 2.0, -1.5}) == Approx(-1.0).margin(1e-15));
  CHECK(similarity({1, 0}, {0, 1}) == 0.0);
  CHECK_THROWS_AS(similarity({0, 0}, {1, 0}), ContractError);
  CHECK_THROWS_AS(similarity({1}, {1, 0}), DimensionError);
}

TEST_CASE("align loss", "[fusion][align]") {
  AlignConfig cfg;
  SECTION("single pair is exactly zero") {
    CHECK(align_loss(random_matrix(1, 4, 1), random_matrix(1, 4, 2), cfg).item() == 0.0);
  }
  SECTION("two orthogonal pairs at temperature one") {
    cfg.temperature = 1.0;
    const Tensor a = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(align_loss(a, a, cfg).item() == Approx(expect).margin(1e-12));
    CHECK(std::abs(expect - 0.3133) < 1e-4);
  }
  SECTION("direct-formula oracle, nonnegativity and permutation invariance") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const Tensor a = random_matrix(5, 6, s), b = random_matrix(5, 6, s + 100);
      const double got = align_loss(a, b, cfg).item();
      CHECK(got >= 0.0);
      // Oracle from value-level cosine similarity.
      auto row = [](const Tensor& t, std::size_t i) {
        std::vector<double> r(t.cols());
        for (std::size_t c = 0; c < t.cols(); ++c) r[c] = t.at(i, c);
        return r;
      };
      double oracle = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        double zr = 0.0, zc = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          zr += std::exp(similarity(row(a, i), row(b, j)) / cfg.temperature);
          zc += std::exp(similarity(row(a, j), row(b, i)) / cfg.temperature);
        }
        const double pos = similarity(row(a, i), row(b, i)) / cfg.temperature;
        oracle += 0.5 * ((std::log(zr) - pos) + (std::log(zc) - pos)) / 5.0;
      }
      CHECK(got == Approx(oracle).epsilon(1e-12));
      // Reordering the pairs permutes negatives only.
      const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
      CHECK(align_loss(gather_rows(a, perm), gather_rows(b, perm), cfg).item() == Approx(got).epsilon(1e-12));
      // A common rotation preserves every cosine similarity.
      const double th = 0.7;
      std::vector<double> rot(36, 0.0);
      for (std::size_t i = 0; i < 6; ++i) rot[i * 6 + i] = 1.0;
      rot[0] = std::cos(th), rot[1] = -std::sin(th), rot[6] = std::sin(th), rot[7] = std::cos(th);
      const Tensor R({6, 6}, rot);
      CHECK(align_loss(matmul(a, R), matmul(b, R), cfg).item() == Approx(got).epsilon(1e-10));
    }
  }
  SECTION("raising a positive similarity lowers the loss") {
    const Tensor a = random_matrix(4, 3, 9), b = random_matrix(4, 3, 10);
    auto bv = b.to_vector();
    const double before = align_loss(a, b, cfg).item();
    for (std::size_t c = 0; c < 3; ++c) bv[c] = a.at(0, c);  // pair 0 becomes identical
    CHECK(align_loss(a, Tensor({4, 3}, bv), cfg).item() < before);
  }
  SECTION("errors and gradients") {
    CHECK_THROWS_AS(align_loss(Tensor::zeros({0, 3}), Tensor::zeros({0, 3}), cfg), EmptyInputError);
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(align_loss(random_matrix(2, 3, 1), random_matrix(2, 3, 2), cfg), ContractError);
    cfg.temperature = 0.5;
    Tensor a(random_matrix(3, 4, 3).shape(), random_matrix(3, 4, 3).to_vector(), true);
    Tensor b(random_matrix(3, 4, 4).shape(), random_matrix(3, 4, 4).to_vector(), true);
    CHECK(grad_check([&] { return align_loss(a, b, cfg); }, {a, b}) < 1e-4);
  }
}

TEST_CASE("fusion backbone", "[fusion][fuse]") {
  ParamStore ps(11);
  const auto cfg = small_config();
  const auto enc = encoders::Encoders::create(ps, cfg);
  const auto fb = FusionBackbone::create(ps, 8, FusionConfig{});

  SECTION("pooling weights over present modalities sum to one") {
    std::vector<ModalBundle> bs;
    for (std::uint64_t s = 0; s < 6; ++s) bs.push_back(random_bundle(s));
    bs[1].present = {true, false, true, false};
    bs[4].present = {false, false, false, true};
    std::vector<const ModalBundle*> ptr;
    for (auto& b : bs) ptr.push_back(&b);
    const auto f = fuse(ptr, enc, fb);
    CHECK(f.z.shape() == Shape{6, 8});
    for (std::size_t i = 0; i < 6; ++i) {
      double total = 0.0;
      for (std::size_t m = 0; m < 4; ++m) {
        total += f.weights.at(i, m);
        if (!bs[i].present[m]) CHECK(f.weights.at(i, m) == 0.0);
      }
      CHECK(total == Approx(1.0).margin(1e-12));
    }
  }
  SECTION("masking a modality equals removing it") {
    for (std::uint64_t s = 0; s < 8; ++s) {
      ModalBundle b = random_bundle(s);
      b.present = {s % 2 == 0, true, s % 3 == 0, s % 4 != 1};
      const auto masked = fuse(b, enc, fb);
      // Physical removal: only present tokens, no mask.
      std::vector<Tensor> rows;
      std::vector<std::size_t> types;
      const std::vector<const ModalBundle*> one = {&b};
      if (b.present[0]) rows.push_back(encoders::encode_price_batch(enc, one)), types.push_back(0);
      if (b.present[1]) rows.push_back(encoders::encode_text_batch(enc, one)), types.push_back(1);
      if (b.present[2]) rows.push_back(encoders::encode_macro_batch(enc, one)), types.push_back(2);
      if (b.present[3]) rows.push_back(encoders::encode_graph_batch(enc, one).pooled), types.push_back(3);
      const auto [z, w] = fb.fuse_tokens(concat_rows(rows), types, rows.size());
      for (std::size_t c = 0; c < 8; ++c) CHECK(masked.z[c] == Approx(z[c]).margin(1e-12));
    }
  }
  SECTION("single present modality depends on that embedding alone") {
    ModalBundle a = random_bundle(1), b = random_bundle(2);
    a.present = b.present = {false, true, false, false};
    b.text = a.text;
    CHECK(fuse(a, enc, fb).z.to_vector() == fuse(b, enc, fb).z.to_vector());
  }
  SECTION("token order does not matter without type embeddings") {
    for (auto& x : ps.get("fusion.type").mutable_values()) x = 0.0;
    const Tensor toks = random_matrix(4, 8, 5);
    const auto [z1, w1] = fb.fuse_tokens(toks, {0, 1, 2, 3}, 4);
    const auto [z2, w2] = fb.fuse_tokens(gather_rows(toks, {2, 0, 3, 1}), {2, 0, 3, 1}, 4);
    for (std::size_t c = 0; c < 8; ++c) CHECK(z1[c] == Approx(z2[c]).margin(1e-12));
    CHECK(w2[0] == Approx(w1[2]).margin(1e-14));
  }
  SECTION("empty bundle is an error") {
    ModalBundle b = random_bundle(3);
    b.present = {false, false, false, false};
    CHECK_THROWS_AS(fuse(b, enc, fb), EmptyInputError);
  }
  SECTION("end-to-end gradient through encoders and fusion") {
    std::vector<ModalBundle> bs = {random_bundle(7), random_bundle(8)};
    bs[1].present = {true, true, false, true};
    const std::vector<const ModalBundle*> ptr = {&bs[0], &bs[1]};
    const Tensor probe = random_matrix(2, 8, 3);
    AlignConfig ac;
    ac.temperature = 0.5;
    auto loss = [&] {
      const auto f = fuse(ptr, enc, fb);
      return add(sum(mul(f.z, probe)), align_loss(f, ac));
    };
    CHECK(grad_check(loss, ps.tensors()) < 1e-3);
  }
}
