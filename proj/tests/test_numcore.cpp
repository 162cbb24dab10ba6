#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "unifin/numcore/grad_check.hpp"
#include "unifin/numcore/ops.hpp"
#include "unifin/numcore/params.hpp"

using namespace unifin;
using namespace unifin::numcore;
using Catch::Approx;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul examples", "[numcore][matmul]") {
  Tensor I = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor M = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(matmul(I, M).to_vector() == std::vector<double>{1, 2, 3, 4});

  Tensor row = Tensor::matrix(1, 2, {1, 2});
  Tensor col = Tensor::matrix(2, 1, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);

  Tensor Z = Tensor::zeros({3, 2});
  const Tensor ZM = matmul(Z, M);
  for (double v : ZM.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(M, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("softmax examples and properties", "[numcore][softmax]") {
  auto s = softmax(Tensor::vector({0, 0, 0}));
  for (double v : s.values()) CHECK(v == Approx(1.0 / 3.0).margin(1e-15));

  auto big = softmax(Tensor::vector({1000, 0}));
  CHECK(big[0] == Approx(1.0).margin(1e-12));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  auto l2 = softmax(Tensor::vector({std::log(2.0), 0.0}));
  CHECK(l2[0] == Approx(2.0 / 3.0).margin(1e-15));
  CHECK(l2[1] == Approx(1.0 / 3.0).margin(1e-15));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({4, 6}, seed, 3.0);
    auto y = softmax(x);
    auto shifted = softmax(add_scalar(x, 17.5));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        total += y.at(r, c);
        CHECK(y.at(r, c) == Approx(shifted.at(r, c)).margin(1e-12));
      }
      CHECK(total == Approx(1.0).margin(1e-6));
    }
  }

  SECTION("axis 0 normalizes columns") {
    Tensor x = random_tensor({3, 2}, 5);
    auto y = softmax(x, 0);
    for (std::size_t c = 0; c < 2; ++c) CHECK(y.at(0, c) + y.at(1, c) + y.at(2, c) == Approx(1.0));
  }
}

TEST_CASE("layer_norm examples", "[numcore][layer_norm]") {
  Tensor one = Tensor::vector({1, 1, 1});
  Tensor zero = Tensor::vector({0, 0, 0});
  auto c = layer_norm(Tensor::vector({4, 4, 4}), one, zero, 1e-5);
  for (double v : c.values()) CHECK(v == 0.0);

  auto pm = layer_norm(Tensor::vector({1, -1}), Tensor::vector({1, 1}), Tensor::vector({0, 0}), 0.0);
  CHECK(pm[0] == Approx(1.0).margin(1e-12));
  CHECK(pm[1] == Approx(-1.0).margin(1e-12));

  auto b = layer_norm(random_tensor({2, 3}, 3), zero, Tensor::vector({0.5, 0.5, 0.5}));
  for (double v : b.values()) CHECK(v == 0.5);
}

TEST_CASE("cross_entropy examples", "[numcore][cross_entropy]") {
  CHECK(cross_entropy(Tensor::matrix(1, 3, {50, 0, 0}), {0}).item() == Approx(0.0).margin(1e-12));
  CHECK(cross_entropy(Tensor::matrix(1, 4, {0.3, 0.3, 0.3, 0.3}), {2}).item() == Approx(std::log(4.0)).margin(1e-12));
  CHECK(cross_entropy(Tensor::matrix(1, 2, {0, 0}), {0}).item() == Approx(0.6931471805599453).margin(1e-12));
  CHECK_THROWS_AS(cross_entropy(Tensor::matrix(1, 2, {0, 0}), {2}), IndexError);
}

TEST_CASE("backward examples", "[numcore][backward]") {
  SECTION("x^2 at 3 gives 6") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = square(x);
    backward(loss, tape);
    CHECK(x.grad()[0] == 6.0);
  }
  SECTION("repeated backward accumulates") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = square(x);
    backward(loss, tape);
    backward(loss, tape);
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    backward(loss, tape);
    CHECK(x.grad()[0] == 6.0);
  }
  SECTION("sum(AB) matches closed form and finite differences") {
    Tensor A(Shape{2, 3}, random_tensor({2, 3}, 1).to_vector(), true);
    Tensor B(Shape{3, 2}, random_tensor({3, 2}, 2).to_vector(), true);
    Tape tape;
    {
      Tape::Scope scope(tape);
      backward(sum(matmul(A, B)), tape);
    }
    // d/dA_ik = sum_j B_kj ; d/dB_kj = sum_i A_ik
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 3; ++k) CHECK(A.grad()[i * 3 + k] == Approx(B.at(k, 0) + B.at(k, 1)));
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < 2; ++j) CHECK(B.grad()[k * 2 + j] == Approx(A.at(0, k) + A.at(1, k)));
    CHECK(grad_check([&] { return sum(matmul(A, B)); }, {A, B}, 1e-4) < 1e-6);
  }
  SECTION("detached loss leaves grad at zero") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = Tensor::scalar(5.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    backward(square(y), tape);
    CHECK(x.grad()[0] == 0.0);
  }
  SECTION("non-scalar loss is rejected") {
    Tensor x = Tensor::vector({1, 2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    CHECK_THROWS_AS(backward(square(x), tape), ContractError);
  }
}

TEST_CASE("tape records in topological order", "[numcore][tape]") {
  Tensor x = Tensor::scalar(1.5, true);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor a = exp(x);
  Tensor b = mul(a, x);
  Tensor c = sum(b);
  CHECK(tape.size() == 3);
  backward(c, tape);
  // d/dx x e^x = e^x (1 + x)
  CHECK(x.grad()[0] == Approx(std::exp(1.5) * 2.5));
}

TEST_CASE("non-finite values are errors", "[numcore][numeric]") {
  CHECK_THROWS_AS(log(Tensor::vector({-1.0})), NumericError);
  CHECK_THROWS_AS(exp(Tensor::vector({1000.0})), NumericError);
  CHECK_THROWS_AS(Tensor::vector({std::nan("")}), NumericError);
}

TEST_CASE("grad_check examples", "[numcore][grad_check]") {
  Tensor x = random_tensor({5}, 11);
  CHECK(grad_check([](const Tensor& t) { return sum(square(t)); }, x) < 1e-6);

  Tensor logits = random_tensor({3, 4}, 12);
  CHECK(grad_check([](const Tensor& t) { return cross_entropy(log(softmax(t)), {0, 3, 1}); }, logits) < 1e-4);
}

TEST_CASE("every differentiable op agrees with central differences", "[numcore][grad_check][property]") {
  using F = std::function<Tensor(const Tensor&)>;
  const Tensor w = random_tensor({4, 3}, 99);
  const Tensor row = random_tensor({3}, 98);
  const std::vector<std::pair<const char*, F>> cases = {
      {"matmul", [&](const Tensor& t) { return sum(square(matmul(reshape(t, {3, 4}), w))); }},
      {"matmul_rhs", [&](const Tensor& t) { return sum(square(matmul(transpose(reshape(t, {4, 3})), reshape(t, {4, 3})))); }},
      {"add_broadcast", [&](const Tensor& t) { return sum(square(add(reshape(t, {4, 3}), row))); }},
      {"mul", [&](const Tensor& t) { return sum(mul(t, t)); }},
      {"sub", [&](const Tensor& t) { return sum(square(sub(t, scale(t, 0.3)))); }},
      {"scale_rows", [&](const Tensor& t) { return sum(square(scale_rows(reshape(t, {4, 3}), slice_cols(reshape(t, {4, 3}), 0, 1)))); }},
      {"tanh", [](const Tensor& t) { return sum(tanh(t)); }},
      {"sigmoid", [](const Tensor& t) { return sum(square(sigmoid(t))); }},
      {"gelu", [](const Tensor& t) { return sum(gelu(t)); }},
      {"elu", [](const Tensor& t) { return sum(square(elu(t))); }},
      {"exp_log", [](const Tensor& t) { return sum(log(add_scalar(exp(t), 1.0))); }},
      {"softmax", [&](const Tensor& t) { return sum(mul(softmax(reshape(t, {4, 3})), reshape(w, {4, 3}))); }},
      {"softmax_axis0", [&](const Tensor& t) { return sum(mul(softmax(reshape(t, {4, 3}), 0), w)); }},
      {"log_softmax", [&](const Tensor& t) { return sum(mul(log_softmax(reshape(t, {4, 3})), w)); }},
      {"layer_norm", [&](const Tensor& t) { return sum(mul(layer_norm(reshape(t, {4, 3}), row, row), w)); }},
      {"normalize_rows", [&](const Tensor& t) { return sum(mul(normalize_rows(reshape(t, {4, 3})), w)); }},
      {"cross_entropy", [](const Tensor& t) { return cross_entropy(reshape(t, {4, 3}), {0, 1, 2, 1}); }},
      {"bce", [](const Tensor& t) { return binary_cross_entropy(sigmoid(t), std::vector<double>(12, 0.3)); }},
      {"row_sum", [](const Tensor& t) { return sum(square(row_sum(reshape(t, {4, 3})))); }},
      {"mean_groups", [](const Tensor& t) { return sum(square(mean_groups(reshape(t, {4, 3}), 2))); }},
      {"gather", [](const Tensor& t) { return sum(square(gather_rows(reshape(t, {4, 3}), {3, 0, 3}))); }},
      {"slices", [](const Tensor& t) { return sum(mul(slice_rows(reshape(t, {4, 3}), 1, 2), slice_cols(reshape(t, {2, 6}), 2, 3))); }},
      {"concat", [](const Tensor& t) { return sum(square(concat_cols({concat_rows({t, t}), concat_rows({square(t), t})}))); }},
      {"repeat_rows", [](const Tensor& t) { return sum(square(repeat_rows(reshape(t, {4, 3}), 3))); }},
      {"outer_add", [](const Tensor& t) { return sum(square(outer_add(slice_rows(reshape(t, {12, 1}), 0, 5), slice_rows(reshape(t, {12, 1}), 5, 7)))); }},
      {"masked_softmax", [&](const Tensor& t) {
         std::vector<std::uint8_t> m = {1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 1};
         return sum(mul(masked_softmax(reshape(t, {4, 3}), m), w));
       }},
  };
  for (const auto& [name, f] : cases) {
    INFO(name);
    for (std::uint64_t seed = 0; seed < 3; ++seed) CHECK(grad_check(f, random_tensor({12}, 1000 + seed)) < 1e-4);
  }
}

TEST_CASE("grouped attention gradients and masks", "[numcore][attention]") {
  const Tensor wq = random_tensor({12}, 7);
  for (bool causal : {false, true}) {
    AttentionOptions opts;
    opts.group = 3;
    opts.heads = 2;
    opts.causal = causal;
    opts.key_mask = {1, 0, 1, 1, 1, 1};
    auto f = [&](const Tensor& t) {
      Tensor x = reshape(t, {6, 4});
      auto r = grouped_attention(x, scale(square(x), 0.7), tanh(x), opts);
      return sum(mul(square(r.output), reshape(concat_rows({wq, wq}), {6, 4})));
    };
    INFO("causal=" << causal);
    CHECK(grad_check(f, random_tensor({24}, 31)) < 1e-4);
  }

  SECTION("singleton group attends with weight one") {
    AttentionOptions opts;
    opts.group = 1;
    Tensor x = random_tensor({3, 4}, 3);
    auto r = grouped_attention(x, x, x, opts);
    for (double p : r.weights) CHECK(p == 1.0);
    CHECK(r.output.to_vector() == x.to_vector());
  }
  SECTION("masked key receives zero weight") {
    AttentionOptions opts;
    opts.group = 2;
    opts.key_mask = {1, 0};
    Tensor x = random_tensor({2, 2}, 4);
    auto r = grouped_attention(x, x, x, opts);
    CHECK(r.weights[1] == 0.0);
    CHECK(r.weights[3] == 0.0);
  }
}

TEST_CASE("block graph attention", "[numcore][attention]") {
  // Two blocks of three nodes; node 2 of block 0 only sees itself.
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1, 0, 0, 1,  //
                                          1, 0, 1, 0, 1, 1, 1, 1, 1};
  const Tensor wq = random_tensor({6, 4}, 17);
  auto f = [&](const Tensor& t) {
    Tensor h = reshape(t, {6, 4});
    Tensor src = reshape(slice_cols(h, 0, 1), {6});
    Tensor dst = reshape(tanh(slice_cols(h, 1, 1)), {6});
    auto r = block_graph_attention(scale(h, 1.3), src, dst, mask, 3);
    return sum(mul(square(r.output), wq));
  };
  CHECK(grad_check(f, random_tensor({24}, 5)) < 1e-4);

  Tensor h = random_tensor({6, 4}, 9);
  Tensor src = random_tensor({6}, 10), dst = random_tensor({6}, 11);
  auto r = block_graph_attention(h, src, dst, mask, 3);
  // Dense oracle: leaky-relu scores, masked softmax per node.
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> e(3, 0.0);
      double z = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        if (!mask[(b * 3 + i) * 3 + j]) continue;
        const double x = src[b * 3 + i] + dst[b * 3 + j];
        z += e[j] = std::exp(x > 0 ? x : 0.2 * x);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(r.weights[(b * 3 + i) * 3 + j] == Approx(e[j] / z).margin(1e-14));
        total += r.weights[(b * 3 + i) * 3 + j];
      }
      CHECK(total == Approx(1.0).margin(1e-12));
      for (std::size_t c = 0; c < 4; ++c) {
        double o = 0.0;
        for (std::size_t j = 0; j < 3; ++j) o += e[j] / z * h.at(b * 3 + j, c);
        CHECK(r.output.at(b * 3 + i, c) == Approx(o).margin(1e-12));
      }
    }
  CHECK(r.weights[8] == 1.0);
  CHECK_THROWS_AS(block_graph_attention(h, src, dst, std::vector<std::uint8_t>(18, 0), 3), ContractError);
  CHECK_THROWS_AS(block_graph_attention(h, src, dst, mask, 4), DimensionError);
}

TEST_CASE("chain rule composes", "[numcore][property]") {
  // d/dx tanh(x^2) = (1 - tanh(x^2)^2) 2x, computed from the individual rules.
  for (double x0 : {-1.3, 0.2, 0.9}) {
    Tensor x = Tensor::scalar(x0, true);
    Tape tape;
    Tape::Scope scope(tape);
    backward(tanh(square(x)), tape);
    const double t = std::tanh(x0 * x0);
    CHECK(x.grad()[0] == Approx((1 - t * t) * 2 * x0).margin(1e-14));
  }
}

TEST_CASE("operations are deterministic", "[numcore][property]") {
  Tensor x = random_tensor({5, 4}, 8);
  Tensor w = random_tensor({4, 4}, 9);
  auto a = softmax(matmul(x, w)).to_vector();
  auto b = softmax(matmul(x, w)).to_vector();
  CHECK(a == b);
}
