#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "unifin/numcore/tensor.hpp"

namespace unifin::numcore {

using detail::in_grad;
using detail::in_value;
using detail::Node;
using detail::wants_grad;

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto A = a.values();
  const auto B = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& G = self.grad;
    const auto& Av = in_value(self, 0);
    const auto& Bv = in_value(self, 1);
    if (wants_grad(self, 0)) {
      auto& gA = in_grad(self, 0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * Bv[p * n + j];
          gA[i * k + p] += s;
        }
    }
    if (wants_grad(self, 1)) {
      auto& gB = in_grad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = Av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a 2-D tensor");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.values()[i * c + j];
  return make_op("transpose", {c, r}, std::move(out), {x}, [r, c](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_op("reshape", std::move(shape), x.to_vector(), {x}, [](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary with trailing-dimension broadcast: `b`'s shape must equal
// `a`'s shape or a suffix of it (a scalar is the empty suffix).
// ---------------------------------------------------------------------------

namespace detail {
inline void check_suffix(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok && b.size() == 1) ok = true;
  if (!ok)
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

template <class F, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  check_suffix(a, b, name);
  const std::size_t n = a.size(), nb = b.size();
  std::vector<double> out(n);
  const auto A = a.values();
  const auto B = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i], B[i % nb]);
  return make_op(name, a.shape(), std::move(out), {a, b}, [n, nb, da, db](Node& self) {
    const auto& Av = in_value(self, 0);
    const auto& Bv = in_value(self, 1);
    if (wants_grad(self, 0)) {
      auto& g = in_grad(self, 0);
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * da(Av[i], Bv[i % nb]);
    }
    if (wants_grad(self, 1)) {
      auto& g = in_grad(self, 1);
      for (std::size_t i = 0; i < n; ++i) g[i % nb] += self.grad[i] * db(Av[i], Bv[i % nb]);
    }
  });
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// y[r, c] = x[r, c] * w[r] for x viewed as rows x cols.
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  const std::size_t R = x.rows(), C = x.cols();
  if (w.size() != R) throw DimensionError("scale_rows: weight count does not match row count");
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x.values()[r * C + c] * w[r];
  return make_op("scale_rows", x.shape(), std::move(out), {x, w}, [R, C](Node& self) {
    const auto& X = in_value(self, 0);
    const auto& W = in_value(self, 1);
    if (wants_grad(self, 0)) {
      auto& g = in_grad(self, 0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r * C + c] * W[r];
    }
    if (wants_grad(self, 1)) {
      auto& g = in_grad(self, 1);
      for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += self.grad[r * C + c] * X[r * C + c];
        g[r] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

namespace detail {
/// `df(x, y)` is the local derivative given input x and output y.
template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  const auto X = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  return make_op(name, x.shape(), std::move(out), {x}, [df](Node& self) {
    const auto& Xv = in_value(self, 0);
    auto& g = in_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(Xv[i], self.value[i]);
  });
}
}  // namespace detail

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline double sigmoid_value(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary(
      "leaky_relu", x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}
inline Tensor elu(const Tensor& x) {
  return detail::unary(
      "elu", x, [](double v) { return v > 0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}
/// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op("sum", {}, {s}, {x}, [](Node& self) {
    auto& g = in_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw EmptyInputError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sums each row: [R x C] -> [R].
inline Tensor row_sum(const Tensor& x) {
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<double> out(R, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r] += x.values()[r * C + c];
  return make_op("row_sum", {R}, std::move(out), {x}, [R, C](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r];
  });
}

/// Averages contiguous groups of `group` rows: [R x C] -> [R/group x C].
inline Tensor mean_groups(const Tensor& x, std::size_t group) {
  const std::size_t R = x.rows(), C = x.cols();
  if (group == 0 || R % group != 0) throw DimensionError("mean_groups: rows not divisible by group size");
  const std::size_t G = R / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(G * C, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[(r / group) * C + c] += x.values()[r * C + c] * inv;
  return make_op("mean_groups", {G, C}, std::move(out), {x}, [R, C, group, inv](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[(r / group) * C + c] * inv;
  });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Softmax along `axis` (negative counts from the end), max-subtracted.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw DimensionError("softmax of a scalar");
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.shape()[static_cast<std::size_t>(ax)];
  for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  std::vector<double> out(x.size());
  const auto X = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, X[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (out[base + j * inner] = std::exp(X[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  return make_op("softmax", x.shape(), std::move(out), {x}, [outer, inner, n](Node& self) {
    auto& g = in_grad(self, 0);
    const auto& Y = self.value;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * Y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j)
          g[base + j * inner] += Y[base + j * inner] * (self.grad[base + j * inner] - dot);
      }
  });
}

/// Row-wise softmax over entries where mask != 0; masked entries get 0.
inline Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  const std::size_t R = x.rows(), C = x.cols();
  if (mask.size() != x.size()) throw DimensionError("masked_softmax: mask size mismatch");
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (mask[r * C + c]) mx = std::max(mx, x.values()[r * C + c]);
    if (!std::isfinite(mx)) throw ContractError("masked_softmax: row with every entry masked");
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (mask[r * C + c]) z += (out[r * C + c] = std::exp(x.values()[r * C + c] - mx));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  return make_op("masked_softmax", x.shape(), std::move(out), {x}, [R, C](Node& self) {
    auto& g = in_grad(self, 0);
    const auto& Y = self.value;
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += self.grad[r * C + c] * Y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += Y[r * C + c] * (self.grad[r * C + c] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x.values()[r * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(x.values()[r * C + c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x.values()[r * C + c] - lz;
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x}, [R, C](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < C; ++c) gs += self.grad[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        g[r * C + c] += self.grad[r * C + c] - std::exp(self.value[r * C + c]) * gs;
    }
  });
}

/// Normalizes each last-axis slice to zero mean / unit variance, then applies
/// gain and bias (both of length equal to the last dimension).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t R = x.rows(), C = x.cols();
  if (C == 0) throw DimensionError("layer_norm over empty axis");
  if (gain.size() != C || bias.size() != C) throw DimensionError("layer_norm: gain/bias width mismatch");
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(R);
  const auto X = x.values();
  for (std::size_t r = 0; r < R; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < C; ++c) m += X[r * C + c];
    m /= static_cast<double>(C);
    double v = 0.0;
    for (std::size_t c = 0; c < C; ++c) v += (X[r * C + c] - m) * (X[r * C + c] - m);
    v /= static_cast<double>(C);
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (X[r * C + c] - m) * inv_std[r];
      out[r * C + c] = xhat[r * C + c] * gain[c] + bias[c];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                 [R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const auto& Gn = in_value(self, 1);
                   if (wants_grad(self, 0)) {
                     auto& g = in_grad(self, 0);
                     const double invC = 1.0 / static_cast<double>(C);
                     for (std::size_t r = 0; r < R; ++r) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t c = 0; c < C; ++c) {
                         const double dxh = self.grad[r * C + c] * Gn[c];
                         s1 += dxh;
                         s2 += dxh * xhat[r * C + c];
                       }
                       for (std::size_t c = 0; c < C; ++c) {
                         const double dxh = self.grad[r * C + c] * Gn[c];
                         g[r * C + c] += inv_std[r] * (dxh - invC * s1 - xhat[r * C + c] * invC * s2);
                       }
                     }
                   }
                   if (wants_grad(self, 1)) {
                     auto& g = in_grad(self, 1);
                     for (std::size_t r = 0; r < R; ++r)
                       for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[r * C + c] * xhat[r * C + c];
                   }
                   if (wants_grad(self, 2)) {
                     auto& g = in_grad(self, 2);
                     for (std::size_t r = 0; r < R; ++r)
                       for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[r * C + c];
                   }
                 });
}

/// Divides each row by its Euclidean norm. A zero row is a degenerate input.
inline Tensor normalize_rows(const Tensor& x) {
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<double> out(x.size()), norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += x.values()[r * C + c] * x.values()[r * C + c];
    if (s == 0.0) throw ContractError("normalize_rows: zero vector");
    norms[r] = std::sqrt(s);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x.values()[r * C + c] / norms[r];
  }
  return make_op("normalize_rows", x.shape(), std::move(out), {x}, [R, C, norms = std::move(norms)](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += self.grad[r * C + c] * self.value[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        g[r * C + c] += (self.grad[r * C + c] - self.value[r * C + c] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labelled class under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match rows");
  if (n == 0) throw EmptyInputError("cross_entropy: empty batch");
  for (auto l : labels)
    if (l >= c) throw IndexError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.values()[r * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(logits.values()[r * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss -= logits.values()[r * c + labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<double>(n);
  return make_op("cross_entropy", {}, {loss}, {logits}, [n, c, labels, probs = std::move(probs)](Node& self) {
    auto& g = in_grad(self, 0);
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j)
        g[r * c + j] += s * (probs[r * c + j] - (j == labels[r] ? 1.0 : 0.0));
  });
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
inline Tensor binary_cross_entropy(const Tensor& p, const std::vector<double>& targets) {
  if (targets.size() != p.size()) throw DimensionError("binary_cross_entropy: size mismatch");
  if (p.size() == 0) throw EmptyInputError("binary_cross_entropy: empty batch");
  constexpr double lo = 1e-12;
  const std::size_t n = p.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], lo, 1.0 - lo);
    loss -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
  }
  loss /= static_cast<double>(n);
  return make_op("binary_cross_entropy", {}, {loss}, {p}, [n, targets, lo](Node& self) {
    auto& g = in_grad(self, 0);
    const auto& P = in_value(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double q = std::clamp(P[i], lo, 1.0 - lo);
      g[i] += self.grad[0] / static_cast<double>(n) * (q - targets[i]) / (q * (1.0 - q));
    }
  });
}

/// Mean squared error against constant targets.
inline Tensor mse(const Tensor& pred, const std::vector<double>& targets) {
  if (targets.size() != pred.size()) throw DimensionError("mse: size mismatch");
  if (pred.size() == 0) throw EmptyInputError("mse: empty batch");
  Tensor t(pred.shape(), targets);
  return mean(square(sub(pred, t)));
}

// ---------------------------------------------------------------------------
// Indexing and assembly
// ---------------------------------------------------------------------------

/// Rows of a 2-D table selected by id: [V x d] -> [n x d].
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  const std::size_t V = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(V) + ")");
    std::copy_n(&table.values()[ids[i] * d], d, &out[i * d]);
  }
  return make_op("gather_rows", {ids.size(), d}, std::move(out), {table}, [ids, d](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[ids[i] * d + c] += self.grad[i * d + c];
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t C = x.cols();
  if (start + count > x.rows()) throw DimensionError("slice_rows out of range");
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * C),
                          x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * C));
  return make_op("slice_rows", {count, C}, std::move(out), {x}, [start, C](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * C + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t R = x.rows(), C = x.cols();
  if (start + count > C) throw DimensionError("slice_cols out of range");
  std::vector<double> out(R * count);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x.values()[r * C + start + c];
  return make_op("slice_cols", {R, count}, std::move(out), {x}, [R, C, start, count](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < count; ++c) g[r * C + start + c] += self.grad[r * count + c];
  });
}

/// Stacks tensors of equal width along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: no inputs");
  const std::size_t C = parts[0].cols();
  std::size_t R = 0;
  for (const auto& p : parts) {
    if (p.cols() != C) throw DimensionError("concat_rows: width mismatch");
    R += p.rows();
  }
  std::vector<double> out;
  out.reserve(R * C);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_op("concat_rows", {R, C}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (!wants_grad(self, i)) continue;
      auto& g = in_grad(self, i);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[offsets[i] + j];
    }
  });
}

/// Joins tensors with equal row counts side by side.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: no inputs");
  const std::size_t R = parts[0].rows();
  std::size_t C = 0;
  std::vector<std::size_t> offs, widths;
  for (const auto& p : parts) {
    if (p.rows() != R) throw DimensionError("concat_cols: row count mismatch");
    offs.push_back(C);
    widths.push_back(p.cols());
    C += p.cols();
  }
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t r = 0; r < R; ++r)
      std::copy_n(&parts[i].values()[r * widths[i]], widths[i], &out[r * C + offs[i]]);
  return make_op("concat_cols", {R, C}, std::move(out), parts, [R, C, offs, widths](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (!wants_grad(self, i)) continue;
      auto& g = in_grad(self, i);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < widths[i]; ++c) g[r * widths[i] + c] += self.grad[r * C + offs[i] + c];
    }
  });
}

/// Repeats each row `times` times consecutively: [R x C] -> [R*times x C].
inline Tensor repeat_rows(const Tensor& x, std::size_t times) {
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<double> out(R * times * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t t = 0; t < times; ++t) std::copy_n(&x.values()[r * C], C, &out[(r * times + t) * C]);
  return make_op("repeat_rows", {R * times, C}, std::move(out), {x}, [R, C, times](Node& self) {
    auto& g = in_grad(self, 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[(r * times + t) * C + c];
  });
}

/// out[i, j] = col[i] + row[j].
inline Tensor outer_add(const Tensor& col, const Tensor& row) {
  const std::size_t n = col.size(), m = row.size();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = col[i] + row[j];
  return make_op("outer_add", {n, m}, std::move(out), {col, row}, [n, m](Node& self) {
    if (wants_grad(self, 0)) {
      auto& g = in_grad(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i] += self.grad[i * m + j];
    }
    if (wants_grad(self, 1)) {
      auto& g = in_grad(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttentionOptions {
  std::size_t group = 1;   ///< rows per independent sequence
  std::size_t heads = 1;   ///< width must divide evenly
  bool causal = false;     ///< query i may only see keys j <= i within its group
  /// Optional per-row key validity (nonzero = attendable). Queries whose group
  /// has no valid key are an error.
  std::vector<std::uint8_t> key_mask;
};

struct AttentionResult {
  Tensor output;
  /// [rows x heads x group] probabilities, query-major; informational.
  std::vector<double> weights;
};

/// Multi-head scaled dot-product attention applied independently to each
/// contiguous block of `opts.group` rows of q, k, v (all [R x d]).
inline AttentionResult grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const AttentionOptions& opts) {
  const std::size_t R = q.rows(), d = q.cols(), L = opts.group, H = opts.heads;
  if (k.rows() != R || v.rows() != R || k.cols() != d || v.cols() != d)
    throw DimensionError("grouped_attention: q/k/v shape mismatch");
  if (L == 0 || R % L != 0) throw DimensionError("grouped_attention: rows not divisible by group size");
  if (H == 0 || d % H != 0) throw DimensionError("grouped_attention: width not divisible by head count");
  if (!opts.key_mask.empty() && opts.key_mask.size() != R) throw DimensionError("grouped_attention: key mask size");
  const std::size_t dh = d / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Q = q.values();
  const auto K = k.values();
  const auto V = v.values();
  std::vector<double> P(R * H * L, 0.0), out(R * d, 0.0);
  auto allowed = [&](std::size_t g0, std::size_t i, std::size_t j) {
    if (opts.causal && j > i) return false;
    return opts.key_mask.empty() || opts.key_mask[g0 + j] != 0;
  };
  for (std::size_t g0 = 0; g0 < R; g0 += L)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t h = 0; h < H; ++h) {
        double* p = &P[((g0 + i) * H + h) * L];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (!allowed(g0, i, j)) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += Q[(g0 + i) * d + h * dh + c] * K[(g0 + j) * d + h * dh + c];
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        if (!std::isfinite(mx)) throw ContractError("grouped_attention: query with no attendable key");
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!allowed(g0, i, j)) {
            p[j] = 0.0;
            continue;
          }
          z += (p[j] = std::exp(p[j] - mx));
        }
        for (std::size_t j = 0; j < L; ++j) {
          p[j] /= z;
          if (p[j] == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) out[(g0 + i) * d + h * dh + c] += p[j] * V[(g0 + j) * d + h * dh + c];
        }
      }
  auto weights = P;
  Tensor o = make_op("grouped_attention", {R, d}, std::move(out), {q, k, v},
                     [R, d, L, H, dh, sc, P = std::move(P)](Node& self) {
                       const auto& Qv = in_value(self, 0);
                       const auto& Kv = in_value(self, 1);
                       const auto& Vv = in_value(self, 2);
                       std::vector<double> zero;
                       auto& gq = wants_grad(self, 0) ? in_grad(self, 0) : zero;
                       auto& gk = wants_grad(self, 1) ? in_grad(self, 1) : zero;
                       auto& gv = wants_grad(self, 2) ? in_grad(self, 2) : zero;
                       std::vector<double> dp(L);
                       for (std::size_t g0 = 0; g0 < R; g0 += L)
                         for (std::size_t i = 0; i < L; ++i)
                           for (std::size_t h = 0; h < H; ++h) {
                             const double* p = &P[((g0 + i) * H + h) * L];
                             const double* go = &self.grad[(g0 + i) * d + h * dh];
                             double dot = 0.0;
                             for (std::size_t j = 0; j < L; ++j) {
                               double s = 0.0;
                               if (p[j] != 0.0)
                                 for (std::size_t c = 0; c < dh; ++c) s += go[c] * Vv[(g0 + j) * d + h * dh + c];
                               dp[j] = s;
                               dot += p[j] * s;
                               if (!gv.empty() && p[j] != 0.0)
                                 for (std::size_t c = 0; c < dh; ++c) gv[(g0 + j) * d + h * dh + c] += p[j] * go[c];
                             }
                             for (std::size_t j = 0; j < L; ++j) {
                               if (p[j] == 0.0) continue;
                               const double ds = p[j] * (dp[j] - dot) * sc;
                               for (std::size_t c = 0; c < dh; ++c) {
                                 if (!gq.empty()) gq[(g0 + i) * d + h * dh + c] += ds * Kv[(g0 + j) * d + h * dh + c];
                                 if (!gk.empty()) gk[(g0 + j) * d + h * dh + c] += ds * Qv[(g0 + i) * d + h * dh + c];
                               }
                             }
                           }
                     });
  return {o, std::move(weights)};
}

/// Single-head additive graph attention over independent blocks of `nodes`
/// rows. For block-local indices i, j with mask[b][i][j] != 0:
///   e_ij = leaky_relu(src_i + dst_j), alpha_i = softmax_j(e_ij),
///   out_i = sum_j alpha_ij h_j.
/// `mask` is [blocks x nodes x nodes]; `weights` in the result has the same layout.
inline AttentionResult block_graph_attention(const Tensor& h, const Tensor& src, const Tensor& dst,
                                             const std::vector<std::uint8_t>& mask, std::size_t nodes,
                                             double slope = 0.2) {
  const std::size_t R = h.rows(), d = h.cols(), N = nodes;
  if (N == 0 || R % N != 0) throw DimensionError("block_graph_attention: rows not divisible by node count");
  if (src.size() != R || dst.size() != R) throw DimensionError("block_graph_attention: score vector size");
  if (mask.size() != R * N) throw DimensionError("block_graph_attention: mask size");
  const auto H = h.values();
  const auto S = src.values();
  const auto D = dst.values();
  std::vector<double> P(R * N, 0.0), out(R * d, 0.0);
  for (std::size_t b0 = 0; b0 < R; b0 += N)
    for (std::size_t i = 0; i < N; ++i) {
      double* p = &P[(b0 + i) * N];
      const std::uint8_t* m = &mask[(b0 + i) * N];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < N; ++j) {
        if (!m[j]) continue;
        const double x = S[b0 + i] + D[b0 + j];
        p[j] = x > 0.0 ? x : slope * x;
        mx = std::max(mx, p[j]);
      }
      if (!std::isfinite(mx)) throw ContractError("block_graph_attention: node with no neighbours");
      double z = 0.0;
      for (std::size_t j = 0; j < N; ++j) z += m[j] ? (p[j] = std::exp(p[j] - mx)) : (p[j] = 0.0);
      for (std::size_t j = 0; j < N; ++j) {
        p[j] /= z;
        if (p[j] == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) out[(b0 + i) * d + c] += p[j] * H[(b0 + j) * d + c];
      }
    }
  auto weights = P;
  Tensor o = make_op("block_graph_attention", {R, d}, std::move(out), {h, src, dst},
                     [R, d, N, slope, P = std::move(P)](Node& self) {
                       const auto& Hv = in_value(self, 0);
                       const auto& Sv = in_value(self, 1);
                       const auto& Dv = in_value(self, 2);
                       std::vector<double> zero;
                       auto& gh = wants_grad(self, 0) ? in_grad(self, 0) : zero;
                       auto& gs = wants_grad(self, 1) ? in_grad(self, 1) : zero;
                       auto& gd = wants_grad(self, 2) ? in_grad(self, 2) : zero;
                       std::vector<double> da(N);
                       for (std::size_t b0 = 0; b0 < R; b0 += N)
                         for (std::size_t i = 0; i < N; ++i) {
                           const double* p = &P[(b0 + i) * N];
                           const double* go = &self.grad[(b0 + i) * d];
                           double dot = 0.0;
                           for (std::size_t j = 0; j < N; ++j) {
                             if (p[j] == 0.0) {
                               da[j] = 0.0;
                               continue;
                             }
                             double s = 0.0;
                             for (std::size_t c = 0; c < d; ++c) s += go[c] * Hv[(b0 + j) * d + c];
                             da[j] = s;
                             dot += p[j] * s;
                             if (!gh.empty())
                               for (std::size_t c = 0; c < d; ++c) gh[(b0 + j) * d + c] += p[j] * go[c];
                           }
                           for (std::size_t j = 0; j < N; ++j) {
                             if (p[j] == 0.0) continue;
                             const double x = Sv[b0 + i] + Dv[b0 + j];
                             const double de = p[j] * (da[j] - dot) * (x > 0.0 ? 1.0 : slope);
                             if (!gs.empty()) gs[b0 + i] += de;
                             if (!gd.empty()) gd[b0 + j] += de;
                           }
                         }
                     });
  return {o, std::move(weights)};
}

/// Sinusoidal position encoding table [length x width].
inline Tensor sinusoidal_positions(std::size_t length, std::size_t width) {
  std::vector<double> pe(length * width);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      pe[pos * width + i] = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return Tensor({length, width}, std::move(pe));
}

}  // namespace unifin::numcore
