#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "unifin/numcore/tensor.hpp"

namespace unifin::numcore {

/// Largest |analytic - central difference| / max(1, |central difference|) over
/// every coordinate of every tensor in `params`. `f` must rebuild the loss
/// from the current parameter values on each call.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& p : params) {
    const auto analytic = p.grad();
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double up = f().item();
      vals[i] = keep - eps;
      const double down = f().item();
      vals[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite finite difference");
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

/// Single-input form: checks d f(x) / dx at `x`.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  Tensor leaf(x.shape(), x.to_vector(), true);
  return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace unifin::numcore
