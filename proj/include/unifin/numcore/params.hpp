#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "unifin/numcore/ops.hpp"

namespace unifin::numcore {

/// Named, ordered collection of trainable leaf tensors. Registration order is
/// the serialization order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor& add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.emplace_back(std::move(shape), std::move(values), true);
    return params_.back();
  }

  /// Glorot-uniform initialized matrix.
  Tensor& add_matrix(const std::string& name, std::size_t rows, std::size_t cols) {
    const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-lim, lim);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = u(rng_);
    return add(name, {rows, cols}, std::move(v));
  }
  Tensor& add_vector(const std::string& name, std::size_t n, double fill = 0.0) {
    return add(name, {n}, std::vector<double>(n, fill));
  }
  Tensor& add_normal(const std::string& name, Shape shape, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = nd(rng_);
    return add(name, std::move(shape), std::move(v));
  }

  const Tensor& get(const std::string& name) const { return params_.at(lookup(name)); }
  Tensor& get(const std::string& name) { return params_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return params_; }
  const std::vector<Tensor>& tensors() const { return params_; }

  /// Parameters whose name starts with any of `prefixes`.
  std::vector<Tensor> with_prefix(const std::vector<std::string>& prefixes) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      for (const auto& p : prefixes)
        if (names_[i].rfind(p, 0) == 0) {
          out.push_back(params_[i]);
          break;
        }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  std::mt19937_64 rng_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

/// y = x W + b for x [R x in].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool with_bias = true) {
    Linear l;
    l.weight = ps.add_matrix(name + ".w", in, out);
    if (with_bias) l.bias = ps.add_vector(name + ".b", out);
    return l;
  }
  static Linear bind(const ParamStore& ps, const std::string& name) {
    Linear l;
    l.weight = ps.get(name + ".w");
    if (ps.contains(name + ".b")) l.bias = ps.get(name + ".b");
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

}  // namespace unifin::numcore
