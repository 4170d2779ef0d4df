#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "trace/rng.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Insertion-ordered registry of named parameters. Owns storage; modules keep
// raw references. Insertion order is the canonical iteration order for
// optimizers and checkpoints, which keeps training deterministic.
template <typename T>
class ParamStoreT {
 public:
  ParameterT<T>& create(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw UsageError("parameter '" + name + "' already exists");
    auto p = std::make_unique<ParameterT<T>>(name, TensorT<T>(std::move(shape)));
    ParameterT<T>& ref = *p;
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return ref;
  }

  ParameterT<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::size_t count() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  template <typename F>
  void for_each(F&& f) {
    for (auto& p : params_) f(*p);
  }

  template <typename F>
  void for_each(F&& f) const {
    for (const auto& p : params_) f(*p);
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<ParameterT<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<float>;

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
template <typename T>
void init_uniform_fan_in(ParameterT<T>& p, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    p.value[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

template <typename T>
void init_constant(ParameterT<T>& p, double v) {
  for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(v);
}

}  // namespace trace
