#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fmrnet/autograd.hpp"
#include "fmrnet/digest.hpp"
#include "fmrnet/ops.hpp"

namespace fmrnet::nn {

template <class T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// Owns named trainable tensors and non-trainable buffers (batch-norm running
// statistics). Parameters are stored as leaf Vars and shared by handle.
template <class T>
class Module {
 public:
  explicit Module(std::string name) : name_(std::move(name)) {}
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = default;
  Module& operator=(Module&&) = default;

  const std::string& name() const noexcept { return name_; }

  const std::vector<NamedParameter<T>>& parameters() const noexcept { return params_; }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> out;
    for (auto& [n, s] : bn_)
      out.push_back({n + ".running_mean", &s->running_mean}), out.push_back({n + ".running_var", &s->running_var});
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p.var.set_requires_grad(on);
  }
  bool trainable() const {
    for (const auto& p : params_)
      if (p.var.requires_grad()) return true;
    return false;
  }

  void train(bool on = true) noexcept { training_ = on; }
  void eval() noexcept { training_ = false; }
  bool training() const noexcept { return training_; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Digest over parameter values and buffers, in registration order.
  std::uint64_t digest() {
    Fnv1a h;
    for (const auto& p : params_) h.update(p.name).update(p.var.value().values());
    for (auto& b : buffers()) h.update(b.name).update(std::span<const T>(b.tensor->values()));
    return h.value();
  }

  // Counts forward invocations; lets callers verify a path was not taken.
  std::uint64_t forward_calls() const noexcept { return forward_calls_; }

 protected:
  Var<T> register_parameter(const std::string& local, Tensor<T> init) {
    auto v = Var<T>::leaf(std::move(init), true);
    params_.push_back({name_ + "." + local, v});
    return v;
  }

  ops::BatchNormStats<T>& register_batch_norm(const std::string& local, int channels) {
    auto s = std::make_unique<ops::BatchNormStats<T>>();
    s->running_mean = Tensor<T>({channels}, T(0));
    s->running_var = Tensor<T>({channels}, T(1));
    bn_.emplace_back(name_ + "." + local, std::move(s));
    return *bn_.back().second;
  }

  void count_forward() noexcept { ++forward_calls_; }

 private:
  std::string name_;
  std::vector<NamedParameter<T>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<ops::BatchNormStats<T>>>> bn_;
  bool training_ = true;
  std::uint64_t forward_calls_ = 0;
};

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> glorot_init(int fan_out, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t({fan_out, fan_in});
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace fmrnet::nn
