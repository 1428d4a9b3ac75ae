#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aesr/autograd.hpp"
#include "aesr/rng.hpp"

namespace aesr {

/// Named tensors, the interchange format between networks and checkpoints.
using TensorMap = std::map<std::string, Tensor<float>>;

/// Ordered collection of named trainable tensors. Copies are deep, so a copied
/// network never aliases the original's weights.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  ag::Var<T>& add(const std::string& name, Tensor<T> value);
  ag::Var<T>& get(const std::string& name);
  const ag::Var<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void set_requires_grad(bool on);
  void zero_grad();

  /// float copies of every tensor, keyed by `prefix + name`.
  void export_to(TensorMap& out, const std::string& prefix) const;
  /// Overwrites every tensor from `in`; missing names or shape changes throw.
  void import_from(const TensorMap& in, const std::string& prefix);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, ag::Var<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal initialisation for a (out, in, k, k) kernel with leaky slope `a`,
/// multiplied by `gain_scale`.
template <typename T>
Tensor<T> kaiming_normal(Shape shape, Rng& rng, double a, double gain_scale = 1.0);

/// Registers `<name>.weight` (and `<name>.bias` when requested, zero-initialised).
template <typename T>
void add_conv(ParameterSet<T>& params, const std::string& name, int in, int out, int kernel, bool bias, Rng& rng,
              double gain_scale = 1.0);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// Adaptive-moment optimizer with bias correction and no weight decay.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(ParameterSet<float>& params);

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

  /// First/second moments as `<prefix>m.<name>` / `<prefix>v.<name>`.
  void export_to(TensorMap& out, const std::string& prefix) const;
  void import_from(const TensorMap& in, const std::string& prefix, std::int64_t steps);

  friend bool operator==(const Adam&, const Adam&) = default;

 private:
  AdamConfig config_{};
  std::int64_t steps_ = 0;
  std::map<std::string, Tensor<float>> m_;
  std::map<std::string, Tensor<float>> v_;
};

}  // namespace aesr
