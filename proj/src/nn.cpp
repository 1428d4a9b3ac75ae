#include "aesr/nn.hpp"

#include <cmath>

namespace aesr {

template <typename T>
ParameterSet<T>::ParameterSet(const ParameterSet& other) : index_(other.index_) {
  entries_.reserve(other.entries_.size());
  for (const auto& [name, var] : other.entries_) {
    entries_.emplace_back(name, ag::Var<T>(var.value(), var.requires_grad()));
  }
}

template <typename T>
ParameterSet<T>& ParameterSet<T>::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
ag::Var<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, ag::Var<T>(std::move(value), true));
  return entries_.back().second;
}

template <typename T>
ag::Var<T>& ParameterSet<T>::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
const ag::Var<T>& ParameterSet<T>::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
std::vector<std::string> ParameterSet<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.value().size();
  return n;
}

template <typename T>
void ParameterSet<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
void ParameterSet<T>::export_to(TensorMap& out, const std::string& prefix) const {
  for (const auto& [name, var] : entries_) out[prefix + name] = var.value().template cast<float>();
}

template <typename T>
void ParameterSet<T>::import_from(const TensorMap& in, const std::string& prefix) {
  for (auto& [name, var] : entries_) {
    const auto it = in.find(prefix + name);
    if (it == in.end()) throw IntegrityError("missing tensor '" + prefix + name + "'");
    if (it->second.shape() != var.shape()) {
      throw IntegrityError("tensor '" + prefix + name + "' has shape " + it->second.shape().str() + ", expected " +
                           var.shape().str());
    }
    var.mutable_value() = it->second.template cast<T>();
  }
}

template <typename T>
Tensor<T> kaiming_normal(Shape shape, Rng& rng, double a, double gain_scale) {
  const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
  const double stddev = gain_scale * std::sqrt(2.0 / (1.0 + a * a)) / std::sqrt(fan_in);
  Tensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
void add_conv(ParameterSet<T>& params, const std::string& name, int in, int out, int kernel, bool bias, Rng& rng,
              double gain_scale) {
  params.add(name + ".weight", kaiming_normal<T>(Shape{out, in, kernel, kernel}, rng, 0.2, gain_scale));
  if (bias) params.add(name + ".bias", Tensor<T>(Shape{1, out, 1, 1}));
}

void Adam::step(ParameterSet<float>& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  const double step_size = config_.learning_rate / bc1;
  const double root_bc2 = std::sqrt(bc2);
  for (auto& [name, var] : params) {
    if (!var.requires_grad()) continue;
    const Tensor<float>& g = var.grad();
    auto [mit, fresh_m] = m_.try_emplace(name, Tensor<float>(g.shape()));
    auto [vit, fresh_v] = v_.try_emplace(name, Tensor<float>(g.shape()));
    Tensor<float>& m = mit->second;
    Tensor<float>& v = vit->second;
    Tensor<float>& p = var.mutable_value();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double denom = std::sqrt(static_cast<double>(v[i])) / root_bc2 + config_.epsilon;
      p[i] -= static_cast<float>(step_size * m[i] / denom);
    }
  }
}

void Adam::export_to(TensorMap& out, const std::string& prefix) const {
  for (const auto& [name, t] : m_) out[prefix + "m." + name] = t;
  for (const auto& [name, t] : v_) out[prefix + "v." + name] = t;
}

void Adam::import_from(const TensorMap& in, const std::string& prefix, std::int64_t steps) {
  m_.clear();
  v_.clear();
  const std::string pm = prefix + "m.", pv = prefix + "v.";
  for (const auto& [key, t] : in) {
    if (key.rfind(pm, 0) == 0) m_[key.substr(pm.size())] = t;
    if (key.rfind(pv, 0) == 0) v_[key.substr(pv.size())] = t;
  }
  steps_ = steps;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Tensor<float> kaiming_normal(Shape, Rng&, double, double);
template Tensor<double> kaiming_normal(Shape, Rng&, double, double);
template void add_conv(ParameterSet<float>&, const std::string&, int, int, int, bool, Rng&, double);
template void add_conv(ParameterSet<double>&, const std::string&, int, int, int, bool, Rng&, double);

}  // namespace aesr
