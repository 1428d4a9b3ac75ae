#include "aesr/discriminator.hpp"

#include <cmath>

namespace aesr {

UNetDiscriminatorConfig UNetDiscriminatorConfig::full_scale() {
  UNetDiscriminatorConfig c;
  c.first_conv_channels = 64;
  return c;
}

void UNetDiscriminatorConfig::validate() const {
  if (first_conv_channels < 1) throw ConfigError("discriminator: first_conv_channels must be >= 1");
  if (num_levels < 1 || num_levels > 6) throw ConfigError("discriminator: num_levels must be in [1,6]");
  if (power_iterations < 1) throw ConfigError("discriminator: power_iterations must be >= 1");
}

UNetDiscriminatorConfig UNetDiscriminatorConfig::from_config(const KeyValueConfig& kv, const std::string& prefix) {
  UNetDiscriminatorConfig c;
  c.first_conv_channels = static_cast<int>(kv.get_int(prefix + "first_conv_channels", c.first_conv_channels));
  c.num_levels = static_cast<int>(kv.get_int(prefix + "num_levels", c.num_levels));
  c.spectral_norm = kv.get_bool(prefix + "spectral_norm", c.spectral_norm);
  c.power_iterations = static_cast<int>(kv.get_int(prefix + "power_iterations", c.power_iterations));
  c.leaky_slope = kv.get_double(prefix + "leaky_slope", c.leaky_slope);
  c.validate();
  return c;
}

void UNetDiscriminatorConfig::write_config(KeyValueConfig& kv, const std::string& prefix) const {
  kv.set(prefix + "first_conv_channels", std::to_string(first_conv_channels));
  kv.set(prefix + "num_levels", std::to_string(num_levels));
  kv.set(prefix + "spectral_norm", spectral_norm ? "true" : "false");
  kv.set(prefix + "power_iterations", std::to_string(power_iterations));
  kv.set(prefix + "leaky_slope", format_double(leaky_slope));
}

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> attention_gate_forward(const ag::Var<T>& x_l, const ag::Var<T>& g,
                                                         const AttentionGateParams<T>& p) {
  const Shape xs = x_l.shape(), gs = g.shape();
  if (xs.n != gs.n || xs.h != 2 * gs.h || xs.w != 2 * gs.w) {
    throw ShapeError("attention gate: gating " + gs.str() + " must be half the size of " + xs.str());
  }
  if (p.w_x.shape().c != xs.c || p.w_g.shape().c != gs.c || p.w_x.shape().n != p.f_int ||
      p.w_g.shape().n != p.f_int || p.psi.shape().c != p.f_int) {
    throw ShapeError("attention gate: channel counts do not match the gate parameters");
  }
  const ag::Var<T> theta = ag::conv2d(ag::avg_pool2(x_l), p.w_x, ag::Var<T>(), 1, 0);
  const ag::Var<T> phi = ag::conv2d(g, p.w_g, p.b_g, 1, 0);
  const ag::Var<T> f = ag::relu(ag::add(theta, phi));
  const ag::Var<T> coarse = ag::sigmoid(ag::conv2d(f, p.psi, p.psi_b, 1, 0));
  const ag::Var<T> alpha = ag::resize_bilinear(coarse, xs.h, xs.w);
  return {ag::mul_channels(alpha, x_l), alpha};
}

template <typename T>
SpectralNormResult<T> spectral_normalize(const Tensor<T>& weight, Tensor<T> u, int iterations) {
  if (iterations < 1) throw ArgumentError("spectral_normalize: iterations must be >= 1");
  const T sigma = ag::estimate_spectral_norm(weight, u, iterations);
  Tensor<T> w = weight;
  for (T& v : w.values()) v /= sigma;
  return {std::move(w), std::move(u), sigma};
}

namespace {

Tensor<double> random_unit(int n, Rng& rng) {
  Tensor<double> u(Shape{n, 1, 1, 1});
  double norm = 0;
  for (double& v : u.values()) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : u.values()) v /= norm;
  return u;
}

}  // namespace

template <typename T>
UNetDiscriminator<T>::UNetDiscriminator(UNetDiscriminatorConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int L = config_.num_levels;
  auto normalized = [&](const std::string& name, int in, int out, int k) {
    add_conv(params_, name, in, out, k, false, rng);
    if (config_.spectral_norm) sn_u_[name] = random_unit(out, rng).template cast<T>();
  };
  add_conv(params_, "conv0", 3, channels(0), 3, true, rng);
  for (int i = 1; i <= L; ++i) normalized("down" + std::to_string(i), channels(i - 1), channels(i), 3);
  for (int i = L - 1; i >= 0; --i) {
    const std::string a = "att" + std::to_string(i) + ".";
    const int fl = channels(i), fg = channels(i + 1), f_int = channels(i);
    params_.add(a + "w_x", kaiming_normal<T>(Shape{f_int, fl, 1, 1}, rng, 0.0));
    params_.add(a + "w_g", kaiming_normal<T>(Shape{f_int, fg, 1, 1}, rng, 0.0));
    params_.add(a + "b_g", Tensor<T>(Shape{1, f_int, 1, 1}));
    params_.add(a + "psi", kaiming_normal<T>(Shape{1, f_int, 1, 1}, rng, 1.0));
    params_.add(a + "psi_b", Tensor<T>(Shape{1, 1, 1, 1}));
    normalized("up" + std::to_string(i), fg, fl, 3);
  }
  normalized("post1", channels(0), channels(0), 3);
  normalized("post2", channels(0), channels(0), 3);
  add_conv(params_, "head", channels(0), 1, 1, true, rng);
}

template <typename T>
AttentionGateParams<T> UNetDiscriminator<T>::gate(int level) const {
  if (level < 0 || level >= config_.num_levels) throw ArgumentError("attention level out of range");
  const std::string a = "att" + std::to_string(level) + ".";
  return {params_.get(a + "w_x"), params_.get(a + "w_g"), params_.get(a + "b_g"),
          params_.get(a + "psi"), params_.get(a + "psi_b"), channels(level)};
}

template <typename T>
ag::Var<T> UNetDiscriminator<T>::lrelu(const ag::Var<T>& x) const {
  return ag::leaky_relu(x, static_cast<T>(config_.leaky_slope));
}

template <typename T>
ag::Var<T> UNetDiscriminator<T>::conv(const std::string& layer, const ag::Var<T>& x, int stride, int padding,
                                      PowerIteration mode) {
  ag::Var<T> w = params_.get(layer + ".weight");
  const ag::Var<T> bias = params_.contains(layer + ".bias") ? params_.get(layer + ".bias") : ag::Var<T>();
  if (const auto it = sn_u_.find(layer); it != sn_u_.end()) {
    w = ag::spectral_norm(w, it->second, mode == PowerIteration::update ? config_.power_iterations : 0);
  }
  return ag::conv2d(x, w, bias, stride, padding);
}

template <typename T>
DiscriminatorOutput<T> UNetDiscriminator<T>::forward(const ag::Var<T>& img, PowerIteration mode) {
  const Shape s = img.shape();
  const int L = config_.num_levels;
  if (s.c != 3) throw ShapeError("discriminator expects 3 channels, got " + s.str());
  if (s.h % config_.size_multiple() != 0 || s.w % config_.size_multiple() != 0) {
    throw ShapeError("discriminator input " + s.str() + " must be divisible by " + std::to_string(config_.size_multiple()));
  }
  std::vector<ag::Var<T>> skips;
  skips.push_back(lrelu(conv("conv0", img, 1, 1, mode)));
  for (int i = 1; i <= L; ++i) skips.push_back(lrelu(conv("down" + std::to_string(i), skips.back(), 2, 1, mode)));

  DiscriminatorOutput<T> out;
  ag::Var<T> x = skips[static_cast<std::size_t>(L)];
  for (int i = L - 1; i >= 0; --i) {
    const ag::Var<T>& skip = skips[static_cast<std::size_t>(i)];
    auto [gated, alpha] = attention_gate_forward(skip, x, gate(i));
    out.attention_maps.push_back(alpha);
    const ag::Var<T> up = ag::resize_bilinear(x, skip.shape().h, skip.shape().w);
    x = ag::add(lrelu(conv("up" + std::to_string(i), up, 1, 1, mode)), gated);
  }
  x = lrelu(conv("post1", x, 1, 1, mode));
  x = lrelu(conv("post2", x, 1, 1, mode));
  out.logits = conv("head", x, 1, 0, mode);
  return out;
}

template <typename T>
Tensor<T> UNetDiscriminator<T>::effective_weight(const std::string& layer, int iterations) const {
  const Tensor<T>& w = params_.get(layer + ".weight").value();
  const auto it = sn_u_.find(layer);
  if (it == sn_u_.end()) return w;
  Tensor<T> u = it->second;
  const T sigma = ag::estimate_spectral_norm(w, u, iterations);
  Tensor<T> out = w;
  for (T& v : out.values()) v /= sigma;
  return out;
}

template <typename T>
std::vector<std::string> UNetDiscriminator<T>::normalized_layers() const {
  std::vector<std::string> out;
  for (const auto& kv : sn_u_) out.push_back(kv.first);
  return out;
}

template <typename T>
void UNetDiscriminator<T>::export_to(TensorMap& out, const std::string& prefix) const {
  params_.export_to(out, prefix);
  for (const auto& [layer, u] : sn_u_) out[prefix + "sn_u." + layer] = u.template cast<float>();
}

template <typename T>
void UNetDiscriminator<T>::import_from(const TensorMap& in, const std::string& prefix) {
  params_.import_from(in, prefix);
  for (auto& [layer, u] : sn_u_) {
    const auto it = in.find(prefix + "sn_u." + layer);
    if (it == in.end() || it->second.size() != u.size()) {
      throw IntegrityError("missing or malformed spectral vector '" + prefix + "sn_u." + layer + "'");
    }
    u = it->second.template cast<T>();
  }
}

template <typename T>
template <typename U>
UNetDiscriminator<U> UNetDiscriminator<T>::cast() const {
  UNetDiscriminator<U> out;
  out.config_ = config_;
  for (const auto& [name, var] : params_) out.params_.add(name, var.value().template cast<U>());
  for (const auto& [layer, u] : sn_u_) out.sn_u_[layer] = u.template cast<U>();
  return out;
}

template <typename T>
ag::Var<T> half_scale(const ag::Var<T>& img) {
  return ag::resize_bilinear(img, img.shape().h / 2, img.shape().w / 2);
}

template <typename T>
std::pair<DiscriminatorOutput<T>, DiscriminatorOutput<T>> multiscale_forward(const ag::Var<T>& img,
                                                                             UNetDiscriminator<T>& d1,
                                                                             UNetDiscriminator<T>& d2,
                                                                             PowerIteration mode) {
  const int m = 2 * d2.config().size_multiple();
  if (img.shape().h % m != 0 || img.shape().w % m != 0) {
    throw ShapeError("multi-scale input " + img.shape().str() + " must be divisible by " + std::to_string(m));
  }
  DiscriminatorOutput<T> full = d1.forward(img, mode);
  DiscriminatorOutput<T> half = d2.forward(half_scale(img), mode);
  return {std::move(full), std::move(half)};
}

#define AESR_INSTANTIATE_D(T)                                                                                  \
  template std::pair<ag::Var<T>, ag::Var<T>> attention_gate_forward(const ag::Var<T>&, const ag::Var<T>&,      \
                                                                    const AttentionGateParams<T>&);            \
  template SpectralNormResult<T> spectral_normalize(const Tensor<T>&, Tensor<T>, int);                         \
  template class UNetDiscriminator<T>;                                                                         \
  template ag::Var<T> half_scale(const ag::Var<T>&);                                                           \
  template std::pair<DiscriminatorOutput<T>, DiscriminatorOutput<T>> multiscale_forward(                      \
      const ag::Var<T>&, UNetDiscriminator<T>&, UNetDiscriminator<T>&, PowerIteration);

AESR_INSTANTIATE_D(float)
AESR_INSTANTIATE_D(double)
template UNetDiscriminator<double> UNetDiscriminator<float>::cast<double>() const;
template UNetDiscriminator<float> UNetDiscriminator<double>::cast<float>() const;

}  // namespace aesr
