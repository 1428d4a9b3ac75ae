#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aesr/config.hpp"
#include "aesr/nn.hpp"

namespace aesr {

struct UNetDiscriminatorConfig {
  int first_conv_channels = 16;  // F; level i has F * 2^i channels
  int num_levels = 3;            // encoder downsamplings == attention blocks
  bool spectral_norm = true;
  int power_iterations = 1;  // per training forward
  double leaky_slope = 0.2;

  static UNetDiscriminatorConfig full_scale();

  void validate() const;
  /// Spatial sizes must be multiples of this.
  int size_multiple() const { return 1 << num_levels; }

  static UNetDiscriminatorConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "discriminator.");
  void write_config(KeyValueConfig& kv, const std::string& prefix = "discriminator.") const;

  friend bool operator==(const UNetDiscriminatorConfig&, const UNetDiscriminatorConfig&) = default;
};

/// Weights of one additive attention gate.
template <typename T>
struct AttentionGateParams {
  ag::Var<T> w_x;    // (F_int, F_l, 1, 1), applied to x_l pooled onto g's grid
  ag::Var<T> w_g;    // (F_int, F_g, 1, 1)
  ag::Var<T> b_g;    // (F_int)
  ag::Var<T> psi;    // (1, F_int, 1, 1)
  ag::Var<T> psi_b;  // (1)
  int f_int = 0;
};

/// Returns (alpha * x_l, alpha) with
/// alpha = up(sigmoid(psi(relu(W_x pool(x_l) + W_g g + b_g)) + psi_b)),
/// where pool is 2x2 averaging onto g's grid and up is bilinear back to x_l.
template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> attention_gate_forward(const ag::Var<T>& x_l, const ag::Var<T>& g,
                                                         const AttentionGateParams<T>& params);

template <typename T>
struct DiscriminatorOutput {
  ag::Var<T> logits;                      // (B,1,H,W), same H,W as the input
  std::vector<ag::Var<T>> attention_maps;  // decoder order: coarsest first, each at its skip's resolution
};

template <typename T>
struct SpectralNormResult {
  Tensor<T> weight;
  Tensor<T> u;
  T sigma;
};

/// Divides a conv kernel, viewed as (out x in*k*k), by the power-iteration
/// estimate of its top singular value after `iterations` steps from `u`.
template <typename T>
SpectralNormResult<T> spectral_normalize(const Tensor<T>& weight, Tensor<T> u, int iterations);

enum class PowerIteration { update, frozen };

/// Attention U-Net discriminator producing one realness logit per input pixel.
template <typename T>
class UNetDiscriminator {
 public:
  UNetDiscriminator(UNetDiscriminatorConfig config, std::uint64_t seed);

  /// `update` advances every spectral-norm vector by config.power_iterations
  /// steps (training); `frozen` reuses the stored vectors (inference, gradient checks).
  DiscriminatorOutput<T> forward(const ag::Var<T>& img, PowerIteration mode = PowerIteration::update);

  AttentionGateParams<T> gate(int level) const;

  /// Kernel actually applied by a layer: the raw weight, divided by the
  /// current spectral estimate when the layer is normalised.
  Tensor<T> effective_weight(const std::string& layer, int iterations = 0) const;
  std::vector<std::string> normalized_layers() const;

  const UNetDiscriminatorConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& spectral_vectors() { return sn_u_; }
  const std::map<std::string, Tensor<T>>& spectral_vectors() const { return sn_u_; }

  /// Weights as `<prefix><name>`, spectral vectors as `<prefix>sn_u.<layer>`.
  void export_to(TensorMap& out, const std::string& prefix) const;
  void import_from(const TensorMap& in, const std::string& prefix);

  template <typename U>
  UNetDiscriminator<U> cast() const;

 private:
  template <typename U>
  friend class UNetDiscriminator;
  UNetDiscriminator() = default;

  int channels(int level) const { return config_.first_conv_channels << level; }
  ag::Var<T> conv(const std::string& layer, const ag::Var<T>& x, int stride, int padding, PowerIteration mode);
  ag::Var<T> lrelu(const ag::Var<T>& x) const;

  UNetDiscriminatorConfig config_;
  ParameterSet<T> params_;
  std::map<std::string, Tensor<T>> sn_u_;
};

/// D1 on the image, D2 on its bilinear 2x downsample (inside the graph).
template <typename T>
std::pair<DiscriminatorOutput<T>, DiscriminatorOutput<T>> multiscale_forward(
    const ag::Var<T>& img, UNetDiscriminator<T>& d1, UNetDiscriminator<T>& d2,
    PowerIteration mode = PowerIteration::update);

/// Differentiable 2x bilinear downsample feeding the half-scale discriminator.
template <typename T>
ag::Var<T> half_scale(const ag::Var<T>& img);

}  // namespace aesr
