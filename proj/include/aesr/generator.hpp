#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aesr/config.hpp"
#include "aesr/image.hpp"
#include "aesr/nn.hpp"

namespace aesr {

/// Shape of the x4 RRDB generator.
struct GeneratorConfig {
  int num_rrdb_blocks = 6;
  int base_channels = 32;
  int growth_channels = 16;
  double residual_scale = 0.2;
  double leaky_slope = 0.2;
  int upscale_factor = 4;

  /// 23 blocks, 64 base and 32 growth channels.
  static GeneratorConfig full_scale();

  void validate() const;
  static GeneratorConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "generator.");
  void write_config(KeyValueConfig& kv, const std::string& prefix = "generator.") const;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

/// Every tensor name the generator owns, in registration order.
std::vector<std::string> generator_parameter_names(const GeneratorConfig& config);

/// x + scale * inner: the residual-in-residual combination rule.
template <typename T>
ag::Var<T> rrdb_combine(const ag::Var<T>& x, const ag::Var<T>& inner, T scale);

/// RRDB super-resolution network: head conv, trunk of residual-in-residual
/// dense blocks, trunk conv with a long skip, two nearest x2 upsample + conv
/// stages, then two output convs.
template <typename T>
class Generator {
 public:
  Generator(GeneratorConfig config, std::uint64_t seed);

  /// (B,3,H,W) -> (B,3,4H,4W); values are not clamped.
  ag::Var<T> forward(const ag::Var<T>& lr) const;

  /// One residual-in-residual dense block. Its inner output is the accumulated
  /// residual of three dense blocks, so zero final-layer weights give identity.
  ag::Var<T> rrdb_forward(int block, const ag::Var<T>& x) const;

  const GeneratorConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  template <typename U>
  Generator<U> cast() const;

 private:
  template <typename U>
  friend class Generator;
  Generator() = default;

  ag::Var<T> conv(const std::string& name, const ag::Var<T>& x) const;
  ag::Var<T> dense_block(const std::string& prefix, const ag::Var<T>& x) const;
  ag::Var<T> lrelu(const ag::Var<T>& x) const;

  GeneratorConfig config_;
  ParameterSet<T> params_;
};

/// Upscales every batch item with the generator in inference mode. Inputs wider
/// or taller than `tile` are processed in tiles that extend `overlap` pixels
/// into each neighbour and are blended across the shared margins. Requires
/// 2 * overlap < tile; tile <= 0 disables tiling.
ImageTensor upscale_image(const Generator<float>& generator, const ImageTensor& lr, int tile = 256, int overlap = 16);

}  // namespace aesr
