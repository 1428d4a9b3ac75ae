#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aesr/config.hpp"
#include "aesr/nn.hpp"

namespace aesr {

struct LossWeights {
  double lambda1 = 1.0;  // full-scale discriminator
  double lambda2 = 1.0;  // half-scale discriminator
  double eta = 1.0;      // L1
  double perceptual_weight = 1.0;
  double adversarial_weight = 0.1;

  /// Throws ConfigError on a negative weight or when every weight is zero.
  void validate() const;
  static LossWeights from_config(const KeyValueConfig& kv, const std::string& prefix = "");
  void write_config(KeyValueConfig& kv, const std::string& prefix = "") const;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// sigmoid(c_a - mean(c_b)), the mean taken over batch and pixels of c_b.
template <typename T>
ag::Var<T> relativistic_map(const ag::Var<T>& c_a, const ag::Var<T>& c_b);

/// Per-pixel mean of -log D(r, f) - log(1 - D(f, r)), computed through
/// softplus so that saturated logits stay finite.
template <typename T>
ag::Var<T> discriminator_loss(const ag::Var<T>& c_r, const ag::Var<T>& c_f);

/// The same expression with the roles of real and fake exchanged.
template <typename T>
ag::Var<T> generator_adversarial_loss(const ag::Var<T>& c_r, const ag::Var<T>& c_f);

/// lambda1 * normal + lambda2 * sampled. An undefined `sampled` counts as zero.
template <typename T>
ag::Var<T> total_discriminator_loss(const ag::Var<T>& normal, const ag::Var<T>& sampled, const LossWeights& w);
double total_discriminator_loss(double normal, double sampled, const LossWeights& w);

/// perceptual_weight * perceptual + adversarial_weight * (lambda1 * adv_normal
/// + lambda2 * adv_sampled) + eta * l1. Undefined terms count as zero.
template <typename T>
ag::Var<T> generator_total_loss(const ag::Var<T>& perceptual, const ag::Var<T>& adv_normal,
                                const ag::Var<T>& adv_sampled, const ag::Var<T>& l1, const LossWeights& w);
double generator_total_loss(double perceptual, double adv_normal, double adv_sampled, double l1,
                            const LossWeights& w);

/// Fixed convolutional feature pyramid for the perceptual loss. Each stage is
/// a 3x3 conv followed by relu, with a 2x average pool between stages; a
/// feature tap sits after every relu. A pyramid with no stages taps the raw
/// image.
class FeatureExtractor {
 public:
  /// Seeded He-initialised pyramid with the given stage widths.
  static FeatureExtractor random_pyramid(std::uint64_t seed, std::vector<int> widths = {16, 32, 64},
                                         std::vector<double> layer_weights = {});
  static FeatureExtractor identity(double weight = 1.0);
  /// Stages `stage{i}.weight` / `stage{i}.bias` and metadata `layer_weights`.
  static FeatureExtractor load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  template <typename T>
  std::vector<ag::Var<T>> features(const ag::Var<T>& img) const;

  std::size_t num_taps() const { return layer_weights_.size(); }
  const std::vector<double>& layer_weights() const { return layer_weights_; }

 private:
  struct Stage {
    Tensor<float> weight;
    Tensor<float> bias;
  };
  std::vector<Stage> stages_;
  std::vector<double> layer_weights_;
};

/// Sum over taps of weight * mean |f(sr) - f(hr)|.
template <typename T>
ag::Var<T> perceptual_loss(const ag::Var<T>& sr, const ag::Var<T>& hr, const FeatureExtractor& extractor);

}  // namespace aesr
