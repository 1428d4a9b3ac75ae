#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aesr/config.hpp"
#include "aesr/image.hpp"

namespace aesr {

struct Range {
  double low = 0;
  double high = 0;

  double sample(Rng& rng) const { return low == high ? low : rng.uniform(low, high); }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Parameter ranges for one classical degradation pass
/// (blur -> resize -> noise -> JPEG).
struct DegradationPassConfig {
  double blur_skip_prob = 0.0;
  double aniso_prob = 0.5;      // anisotropic vs isotropic Gaussian
  Range sigma{0.2, 3.0};        // blur sigma, pixels
  Range rotation{-3.141592653589793, 3.141592653589793};
  double gaussian_noise_prob = 0.5;  // otherwise Poisson
  Range noise_sigma{0.0, 0.06};      // on the [0,1] scale
  Range poisson_scale{0.05, 3.0};
  double jpeg_prob = 1.0;
  Range jpeg_quality{30, 95};
  Range resize_scale{0.5, 1.5};
  std::vector<ResizeMode> resize_modes{ResizeMode::nearest, ResizeMode::bilinear, ResizeMode::bicubic,
                                       ResizeMode::area};

  friend bool operator==(const DegradationPassConfig&, const DegradationPassConfig&) = default;
};

struct DegradationConfig {
  std::vector<int> kernel_sizes{7, 9, 11, 13, 15, 17, 19, 21};
  std::array<DegradationPassConfig, 2> passes = default_passes();
  std::vector<ResizeMode> final_resize_modes{ResizeMode::area, ResizeMode::bilinear, ResizeMode::bicubic};
  int scale_factor = 4;
  std::uint64_t seed = 0;

  static std::array<DegradationPassConfig, 2> default_passes();

  /// Throws ConfigError on empty/inverted ranges, even kernel sizes or a scale other than 4.
  void validate() const;

  /// Reads keys under `prefix` (e.g. "pass1.sigma_min"); absent keys keep defaults.
  static DegradationConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "");
  void write_config(KeyValueConfig& kv, const std::string& prefix = "") const;

  friend bool operator==(const DegradationConfig&, const DegradationConfig&) = default;
};

/// Every stage disabled: no blur, noise or JPEG, pass resizes fixed at scale 1,
/// area for the final step. A base for targeted single-stage configurations.
DegradationConfig benign_degradation_config();

struct BlurKernel {
  Tensor<double> matrix;  // (1,1,k,k)

  int size() const { return matrix.height(); }
  double operator()(int y, int x) const { return matrix.at(0, 0, y, x); }
};

/// Normalised Gaussian kernel with per-axis sigmas rotated by `rotation` radians.
BlurKernel gaussian_kernel(int size, double sigma_x, double sigma_y, double rotation);

/// Samples a kernel for pass `pass_index` (0 or 1), restricted to sizes <= max_size.
BlurKernel generate_blur_kernel(const DegradationConfig& config, int pass_index, Rng& rng,
                                int max_size = 1 << 30);

/// One blur -> resize -> noise -> JPEG pass; values are clamped to [0,1] after every stage.
ImageTensor apply_degradation_pass(const ImageTensor& img, const DegradationConfig& config, int pass_index, Rng& rng);

/// Two passes followed by a resize to exactly (H/4, W/4).
ImageTensor synthesize_lr(const ImageTensor& hr, const DegradationConfig& config, Rng& rng);

}  // namespace aesr
