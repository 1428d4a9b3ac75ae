#include "aesr/degradation.hpp"

#include <algorithm>
#include <cmath>

namespace aesr {
namespace {

void check_range(const Range& r, const std::string& name) {
  if (!(r.low <= r.high) || !std::isfinite(r.low) || !std::isfinite(r.high)) {
    throw ConfigError("degradation: range '" + name + "' must satisfy low <= high");
  }
}

void check_prob(double p, const std::string& name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("degradation: probability '" + name + "' must be in [0,1]");
}

Range read_range(const KeyValueConfig& kv, const std::string& key, Range fallback) {
  return {kv.get_double(key + "_min", fallback.low), kv.get_double(key + "_max", fallback.high)};
}

void write_range(KeyValueConfig& kv, const std::string& key, const Range& r) {
  kv.set(key + "_min", format_double(r.low));
  kv.set(key + "_max", format_double(r.high));
}

std::vector<ResizeMode> read_modes(const KeyValueConfig& kv, const std::string& key,
                                   const std::vector<ResizeMode>& fallback) {
  if (!kv.has(key)) return fallback;
  std::vector<ResizeMode> out;
  for (const std::string& name : kv.get_strings(key, {})) {
    try {
      out.push_back(parse_resize_mode(name));
    } catch (const ArgumentError&) {
      throw ConfigError("config key '" + key + "': unknown resize mode '" + name + "'");
    }
  }
  return out;
}

std::string join_modes(const std::vector<ResizeMode>& modes) {
  std::string out;
  for (std::size_t i = 0; i < modes.size(); ++i) out += (i ? "," : "") + std::string(to_string(modes[i]));
  return out;
}

ResizeMode pick_mode(const std::vector<ResizeMode>& modes, Rng& rng) {
  return modes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(modes.size()) - 1))];
}

void clamp01(ImageTensor& img) {
  for (float& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

std::array<DegradationPassConfig, 2> DegradationConfig::default_passes() {
  DegradationPassConfig first;
  DegradationPassConfig second;
  second.blur_skip_prob = 0.2;
  second.sigma = {0.2, 1.5};
  second.noise_sigma = {0.0, 0.05};
  second.poisson_scale = {0.05, 2.5};
  second.resize_scale = {0.8, 1.2};
  return {first, second};
}

void DegradationConfig::validate() const {
  if (scale_factor != 4) throw ConfigError("degradation: scale_factor must be 4");
  if (kernel_sizes.empty()) throw ConfigError("degradation: kernel_sizes is empty");
  for (int k : kernel_sizes) {
    if (k < 1 || k % 2 == 0) throw ConfigError("degradation: kernel sizes must be odd and positive");
  }
  if (final_resize_modes.empty()) throw ConfigError("degradation: final_resize_modes is empty");
  for (std::size_t i = 0; i < passes.size(); ++i) {
    const auto& p = passes[i];
    const std::string tag = "pass" + std::to_string(i + 1) + ".";
    check_prob(p.blur_skip_prob, tag + "blur_skip_prob");
    check_prob(p.aniso_prob, tag + "aniso_prob");
    check_prob(p.gaussian_noise_prob, tag + "gaussian_noise_prob");
    check_prob(p.jpeg_prob, tag + "jpeg_prob");
    check_range(p.sigma, tag + "sigma");
    check_range(p.rotation, tag + "rotation");
    check_range(p.noise_sigma, tag + "noise_sigma");
    check_range(p.poisson_scale, tag + "poisson_scale");
    check_range(p.jpeg_quality, tag + "jpeg_quality");
    check_range(p.resize_scale, tag + "resize");
    if (p.sigma.low <= 0) throw ConfigError("degradation: " + tag + "sigma must be positive");
    if (p.noise_sigma.low < 0 || p.poisson_scale.low < 0) throw ConfigError("degradation: negative noise level");
    if (p.jpeg_quality.low < 1 || p.jpeg_quality.high > 100) throw ConfigError("degradation: jpeg quality outside [1,100]");
    if (p.resize_scale.low <= 0) throw ConfigError("degradation: " + tag + "resize scale must be positive");
    if (p.resize_modes.empty()) throw ConfigError("degradation: " + tag + "resize_modes is empty");
  }
}

DegradationConfig DegradationConfig::from_config(const KeyValueConfig& kv, const std::string& prefix) {
  DegradationConfig c;
  const auto sizes = kv.get_doubles(prefix + "kernel_sizes", {});
  if (kv.has(prefix + "kernel_sizes")) {
    c.kernel_sizes.clear();
    for (double s : sizes) c.kernel_sizes.push_back(static_cast<int>(s));
  }
  c.final_resize_modes = read_modes(kv, prefix + "final_resize_modes", c.final_resize_modes);
  c.scale_factor = static_cast<int>(kv.get_int(prefix + "scale_factor", c.scale_factor));
  c.seed = static_cast<std::uint64_t>(kv.get_int(prefix + "seed", static_cast<long long>(c.seed)));
  for (std::size_t i = 0; i < c.passes.size(); ++i) {
    auto& p = c.passes[i];
    const std::string tag = prefix + "pass" + std::to_string(i + 1) + ".";
    p.blur_skip_prob = kv.get_double(tag + "blur_skip_prob", p.blur_skip_prob);
    p.aniso_prob = kv.get_double(tag + "aniso_prob", p.aniso_prob);
    p.sigma = read_range(kv, tag + "sigma", p.sigma);
    p.rotation = read_range(kv, tag + "rotation", p.rotation);
    p.gaussian_noise_prob = kv.get_double(tag + "gaussian_noise_prob", p.gaussian_noise_prob);
    p.noise_sigma = read_range(kv, tag + "noise_sigma", p.noise_sigma);
    p.poisson_scale = read_range(kv, tag + "poisson_scale", p.poisson_scale);
    p.jpeg_prob = kv.get_double(tag + "jpeg_prob", p.jpeg_prob);
    p.jpeg_quality = read_range(kv, tag + "jpeg_quality", p.jpeg_quality);
    p.resize_scale = read_range(kv, tag + "resize", p.resize_scale);
    p.resize_modes = read_modes(kv, tag + "resize_modes", p.resize_modes);
  }
  c.validate();
  return c;
}

void DegradationConfig::write_config(KeyValueConfig& kv, const std::string& prefix) const {
  std::string sizes;
  for (std::size_t i = 0; i < kernel_sizes.size(); ++i) sizes += (i ? "," : "") + std::to_string(kernel_sizes[i]);
  kv.set(prefix + "kernel_sizes", sizes);
  kv.set(prefix + "final_resize_modes", join_modes(final_resize_modes));
  kv.set(prefix + "scale_factor", std::to_string(scale_factor));
  kv.set(prefix + "seed", std::to_string(seed));
  for (std::size_t i = 0; i < passes.size(); ++i) {
    const auto& p = passes[i];
    const std::string tag = prefix + "pass" + std::to_string(i + 1) + ".";
    kv.set(tag + "blur_skip_prob", format_double(p.blur_skip_prob));
    kv.set(tag + "aniso_prob", format_double(p.aniso_prob));
    write_range(kv, tag + "sigma", p.sigma);
    write_range(kv, tag + "rotation", p.rotation);
    kv.set(tag + "gaussian_noise_prob", format_double(p.gaussian_noise_prob));
    write_range(kv, tag + "noise_sigma", p.noise_sigma);
    write_range(kv, tag + "poisson_scale", p.poisson_scale);
    kv.set(tag + "jpeg_prob", format_double(p.jpeg_prob));
    write_range(kv, tag + "jpeg_quality", p.jpeg_quality);
    write_range(kv, tag + "resize", p.resize_scale);
    kv.set(tag + "resize_modes", join_modes(p.resize_modes));
  }
}

DegradationConfig benign_degradation_config() {
  DegradationConfig c;
  for (auto& p : c.passes) {
    p.blur_skip_prob = 1.0;
    p.noise_sigma = {0.0, 0.0};
    p.poisson_scale = {0.0, 0.0};
    p.jpeg_prob = 0.0;
    p.jpeg_quality = {100, 100};
    p.resize_scale = {1.0, 1.0};
    p.resize_modes = {ResizeMode::area};
  }
  c.final_resize_modes = {ResizeMode::area};
  return c;
}

BlurKernel gaussian_kernel(int size, double sigma_x, double sigma_y, double rotation) {
  if (size < 1 || size % 2 == 0) throw ArgumentError("gaussian_kernel: size must be odd and positive");
  if (!(sigma_x > 0) || !(sigma_y > 0)) throw ArgumentError("gaussian_kernel: sigmas must be positive");
  // Inverse covariance of R diag(sx^2, sy^2) R^T.
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double ix = 1.0 / (sigma_x * sigma_x), iy = 1.0 / (sigma_y * sigma_y);
  const double a = c * c * ix + s * s * iy;
  const double b = c * s * (ix - iy);
  const double d = s * s * ix + c * c * iy;
  const int r = size / 2;
  BlurKernel k{Tensor<double>(Shape{1, 1, size, size})};
  double total = 0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) {
      const double v = std::exp(-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y));
      k.matrix.at(0, 0, y + r, x + r) = v;
      total += v;
    }
  for (double& v : k.matrix.values()) v /= total;
  return k;
}

BlurKernel generate_blur_kernel(const DegradationConfig& config, int pass_index, Rng& rng, int max_size) {
  if (pass_index < 0 || pass_index > 1) throw ArgumentError("pass_index must be 0 or 1");
  std::vector<int> sizes;
  for (int k : config.kernel_sizes)
    if (k <= max_size) sizes.push_back(k);
  if (sizes.empty()) {
    throw ArgumentError("image smaller than every blur kernel size (max usable " + std::to_string(max_size) + ")");
  }
  const auto& p = config.passes[static_cast<std::size_t>(pass_index)];
  const int size = sizes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(sizes.size()) - 1))];
  if (rng.bernoulli(p.aniso_prob)) {
    const double sx = p.sigma.sample(rng);
    const double sy = p.sigma.sample(rng);
    const double theta = p.rotation.sample(rng);
    return gaussian_kernel(size, sx, sy, theta);
  }
  const double sigma = p.sigma.sample(rng);
  return gaussian_kernel(size, sigma, sigma, 0.0);
}

ImageTensor apply_degradation_pass(const ImageTensor& img, const DegradationConfig& config, int pass_index, Rng& rng) {
  validate_image(img, "degradation input");
  if (pass_index < 0 || pass_index > 1) throw ArgumentError("pass_index must be 0 or 1");
  const auto& p = config.passes[static_cast<std::size_t>(pass_index)];
  ImageTensor out = img;

  // blur
  const BlurKernel kernel = generate_blur_kernel(config, pass_index, rng, std::min(img.height(), img.width()));
  if (!rng.bernoulli(p.blur_skip_prob)) {
    out = filter2d(out, kernel.matrix);
    clamp01(out);
  }

  // resize
  const double s = p.resize_scale.sample(rng);
  const ResizeMode mode = pick_mode(p.resize_modes, rng);
  out = resize(out, s, mode);
  clamp01(out);

  // noise
  const bool gaussian = rng.bernoulli(p.gaussian_noise_prob);
  if (gaussian) {
    const double sigma = p.noise_sigma.sample(rng);
    if (sigma > 0) {
      for (float& v : out.values()) v += static_cast<float>(sigma * rng.normal());
    }
  } else {
    const double amount = p.poisson_scale.sample(rng);
    if (amount > 0) {
      for (float& v : out.values()) {
        const double counts = static_cast<double>(rng.poisson(static_cast<double>(v) * 255.0));
        v += static_cast<float>((counts / 255.0 - v) * amount);
      }
    }
  }
  clamp01(out);

  // compression
  const bool jpeg = rng.bernoulli(p.jpeg_prob);
  const int quality = static_cast<int>(std::lround(p.jpeg_quality.sample(rng)));
  if (jpeg) out = jpeg_roundtrip(out, quality);
  clamp01(out);
  return out;
}

ImageTensor synthesize_lr(const ImageTensor& hr, const DegradationConfig& config, Rng& rng) {
  validate_image(hr, "hr");
  const int f = config.scale_factor;
  if (hr.height() % f != 0 || hr.width() % f != 0) {
    throw ArgumentError("synthesize_lr: HR size " + hr.shape().str() + " is not divisible by " + std::to_string(f));
  }
  ImageTensor x = apply_degradation_pass(hr, config, 0, rng);
  x = apply_degradation_pass(x, config, 1, rng);
  const ResizeMode mode = pick_mode(config.final_resize_modes, rng);
  x = resize_to(x, hr.height() / f, hr.width() / f, mode);
  clamp01(x);
  return x;
}

}  // namespace aesr
