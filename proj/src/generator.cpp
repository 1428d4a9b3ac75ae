#include "aesr/generator.hpp"

#include <algorithm>

namespace aesr {

GeneratorConfig GeneratorConfig::full_scale() {
  GeneratorConfig c;
  c.num_rrdb_blocks = 23;
  c.base_channels = 64;
  c.growth_channels = 32;
  return c;
}

void GeneratorConfig::validate() const {
  if (num_rrdb_blocks < 1) throw ConfigError("generator: num_rrdb_blocks must be >= 1");
  if (growth_channels < 1 || base_channels < growth_channels) {
    throw ConfigError("generator: need base_channels >= growth_channels >= 1");
  }
  if (!(residual_scale > 0 && residual_scale <= 1)) throw ConfigError("generator: residual_scale must be in (0,1]");
  if (upscale_factor != 4) throw ConfigError("generator: upscale_factor is fixed at 4");
}

GeneratorConfig GeneratorConfig::from_config(const KeyValueConfig& kv, const std::string& prefix) {
  GeneratorConfig c;
  c.num_rrdb_blocks = static_cast<int>(kv.get_int(prefix + "num_rrdb_blocks", c.num_rrdb_blocks));
  c.base_channels = static_cast<int>(kv.get_int(prefix + "base_channels", c.base_channels));
  c.growth_channels = static_cast<int>(kv.get_int(prefix + "growth_channels", c.growth_channels));
  c.residual_scale = kv.get_double(prefix + "residual_scale", c.residual_scale);
  c.leaky_slope = kv.get_double(prefix + "leaky_slope", c.leaky_slope);
  c.upscale_factor = static_cast<int>(kv.get_int(prefix + "upscale_factor", c.upscale_factor));
  c.validate();
  return c;
}

void GeneratorConfig::write_config(KeyValueConfig& kv, const std::string& prefix) const {
  kv.set(prefix + "num_rrdb_blocks", std::to_string(num_rrdb_blocks));
  kv.set(prefix + "base_channels", std::to_string(base_channels));
  kv.set(prefix + "growth_channels", std::to_string(growth_channels));
  kv.set(prefix + "residual_scale", format_double(residual_scale));
  kv.set(prefix + "leaky_slope", format_double(leaky_slope));
  kv.set(prefix + "upscale_factor", std::to_string(upscale_factor));
}

namespace {

std::string rdb_prefix(int block, int rdb) {
  return "body." + std::to_string(block) + ".rdb" + std::to_string(rdb + 1) + ".";
}

// Walks the architecture once; `emit` receives (name, in, out, outer) where
// outer is false for convs inside the dense blocks.
template <typename Emit>
void for_each_conv(const GeneratorConfig& c, Emit&& emit) {
  const int nf = c.base_channels, gc = c.growth_channels;
  emit("conv_first", 3, nf, true);
  for (int b = 0; b < c.num_rrdb_blocks; ++b)
    for (int r = 0; r < 3; ++r) {
      const std::string p = rdb_prefix(b, r);
      for (int i = 0; i < 4; ++i) emit(p + "conv" + std::to_string(i + 1), nf + i * gc, gc, false);
      emit(p + "conv5", nf + 4 * gc, nf, false);
    }
  emit("conv_body", nf, nf, true);
  emit("conv_up1", nf, nf, true);
  emit("conv_up2", nf, nf, true);
  emit("conv_hr", nf, nf, true);
  emit("conv_last", nf, 3, true);
}

}  // namespace

std::vector<std::string> generator_parameter_names(const GeneratorConfig& config) {
  std::vector<std::string> names;
  for_each_conv(config, [&](const std::string& name, int, int, bool) {
    names.push_back(name + ".weight");
    names.push_back(name + ".bias");
  });
  return names;
}

template <typename T>
ag::Var<T> rrdb_combine(const ag::Var<T>& x, const ag::Var<T>& inner, T scale) {
  return ag::add(x, ag::scale(inner, scale));
}

template <typename T>
Generator<T>::Generator(GeneratorConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  // Dense-block convs start at 0.1x He scale so the trunk begins near identity.
  for_each_conv(config_, [&](const std::string& name, int in, int out, bool outer) {
    add_conv(params_, name, in, out, 3, true, rng, outer ? 1.0 : 0.1);
  });
}

template <typename T>
ag::Var<T> Generator<T>::conv(const std::string& name, const ag::Var<T>& x) const {
  return ag::conv2d(x, params_.get(name + ".weight"), params_.get(name + ".bias"), 1, 1);
}

template <typename T>
ag::Var<T> Generator<T>::lrelu(const ag::Var<T>& x) const {
  return ag::leaky_relu(x, static_cast<T>(config_.leaky_slope));
}

template <typename T>
ag::Var<T> Generator<T>::dense_block(const std::string& prefix, const ag::Var<T>& x) const {
  std::vector<ag::Var<T>> features{x};
  for (int i = 1; i <= 4; ++i) {
    const ag::Var<T> input = features.size() == 1 ? x : ag::concat_channels(features);
    features.push_back(lrelu(conv(prefix + "conv" + std::to_string(i), input)));
  }
  const ag::Var<T> out = conv(prefix + "conv5", ag::concat_channels(features));
  return rrdb_combine(x, out, static_cast<T>(config_.residual_scale));
}

template <typename T>
ag::Var<T> Generator<T>::rrdb_forward(int block, const ag::Var<T>& x) const {
  if (block < 0 || block >= config_.num_rrdb_blocks) throw ArgumentError("rrdb block index out of range");
  if (x.shape().c != config_.base_channels) {
    throw ShapeError("rrdb: expected " + std::to_string(config_.base_channels) + " channels, got " + x.shape().str());
  }
  ag::Var<T> h = x;
  for (int r = 0; r < 3; ++r) h = dense_block(rdb_prefix(block, r), h);
  return rrdb_combine(x, ag::sub(h, x), static_cast<T>(config_.residual_scale));
}

template <typename T>
ag::Var<T> Generator<T>::forward(const ag::Var<T>& lr) const {
  if (lr.shape().c != 3) throw ShapeError("generator expects 3-channel input, got " + lr.shape().str());
  const ag::Var<T> feat = conv("conv_first", lr);
  ag::Var<T> trunk = feat;
  for (int b = 0; b < config_.num_rrdb_blocks; ++b) trunk = rrdb_forward(b, trunk);
  ag::Var<T> x = ag::add(feat, conv("conv_body", trunk));
  x = lrelu(conv("conv_up1", ag::upsample_nearest(x, 2)));
  x = lrelu(conv("conv_up2", ag::upsample_nearest(x, 2)));
  return conv("conv_last", lrelu(conv("conv_hr", x)));
}

template <typename T>
template <typename U>
Generator<U> Generator<T>::cast() const {
  Generator<U> out;
  out.config_ = config_;
  for (const auto& [name, var] : params_) out.params_.add(name, var.value().template cast<U>());
  return out;
}

namespace {

// Blend weight along one axis of a tile. Across a margin of length m shared
// with a neighbour the weight is 0 for the outer m/4, ramps linearly over the
// middle m/2 and is 1 for the inner m/4, so the weights of two neighbours sum
// to one and no pixel close to a cut edge contributes.
std::vector<float> ramp(int len, int lo, int hi) {
  auto edge = [](int t, int m) {
    if (m <= 0) return 1.0f;
    const float q = static_cast<float>(m) / 4.0f;
    return std::clamp((static_cast<float>(t) + 0.5f - q) / (2.0f * q), 0.0f, 1.0f);
  };
  std::vector<float> w(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) w[static_cast<std::size_t>(i)] = std::min(edge(i, lo), edge(len - 1 - i, hi));
  return w;
}

// Neighbouring tiles share 2 * overlap pixels.
std::vector<int> tile_starts(int extent, int tile, int overlap) {
  if (extent <= tile) return {0};
  std::vector<int> starts;
  const int stride = tile - 2 * overlap;
  for (int s = 0;; s += stride) {
    if (s + tile >= extent) {
      starts.push_back(extent - tile);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

}  // namespace

ImageTensor upscale_image(const Generator<float>& generator, const ImageTensor& lr, int tile, int overlap) {
  validate_image(lr, "upscale input");
  ImageTensor rgb = lr.channels() == 1 ? gray_to_rgb(lr) : lr;
  ag::NoGradGuard no_grad;
  const int h = rgb.height(), w = rgb.width();
  if (tile <= 0 || (h <= tile && w <= tile)) {
    return generator.forward(ag::Var<float>(rgb)).value();
  }
  if (overlap < 0 || 2 * overlap >= tile) throw ArgumentError("upscale: overlap must be in [0, tile / 2)");
  constexpr int f = 4;
  const int th = std::min(tile, h), tw = std::min(tile, w);
  const std::vector<int> ys = tile_starts(h, th, overlap), xs = tile_starts(w, tw, overlap);
  ImageTensor acc(Shape{rgb.batch(), 3, h * f, w * f});
  std::vector<float> weight(static_cast<std::size_t>(h) * f * w * f, 0.0f);
  for (std::size_t iy = 0; iy < ys.size(); ++iy)
    for (std::size_t ix = 0; ix < xs.size(); ++ix) {
      const int y0 = ys[iy], x0 = xs[ix];
      const ImageTensor out = generator.forward(ag::Var<float>(crop(rgb, y0, x0, th, tw))).value();
      // Margins cover the actual overlap with the neighbour, which is larger
      // for the final tile along an axis.
      const int lo_y = iy > 0 ? (ys[iy - 1] + th - y0) * f : 0;
      const int hi_y = iy + 1 < ys.size() ? (y0 + th - ys[iy + 1]) * f : 0;
      const int lo_x = ix > 0 ? (xs[ix - 1] + tw - x0) * f : 0;
      const int hi_x = ix + 1 < xs.size() ? (x0 + tw - xs[ix + 1]) * f : 0;
      const std::vector<float> wy = ramp(th * f, lo_y, hi_y);
      const std::vector<float> wx = ramp(tw * f, lo_x, hi_x);
      for (int y = 0; y < th * f; ++y)
        for (int x = 0; x < tw * f; ++x) {
          const float wt = wy[static_cast<std::size_t>(y)] * wx[static_cast<std::size_t>(x)];
          const int gy = y0 * f + y, gx = x0 * f + x;
          weight[static_cast<std::size_t>(gy) * w * f + gx] += wt;
          for (int n = 0; n < rgb.batch(); ++n)
            for (int c = 0; c < 3; ++c) acc.at(n, c, gy, gx) += wt * out.at(n, c, y, x);
        }
    }
  for (int n = 0; n < rgb.batch(); ++n)
    for (int c = 0; c < 3; ++c) {
      float* p = acc.plane(n, c);
      for (std::size_t i = 0; i < weight.size(); ++i) p[i] /= weight[i];
    }
  return acc;
}

template ag::Var<float> rrdb_combine(const ag::Var<float>&, const ag::Var<float>&, float);
template ag::Var<double> rrdb_combine(const ag::Var<double>&, const ag::Var<double>&, double);
template class Generator<float>;
template class Generator<double>;
template Generator<double> Generator<float>::cast<double>() const;
template Generator<float> Generator<double>::cast<float>() const;

}  // namespace aesr
