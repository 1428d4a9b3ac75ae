#include "aesr/losses.hpp"

#include "aesr/checkpoint.hpp"

namespace aesr {

void LossWeights::validate() const {
  const double all[] = {lambda1, lambda2, eta, perceptual_weight, adversarial_weight};
  bool any = false;
  for (double v : all) {
    if (!(v >= 0)) throw ConfigError("loss weights must be non-negative and finite");
    any = any || v > 0;
  }
  if (!any) throw ConfigError("at least one loss weight must be positive");
}

LossWeights LossWeights::from_config(const KeyValueConfig& kv, const std::string& prefix) {
  LossWeights w;
  w.lambda1 = kv.get_double(prefix + "lambda1", w.lambda1);
  w.lambda2 = kv.get_double(prefix + "lambda2", w.lambda2);
  w.eta = kv.get_double(prefix + "eta", w.eta);
  w.perceptual_weight = kv.get_double(prefix + "perceptual_weight", w.perceptual_weight);
  w.adversarial_weight = kv.get_double(prefix + "adversarial_weight", w.adversarial_weight);
  w.validate();
  return w;
}

void LossWeights::write_config(KeyValueConfig& kv, const std::string& prefix) const {
  kv.set(prefix + "lambda1", format_double(lambda1));
  kv.set(prefix + "lambda2", format_double(lambda2));
  kv.set(prefix + "eta", format_double(eta));
  kv.set(prefix + "perceptual_weight", format_double(perceptual_weight));
  kv.set(prefix + "adversarial_weight", format_double(adversarial_weight));
}

namespace {

template <typename T>
void require_same(const ag::Var<T>& a, const ag::Var<T>& b, const char* what) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": " + a.shape().str() + " vs " + b.shape().str());
}

// sum of w_i * term_i over defined terms; a zero-weight term is left out of the graph.
template <typename T>
ag::Var<T> weighted_sum(std::initializer_list<std::pair<double, const ag::Var<T>*>> terms) {
  ag::Var<T> acc;
  for (const auto& [w, v] : terms) {
    if (w == 0 || !v->defined()) continue;
    const ag::Var<T> t = w == 1 ? *v : ag::scale(*v, static_cast<T>(w));
    acc = acc.defined() ? ag::add(acc, t) : t;
  }
  return acc.defined() ? acc : ag::Var<T>(Tensor<T>(Shape{1, 1, 1, 1}));
}

}  // namespace

template <typename T>
ag::Var<T> relativistic_map(const ag::Var<T>& c_a, const ag::Var<T>& c_b) {
  require_same(c_a, c_b, "relativistic_map");
  return ag::sigmoid(ag::sub_scalar(c_a, ag::mean(c_b)));
}

template <typename T>
ag::Var<T> discriminator_loss(const ag::Var<T>& c_r, const ag::Var<T>& c_f) {
  require_same(c_r, c_f, "discriminator_loss");
  // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(y)) = softplus(y)
  const ag::Var<T> real = ag::mean(ag::softplus(ag::scale(ag::sub_scalar(c_r, ag::mean(c_f)), T(-1))));
  const ag::Var<T> fake = ag::mean(ag::softplus(ag::sub_scalar(c_f, ag::mean(c_r))));
  return ag::add(real, fake);
}

template <typename T>
ag::Var<T> generator_adversarial_loss(const ag::Var<T>& c_r, const ag::Var<T>& c_f) {
  return discriminator_loss(c_f, c_r);
}

template <typename T>
ag::Var<T> total_discriminator_loss(const ag::Var<T>& normal, const ag::Var<T>& sampled, const LossWeights& w) {
  return weighted_sum<T>({{w.lambda1, &normal}, {w.lambda2, &sampled}});
}

double total_discriminator_loss(double normal, double sampled, const LossWeights& w) {
  return w.lambda1 * normal + w.lambda2 * sampled;
}

template <typename T>
ag::Var<T> generator_total_loss(const ag::Var<T>& perceptual, const ag::Var<T>& adv_normal,
                                const ag::Var<T>& adv_sampled, const ag::Var<T>& l1, const LossWeights& w) {
  return weighted_sum<T>({{w.perceptual_weight, &perceptual},
                          {w.adversarial_weight * w.lambda1, &adv_normal},
                          {w.adversarial_weight * w.lambda2, &adv_sampled},
                          {w.eta, &l1}});
}

double generator_total_loss(double perceptual, double adv_normal, double adv_sampled, double l1,
                            const LossWeights& w) {
  return w.perceptual_weight * perceptual + w.adversarial_weight * (w.lambda1 * adv_normal + w.lambda2 * adv_sampled) +
         w.eta * l1;
}

FeatureExtractor FeatureExtractor::random_pyramid(std::uint64_t seed, std::vector<int> widths,
                                                  std::vector<double> layer_weights) {
  if (widths.empty()) throw ArgumentError("feature pyramid needs at least one stage");
  if (layer_weights.empty()) layer_weights.assign(widths.size(), 1.0);
  if (layer_weights.size() != widths.size()) throw ArgumentError("one layer weight per pyramid stage is required");
  FeatureExtractor fe;
  Rng rng(seed);
  int in = 3;
  for (int out : widths) {
    if (out < 1) throw ArgumentError("pyramid stage width must be positive");
    fe.stages_.push_back({kaiming_normal<float>(Shape{out, in, 3, 3}, rng, 0.0), Tensor<float>(Shape{1, out, 1, 1})});
    in = out;
  }
  fe.layer_weights_ = std::move(layer_weights);
  return fe;
}

FeatureExtractor FeatureExtractor::identity(double weight) {
  FeatureExtractor fe;
  fe.layer_weights_ = {weight};
  return fe;
}

FeatureExtractor FeatureExtractor::load(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  FeatureExtractor fe;
  KeyValueConfig kv;
  kv.set("layer_weights", a.meta("layer_weights"));
  fe.layer_weights_ = kv.get_doubles("layer_weights", {});
  for (std::size_t i = 0;; ++i) {
    const std::string p = "stage" + std::to_string(i) + ".";
    if (!a.tensors.count(p + "weight")) break;
    fe.stages_.push_back({a.tensor(p + "weight"), a.tensor(p + "bias")});
  }
  int in = 3;
  for (const Stage& s : fe.stages_) {
    if (s.weight.channels() != in || s.weight.height() != 3 || s.weight.width() != 3 ||
        s.bias.size() != static_cast<std::size_t>(s.weight.batch())) {
      throw IntegrityError(path.string() + ": malformed feature pyramid stage");
    }
    in = s.weight.batch();
  }
  const std::size_t taps = fe.stages_.empty() ? 1 : fe.stages_.size();
  if (fe.layer_weights_.size() != taps) throw IntegrityError(path.string() + ": layer weight count does not match taps");
  return fe;
}

void FeatureExtractor::save(const std::filesystem::path& path) const {
  Archive a;
  std::string w;
  for (double v : layer_weights_) w += (w.empty() ? "" : ",") + format_double(v);
  a.metadata["layer_weights"] = w;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = "stage" + std::to_string(i) + ".";
    a.tensors[p + "weight"] = stages_[i].weight;
    a.tensors[p + "bias"] = stages_[i].bias;
  }
  save_archive(a, path);
}

template <typename T>
std::vector<ag::Var<T>> FeatureExtractor::features(const ag::Var<T>& img) const {
  if (img.shape().c != 3) throw ShapeError("feature extractor expects 3 channels, got " + img.shape().str());
  if (stages_.empty()) return {img};
  std::vector<ag::Var<T>> taps;
  ag::Var<T> x = img;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (i > 0) x = ag::avg_pool2(x);
    const ag::Var<T> w(stages_[i].weight.template cast<T>());
    const ag::Var<T> b(stages_[i].bias.template cast<T>());
    x = ag::relu(ag::conv2d(x, w, b, 1, 1));
    taps.push_back(x);
  }
  return taps;
}

template <typename T>
ag::Var<T> perceptual_loss(const ag::Var<T>& sr, const ag::Var<T>& hr, const FeatureExtractor& extractor) {
  require_same(sr, hr, "perceptual_loss");
  const std::vector<ag::Var<T>> fs = extractor.features(sr);
  const std::vector<ag::Var<T>> fh = extractor.features(hr);
  const std::vector<double>& lw = extractor.layer_weights();
  ag::Var<T> acc;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (lw[i] == 0) continue;
    const ag::Var<T> t = ag::scale(ag::l1_loss(fs[i], fh[i]), static_cast<T>(lw[i]));
    acc = acc.defined() ? ag::add(acc, t) : t;
  }
  return acc.defined() ? acc : ag::Var<T>(Tensor<T>(Shape{1, 1, 1, 1}));
}

#define AESR_INSTANTIATE_LOSSES(T)                                                                               \
  template ag::Var<T> relativistic_map(const ag::Var<T>&, const ag::Var<T>&);                                    \
  template ag::Var<T> discriminator_loss(const ag::Var<T>&, const ag::Var<T>&);                                  \
  template ag::Var<T> generator_adversarial_loss(const ag::Var<T>&, const ag::Var<T>&);                          \
  template ag::Var<T> total_discriminator_loss(const ag::Var<T>&, const ag::Var<T>&, const LossWeights&);        \
  template ag::Var<T> generator_total_loss(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&,              \
                                           const ag::Var<T>&, const LossWeights&);                               \
  template std::vector<ag::Var<T>> FeatureExtractor::features(const ag::Var<T>&) const;                          \
  template ag::Var<T> perceptual_loss(const ag::Var<T>&, const ag::Var<T>&, const FeatureExtractor&);

AESR_INSTANTIATE_LOSSES(float)
AESR_INSTANTIATE_LOSSES(double)

}  // namespace aesr
