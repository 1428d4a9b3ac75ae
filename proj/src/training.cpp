#include "aesr/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace aesr {

TrainMode parse_train_mode(std::string_view name) {
  if (name == "single") return TrainMode::single;
  if (name == "multi") return TrainMode::multi;
  throw ConfigError("mode must be 'single' or 'multi', got '" + std::string(name) + "'");
}

std::string_view to_string(TrainMode mode) { return mode == TrainMode::single ? "single" : "multi"; }

FeatureExtractor PerceptualConfig::build() const {
  if (extractor == "pyramid") return FeatureExtractor::random_pyramid(seed, widths, layer_weights);
  if (extractor == "identity") return FeatureExtractor::identity(layer_weights.empty() ? 1.0 : layer_weights.front());
  return FeatureExtractor::load(extractor);
}

void TrainConfig::validate() const {
  if (total_iterations < 0) throw ConfigError("total_iterations must be >= 0");
  if (pretrain_iterations < 0) throw ConfigError("pretrain_iterations must be >= 0");
  if (!(learning_rate >= 0) || !(pretrain_learning_rate >= 0)) throw ConfigError("learning rates must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const int m = 2 * discriminator.size_multiple();
  if (hr_patch_size < m || hr_patch_size % m != 0 || hr_patch_size % 4 != 0) {
    throw ConfigError("hr_patch_size must be a positive multiple of " + std::to_string(m));
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0,1)");
  if (!(adam_epsilon > 0)) throw ConfigError("adam_epsilon must be > 0");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  weights.validate();
  generator.validate();
  discriminator.validate();
  degradation.validate();
  if (perceptual.widths.size() != perceptual.layer_weights.size() && perceptual.extractor == "pyramid") {
    throw ConfigError("perceptual.layer_weights needs one entry per perceptual.widths stage");
  }
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.mode = parse_train_mode(kv.get_string("mode", std::string(to_string(c.mode))));
  c.total_iterations = kv.get_int("total_iterations", c.total_iterations);
  c.pretrain_iterations = kv.get_int("pretrain_iterations", c.pretrain_iterations);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.pretrain_learning_rate = kv.get_double("pretrain_learning_rate", c.pretrain_learning_rate);
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.hr_patch_size = static_cast<int>(kv.get_int("hr_patch_size", c.hr_patch_size));
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_epsilon = kv.get_double("adam_epsilon", c.adam_epsilon);
  c.weights = LossWeights::from_config(kv);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.checkpoint_interval = kv.get_int("checkpoint_interval", c.checkpoint_interval);
  c.dataset_dir = kv.get_string("dataset_dir", c.dataset_dir);
  c.output_dir = kv.get_string("output_dir", c.output_dir);
  c.generator = GeneratorConfig::from_config(kv);
  c.discriminator = UNetDiscriminatorConfig::from_config(kv);
  c.degradation = DegradationConfig::from_config(kv, "degradation.");
  c.perceptual.extractor = kv.get_string("perceptual.extractor", c.perceptual.extractor);
  c.perceptual.seed = static_cast<std::uint64_t>(kv.get_int("perceptual.seed", static_cast<long long>(c.perceptual.seed)));
  std::vector<double> widths(c.perceptual.widths.begin(), c.perceptual.widths.end());
  widths = kv.get_doubles("perceptual.widths", widths);
  c.perceptual.widths.clear();
  for (double w : widths) {
    if (w != std::floor(w)) throw ConfigError("perceptual.widths must be integers");
    c.perceptual.widths.push_back(static_cast<int>(w));
  }
  c.perceptual.layer_weights = kv.get_doubles("perceptual.layer_weights", c.perceptual.layer_weights);
  kv.reject_unknown_keys();
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return from_config(KeyValueConfig::load(path)); }

KeyValueConfig TrainConfig::to_config() const {
  KeyValueConfig kv;
  kv.set("mode", std::string(to_string(mode)));
  kv.set("total_iterations", std::to_string(total_iterations));
  kv.set("pretrain_iterations", std::to_string(pretrain_iterations));
  kv.set("learning_rate", format_double(learning_rate));
  kv.set("pretrain_learning_rate", format_double(pretrain_learning_rate));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("hr_patch_size", std::to_string(hr_patch_size));
  kv.set("beta1", format_double(beta1));
  kv.set("beta2", format_double(beta2));
  kv.set("adam_epsilon", format_double(adam_epsilon));
  weights.write_config(kv);
  kv.set("seed", std::to_string(seed));
  kv.set("checkpoint_interval", std::to_string(checkpoint_interval));
  kv.set("dataset_dir", dataset_dir);
  kv.set("output_dir", output_dir);
  generator.write_config(kv);
  discriminator.write_config(kv);
  degradation.write_config(kv, "degradation.");
  kv.set("perceptual.extractor", perceptual.extractor);
  kv.set("perceptual.seed", std::to_string(perceptual.seed));
  std::string w, lw;
  for (int v : perceptual.widths) w += (w.empty() ? "" : ",") + std::to_string(v);
  for (double v : perceptual.layer_weights) lw += (lw.empty() ? "" : ",") + format_double(v);
  kv.set("perceptual.widths", w);
  kv.set("perceptual.layer_weights", lw);
  return kv;
}

std::string StepMetrics::csv_row() const {
  std::string row = std::to_string(iter);
  for (double v : {l_d_total, l_d1, l_d2, l_g_adv, l_percep, l_l1, l_g_total}) row += "," + format_double(v);
  return row;
}

namespace {

// Independent streams for the different consumers of the master seed.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
  Rng r(seed ^ tag);
  return r.next_u64();
}

constexpr std::uint64_t kGeneratorTag = 0x47454e;
constexpr std::uint64_t kD1Tag = 0x4431;
constexpr std::uint64_t kD2Tag = 0x4432;
constexpr std::uint64_t kDataTag = 0x44415441;
constexpr std::uint64_t kDegradeTag = 0x44454752;

AdamConfig adam_config(const TrainConfig& c, double lr) { return {lr, c.beta1, c.beta2, c.adam_epsilon}; }

ImageTensor stack(const std::vector<ImageTensor>& items) {
  const Shape s = items.front().shape();
  ImageTensor out(Shape{static_cast<int>(items.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s) throw ShapeError("batch items differ in shape");
    std::copy(items[i].data(), items[i].data() + items[i].size(), out.data() + i * items[i].size());
  }
  return out;
}

void check_batch(const TrainState& state, const Batch& batch) {
  const Shape h = batch.hr.shape(), l = batch.lr.shape();
  if (h.n != l.n || h.c != 3 || l.c != 3 || h.h != 4 * l.h || h.w != 4 * l.w) {
    throw ShapeError("batch lr " + l.str() + " and hr " + h.str() + " are not a x4 pair");
  }
  (void)state;
}

double finite_or_throw(const ag::Var<float>& v, const char* term, std::int64_t iter) {
  const double x = v.defined() ? static_cast<double>(v.item()) : 0.0;
  if (!std::isfinite(x)) {
    throw NumericError("non-finite " + std::string(term) + " at iteration " + std::to_string(iter));
  }
  return x;
}

}  // namespace

TrainState::TrainState(TrainConfig cfg)
    : config(std::move(cfg)),
      generator(config.generator, stream_seed(config.seed, kGeneratorTag)),
      g_opt(adam_config(config, config.learning_rate)),
      d1_opt(adam_config(config, config.learning_rate)),
      d2_opt(adam_config(config, config.learning_rate)),
      rng(stream_seed(config.seed, kDataTag)),
      extractor(config.perceptual.build()) {
  config.validate();
  d1.emplace(config.discriminator, stream_seed(config.seed, kD1Tag));
  if (config.mode == TrainMode::multi) d2.emplace(config.discriminator, stream_seed(config.seed, kD2Tag));
}

Dataset Dataset::load(const std::filesystem::path& dir, int min_size) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory " + dir.string() + " does not exist");
  Dataset d;
  for (const auto& p : list_images(dir)) {
    ImageTensor img = load_image(p);
    if (img.height() < min_size || img.width() < min_size) continue;
    d.images_.push_back(std::move(img));
    d.paths_.push_back(p);
  }
  if (d.images_.empty()) {
    throw ConfigError("dataset " + dir.string() + " has no image of at least " + std::to_string(min_size) + " px");
  }
  return d;
}

Batch sample_batch(const Dataset& data, TrainState& state) {
  const TrainConfig& c = state.config;
  std::vector<ImageTensor> hr, lr;
  const std::uint64_t base = stream_seed(c.seed, kDegradeTag);
  for (int b = 0; b < c.batch_size; ++b) {
    const auto idx = static_cast<std::size_t>(state.rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    hr.push_back(extract_patch(data.image(idx), c.hr_patch_size, state.rng));
    Rng sample_rng(base + static_cast<std::uint64_t>(state.iteration) * static_cast<std::uint64_t>(c.batch_size) +
                   static_cast<std::uint64_t>(b));
    lr.push_back(synthesize_lr(hr.back(), c.degradation, sample_rng));
  }
  return {stack(lr), stack(hr)};
}

double pretrain_step(TrainState& state, const Batch& batch) {
  check_batch(state, batch);
  Generator<float>& g = state.generator;
  g.params().set_requires_grad(true);
  g.params().zero_grad();
  const ag::Var<float> sr = g.forward(ag::Var<float>(batch.lr));
  const ag::Var<float> l1 = ag::l1_loss(sr, ag::Var<float>(batch.hr));
  const double value = finite_or_throw(l1, "l_l1", state.iteration + 1);
  ag::scale(l1, static_cast<float>(state.config.weights.eta)).backward();
  state.g_opt.set_learning_rate(state.config.pretrain_learning_rate);
  state.g_opt.step(g.params());
  return value;
}

void discriminator_step(TrainState& state, const ImageTensor& hr, const ImageTensor& fake, StepMetrics& m) {
  if (hr.shape() != fake.shape()) throw ShapeError("discriminator step: real " + hr.shape().str() + " vs fake " + fake.shape().str());
  const TrainConfig& c = state.config;
  const bool multi = state.d2.has_value();
  const std::int64_t iter = state.iteration + 1;
  auto d_loss = [&](UNetDiscriminator<float>& d, const ag::Var<float>& real, const ag::Var<float>& f) {
    d.params().set_requires_grad(true);
    d.params().zero_grad();
    const ag::Var<float> c_r = d.forward(real, PowerIteration::update).logits;
    const ag::Var<float> c_f = d.forward(f, PowerIteration::frozen).logits;
    return discriminator_loss(c_r, c_f);
  };
  const ag::Var<float> real(hr), f(fake);
  const ag::Var<float> ld1 = d_loss(*state.d1, real, f);
  ag::Var<float> ld2;
  if (multi) ld2 = d_loss(*state.d2, half_scale(real), half_scale(f));
  m.l_d1 = finite_or_throw(ld1, "l_d1", iter);
  m.l_d2 = multi ? finite_or_throw(ld2, "l_d2", iter) : 0.0;
  const ag::Var<float> ld_total = total_discriminator_loss(ld1, ld2, c.weights);
  m.l_d_total = finite_or_throw(ld_total, "l_d_total", iter);
  if (ld_total.requires_grad()) ld_total.backward();
  state.d1_opt.set_learning_rate(c.learning_rate);
  state.d1_opt.step(state.d1->params());
  if (multi) {
    state.d2_opt.set_learning_rate(c.learning_rate);
    state.d2_opt.step(state.d2->params());
  }
}

void generator_step(TrainState& state, const Batch& batch, const ag::Var<float>& sr, StepMetrics& m) {
  check_batch(state, batch);
  const TrainConfig& c = state.config;
  const LossWeights& w = c.weights;
  const bool multi = state.d2.has_value();
  const std::int64_t iter = state.iteration + 1;
  auto g_adv = [&](UNetDiscriminator<float>& d, const ag::Var<float>& real, const ag::Var<float>& fake) {
    d.params().set_requires_grad(false);
    ag::Var<float> c_r;
    {
      ag::NoGradGuard no_grad;
      c_r = d.forward(real, PowerIteration::frozen).logits;
    }
    const ag::Var<float> c_f = d.forward(fake, PowerIteration::frozen).logits;
    return generator_adversarial_loss(c_r, c_f);
  };
  const ag::Var<float> hr(batch.hr);
  const ag::Var<float> adv1 = g_adv(*state.d1, hr, sr);
  ag::Var<float> adv2;
  if (multi) adv2 = g_adv(*state.d2, half_scale(hr), half_scale(sr));
  const ag::Var<float> percep = perceptual_loss(sr, hr, state.extractor);
  const ag::Var<float> l1 = ag::l1_loss(sr, hr);
  m.l_g_adv1 = finite_or_throw(adv1, "l_g_adv (full scale)", iter);
  m.l_g_adv2 = multi ? finite_or_throw(adv2, "l_g_adv (half scale)", iter) : 0.0;
  m.l_g_adv = w.lambda1 * m.l_g_adv1 + w.lambda2 * m.l_g_adv2;
  m.l_percep = finite_or_throw(percep, "l_percep", iter);
  m.l_l1 = finite_or_throw(l1, "l_l1", iter);
  const ag::Var<float> total = generator_total_loss(percep, adv1, adv2, l1, w);
  m.l_g_total = finite_or_throw(total, "l_g_total", iter);
  state.generator.params().zero_grad();
  if (total.requires_grad()) total.backward();
  state.g_opt.set_learning_rate(c.learning_rate);
  state.g_opt.step(state.generator.params());

  state.d1->params().set_requires_grad(true);
  if (multi) state.d2->params().set_requires_grad(true);
}

StepMetrics gan_train_step(TrainState& state, const Batch& batch) {
  check_batch(state, batch);
  StepMetrics m;
  m.iter = state.iteration + 1;
  Generator<float>& g = state.generator;
  g.params().set_requires_grad(true);
  g.params().zero_grad();
  const ag::Var<float> sr = g.forward(ag::Var<float>(batch.lr));
  discriminator_step(state, batch.hr, sr.value(), m);
  generator_step(state, batch, sr, m);
  return m;
}

StepMetrics train_iteration(const Dataset& data, TrainState& state) {
  const Batch batch = sample_batch(data, state);
  StepMetrics m;
  if (state.iteration < state.config.pretrain_iterations) {
    m.iter = state.iteration + 1;
    m.l_l1 = pretrain_step(state, batch);
    m.l_g_total = state.config.weights.eta * m.l_l1;
  } else {
    m = gan_train_step(state, batch);
  }
  ++state.iteration;
  return m;
}

Archive to_archive(const TrainState& state) {
  Archive a;
  a.metadata["kind"] = "train";
  a.metadata["config"] = state.config.to_config().serialize();
  a.metadata["iteration"] = std::to_string(state.iteration);
  a.metadata["rng.seed"] = std::to_string(state.rng.seed());
  a.metadata["rng.counter"] = std::to_string(state.rng.counter());
  a.metadata["opt.g.steps"] = std::to_string(state.g_opt.steps());
  state.generator.params().export_to(a.tensors, "g.");
  state.g_opt.export_to(a.tensors, "opt.g.");
  state.d1->export_to(a.tensors, "d1.");
  state.d1_opt.export_to(a.tensors, "opt.d1.");
  a.metadata["opt.d1.steps"] = std::to_string(state.d1_opt.steps());
  if (state.d2) {
    state.d2->export_to(a.tensors, "d2.");
    state.d2_opt.export_to(a.tensors, "opt.d2.");
    a.metadata["opt.d2.steps"] = std::to_string(state.d2_opt.steps());
  }
  return a;
}

namespace {

std::uint64_t parse_u64(const Archive& a, const std::string& key) {
  const std::string& s = a.meta(key);
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw IntegrityError("checkpoint metadata '" + key + "' is not an integer");
  return v;
}

TrainConfig archived_config(const Archive& a) {
  try {
    return TrainConfig::from_config(KeyValueConfig::parse(a.meta("config"), "<checkpoint config>"));
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint configuration is invalid: ") + e.what());
  }
}

}  // namespace

TrainState from_archive(const Archive& a) {
  if (a.meta("kind") != "train") throw ArgumentError("archive is not a training checkpoint");
  TrainState s(archived_config(a));
  s.iteration = static_cast<std::int64_t>(parse_u64(a, "iteration"));
  s.rng = Rng(parse_u64(a, "rng.seed"), parse_u64(a, "rng.counter"));
  s.generator.params().import_from(a.tensors, "g.");
  s.g_opt.import_from(a.tensors, "opt.g.", static_cast<std::int64_t>(parse_u64(a, "opt.g.steps")));
  s.d1->import_from(a.tensors, "d1.");
  s.d1_opt.import_from(a.tensors, "opt.d1.", static_cast<std::int64_t>(parse_u64(a, "opt.d1.steps")));
  if (s.d2) {
    s.d2->import_from(a.tensors, "d2.");
    s.d2_opt.import_from(a.tensors, "opt.d2.", static_cast<std::int64_t>(parse_u64(a, "opt.d2.steps")));
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  save_archive(to_archive(state), path);
}

TrainState load_checkpoint(const std::filesystem::path& path) { return from_archive(load_archive(path)); }

void export_generator(const TrainState& state, const std::filesystem::path& path) {
  Archive a;
  a.metadata["kind"] = "generator";
  KeyValueConfig kv;
  state.generator.config().write_config(kv);
  a.metadata["config"] = kv.serialize();
  state.generator.params().export_to(a.tensors, "g.");
  save_archive(a, path);
}

Generator<float> load_generator(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  const std::string& kind = a.meta("kind");
  GeneratorConfig gc;
  if (kind == "train") {
    gc = archived_config(a).generator;
  } else if (kind == "generator") {
    try {
      gc = GeneratorConfig::from_config(KeyValueConfig::parse(a.meta("config"), "<checkpoint config>"));
    } catch (const ConfigError& e) {
      throw IntegrityError(std::string("checkpoint configuration is invalid: ") + e.what());
    }
  } else {
    throw IntegrityError(path.string() + ": unknown archive kind '" + kind + "'");
  }
  Generator<float> g(gc, 0);
  g.params().import_from(a.tensors, "g.");
  return g;
}

std::pair<UNetDiscriminator<float>, std::optional<UNetDiscriminator<float>>> load_discriminators(
    const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  if (a.meta("kind") != "train") {
    throw ArgumentError(path.string() + " is a generator-only export and holds no discriminator weights");
  }
  const TrainConfig c = archived_config(a);
  UNetDiscriminator<float> d1(c.discriminator, 0);
  d1.import_from(a.tensors, "d1.");
  std::optional<UNetDiscriminator<float>> d2;
  if (c.mode == TrainMode::multi) {
    d2.emplace(c.discriminator, 0);
    d2->import_from(a.tensors, "d2.");
  }
  return {std::move(d1), std::move(d2)};
}

std::filesystem::path checkpoint_path(const std::filesystem::path& output_dir, std::int64_t iteration) {
  char name[32];
  std::snprintf(name, sizeof name, "iter_%08lld.ckpt", static_cast<long long>(iteration));
  return output_dir / "checkpoints" / name;
}

namespace {

// Keeps the header and the rows for iterations <= `upto`.
void truncate_log(const std::filesystem::path& log, std::int64_t upto) {
  std::ifstream in(log);
  if (!in) return;
  std::string line, kept;
  std::getline(in, line);
  if (line != StepMetrics::csv_header) throw IntegrityError(log.string() + " has an unexpected header");
  kept = line + "\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= upto) kept += line + "\n";
  }
  in.close();
  std::ofstream(log, std::ios::trunc) << kept;
}

}  // namespace

TrainState train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  const std::filesystem::path out = config.output_dir;
  const std::filesystem::path log = out / "metrics.csv";
  std::filesystem::create_directories(out / "checkpoints");

  std::optional<TrainState> state;
  if (options.resume) {
    if (!std::filesystem::exists(*options.resume)) {
      throw ArgumentError("checkpoint " + options.resume->string() + " does not exist");
    }
    state.emplace(load_checkpoint(*options.resume));
    const TrainConfig& saved = state->config;
    if (saved.mode != config.mode || saved.generator != config.generator || saved.discriminator != config.discriminator) {
      throw ConfigError("checkpoint architecture or mode differs from the configuration");
    }
    state->config = config;
    truncate_log(log, state->iteration);
  } else {
    state.emplace(config);
    std::ofstream(log, std::ios::trunc) << StepMetrics::csv_header << "\n";
  }
  if (!std::filesystem::exists(log)) std::ofstream(log) << StepMetrics::csv_header << "\n";

  const Dataset data = Dataset::load(config.dataset_dir, config.hr_patch_size);
  std::ofstream csv(log, std::ios::app);
  bool saved_last = false;
  while (state->iteration < config.total_iterations) {
    const StepMetrics m = train_iteration(data, *state);
    csv << m.csv_row() << "\n" << std::flush;
    if (options.on_step) options.on_step(m);
    saved_last = state->iteration % config.checkpoint_interval == 0;
    if (saved_last) save_checkpoint(*state, checkpoint_path(out, state->iteration));
  }
  if (!saved_last) save_checkpoint(*state, checkpoint_path(out, state->iteration));
  return std::move(*state);
}

}  // namespace aesr
