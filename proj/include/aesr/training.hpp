#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aesr/checkpoint.hpp"
#include "aesr/degradation.hpp"
#include "aesr/discriminator.hpp"
#include "aesr/generator.hpp"
#include "aesr/losses.hpp"

namespace aesr {

enum class TrainMode { single, multi };
TrainMode parse_train_mode(std::string_view name);
std::string_view to_string(TrainMode mode);

/// Which fixed network the perceptual loss looks through.
struct PerceptualConfig {
  std::string extractor = "pyramid";  // "pyramid", "identity", or a path to a saved extractor
  std::uint64_t seed = 7;
  std::vector<int> widths{16, 32, 64};
  std::vector<double> layer_weights{1.0, 1.0, 1.0};

  FeatureExtractor build() const;
  friend bool operator==(const PerceptualConfig&, const PerceptualConfig&) = default;
};

struct TrainConfig {
  TrainMode mode = TrainMode::multi;
  std::int64_t total_iterations = 1000;
  std::int64_t pretrain_iterations = 0;  // leading L1-only iterations
  double learning_rate = 1e-4;
  double pretrain_learning_rate = 2e-4;
  int batch_size = 4;
  int hr_patch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_epsilon = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_interval = 500;
  std::string dataset_dir = "data/mini_hr";
  std::string output_dir = "runs/desk";

  GeneratorConfig generator;
  UNetDiscriminatorConfig discriminator;
  DegradationConfig degradation;  // keys under "degradation."
  PerceptualConfig perceptual;    // keys under "perceptual."

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Every key is optional; an unrecognised key is an error.
  static TrainConfig from_config(const KeyValueConfig& kv);
  static TrainConfig load(const std::filesystem::path& path);
  KeyValueConfig to_config() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// One row of the metrics log. Terms that a step does not compute are 0.
struct StepMetrics {
  std::int64_t iter = 0;
  double l_d_total = 0;
  double l_d1 = 0;
  double l_d2 = 0;
  double l_g_adv1 = 0;
  double l_g_adv2 = 0;
  double l_g_adv = 0;  // lambda1 * adv1 + lambda2 * adv2
  double l_percep = 0;
  double l_l1 = 0;
  double l_g_total = 0;

  static constexpr const char* csv_header = "iter,l_d_total,l_d1,l_d2,l_g_adv,l_percep,l_l1,l_g_total";
  std::string csv_row() const;
};

/// Everything that determines the rest of a training run.
struct TrainState {
  explicit TrainState(TrainConfig config);

  TrainConfig config;
  Generator<float> generator;
  Adam g_opt;
  std::optional<UNetDiscriminator<float>> d1;
  std::optional<UNetDiscriminator<float>> d2;  // multi mode only
  Adam d1_opt;
  Adam d2_opt;
  std::int64_t iteration = 0;  // completed iterations
  Rng rng;                     // image and patch selection
  FeatureExtractor extractor;  // rebuilt from config, never stored
};

struct Batch {
  ImageTensor lr;
  ImageTensor hr;
};

/// HR images held in memory, each at least `min_size` on both sides.
class Dataset {
 public:
  /// Throws ConfigError if the directory holds no usable image.
  static Dataset load(const std::filesystem::path& dir, int min_size);
  std::size_t size() const { return images_.size(); }
  const ImageTensor& image(std::size_t i) const { return images_[i]; }
  const std::vector<std::filesystem::path>& paths() const { return paths_; }

 private:
  std::vector<ImageTensor> images_;
  std::vector<std::filesystem::path> paths_;
};

/// Draws the batch for the state's current iteration: images and patch offsets
/// from state.rng, degradations from per-sample streams seeded by
/// seed + iteration * batch_size + b.
Batch sample_batch(const Dataset& data, TrainState& state);

/// One Adam step on eta * L1 for the generator; returns the L1 value.
double pretrain_step(TrainState& state, const Batch& batch);

/// Updates the discriminators on the weighted relativistic loss of `hr`
/// against the generator output `fake`, treated as a constant. Fills the
/// l_d* fields of `m`.
void discriminator_step(TrainState& state, const ImageTensor& hr, const ImageTensor& fake, StepMetrics& m);

/// Updates the generator on the full objective through frozen discriminators.
/// `sr` must be the generator's output for batch.lr with its graph attached.
/// Fills the generator fields of `m`.
void generator_step(TrainState& state, const Batch& batch, const ag::Var<float>& sr, StepMetrics& m);

/// discriminator_step then generator_step on one forward pass. Throws
/// NumericError naming the first non-finite term.
StepMetrics gan_train_step(TrainState& state, const Batch& batch);

/// Runs one iteration (pretrain or GAN by schedule) and advances the counter.
StepMetrics train_iteration(const Dataset& data, TrainState& state);

Archive to_archive(const TrainState& state);
TrainState from_archive(const Archive& archive);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Writes only the generator weights and configuration.
void export_generator(const TrainState& state, const std::filesystem::path& path);
/// Accepts a full checkpoint or a generator export.
Generator<float> load_generator(const std::filesystem::path& path);
/// Discriminators stored in a full checkpoint; d2 is empty in single mode.
/// Throws ArgumentError for a generator-only export.
std::pair<UNetDiscriminator<float>, std::optional<UNetDiscriminator<float>>> load_discriminators(
    const std::filesystem::path& path);

std::filesystem::path checkpoint_path(const std::filesystem::path& output_dir, std::int64_t iteration);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepMetrics&)> on_step;
};

/// Full loop. Writes `<output_dir>/metrics.csv` and checkpoints
/// `<output_dir>/checkpoints/iter_XXXXXXXX.ckpt` every checkpoint_interval
/// iterations and at the end. When resuming, log rows past the checkpoint are
/// dropped so the log always matches the weights.
TrainState train(const TrainConfig& config, const TrainOptions& options = {});

}  // namespace aesr
