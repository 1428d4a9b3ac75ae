#include <doctest.h>

#include <cmath>
#include <fstream>

#include "aesr/training.hpp"
#include "support.hpp"

using namespace aesr;

namespace {

const double kTwoLn2 = 2.0 * std::log(2.0);

// Small networks so that the contract tests stay quick.
TrainConfig small_config(TrainMode mode = TrainMode::multi) {
  TrainConfig c;
  c.mode = mode;
  c.dataset_dir = testing::mini_hr().string();
  c.batch_size = 2;
  c.hr_patch_size = 32;
  c.generator.num_rrdb_blocks = 1;
  c.generator.base_channels = 16;
  c.generator.growth_channels = 8;
  c.discriminator.first_conv_channels = 8;
  c.perceptual.widths = {8, 16};
  c.perceptual.layer_weights = {1.0, 1.0};
  c.seed = 5;
  return c;
}

TrainConfig desk_config(TrainMode mode = TrainMode::multi) {
  TrainConfig c;
  c.mode = mode;
  c.dataset_dir = testing::mini_hr().string();
  return c;
}

template <typename Net>
TensorMap snapshot(const Net& net) {
  TensorMap m;
  net.params().export_to(m, "");
  return m;
}

bool all_changed(const TensorMap& a, const TensorMap& b) {
  for (const auto& [name, t] : a)
    if (b.at(name) == t) return false;
  return true;
}

// The relativistic loss sees only logit differences, so the head bias gets
// zero gradient up to rounding; every other discriminator tensor must move.
bool discriminator_trained(const TensorMap& before, const TensorMap& after) {
  for (const auto& [name, t] : before)
    if (name != "head.bias" && after.at(name) == t) return false;
  return true;
}

// Archive with the output directory blanked, for comparing runs written to different places.
Archive placeless(const TrainState& s) {
  TrainState copy = s;
  copy.config.output_dir.clear();
  return to_archive(copy);
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("zero learning rate leaves every weight unchanged") {
  TrainConfig c = small_config();
  c.learning_rate = 0;
  c.pretrain_learning_rate = 0;
  c.pretrain_iterations = 1;
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);
  TrainState s(c);
  const TensorMap g0 = snapshot(s.generator), d10 = snapshot(*s.d1), d20 = snapshot(*s.d2);
  train_iteration(data, s);
  train_iteration(data, s);
  CHECK(snapshot(s.generator) == g0);
  CHECK(snapshot(*s.d1) == d10);
  CHECK(snapshot(*s.d2) == d20);
}

TEST_CASE("one pretrain step on a single sample changes the generator") {
  TrainConfig c = small_config();
  c.batch_size = 1;
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);
  TrainState s(c);
  const TensorMap g0 = snapshot(s.generator), d0 = snapshot(*s.d1);
  const Batch b = sample_batch(data, s);
  const double l1 = pretrain_step(s, b);
  CHECK(l1 > 0);
  CHECK(all_changed(g0, snapshot(s.generator)));
  CHECK(snapshot(*s.d1) == d0);
  CHECK(s.d1_opt.steps() == 0);
}

TEST_CASE("pretraining overfits one fixed pair") {
  TrainConfig c = desk_config();
  c.batch_size = 1;
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);
  TrainState s(c);
  const Batch b = sample_batch(data, s);
  const double initial = pretrain_step(s, b);
  double last = initial;
  for (int i = 1; i < 200; ++i) last = pretrain_step(s, b);
  {
    ag::NoGradGuard ng;
    last = ag::l1_loss(s.generator.forward(ag::Var<float>(b.lr)), ag::Var<float>(b.hr)).item();
  }
  INFO("initial " << initial << " final " << last);
  CHECK(last < 0.25 * initial);
}

TEST_CASE("mode decides which discriminators train") {
  const Dataset data = Dataset::load(testing::mini_hr(), 32);
  SUBCASE("single") {
    TrainState s(small_config(TrainMode::single));
    CHECK_FALSE(s.d2.has_value());
    const TensorMap d0 = snapshot(*s.d1);
    const StepMetrics m = train_iteration(data, s);
    CHECK(discriminator_trained(d0, snapshot(*s.d1)));
    CHECK(m.l_d2 == 0);
    CHECK(m.l_g_adv2 == 0);
    CHECK(s.d2_opt.steps() == 0);
  }
  SUBCASE("multi") {
    TrainState s(small_config(TrainMode::multi));
    REQUIRE(s.d2.has_value());
    const TensorMap d10 = snapshot(*s.d1), d20 = snapshot(*s.d2);
    const StepMetrics m = train_iteration(data, s);
    CHECK(discriminator_trained(d10, snapshot(*s.d1)));
    CHECK(discriminator_trained(d20, snapshot(*s.d2)));
    CHECK(m.l_d2 > 0);
    CHECK(m.l_g_adv2 > 0);
  }
}

TEST_CASE("each half of a GAN step leaves the other networks untouched") {
  const Dataset data = Dataset::load(testing::mini_hr(), 32);
  TrainState s(small_config(TrainMode::multi));
  const Batch b = sample_batch(data, s);
  StepMetrics m;
  const ag::Var<float> sr = s.generator.forward(ag::Var<float>(b.lr));

  const TensorMap g0 = snapshot(s.generator), d10 = snapshot(*s.d1), d20 = snapshot(*s.d2);
  discriminator_step(s, b.hr, sr.value(), m);
  CHECK(snapshot(s.generator) == g0);
  CHECK(s.g_opt.steps() == 0);
  const TensorMap d11 = snapshot(*s.d1), d21 = snapshot(*s.d2);
  CHECK(discriminator_trained(d10, d11));
  CHECK(discriminator_trained(d20, d21));

  const auto u1 = s.d1->spectral_vectors(), u2 = s.d2->spectral_vectors();
  generator_step(s, b, sr, m);
  CHECK(snapshot(*s.d1) == d11);
  CHECK(snapshot(*s.d2) == d21);
  CHECK(s.d1->spectral_vectors() == u1);
  CHECK(s.d2->spectral_vectors() == u2);
  CHECK(all_changed(g0, snapshot(s.generator)));
  CHECK(s.d1_opt.steps() == 1);
}

TEST_CASE("gan step metrics are consistent with the loss weights") {
  const Dataset data = Dataset::load(testing::mini_hr(), 32);
  TrainState s(small_config(TrainMode::multi));
  const StepMetrics m = train_iteration(data, s);
  const LossWeights& w = s.config.weights;
  CHECK(m.iter == 1);
  CHECK(m.l_d_total == doctest::Approx(w.lambda1 * m.l_d1 + w.lambda2 * m.l_d2).epsilon(1e-6));
  CHECK(m.l_g_adv == doctest::Approx(w.lambda1 * m.l_g_adv1 + w.lambda2 * m.l_g_adv2).epsilon(1e-12));
  CHECK(m.l_g_total == doctest::Approx(generator_total_loss(m.l_percep, m.l_g_adv1, m.l_g_adv2, m.l_l1, w)).epsilon(1e-5));
  CHECK(m.l_d1 > 0);
  CHECK(m.l_d2 > 0);
}

TEST_CASE("non-finite terms abort with a diagnostic") {
  const Dataset data = Dataset::load(testing::mini_hr(), 32);
  TrainState s(small_config());
  s.generator.params().get("conv_last.bias").mutable_value().fill(std::nanf(""));
  try {
    train_iteration(data, s);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite l_d1 at iteration 1") != std::string::npos);
  }
  TrainState p(small_config());
  p.config.pretrain_iterations = 1;
  p.generator.params().get("conv_last.bias").mutable_value().fill(std::nanf(""));
  CHECK_THROWS_WITH_AS(train_iteration(data, p), doctest::Contains("non-finite l_l1"), NumericError);
}

TEST_CASE("batch sampling") {
  const Dataset data = Dataset::load(testing::mini_hr(), 32);
  TrainState a(small_config()), b(small_config());
  const Batch x = sample_batch(data, a), y = sample_batch(data, b);
  CHECK(x.hr.shape() == Shape{2, 3, 32, 32});
  CHECK(x.lr.shape() == Shape{2, 3, 8, 8});
  CHECK(x.hr == y.hr);
  CHECK(x.lr == y.lr);
  CHECK_FALSE(sample_batch(data, a).hr == x.hr);
  CHECK_THROWS_AS(pretrain_step(a, Batch{x.lr, x.lr}), ShapeError);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const TrainConfig c = small_config();
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);
  TrainState a(c), b(c);
  for (int i = 0; i < 20; ++i) {
    const StepMetrics ma = train_iteration(data, a);
    const StepMetrics mb = train_iteration(data, b);
    CHECK(ma.csv_row() == mb.csv_row());
  }
  CHECK(to_archive(a) == to_archive(b));
  TrainConfig other = c;
  other.seed = 6;
  TrainState d(other);
  train_iteration(data, d);
  CHECK_FALSE(snapshot(d.generator) == snapshot(TrainState(c).generator));
}

TEST_CASE("ten desk iterations write one checkpoint and ten log rows") {
  testing::TempDir tmp("train10");
  TrainConfig c = desk_config();
  c.total_iterations = 10;
  c.output_dir = tmp.path().string();
  int calls = 0;
  const TrainState s = train(c, {std::nullopt, [&](const StepMetrics&) { ++calls; }});
  CHECK(calls == 10);
  CHECK(s.iteration == 10);
  const auto lines = read_lines(tmp / "metrics.csv");
  REQUIRE(lines.size() == 11);
  CHECK(lines[0] == StepMetrics::csv_header);
  CHECK(lines[10].starts_with("10,"));
  std::size_t checkpoints = 0;
  for (const auto& e : std::filesystem::directory_iterator(tmp / "checkpoints")) checkpoints += e.is_regular_file();
  CHECK(checkpoints == 1);
  CHECK(std::filesystem::exists(checkpoint_path(tmp.path(), 10)));
}

TEST_CASE("resuming reproduces an uninterrupted run bitwise") {
  testing::TempDir full("resume_full"), part("resume_part");
  TrainConfig c = small_config();
  c.pretrain_iterations = 3;
  c.total_iterations = 12;
  c.checkpoint_interval = 6;
  c.output_dir = full.path().string();
  const TrainState whole = train(c);

  c.output_dir = part.path().string();
  TrainConfig first = c;
  first.total_iterations = 9;  // runs past the checkpoint that is resumed from
  train(first);
  const TrainState resumed = train(c, {checkpoint_path(part.path(), 6), nullptr});
  CHECK(resumed.iteration == 12);
  CHECK(placeless(resumed) == placeless(whole));
  CHECK(read_lines(full / "metrics.csv") == read_lines(part / "metrics.csv"));
  CHECK(encode_archive(placeless(load_checkpoint(checkpoint_path(full.path(), 12)))) ==
        encode_archive(placeless(load_checkpoint(checkpoint_path(part.path(), 12)))));

  TrainConfig changed = c;
  changed.mode = TrainMode::single;
  CHECK_THROWS_AS(train(changed, {checkpoint_path(part.path(), 6), nullptr}), ConfigError);
  CHECK_THROWS_AS(train(c, {part / "missing.ckpt", nullptr}), ArgumentError);
}

TEST_CASE("desk training keeps every term finite and discriminators learn") {
  TrainConfig c = desk_config(TrainMode::multi);
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);
  TrainState s(c);
  double d1_late = 0, d2_late = 0;
  for (int i = 1; i <= 100; ++i) {
    const StepMetrics m = train_iteration(data, s);
    for (double v : {m.l_d_total, m.l_d1, m.l_d2, m.l_g_adv1, m.l_g_adv2, m.l_g_adv, m.l_percep, m.l_l1, m.l_g_total})
      CHECK(std::isfinite(v));
    if (i > 40 && i <= 50) {
      d1_late += m.l_d1 / 10;
      d2_late += m.l_d2 / 10;
    }
  }
  INFO("mean discriminator losses over iterations 41-50: " << d1_late << ", " << d2_late);
  CHECK(d1_late < kTwoLn2);
  CHECK(d2_late < kTwoLn2);
}

TEST_CASE("configuration files") {
  const TrainConfig full = TrainConfig::load(testing::config_dir() / "full.conf");
  CHECK(full.learning_rate == 1e-4);
  CHECK(full.batch_size == 48);
  CHECK(full.hr_patch_size == 256);
  CHECK(full.generator == GeneratorConfig::full_scale());
  CHECK(full.discriminator == UNetDiscriminatorConfig::full_scale());
  CHECK(TrainConfig::from_config(KeyValueConfig::parse(full.to_config().serialize())) == full);

  const TrainConfig desk = TrainConfig::load(testing::config_dir() / "desk.conf");
  CHECK(desk.generator.num_rrdb_blocks == 6);
  CHECK(desk.discriminator.first_conv_channels == 16);
  CHECK(desk.batch_size == 4);
  CHECK(desk.hr_patch_size == 64);
  CHECK(TrainConfig::from_config(KeyValueConfig::parse(desk.to_config().serialize())) == desk);

  CHECK_THROWS_WITH_AS(TrainConfig::from_config(KeyValueConfig::parse("learning_rat = 0.1")),
                       doctest::Contains("learning_rat"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("hr_patch_size = 40")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("mode = triple")), ConfigError);
}

TEST_CASE("empty or missing datasets are configuration errors") {
  testing::TempDir tmp("emptyds");
  CHECK_THROWS_AS(Dataset::load(tmp.path(), 64), ConfigError);
  CHECK_THROWS_AS(Dataset::load(tmp / "absent", 64), ConfigError);
  TrainConfig c = small_config();
  c.dataset_dir = tmp.path().string();
  c.output_dir = (tmp / "out").string();
  c.total_iterations = 1;
  CHECK_THROWS_AS(train(c), ConfigError);
}
