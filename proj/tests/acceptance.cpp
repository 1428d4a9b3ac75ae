#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "aesr/degradation.hpp"
#include "aesr/discriminator.hpp"
#include "aesr/generator.hpp"
#include "aesr/losses.hpp"
#include "aesr/niqe.hpp"
#include "aesr/training.hpp"
#include "cli.hpp"
#include "support.hpp"

using namespace aesr;
using ag::Var;
namespace fs = std::filesystem;

namespace {

const double kTwoLn2 = 2.0 * std::log(2.0);

// Collects failed checks for one criterion.
struct Report {
  std::vector<std::string> failures;
  std::ostringstream notes;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

Tensor<double> tensor_of(Shape s, double v) { return Tensor<double>(s, v); }

void criterion_loss_identities(Report& r) {
  double worst = 0;
  for (double c : {-3.0, 0.0, 0.7, 12.0}) {
    const Var<double> m(tensor_of(Shape{2, 1, 5, 6}, c));
    worst = std::max(worst, std::abs(discriminator_loss(m, m).item() - kTwoLn2));
    worst = std::max(worst, std::abs(generator_adversarial_loss(m, m).item() - kTwoLn2));
  }
  r.check(worst <= 1e-6, "constant maps deviate from 2 ln 2 by " + std::to_string(worst));
  Rng rng(101);
  int exact = 0;
  for (int t = 0; t < 100; ++t) {
    const Var<double> a(testing::random_tensor<double>(Shape{1, 1, 4, 4}, rng, -5, 5));
    const Var<double> b(testing::random_tensor<double>(Shape{1, 1, 4, 4}, rng, -5, 5));
    exact += generator_adversarial_loss(a, b).item() == discriminator_loss(b, a).item();
  }
  r.check(exact == 100, "swap identity exact on " + std::to_string(exact) + "/100");
  r.notes << "max |L - 2ln2| " << worst << ", swap exact " << exact << "/100";
}

void criterion_relativistic_oracle(Report& r) {
  Rng rng(102);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const Tensor<double> a = testing::random_tensor<double>(Shape{1, 1, 2, 2}, rng, -6, 6);
    const Tensor<double> b = testing::random_tensor<double>(Shape{1, 1, 2, 2}, rng, -6, 6);
    const double mb = (b[0] + b[1] + b[2] + b[3]) / 4.0;
    const Tensor<double> got = relativistic_map(Var<double>(a), Var<double>(b)).value();
    for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(got[i] - 1.0 / (1.0 + std::exp(mb - a[i]))));
  }
  r.check(worst <= 1e-6, "max deviation " + std::to_string(worst));
  r.notes << "max deviation over 1000 trials " << worst;
}

int kinked_draws = 0;

// Three random coordinates of `target` against central differences. A draw
// whose +-step interval straddles an activation kink is redrawn.
int check_coordinates(Report& r, Var<double>& target, Rng& rng, const std::function<Var<double>()>& loss,
                      const std::string& what) {
  const Tensor<double> grad = target.grad();
  const std::function<double()> f = [&] { return loss().item(); };
  int ok = 0;
  for (int t = 0; t < 3; ++t) {
    auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(grad.size()) - 1));
    for (int redraw = 0; redraw < 20 && !testing::smooth_at(target, idx, f); ++redraw) {
      ++kinked_draws;
      idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(grad.size()) - 1));
    }
    const auto g = testing::central_difference(target, idx, f, grad[idx]);
    r.check(g.ok, what + "[" + std::to_string(idx) + "] analytic " + std::to_string(g.analytic) + " numeric " +
                      std::to_string(g.numeric));
    ok += g.ok;
  }
  return ok;
}

void criterion_gradients(Report& r) {
  Rng rng(103);
  int ok = 0, total = 0;
  {
    auto var = [&](Shape s) { return Var<double>(testing::random_tensor<double>(s, rng), true); };
    AttentionGateParams<double> p{var(Shape{8, 8, 1, 1}), var(Shape{8, 16, 1, 1}), var(Shape{1, 8, 1, 1}),
                                  var(Shape{1, 8, 1, 1}), var(Shape{1, 1, 1, 1}), 8};
    Var<double> x = var(Shape{1, 8, 8, 8});
    Var<double> g = var(Shape{1, 16, 4, 4});
    auto loss = [&] { return ag::sum(attention_gate_forward(x, g, p).first); };
    loss().backward();
    for (auto [t, name] : {std::pair{&x, "gate.x_l"}, {&g, "gate.g"}, {&p.w_x, "gate.w_x"}, {&p.psi, "gate.psi"}}) {
      ok += check_coordinates(r, *t, rng, loss, name);
      total += 3;
    }
  }
  {
    GeneratorConfig c;
    c.num_rrdb_blocks = 1;
    c.base_channels = 8;
    c.growth_channels = 4;
    Generator<double> gen(c, 104);
    Var<double> x(testing::random_tensor<double>(Shape{1, 8, 6, 6}, rng), true);
    const Var<double> proj(testing::random_tensor<double>(x.shape(), rng));
    auto loss = [&] { return ag::sum(ag::mul(gen.rrdb_forward(0, x), proj)); };
    loss().backward();
    ok += check_coordinates(r, x, rng, loss, "rrdb.x");
    ok += check_coordinates(r, gen.params().get("body.0.rdb2.conv3.weight"), rng, loss, "rrdb.rdb2.conv3");
    total += 6;
  }
  {
    UNetDiscriminatorConfig c;
    c.first_conv_channels = 4;
    c.num_levels = 2;
    UNetDiscriminator<double> d(c, 105);
    Var<double> x(testing::random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0, 1), true);
    const Var<double> proj(testing::random_tensor<double>(Shape{1, 1, 8, 8}, rng));
    auto loss = [&] { return ag::sum(ag::mul(d.forward(x, PowerIteration::frozen).logits, proj)); };
    loss().backward();
    ok += check_coordinates(r, x, rng, loss, "unet.input");
    for (const char* name : {"down1.weight", "att0.psi", "up1.weight"})
      ok += check_coordinates(r, d.params().get(name), rng, loss, std::string("unet.") + name);
    total += 12;
  }
  r.notes << ok << "/" << total << " coordinates within tolerance (" << kinked_draws << " draws redrawn at kinks)";
}

double top_singular_value(const Tensor<double>& w) {
  const auto rows = static_cast<Eigen::Index>(w.batch());
  const auto cols = static_cast<Eigen::Index>(w.size()) / rows;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = w[static_cast<std::size_t>(i * cols + j)];
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

void criterion_spectral_norm(Report& r) {
  Rng rng(106);
  double lo = 1e9, hi = 0;
  for (int t = 0; t < 20; ++t) {
    const int out = 4 + t % 5, in = 2 + t % 4, k = t % 2 ? 3 : 1;
    const Tensor<double> w = testing::random_tensor<double>(Shape{out, in, k, k}, rng, -2, 2);
    const auto res = spectral_normalize(w, testing::random_tensor<double>(Shape{out, 1, 1, 1}, rng), 50);
    const double s = top_singular_value(res.weight);
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  r.check(lo >= 0.99 && hi <= 1.01, "sigma range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  r.notes << "top singular value over 20 kernels in [" << lo << ", " << hi << "]";
}

void criterion_shapes(Report& r) {
  const Generator<float> gen(GeneratorConfig{}, 107);
  UNetDiscriminator<float> d1(UNetDiscriminatorConfig{}, 108), d2(UNetDiscriminatorConfig{}, 109);
  Rng rng(110);
  int sizes = 0;
  for (auto [h, w] : {std::pair{16, 16}, {32, 48}, {64, 64}, {48, 96}, {80, 32}}) {
    const std::string tag = std::to_string(h) + "x" + std::to_string(w);
    const Var<float> lr(testing::random_tensor<float>(Shape{1, 3, h / 4, w / 4}, rng, 0, 1));
    r.check(gen.forward(lr).shape() == Shape{1, 3, h, w}, "generator " + tag);
    const Var<float> img(testing::random_tensor<float>(Shape{2, 3, h, w}, rng, 0, 1));
    const auto [full, half] = multiscale_forward(img, d1, d2);
    r.check(full.logits.shape() == Shape{2, 1, h, w}, "D1 logits " + tag);
    r.check(half.logits.shape() == Shape{2, 1, h / 2, w / 2}, "D2 logits " + tag);
    for (const DiscriminatorOutput<float>* o : {&full, &half}) {
      const int sh = o == &full ? h : h / 2, sw = o == &full ? w : w / 2;
      r.check(o->attention_maps.size() == 3, "attention map count " + tag);
      for (std::size_t i = 0; i < o->attention_maps.size(); ++i) {
        const int f = 4 >> i;
        r.check(o->attention_maps[i].shape() == Shape{2, 1, sh / f, sw / f}, "attention shape " + tag);
        for (float a : o->attention_maps[i].value().values()) {
          if (!(a > 0.0f && a < 1.0f)) {
            r.check(false, "attention value outside (0,1) at " + tag);
            break;
          }
        }
      }
    }
    ++sizes;
  }
  r.notes << sizes << " input sizes checked";
}

void criterion_degradation(Report& r) {
  const auto files = list_images(testing::mini_hr());
  const ImageTensor hr = crop(load_image(files.front()), 0, 0, 128, 128);
  const DegradationConfig full;
  Rng a(111), b(111), other(112);
  const ImageTensor la = synthesize_lr(hr, full, a);
  r.check(la == synthesize_lr(hr, full, b), "same seed differs");
  r.check(!(la == synthesize_lr(hr, full, other)), "different seeds agree");
  r.check(la.shape() == Shape{1, 3, 32, 32}, "output shape " + la.shape().str());

  Rng c(113);
  const float benign = max_abs_diff(synthesize_lr(hr, benign_degradation_config(), c), resize(hr, 0.25, ResizeMode::area));
  r.check(benign <= 2.0f / 255.0f, "benign vs area resize " + std::to_string(benign * 255) + "/255");

  DegradationConfig quiet = full;
  for (auto& p : quiet.passes) {
    p.noise_sigma = {0.0, 0.0};
    p.poisson_scale = {0.0, 0.0};
    p.jpeg_quality = {100, 100};
  }
  float constant = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(114 + seed);
    const ImageTensor flat(Shape{1, 3, 128, 128}, 0.37f);
    constant = std::max(constant, max_abs_diff(synthesize_lr(flat, quiet, rng), ImageTensor(Shape{1, 3, 32, 32}, 0.37f)));
  }
  r.check(constant <= 2.0f / 255.0f, "constant image drift " + std::to_string(constant * 255) + "/255");
  r.notes << "benign " << benign * 255 << "/255, constant " << constant * 255 << "/255";
}

// Fixed batch drawn from a separately seeded state, used to measure L1.
double eval_l1(const Generator<float>& g, const Batch& b) {
  ag::NoGradGuard ng;
  return ag::l1_loss(g.forward(Var<float>(b.lr)), Var<float>(b.hr)).item();
}

struct SmokeRun {
  fs::path multi_ckpt;
  fs::path single_ckpt;
};

bool all_finite(const StepMetrics& m) {
  for (double v : {m.l_d_total, m.l_d1, m.l_d2, m.l_g_adv1, m.l_g_adv2, m.l_g_adv, m.l_percep, m.l_l1, m.l_g_total})
    if (!std::isfinite(v)) return false;
  return true;
}

void criterion_smoke_training(Report& r, const testing::TempDir& tmp, SmokeRun& run) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  TrainConfig c = TrainConfig::load(testing::config_dir() / "desk.conf");
  c.dataset_dir = testing::mini_hr().string();
  c.pretrain_iterations = 200;
  const Dataset data = Dataset::load(c.dataset_dir, c.hr_patch_size);

  TrainConfig eval_config = c;
  eval_config.seed = 9999;
  TrainState eval_state(eval_config);
  const Batch eval = sample_batch(data, eval_state);

  TrainState multi(c);
  const double l1_initial = eval_l1(multi.generator, eval);
  bool finite = true;
  for (int i = 0; i < 200; ++i) finite &= all_finite(train_iteration(data, multi));
  const double l1_pretrained = eval_l1(multi.generator, eval);
  r.check(l1_pretrained < 0.25 * l1_initial,
          "pretrain L1 " + std::to_string(l1_initial) + " -> " + std::to_string(l1_pretrained));

  TrainState single = multi;
  single.config.mode = TrainMode::single;
  single.d2.reset();

  auto gan_phase = [&](TrainState& s, double& d1_late, double& d2_late) {
    d1_late = d2_late = 0;
    for (int i = 1; i <= 200; ++i) {
      const StepMetrics m = train_iteration(data, s);
      finite &= all_finite(m);
      if (i > 150) {
        d1_late += m.l_d1 / 50;
        d2_late += m.l_d2 / 50;
      }
    }
  };
  double m_d1 = 0, m_d2 = 0, s_d1 = 0, s_d2 = 0;
  gan_phase(multi, m_d1, m_d2);
  gan_phase(single, s_d1, s_d2);
  r.check(finite, "non-finite loss term");
  r.check(multi.iteration == 400 && single.iteration == 400, "runs did not complete");
  r.check(m_d1 < kTwoLn2 && m_d2 < kTwoLn2,
          "multi late D loss " + std::to_string(m_d1) + ", " + std::to_string(m_d2) + " not below 2 ln 2");
  r.check(s_d1 < kTwoLn2, "single late D loss " + std::to_string(s_d1) + " not below 2 ln 2");

  run.multi_ckpt = tmp / "multi.ckpt";
  run.single_ckpt = tmp / "single.ckpt";
  save_checkpoint(multi, run.multi_ckpt);
  save_checkpoint(single, run.single_ckpt);

  TrainConfig rc = c;
  rc.pretrain_iterations = 2;
  rc.total_iterations = 8;
  rc.checkpoint_interval = 4;
  rc.output_dir = (tmp / "whole").string();
  const TrainState whole = train(rc);
  TrainConfig first = rc;
  first.output_dir = (tmp / "part").string();
  first.total_iterations = 6;
  train(first);
  rc.output_dir = first.output_dir;
  const TrainState resumed = train(rc, {checkpoint_path(tmp / "part", 4), nullptr});
  auto placeless = [](TrainState s) {
    s.config.output_dir.clear();
    return to_archive(s);
  };
  const bool bitwise = placeless(resumed) == placeless(whole);
  r.check(bitwise, "resumed run differs from uninterrupted run");

  const double minutes = std::chrono::duration<double>(clock::now() - start).count() / 60.0;
  r.notes << "eval L1 " << l1_initial << " -> " << l1_pretrained << "; late D loss multi " << m_d1 << "/" << m_d2
          << ", single " << s_d1 << " (2ln2 = " << kTwoLn2 << "); resume bitwise " << (bitwise ? "yes" : "no") << "; "
          << minutes << " min";
}

void criterion_niqe(Report& r) {
  Rng rng(115);
  std::vector<double> gauss(1000000), lap(1000000);
  for (double& x : gauss) x = rng.normal();
  for (double& x : lap) {
    const double u = rng.uniform(-0.5, 0.5);
    x = (u < 0 ? 1.0 : -1.0) * std::log(1.0 - 2.0 * std::abs(u));
  }
  const double a_gauss = fit_aggd(gauss).alpha, a_lap = fit_aggd(lap).alpha;
  r.check(std::abs(a_gauss - 2.0) <= 0.1, "Gaussian shape " + std::to_string(a_gauss));
  r.check(std::abs(a_lap - 1.0) <= 0.1, "Laplacian shape " + std::to_string(a_lap));

  const NiqeModel model = NiqeModel::load(default_niqe_model_path());
  const double self = niqe_distance(model.mu, model.sigma, model.mu, Eigen::MatrixXd::Zero(kNiqeFeatures, kNiqeFeatures));
  r.check(self == 0.0, "self distance " + std::to_string(self));

  auto blurred = [](const ImageTensor& img, double sigma, int size) {
    return filter2d(img, gaussian_kernel(size, sigma, sigma, 0.0).matrix);
  };
  const auto files = list_images(testing::mini_hr());
  int ordered = 0;
  bool deterministic = true;
  for (const fs::path& f : files) {
    const ImageTensor img = load_image(f);
    const double s0 = niqe_score(img, model);
    const double s1 = niqe_score(blurred(img, 1.0, 7), model);
    const double s3 = niqe_score(blurred(img, 3.0, 19), model);
    ordered += s0 < s1 && s1 < s3;
    deterministic &= niqe_score(img, model) == s0;
  }
  r.check(ordered * 10 >= static_cast<int>(files.size()) * 9,
          "monotone on " + std::to_string(ordered) + "/" + std::to_string(files.size()));
  r.check(deterministic, "repeated scores differ");
  r.notes << "alpha gauss " << a_gauss << ", laplace " << a_lap << "; monotone " << ordered << "/" << files.size();
}

int count_png(const fs::path& dir) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".png";
  return n;
}

void criterion_visualization(Report& r, const testing::TempDir& tmp, const SmokeRun& run) {
  if (run.multi_ckpt.empty()) {
    r.check(false, "smoke training did not produce checkpoints");
    return;
  }
  const fs::path img = testing::mini_hr() / "astronaut_0.png";
  auto vis = [&](const fs::path& ckpt, const std::string& what, const fs::path& out) {
    std::ostringstream o, e;
    const int code = cli::run({"visualize", "--checkpoint", ckpt.string(), "--input", img.string(), "--what", what,
                               "--output-dir", out.string()},
                              o, e);
    r.check(code == 0, "visualize " + what + " exit " + std::to_string(code) + ": " + e.str());
    r.check(e.str().find("is constant") == std::string::npos, "degenerate map: " + e.str());
  };
  vis(run.multi_ckpt, "attention", tmp / "att");
  vis(run.multi_ckpt, "dmap", tmp / "dm_multi");
  vis(run.single_ckpt, "dmap", tmp / "dm_single");
  const int att = count_png(tmp / "att"), dm = count_png(tmp / "dm_multi"), ds = count_png(tmp / "dm_single");
  r.check(att == 3, "attention maps " + std::to_string(att));
  r.check(dm == 2, "multi dmaps " + std::to_string(dm));
  r.check(ds == 1, "single dmaps " + std::to_string(ds));

  // Span of the raw attention maps straight from the trained discriminator.
  auto [d1, d2] = load_discriminators(run.multi_ckpt);
  ag::NoGradGuard ng;
  const DiscriminatorOutput<float> o = d1.forward(Var<float>(load_image(img)), PowerIteration::frozen);
  std::ostringstream spans;
  for (const Var<float>& a : o.attention_maps) {
    const auto [lo, hi] = std::minmax_element(a.value().values().begin(), a.value().values().end());
    r.check(*hi > *lo, "attention map has zero span");
    spans << " [" << *lo << ", " << *hi << "]";
  }
  r.notes << att << " attention, " << dm << "+" << ds << " dmaps; attention ranges" << spans.str();
}

}  // namespace

// With arguments, runs only the listed criterion numbers (9 needs 7).
int main(int argc, char** argv) {
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  testing::TempDir tmp("acceptance");
  SmokeRun smoke;
  const std::vector<std::pair<std::string, std::function<void(Report&)>>> criteria{
      {"loss identities", criterion_loss_identities},
      {"relativistic map oracle", criterion_relativistic_oracle},
      {"gradient checks", criterion_gradients},
      {"spectral normalization", criterion_spectral_norm},
      {"shape contracts", criterion_shapes},
      {"degradation", criterion_degradation},
      {"smoke training", [&](Report& r) { criterion_smoke_training(r, tmp, smoke); }},
      {"NIQE", criterion_niqe},
      {"visualization pipeline", [&](Report& r) { criterion_visualization(r, tmp, smoke); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && only.count(i + 1) == 0) continue;
    Report r;
    try {
      criteria[i].second(r);
    } catch (const std::exception& e) {
      r.check(false, std::string("exception: ") + e.what());
    }
    const bool pass = r.failures.empty();
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << i + 1 << " (" << criteria[i].first << "): " << r.notes.str()
              << '\n';
    for (const std::string& f : r.failures) std::cout << "      " << f << '\n';
    std::cout.flush();
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << '\n';
  return failed == 0 ? 0 : 1;
}
