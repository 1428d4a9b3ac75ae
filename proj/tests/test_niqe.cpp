#include <doctest.h>

#include <fstream>
#include <random>

#include "aesr/degradation.hpp"
#include "aesr/niqe.hpp"
#include "support.hpp"

using namespace aesr;

namespace {

std::vector<double> gaussian_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

std::vector<double> laplacian_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) {
    const double u = rng.uniform(-0.5, 0.5);
    x = (u < 0 ? 1.0 : -1.0) * std::log(1.0 - 2.0 * std::abs(u));
  }
  return v;
}

// Draws from the asymmetric generalised Gaussian with the given shape and
// side scales: a side is chosen with probability proportional to its scale,
// then |x| = scale * G^(1/alpha) with G ~ Gamma(1/alpha, 1).
std::vector<double> aggd_samples(const AggdFit& p, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::gamma_distribution<double> gamma(1.0 / p.alpha, 1.0);
  std::uniform_real_distribution<double> side(0.0, p.sigma_l + p.sigma_r);
  std::vector<double> v(n);
  for (double& x : v) {
    const double mag = std::pow(gamma(gen), 1.0 / p.alpha);
    x = side(gen) < p.sigma_l ? -p.sigma_l * mag : p.sigma_r * mag;
  }
  return v;
}

ImageTensor gray_of(const std::filesystem::path& p) { return to_luminance(load_image(p)); }

ImageTensor blurred(const ImageTensor& img, double sigma, int size) {
  return filter2d(img, gaussian_kernel(size, sigma, sigma, 0.0).matrix);
}

ImageTensor with_noise(const ImageTensor& img, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  ImageTensor out = img;
  for (float& v : out.values()) v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
  return out;
}

const NiqeModel& shipped_model() {
  static const NiqeModel model = NiqeModel::load(default_niqe_model_path());
  return model;
}

}  // namespace

TEST_CASE("aggd fit recovers the Gaussian shape") {
  const AggdFit f = fit_aggd(gaussian_samples(1000000, 1));
  CHECK(std::abs(f.alpha - 2.0) <= 0.1);
  CHECK(std::abs(f.sigma_l / f.sigma_r - 1.0) <= 0.05);
}

TEST_CASE("aggd fit recovers the Laplacian shape") {
  const AggdFit f = fit_aggd(laplacian_samples(1000000, 2));
  CHECK(std::abs(f.alpha - 1.0) <= 0.1);
  CHECK(std::abs(f.sigma_l / f.sigma_r - 1.0) <= 0.05);
}

TEST_CASE("negating the samples swaps the side scales exactly") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    std::vector<double> v = laplacian_samples(5000, seed);
    for (std::size_t i = 0; i < v.size(); i += 3) v[i] *= 0.5;
    std::vector<double> neg = v;
    for (double& x : neg) x = -x;
    const AggdFit a = fit_aggd(v), b = fit_aggd(neg);
    CHECK(a.alpha == b.alpha);
    CHECK(a.sigma_l == b.sigma_r);
    CHECK(a.sigma_r == b.sigma_l);
  }
}

TEST_CASE("aggd fit errors") {
  CHECK_THROWS_AS(fit_aggd(std::vector<double>(99, 1.0)), FitError);
  CHECK_THROWS_AS(fit_aggd(std::vector<double>(500, 0.0)), FitError);
  CHECK_THROWS_AS(fit_aggd(std::vector<double>(500, 2.0)), FitError);
  std::vector<double> v = gaussian_samples(500, 6);
  v[10] = std::nan("");
  CHECK_THROWS_AS(fit_aggd(v), FitError);
}

TEST_CASE("refitting data simulated from a fit recovers its shape") {
  const auto files = list_images(testing::mini_hr());
  for (std::size_t i = 0; i < files.size(); i += 5) {
    const Tensor<double> mscn = compute_mscn(gray_of(files[i]));
    const AggdFit f = fit_aggd(mscn.values());
    const AggdFit g = fit_aggd(aggd_samples(f, 200000, 100 + i));
    INFO(files[i].filename() << ": alpha " << f.alpha << " refit " << g.alpha);
    CHECK(std::abs(g.alpha - f.alpha) <= 0.1 * f.alpha);
  }
}

TEST_CASE("constant image has an all-zero coefficient field") {
  const Tensor<double> m = compute_mscn(ImageTensor(Shape{1, 1, 20, 30}, 0.6f));
  CHECK(m.shape() == Shape{1, 1, 20, 30});
  for (double v : m.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(compute_mscn(ImageTensor(Shape{1, 1, 13, 40}, 0.5f)), ArgumentError);
}

TEST_CASE("coefficient fields of natural images are centred") {
  for (const auto& p : list_images(testing::mini_hr())) {
    const double m = mean(compute_mscn(gray_of(p)));
    INFO(p.filename() << " mean " << m);
    CHECK(m >= -0.1);
    CHECK(m <= 0.1);
  }
}

TEST_CASE("doubling the intensity barely changes the coefficient field" * doctest::may_fail()) {
  double worst = 0;
  for (const auto& p : list_images(testing::mini_hr())) {
    const ImageTensor g = gray_of(p);
    ImageTensor g2 = g;
    for (float& v : g2.values()) v *= 2.0f;
    worst = std::max(worst, max_abs_diff(compute_mscn(g), compute_mscn(g2)));
  }
  INFO("largest coefficient change " << worst);
  CHECK(worst < 0.2);
}

TEST_CASE("feature layout and determinism") {
  const auto files = list_images(testing::mini_hr());
  const ImageTensor g = gray_of(files.front());
  const ImageFeatures a = extract_features(g), b = extract_features(g);
  CHECK(a.values.size() == static_cast<std::size_t>(kNiqeFeatures));
  CHECK(a.values == b.values);
  CHECK(a.patches_used >= 1);
  for (double v : a.values) CHECK(std::isfinite(v));
  Rng rng(7);
  const ImageTensor odd = testing::random_tensor<float>(Shape{1, 1, 100, 230}, rng, 0, 1);
  CHECK(extract_features(odd).values.size() == static_cast<std::size_t>(kNiqeFeatures));
  CHECK_THROWS_AS(extract_features(ImageTensor(Shape{1, 1, 60, 60}, 0.5f)), ArgumentError);
}

TEST_CASE("white noise and its box blur have different statistics") {
  Rng rng(8);
  const ImageTensor noise = testing::random_tensor<float>(Shape{1, 1, 192, 192}, rng, 0, 1);
  const ImageTensor blur = filter2d(noise, Tensor<double>(Shape{1, 1, 5, 5}, 1.0 / 25));
  const ImageFeatures fn = extract_features(noise), fb = extract_features(blur);
  double dist = 0;
  for (int i = 0; i < kNiqeFeatures; ++i) dist += (fn.values[i] - fb.values[i]) * (fn.values[i] - fb.values[i]);
  CHECK(std::sqrt(dist) > 0);
  // The blurred field is strongly correlated with its neighbours, which shows
  // as a larger product-distribution mean than for independent noise.
  INFO("noise shape " << fn.values[0] << " blurred shape " << fb.values[0]);
  CHECK(fb.values[3] > fn.values[3]);
  CHECK(fn.values[0] != fb.values[0]);
}

TEST_CASE("pristine fit of one repeated image is the ridge alone") {
  const auto files = list_images(testing::mini_hr());
  const ImageTensor img = load_image(files[2]);
  const NiqeModel m = fit_pristine_model(std::vector<ImageTensor>(10, img), 1e-3);
  const ImageFeatures f = extract_features(to_luminance(img));
  for (int i = 0; i < kNiqeFeatures; ++i) {
    CHECK(m.mu(i) == f.values[static_cast<std::size_t>(i)]);
    for (int j = 0; j < kNiqeFeatures; ++j) CHECK(m.sigma(i, j) == (i == j ? 1e-3 : 0.0));
  }
  CHECK_THROWS_AS(fit_pristine_model(std::vector<ImageTensor>(9, img)), FitError);
}

TEST_CASE("pristine mean equals the mean of per-image features") {
  const auto files = list_images(testing::mini_hr());
  const NiqeModel m = fit_pristine_model(testing::mini_hr());
  std::vector<double> acc(kNiqeFeatures, 0.0);
  for (const auto& p : files) {
    const ImageFeatures f = extract_features(gray_of(p));
    for (int i = 0; i < kNiqeFeatures; ++i) acc[static_cast<std::size_t>(i)] += f.values[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < kNiqeFeatures; ++i)
    CHECK(std::abs(m.mu(i) - acc[static_cast<std::size_t>(i)] / static_cast<double>(files.size())) <= 1e-10);
  CHECK((m.sigma - m.sigma.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m.sigma).eigenvalues().minCoeff() > 0);
}

TEST_CASE("model file round trip") {
  testing::TempDir tmp("niqemodel");
  NiqeModel m;
  Rng rng(9);
  m.mu = Eigen::VectorXd(kNiqeFeatures);
  m.sigma = Eigen::MatrixXd(kNiqeFeatures, kNiqeFeatures);
  for (int i = 0; i < kNiqeFeatures; ++i) m.mu(i) = rng.normal() * 1e3;
  for (int i = 0; i < m.sigma.size(); ++i) m.sigma.data()[i] = rng.normal() / 7;
  m.sigma = (m.sigma + m.sigma.transpose()).eval();
  m.patch_size = 64;
  m.sharpness_fraction = 0.6;
  m.save(tmp / "m.txt");
  CHECK(NiqeModel::load(tmp / "m.txt") == m);
  std::ofstream(tmp / "bad.txt") << "NIQE 1 96 0.75\n1 2 3\n";
  CHECK_THROWS_AS(NiqeModel::load(tmp / "bad.txt"), FormatError);
  CHECK_THROWS_AS(NiqeModel::load(tmp / "none.txt"), IoError);
}

TEST_CASE("self distance is zero") {
  const NiqeModel& m = shipped_model();
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(kNiqeFeatures, kNiqeFeatures);
  CHECK(niqe_distance(m.mu, zero, m.mu, zero) == 0.0);
  CHECK(niqe_distance(m.mu, m.sigma, m.mu, zero) == 0.0);
  Eigen::VectorXd shifted = m.mu;
  shifted(0) += 0.1;
  CHECK(niqe_distance(m.mu, m.sigma, shifted, zero) > 0.0);
}

TEST_CASE("heavy degradation always scores worse") {
  const NiqeModel& m = shipped_model();
  const auto files = list_images(testing::mini_hr());
  REQUIRE(files.size() == 20);
  for (std::size_t i = 0; i < files.size(); ++i) {
    const ImageTensor img = load_image(files[i]);
    const double clean = niqe_score(img, m);
    const double bad = niqe_score(with_noise(blurred(img, 3.0, 19), 0.1, i), m);
    INFO(files[i].filename() << " clean " << clean << " degraded " << bad);
    CHECK(clean >= 0);
    CHECK(bad > clean);
  }
}

TEST_CASE("scores rise monotonically with blur for most images") {
  const NiqeModel& m = shipped_model();
  const auto files = list_images(testing::mini_hr());
  int ordered = 0;
  for (const auto& p : files) {
    const ImageTensor img = load_image(p);
    const double s0 = niqe_score(img, m), s1 = niqe_score(blurred(img, 1.0, 7), m),
                 s3 = niqe_score(blurred(img, 3.0, 19), m);
    ordered += s0 < s1 && s1 < s3;
  }
  CHECK(ordered * 10 >= static_cast<int>(files.size()) * 9);
}

TEST_CASE("scoring is deterministic and ignores batch replication") {
  const NiqeModel& m = shipped_model();
  const ImageTensor img = load_image(list_images(testing::mini_hr())[4]);
  const double s = niqe_score(img, m);
  CHECK(niqe_score(img, m) == s);
  ImageTensor twice(Shape{2, 3, img.height(), img.width()});
  std::copy(img.data(), img.data() + img.size(), twice.data());
  std::copy(img.data(), img.data() + img.size(), twice.data() + img.size());
  CHECK(niqe_score(twice, m) == s);
  CHECK(niqe_score(gray_to_rgb(to_luminance(img)), m) == doctest::Approx(s).epsilon(1e-6));
}
