#include "aesr/niqe.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "aesr/config.hpp"

namespace aesr {

namespace {

struct LocalMoments {
  Tensor<double> mscn;
  Tensor<double> sigma;
};

// Separable 7-tap Gaussian with replicated borders.
Tensor<double> gaussian_blur7(const Tensor<double>& in) {
  static const std::array<double, 7> taps = [] {
    std::array<double, 7> t{};
    const double s = 7.0 / 6.0;
    double sum = 0;
    for (int i = 0; i < 7; ++i) sum += t[static_cast<std::size_t>(i)] = std::exp(-(i - 3) * (i - 3) / (2 * s * s));
    for (double& v : t) v /= sum;
    return t;
  }();
  const int h = in.height(), w = in.width();
  Tensor<double> tmp(in.shape()), out(in.shape());
  const double* src = in.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -3; k <= 3; ++k) acc += taps[static_cast<std::size_t>(k + 3)] * src[y * w + std::clamp(x + k, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -3; k <= 3; ++k) acc += taps[static_cast<std::size_t>(k + 3)] * tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

LocalMoments local_moments(const ImageTensor& gray) {
  const Shape s = gray.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("expected a single (1,1,H,W) gray image, got " + s.str());
  if (s.h < 14 || s.w < 14) throw ArgumentError("image " + s.str() + " is too small for 7x7 local statistics");
  Tensor<double> img(s), sq(s);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = 255.0 * static_cast<double>(gray[i]);
    sq[i] = img[i] * img[i];
  }
  const Tensor<double> mu = gaussian_blur7(img);
  const Tensor<double> mu_sq = gaussian_blur7(sq);
  LocalMoments m{Tensor<double>(s), Tensor<double>(s)};
  for (std::size_t i = 0; i < img.size(); ++i) {
    m.sigma[i] = std::sqrt(std::abs(mu_sq[i] - mu[i] * mu[i]));
    m.mscn[i] = (img[i] - mu[i]) / (m.sigma[i] + 1.0);
  }
  return m;
}

struct RatioTable {
  std::vector<double> gamma;
  std::vector<double> ratio;
};

const RatioTable& ratio_table() {
  static const RatioTable table = [] {
    RatioTable t;
    for (int i = 200; i <= 10000; ++i) {
      const double g = i / 1000.0;
      t.gamma.push_back(g);
      t.ratio.push_back(std::tgamma(2 / g) * std::tgamma(2 / g) / (std::tgamma(1 / g) * std::tgamma(3 / g)));
    }
    return t;
  }();
  return table;
}

Tensor<double> block(const Tensor<double>& t, int y0, int x0, int size) {
  Tensor<double> out(Shape{1, 1, size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out[static_cast<std::size_t>(y) * size + x] = t.at(0, 0, y0 + y, x0 + x);
  return out;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Incremental mean (exact for repeated rows) and unbiased covariance.
void mean_cov(const std::vector<std::vector<double>>& rows, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = Eigen::VectorXd::Zero(kNiqeFeatures);
  for (std::size_t k = 0; k < rows.size(); ++k) mu += (to_vector(rows[k]) - mu) / static_cast<double>(k + 1);
  cov = Eigen::MatrixXd::Zero(kNiqeFeatures, kNiqeFeatures);
  if (rows.size() < 2) return;
  for (const auto& r : rows) {
    const Eigen::VectorXd d = to_vector(r) - mu;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(rows.size() - 1);
}

}  // namespace

Tensor<double> compute_mscn(const ImageTensor& gray) { return local_moments(gray).mscn; }

AggdFit fit_aggd(std::span<const double> samples) {
  if (samples.size() < 100) throw FitError("AGGD fit needs at least 100 samples, got " + std::to_string(samples.size()));
  double left = 0, right = 0, abs_sum = 0, sq_sum = 0;
  std::size_t nl = 0, nr = 0;
  for (double v : samples) {
    if (!std::isfinite(v)) throw FitError("AGGD fit received a non-finite sample");
    if (v < 0) {
      left += v * v;
      ++nl;
    } else if (v > 0) {
      right += v * v;
      ++nr;
    }
    abs_sum += std::abs(v);
    sq_sum += v * v;
  }
  if (nl == 0 || nr == 0) throw FitError("AGGD fit needs samples on both sides of zero");
  const double n = static_cast<double>(samples.size());
  const double l = std::sqrt(left / static_cast<double>(nl));
  const double r = std::sqrt(right / static_cast<double>(nr));
  const double rhat = (abs_sum / n) * (abs_sum / n) / (sq_sum / n);
  // (g^3+1)(g+1)/(g^2+1)^2 with g = l/r, written symmetrically in l and r.
  const double rhat_norm = rhat * (l * l * l + r * r * r) * (l + r) / ((l * l + r * r) * (l * l + r * r));
  const RatioTable& t = ratio_table();
  std::size_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < t.gamma.size(); ++i) {
    const double e = (t.ratio[i] - rhat_norm) * (t.ratio[i] - rhat_norm);
    if (e < best_err) {
      best_err = e;
      best = i;
    }
  }
  const double alpha = t.gamma[best];
  const double k = std::sqrt(std::tgamma(1 / alpha) / std::tgamma(3 / alpha));
  return {alpha, l * k, r * k};
}

std::vector<double> field_features(const Tensor<double>& mscn) {
  const int h = mscn.height(), w = mscn.width();
  std::vector<double> f;
  const AggdFit base = fit_aggd(mscn.values());
  f.push_back(base.alpha);
  f.push_back((base.sigma_l + base.sigma_r) / 2);
  const int shifts[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  std::vector<double> pair(mscn.size());
  for (const auto& s : shifts) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = ((y - s[0]) % h + h) % h, sx = ((x - s[1]) % w + w) % w;
        pair[static_cast<std::size_t>(y) * w + x] = mscn.at(0, 0, y, x) * mscn.at(0, 0, sy, sx);
      }
    const AggdFit a = fit_aggd(pair);
    f.push_back(a.alpha);
    f.push_back((a.sigma_r - a.sigma_l) * std::tgamma(2 / a.alpha) / std::tgamma(1 / a.alpha));
    f.push_back(a.sigma_l);
    f.push_back(a.sigma_r);
  }
  return f;
}

PatchFeatures patch_features(const ImageTensor& gray, int patch_size) {
  if (patch_size < 14 || patch_size % 2 != 0) throw ArgumentError("NIQE patch size must be even and >= 14");
  const int ph = gray.height() / patch_size, pw = gray.width() / patch_size;
  if (ph < 1 || pw < 1) {
    throw ArgumentError("image " + gray.shape().str() + " is smaller than one " + std::to_string(patch_size) + " px patch");
  }
  const ImageTensor full = crop(gray, 0, 0, ph * patch_size, pw * patch_size);
  const ImageTensor half = resize_to(full, full.height() / 2, full.width() / 2, ResizeMode::area);
  const LocalMoments m1 = local_moments(full);
  const LocalMoments m2 = local_moments(half);
  const int hs = patch_size / 2;
  PatchFeatures out;
  for (int py = 0; py < ph; ++py)
    for (int px = 0; px < pw; ++px) {
      std::vector<double> f;
      try {
        f = field_features(block(m1.mscn, py * patch_size, px * patch_size, patch_size));
        const std::vector<double> f2 = field_features(block(m2.mscn, py * hs, px * hs, hs));
        f.insert(f.end(), f2.begin(), f2.end());
      } catch (const FitError&) {
        continue;
      }
      const Tensor<double> sig = block(m1.sigma, py * patch_size, px * patch_size, patch_size);
      out.features.push_back(std::move(f));
      out.sharpness.push_back(mean(sig));
    }
  return out;
}

ImageFeatures extract_features(const ImageTensor& gray, int patch_size, double sharpness_fraction) {
  const PatchFeatures pf = patch_features(gray, patch_size);
  if (pf.features.empty()) throw FitError("no patch of the image has fittable statistics");
  const double max_sharp = *std::max_element(pf.sharpness.begin(), pf.sharpness.end());
  std::vector<std::vector<double>> chosen;
  for (std::size_t i = 0; i < pf.features.size(); ++i)
    if (pf.sharpness[i] > sharpness_fraction * max_sharp) chosen.push_back(pf.features[i]);
  ImageFeatures r;
  r.fallback = chosen.empty();
  if (r.fallback) chosen = pf.features;
  r.patches_used = static_cast<int>(chosen.size());
  r.values.assign(kNiqeFeatures, 0.0);
  for (const auto& f : chosen)
    for (int i = 0; i < kNiqeFeatures; ++i) r.values[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)];
  for (double& v : r.values) v /= static_cast<double>(chosen.size());
  return r;
}

NiqeModel fit_pristine_model(const std::vector<ImageTensor>& images, double ridge, int patch_size,
                             double sharpness_fraction) {
  if (images.size() < 10) throw FitError("pristine model needs at least 10 images, got " + std::to_string(images.size()));
  if (!(ridge > 0)) throw FitError("pristine model ridge must be positive");
  std::vector<std::vector<double>> rows;
  for (const ImageTensor& img : images) rows.push_back(extract_features(to_luminance(img), patch_size, sharpness_fraction).values);
  NiqeModel m;
  m.patch_size = patch_size;
  m.sharpness_fraction = sharpness_fraction;
  mean_cov(rows, m.mu, m.sigma);
  m.sigma += ridge * Eigen::MatrixXd::Identity(kNiqeFeatures, kNiqeFeatures);
  return m;
}

NiqeModel fit_pristine_model(const std::filesystem::path& corpus_dir, double ridge, int patch_size,
                             double sharpness_fraction) {
  if (!std::filesystem::is_directory(corpus_dir)) throw IoError("corpus directory " + corpus_dir.string() + " not found");
  std::vector<ImageTensor> images;
  for (const auto& p : list_images(corpus_dir)) images.push_back(load_image(p));
  return fit_pristine_model(images, ridge, patch_size, sharpness_fraction);
}

double niqe_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                     const Eigen::MatrixXd& s2) {
  const Eigen::MatrixXd s = (s1 + s2) / 2;
  const Eigen::VectorXd d = mu1 - mu2;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
  const Eigen::VectorXd& ev = eig.eigenvalues();
  const double tol = std::max(ev.cwiseAbs().maxCoeff(), 0.0) * static_cast<double>(s.rows()) *
                     std::numeric_limits<double>::epsilon();
  const Eigen::VectorXd proj = eig.eigenvectors().transpose() * d;
  double q = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev[i] > tol) q += proj[i] * proj[i] / ev[i];
  return std::sqrt(std::max(q, 0.0));
}

double niqe_score(const ImageTensor& img, const NiqeModel& model) {
  validate_image(img, "NIQE input");
  double total = 0;
  for (int i = 0; i < img.batch(); ++i) {
    const PatchFeatures pf = patch_features(to_luminance(img, i), model.patch_size);
    if (pf.features.empty()) throw FitError("no patch of the image has fittable statistics");
    Eigen::VectorXd mu;
    Eigen::MatrixXd cov;
    mean_cov(pf.features, mu, cov);
    total += niqe_distance(model.mu, model.sigma, mu, cov);
  }
  return total / img.batch();
}

void NiqeModel::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "NIQE 1 " << patch_size << ' ' << format_double(sharpness_fraction) << '\n';
  for (Eigen::Index i = 0; i < mu.size(); ++i) f << (i ? " " : "") << format_double(mu[i]);
  f << '\n';
  for (Eigen::Index r = 0; r < sigma.rows(); ++r) {
    for (Eigen::Index c = 0; c < sigma.cols(); ++c) f << (c ? " " : "") << format_double(sigma(r, c));
    f << '\n';
  }
  if (!f) throw IoError("failed writing " + path.string());
}

NiqeModel NiqeModel::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open NIQE model " + path.string());
  std::string magic;
  int version = 0;
  NiqeModel m;
  std::string frac;
  if (!(f >> magic >> version >> m.patch_size >> frac) || magic != "NIQE") {
    throw FormatError(path.string() + ": not a NIQE model file");
  }
  if (version != 1) throw FormatError(path.string() + ": unsupported NIQE model version " + std::to_string(version));
  auto number = [&](const std::string& tok) {
    double v = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) throw FormatError(path.string() + ": bad number '" + tok + "'");
    return v;
  };
  m.sharpness_fraction = number(frac);
  m.mu.resize(kNiqeFeatures);
  m.sigma.resize(kNiqeFeatures, kNiqeFeatures);
  std::string tok;
  for (int i = 0; i < kNiqeFeatures; ++i) {
    if (!(f >> tok)) throw FormatError(path.string() + ": truncated mean vector");
    m.mu[i] = number(tok);
  }
  for (int r = 0; r < kNiqeFeatures; ++r)
    for (int c = 0; c < kNiqeFeatures; ++c) {
      if (!(f >> tok)) throw FormatError(path.string() + ": truncated covariance");
      m.sigma(r, c) = number(tok);
    }
  if (f >> tok) throw FormatError(path.string() + ": trailing data");
  return m;
}

std::filesystem::path default_niqe_model_path() { return std::filesystem::path(AESR_DATA_DIR) / "niqe_pristine.txt"; }

}  // namespace aesr
