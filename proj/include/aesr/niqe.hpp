#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aesr/image.hpp"

namespace aesr {

inline constexpr int kNiqeFeatures = 36;

/// Mean-subtracted contrast-normalised coefficients of a (1,1,H,W) gray image
/// with nominal range [0,1], evaluated on the 0..255 scale:
/// (I - mu) / (sigma + 1) with 7x7 Gaussian (sigma 7/6) local moments and
/// replicated borders. Throws ArgumentError below 14x14.
Tensor<double> compute_mscn(const ImageTensor& gray);

struct AggdFit {
  double alpha = 0;    // shape
  double sigma_l = 0;  // left scale
  double sigma_r = 0;  // right scale
};

/// Moment-matching fit of an asymmetric generalised Gaussian, shape searched
/// on the grid 0.2:0.001:10. Throws FitError for fewer than 100 samples,
/// constant samples, or samples confined to one side of zero.
AggdFit fit_aggd(std::span<const double> samples);

/// 18 statistics of one coefficient field: the MSCN fit (shape, mean of the two
/// scales) and, for the four neighbour products, shape, mean, and both
/// scales.
std::vector<double> field_features(const Tensor<double>& mscn);

/// Per-patch 36-vectors (full scale then half scale) and the full-scale
/// sharpness of each patch. Patches whose statistics cannot be fitted are left out.
struct PatchFeatures {
  std::vector<std::vector<double>> features;
  std::vector<double> sharpness;
};
PatchFeatures patch_features(const ImageTensor& gray, int patch_size = 96);

struct ImageFeatures {
  std::vector<double> values;  // length 36
  int patches_used = 0;
  bool fallback = false;  // no patch passed the sharpness criterion
};

/// Mean feature vector over the patches whose sharpness exceeds
/// sharpness_fraction * max sharpness.
ImageFeatures extract_features(const ImageTensor& gray, int patch_size = 96, double sharpness_fraction = 0.75);

struct NiqeModel {
  Eigen::VectorXd mu;     // 36
  Eigen::MatrixXd sigma;  // 36 x 36, ridge included
  int patch_size = 96;
  double sharpness_fraction = 0.75;

  void save(const std::filesystem::path& path) const;
  static NiqeModel load(const std::filesystem::path& path);
  friend bool operator==(const NiqeModel& a, const NiqeModel& b) {
    return a.patch_size == b.patch_size && a.sharpness_fraction == b.sharpness_fraction && a.mu == b.mu &&
           a.sigma == b.sigma;
  }
};

/// Mean and covariance of per-image extract_features over a corpus of at
/// least 10 images, plus ridge * I.
NiqeModel fit_pristine_model(const std::vector<ImageTensor>& images, double ridge = 1e-3, int patch_size = 96,
                             double sharpness_fraction = 0.75);
NiqeModel fit_pristine_model(const std::filesystem::path& corpus_dir, double ridge = 1e-3, int patch_size = 96,
                             double sharpness_fraction = 0.75);

/// sqrt(d^T ((s1 + s2)/2)^+ d) with d = mu1 - mu2 and a pseudo-inverse that
/// drops numerically zero eigenvalues.
double niqe_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                     const Eigen::MatrixXd& s2);

/// Mean over batch items of the distance between the model and the Gaussian
/// fitted to all patches of the item's luminance.
double niqe_score(const ImageTensor& img, const NiqeModel& model);

/// Model shipped with the repository.
std::filesystem::path default_niqe_model_path();

}  // namespace aesr
