#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "aesr/autograd.hpp"
#include "aesr/rng.hpp"

namespace testing {

inline std::filesystem::path data_dir() { return AESR_DATA_DIR; }
inline std::filesystem::path mini_hr() { return data_dir() / "mini_hr"; }
inline std::filesystem::path config_dir() { return AESR_CONFIG_DIR; }

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    aesr::Rng rng(reinterpret_cast<std::uintptr_t>(this) ^ static_cast<std::uint64_t>(std::hash<std::string>{}(tag)));
    path_ = std::filesystem::temp_directory_path() / ("aesr_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T>
aesr::Tensor<T> random_tensor(aesr::Shape s, aesr::Rng& rng, double lo = -1.0, double hi = 1.0) {
  aesr::Tensor<T> t(s);
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

struct GradCheck {
  double analytic = 0;
  double numeric = 0;
  bool ok = false;
};

/// Central difference of `f` with respect to element `index` of `target`'s
/// value, against the autodiff gradient already accumulated there.
/// Passes when |a - n| <= rel * max(|a|, |n|) or |a - n| <= abs_floor.
inline GradCheck central_difference(aesr::ag::Var<double>& target, std::size_t index,
                                    const std::function<double()>& f, double analytic, double step = 1e-3,
                                    double rel = 1e-3, double abs_floor = 1e-6) {
  double& x = target.mutable_value()[index];
  const double saved = x;
  x = saved + step;
  const double up = f();
  x = saved - step;
  const double down = f();
  x = saved;
  GradCheck r;
  r.analytic = analytic;
  r.numeric = (up - down) / (2 * step);
  const double diff = std::abs(r.analytic - r.numeric);
  r.ok = diff <= rel * std::max(std::abs(r.analytic), std::abs(r.numeric)) || diff <= abs_floor;
  return r;
}

/// True when central differences at `step` and `step / 10` agree within the
/// same tolerance, i.e. no activation kink lies within `step` of the point.
inline bool smooth_at(aesr::ag::Var<double>& target, std::size_t index, const std::function<double()>& f,
                      double step = 1e-3, double rel = 1e-3, double abs_floor = 1e-6) {
  const GradCheck coarse = central_difference(target, index, f, 0.0, step);
  const GradCheck fine = central_difference(target, index, f, 0.0, step / 10);
  const double diff = std::abs(coarse.numeric - fine.numeric);
  return diff <= rel * std::max(std::abs(coarse.numeric), std::abs(fine.numeric)) || diff <= abs_floor;
}

}  // namespace testing
