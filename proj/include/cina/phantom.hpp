#pragma once

// Synthetic fetal-brain phantoms. Concentric tissue model in physical mm:
//
//   CSF   r < 1.2 R
//   cGM   r < R (1 + a sin(k theta) sin(k phi))          (folded outer surface)
//   WM    r < outer surface - 0.22 R
//   LV    two ellipsoids, linear size 0.8 + 0.6 lv_scale
//   CB    posterior-inferior ellipsoid
//   BS    inferior elongated ellipsoid
//
// with R linear in gestational age and the folding amplitude a increasing in
// both folding_scale and age. Later structures overwrite earlier ones, so the
// label map is exhaustive and exclusive by construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>

#include "cina/errors.hpp"
#include "cina/volume.hpp"

namespace cina {

struct PhantomSpec {
  double ga_weeks = 30.0;
  double lv_scale = 0.5;
  double folding_scale = 0.5;
  std::array<std::int32_t, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr int kFoldingFrequency = 6;

// Per-class mean intensities with T2-like contrast: fluid bright, cortex dark.
inline constexpr std::array<float, kNumClasses> kPhantomIntensity{0.0f, 0.9f, 0.35f, 0.6f, 0.95f, 0.5f, 0.55f};

inline double phantom_brain_radius_mm(double ga_weeks) { return 15.5 + 0.55 * (ga_weeks - 22.0); }

inline double phantom_folding_amplitude(double folding_scale, double ga_weeks) {
  const double maturity = std::clamp((ga_weeks - 20.0) / 20.0, 0.0, 1.0);
  return 0.02 + 0.10 * folding_scale * maturity;
}

inline double phantom_lv_size(double lv_scale) { return 0.8 + 0.6 * lv_scale; }

// Default maturation rule tying folding to age.
inline double default_folding_rule(double ga_weeks) { return std::clamp((ga_weeks - 20.0) / 20.0, 0.0, 1.0); }

namespace detail {

inline bool in_ellipsoid(const std::array<double, 3>& p, const std::array<double, 3>& c,
                         const std::array<double, 3>& r) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / r[a];
    s += d * d;
  }
  return s < 1.0;
}

}  // namespace detail

inline void validate(const PhantomSpec& spec) {
  if (!(spec.ga_weeks >= 20.0 && spec.ga_weeks <= 40.0)) throw ConfigError("phantom ga_weeks must lie in [20, 40]");
  if (!(spec.lv_scale >= 0.0 && spec.lv_scale <= 1.0)) throw ConfigError("phantom lv_scale must lie in [0, 1]");
  if (!(spec.folding_scale >= 0.0 && spec.folding_scale <= 1.0))
    throw ConfigError("phantom folding_scale must lie in [0, 1]");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("phantom noise_sigma must be >= 0");
  for (int a = 0; a < 3; ++a) {
    if (spec.dims[a] < 16) throw ConfigError("phantom dims must be >= 16 per axis");
    if (!(spec.spacing[a] > 0.0)) throw ConfigError("phantom spacing must be positive");
  }
  const double outer = 1.2 * phantom_brain_radius_mm(spec.ga_weeks);
  for (int a = 0; a < 3; ++a) {
    const double half = (spec.dims[a] - 1) * spec.spacing[a] / 2.0;
    if (outer > half)
      throw ConfigError("phantom grid too small: CSF radius " + std::to_string(outer) + " mm exceeds half extent " +
                        std::to_string(half) + " mm");
  }
}

inline std::pair<Volume, LabelVolume> generate_phantom(const PhantomSpec& spec) {
  validate(spec);
  VolumeHeader h;
  h.dims = spec.dims;
  h.spacing = spec.spacing;
  for (int a = 0; a < 3; ++a) h.origin[a] = -(spec.dims[a] - 1) * spec.spacing[a] / 2.0;

  LabelVolume labels(h);
  Volume image(h);

  const double R = phantom_brain_radius_mm(spec.ga_weeks);
  const double amp = phantom_folding_amplitude(spec.folding_scale, spec.ga_weeks);
  const double thick = 0.22 * R;
  const double s = phantom_lv_size(spec.lv_scale);
  const std::array<double, 3> lv_r{0.16 * R * s, 0.36 * R * s, 0.20 * R * s};
  const std::array<double, 3> lv_left{-0.26 * R, 0.04 * R, 0.12 * R};
  const std::array<double, 3> lv_right{0.26 * R, 0.04 * R, 0.12 * R};
  const std::array<double, 3> cb_c{0.0, -0.60 * R, -0.45 * R};
  const std::array<double, 3> cb_r{0.42 * R, 0.25 * R, 0.24 * R};
  const std::array<double, 3> bs_c{0.0, -0.22 * R, -0.62 * R};
  const std::array<double, 3> bs_r{0.17 * R, 0.17 * R, 0.38 * R};
  const double k = kFoldingFrequency;

  for (int z = 0; z < h.dims[2]; ++z)
    for (int y = 0; y < h.dims[1]; ++y)
      for (int x = 0; x < h.dims[0]; ++x) {
        const std::array<double, 3> p{h.origin[0] + x * h.spacing[0], h.origin[1] + y * h.spacing[1],
                                      h.origin[2] + z * h.spacing[2]};
        const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        auto cls = TissueClass::background;
        if (r < 1.2 * R) {
          cls = TissueClass::csf;
          const double theta = r > 0.0 ? std::acos(std::clamp(p[2] / r, -1.0, 1.0)) : 0.0;
          const double phi = std::atan2(p[1], p[0]);
          const double outer = R * (1.0 + amp * std::sin(k * theta) * std::sin(k * phi));
          if (r < outer) cls = TissueClass::cgm;
          if (r < outer - thick) cls = TissueClass::wm;
          if (detail::in_ellipsoid(p, lv_left, lv_r) || detail::in_ellipsoid(p, lv_right, lv_r)) cls = TissueClass::lv;
          if (detail::in_ellipsoid(p, cb_c, cb_r)) cls = TissueClass::cb;
          if (detail::in_ellipsoid(p, bs_c, bs_r)) cls = TissueClass::bs;
        }
        labels.at(x, y, z) = static_cast<std::uint8_t>(cls);
      }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    double v = kPhantomIntensity[labels.data[i]];
    if (spec.noise_sigma > 0.0) v = std::clamp(v + spec.noise_sigma * noise(rng), 0.0, 1.0);
    image.data[i] = static_cast<float>(v);
  }
  return {std::move(image), std::move(labels)};
}

}  // namespace cina
