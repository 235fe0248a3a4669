#pragma once

// Evaluation and anatomy measures: Dice overlap, principal axis of the latent
// cloud, age regression on that axis, ventricle volume and a slice-based
// cortical folding index.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "cina/errors.hpp"
#include "cina/volume.hpp"

namespace cina {

// ---------------------------------------------------------------------------
// Overlap

inline double dice(const LabelVolume& pred, const LabelVolume& gt, int class_id) {
  if (pred.header.dims != gt.header.dims) throw ShapeError("dice: label volumes differ in dims");
  std::size_t p = 0, g = 0, both = 0;
  const auto c = static_cast<std::uint8_t>(class_id);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool in_p = pred.data[i] == c;
    const bool in_g = gt.data[i] == c;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

inline std::array<double, kNumClasses - 1> per_class_dice(const LabelVolume& pred, const LabelVolume& gt) {
  std::array<double, kNumClasses - 1> out{};
  for (int c = 1; c < kNumClasses; ++c) out[c - 1] = dice(pred, gt, c);
  return out;
}

inline double mean_dice(const LabelVolume& pred, const LabelVolume& gt) {
  const auto d = per_class_dice(pred, gt);
  return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Principal axis

struct PrincipalAxis {
  Eigen::VectorXd direction;  // unit norm
  Eigen::VectorXd mean;
  double eigenvalue = 0.0;
  double second_eigenvalue = 0.0;
  double relative_gap = 0.0;  // (l1 - l2) / l1
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;  // gap too small for the direction to be meaningful
};

namespace detail {

inline Eigen::VectorXd power_iterate(const Eigen::MatrixXd& cov, const Eigen::VectorXd& start, double tol, int max_iter,
                                     int& iterations, bool& converged) {
  Eigen::VectorXd v = start.normalized();
  converged = false;
  for (iterations = 0; iterations < max_iter; ++iterations) {
    Eigen::VectorXd w = cov * v;
    const double norm = w.norm();
    if (norm == 0.0) return v;
    w /= norm;
    if (w.dot(v) < 0.0) w = -w;
    const double delta = (w - v).norm();
    v = w;
    if (delta < tol) {
      converged = true;
      ++iterations;
      break;
    }
  }
  return v;
}

}  // namespace detail

// Rows of `latents` are samples. When `ages` is non-empty the sign is chosen
// so that projections correlate positively with age.
inline PrincipalAxis pca_first_component(const Eigen::MatrixXd& latents, std::span<const double> ages = {},
                                         double tol = 1e-10, int max_iter = 10000) {
  if (latents.rows() < 2) throw ShapeError("pca_first_component needs at least two latent vectors");
  if (!ages.empty() && static_cast<Eigen::Index>(ages.size()) != latents.rows())
    throw ShapeError("pca_first_component: ages and latents differ in length");

  PrincipalAxis out;
  out.mean = latents.colwise().mean().transpose();
  const Eigen::MatrixXd centered = latents.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(latents.rows() - 1);
  if (cov.cwiseAbs().maxCoeff() == 0.0) throw NumericalError("pca_first_component: all latents are identical");

  std::mt19937_64 rng(0x5eed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd start(cov.rows());
  for (auto& x : start) x = normal(rng);

  out.direction = detail::power_iterate(cov, start, tol, max_iter, out.iterations, out.converged);
  out.eigenvalue = out.direction.dot(cov * out.direction);

  if (cov.rows() > 1) {
    const Eigen::MatrixXd deflated = cov - out.eigenvalue * out.direction * out.direction.transpose();
    Eigen::VectorXd start2(cov.rows());
    for (auto& x : start2) x = normal(rng);
    int it2 = 0;
    bool conv2 = false;
    const Eigen::VectorXd v2 = detail::power_iterate(deflated, start2, tol, max_iter, it2, conv2);
    out.second_eigenvalue = v2.dot(deflated * v2);
  }
  out.relative_gap = out.eigenvalue > 0.0 ? (out.eigenvalue - out.second_eigenvalue) / out.eigenvalue : 0.0;
  out.degenerate = !out.converged || out.relative_gap < 1e-6;

  if (!ages.empty()) {
    const Eigen::VectorXd proj = centered * out.direction;
    const double age_mean = std::accumulate(ages.begin(), ages.end(), 0.0) / static_cast<double>(ages.size());
    double cov_pa = 0.0;
    for (Eigen::Index i = 0; i < proj.size(); ++i) cov_pa += proj[i] * (ages[static_cast<std::size_t>(i)] - age_mean);
    if (cov_pa < 0.0) out.direction = -out.direction;
  } else {
    Eigen::Index arg = 0;
    out.direction.cwiseAbs().maxCoeff(&arg);
    if (out.direction[arg] < 0.0) out.direction = -out.direction;
  }
  return out;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson: need two equal-length samples of size >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Age regression on the first principal axis

struct AgeRegressor {
  Eigen::VectorXd projection;  // unit norm, length = free latent dims
  double slope = 0.0;
  double intercept = 0.0;

  double project(std::span<const double> z) const {
    if (static_cast<Eigen::Index>(z.size()) < projection.size())
      throw ShapeError("AgeRegressor: latent shorter than projection vector");
    double s = 0.0;
    for (Eigen::Index i = 0; i < projection.size(); ++i) s += projection[i] * z[static_cast<std::size_t>(i)];
    return s;
  }
  double predict(std::span<const double> z) const { return slope * project(z) + intercept; }
};

// Uses the first `free_dims` columns of each latent; trailing condition
// dims carry no age information of their own.
inline AgeRegressor fit_age_regressor(const Eigen::MatrixXd& latents, std::span<const double> ages,
                                      Eigen::Index free_dims = -1) {
  if (latents.rows() < 3) throw ShapeError("fit_age_regressor needs at least three subjects");
  if (free_dims < 0) free_dims = latents.cols();
  const Eigen::MatrixXd free = latents.leftCols(free_dims);
  const auto axis = pca_first_component(free, ages);

  AgeRegressor reg;
  reg.projection = axis.direction;
  const Eigen::VectorXd proj = free * reg.projection;
  const double n = static_cast<double>(proj.size());
  const double mp = proj.mean();
  const double ma = std::accumulate(ages.begin(), ages.end(), 0.0) / n;
  double spp = 0.0, spa = 0.0;
  for (Eigen::Index i = 0; i < proj.size(); ++i) {
    spp += (proj[i] - mp) * (proj[i] - mp);
    spa += (proj[i] - mp) * (ages[static_cast<std::size_t>(i)] - ma);
  }
  if (!(spp > 1e-300)) throw NumericalError("fit_age_regressor: projections have no variance");
  reg.slope = spa / spp;
  reg.intercept = ma - reg.slope * mp;
  return reg;
}

// ---------------------------------------------------------------------------
// Lateral ventricle volume

inline double lv_volume_mm3(const LabelVolume& labels) {
  const auto n = std::count(labels.data.begin(), labels.data.end(), static_cast<std::uint8_t>(TissueClass::lv));
  return static_cast<double>(n) * labels.header.voxel_volume();
}

struct CohortBounds {
  double min = 0.0;
  double max = 0.0;
  bool valid() const { return std::isfinite(min) && std::isfinite(max) && max > min; }
  double normalize(double value) const {
    if (!valid()) throw ConfigError("cohort bounds missing or empty; cannot normalize");
    return std::clamp((value - min) / (max - min), 0.0, 1.0);
  }
};

// ---------------------------------------------------------------------------
// Folding index: mean over axial slices of the outer cortical contour length
// divided by the contour length of its convex hull. Both lengths count
// 4-neighbour boundary edges, so a convex digital shape scores 1.

namespace detail {

// Boundary edge length of a binary image (row-major, nx fastest).
inline double edge_perimeter(const std::vector<std::uint8_t>& mask, int nx, int ny, double sx, double sy) {
  double p = 0.0;
  auto at = [&](int x, int y) -> bool {
    return x >= 0 && y >= 0 && x < nx && y < ny && mask[static_cast<std::size_t>(y) * nx + x];
  };
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      if (!at(x, y)) continue;
      if (!at(x - 1, y)) p += sy;
      if (!at(x + 1, y)) p += sy;
      if (!at(x, y - 1)) p += sx;
      if (!at(x, y + 1)) p += sx;
    }
  return p;
}

// Marks everything not reachable from the image border through background.
inline std::vector<std::uint8_t> fill_holes(const std::vector<std::uint8_t>& mask, int nx, int ny) {
  std::vector<std::uint8_t> outside(mask.size(), 0);
  std::vector<int> stack;
  auto push = [&](int x, int y) {
    const auto i = static_cast<std::size_t>(y) * nx + x;
    if (!mask[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back(static_cast<int>(i));
    }
  };
  for (int x = 0; x < nx; ++x) {
    push(x, 0);
    push(x, ny - 1);
  }
  for (int y = 0; y < ny; ++y) {
    push(0, y);
    push(nx - 1, y);
  }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const int x = i % nx, y = i / nx;
    if (x > 0) push(x - 1, y);
    if (x + 1 < nx) push(x + 1, y);
    if (y > 0) push(x, y - 1);
    if (y + 1 < ny) push(x, y + 1);
  }
  std::vector<std::uint8_t> filled(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) filled[i] = outside[i] ? 0 : 1;
  return filled;
}

// Raster of the convex hull of the pixel squares of `mask`.
inline std::vector<std::uint8_t> convex_hull_raster(const std::vector<std::uint8_t>& mask, int nx, int ny) {
  using Pt = std::array<long long, 2>;
  std::vector<Pt> pts;
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x)
      if (mask[static_cast<std::size_t>(y) * nx + x]) {
        // pixel corners in doubled coordinates (pixel centre at 2x+1)
        pts.push_back({2LL * x, 2LL * y});
        pts.push_back({2LL * x + 2, 2LL * y});
        pts.push_back({2LL * x, 2LL * y + 2});
        pts.push_back({2LL * x + 2, 2LL * y + 2});
      }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  // Andrew's monotone chain, counter-clockwise
  std::vector<Pt> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 1 ? k - 1 : k);

  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      const Pt c{2LL * x + 1, 2LL * y + 1};
      bool inside = true;
      for (std::size_t i = 0; i < hull.size() && inside; ++i)
        inside = cross(hull[i], hull[(i + 1) % hull.size()], c) >= 0;
      out[static_cast<std::size_t>(y) * nx + x] = inside ? 1 : 0;
    }
  return out;
}

}  // namespace detail

// Folding ratio of a single 2-D mask (already the filled outer shape).
inline double contour_hull_ratio(const std::vector<std::uint8_t>& filled, int nx, int ny, double sx = 1.0,
                                 double sy = 1.0) {
  const double p = detail::edge_perimeter(filled, nx, ny, sx, sy);
  const auto hull = detail::convex_hull_raster(filled, nx, ny);
  const double ph = detail::edge_perimeter(hull, nx, ny, sx, sy);
  if (ph <= 0.0) throw NumericalError("contour_hull_ratio: empty mask");
  return p / ph;
}

inline double folding_index(const LabelVolume& labels, int min_cgm_voxels = 50) {
  const auto& h = labels.header;
  const int nx = h.dims[0], ny = h.dims[1], nz = h.dims[2];
  const auto cgm = static_cast<std::uint8_t>(TissueClass::cgm);
  const auto csf = static_cast<std::uint8_t>(TissueClass::csf);
  double sum = 0.0;
  int slices = 0;
  std::vector<std::uint8_t> tissue(static_cast<std::size_t>(nx) * ny);
  for (int z = 0; z < nz; ++z) {
    int n_cgm = 0;
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const auto v = labels.at(x, y, z);
        n_cgm += v == cgm;
        // the cortical plate is the outermost tissue inside the CSF
        tissue[static_cast<std::size_t>(y) * nx + x] = (v != 0 && v != csf) ? 1 : 0;
      }
    if (n_cgm < min_cgm_voxels) continue;
    const auto filled = detail::fill_holes(tissue, nx, ny);
    sum += contour_hull_ratio(filled, nx, ny, h.spacing[0], h.spacing[1]);
    ++slices;
  }
  if (slices == 0) throw DomainError("folding_index: no axial slice has enough cortical gray matter");
  return sum / slices;
}

}  // namespace cina
