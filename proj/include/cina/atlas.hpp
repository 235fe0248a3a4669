#pragma once

// Auto-decoder procedures on top of the network:
//   train            joint optimization of network weights and per-subject latents
//   regress_latent   Gaussian-kernel latent for an arbitrary age
//   generate_atlas   decode intensities + tissue probabilities on any grid
//   fit_subject      test-time latent optimization on intensities alone
//   segment_subject  decode a fitted latent on the subject's own grid

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/cohort.hpp"
#include "cina/diffnet.hpp"
#include "cina/errors.hpp"
#include "cina/model.hpp"
#include "cina/volume.hpp"

namespace cina {

// ---------------------------------------------------------------------------
// Training data

struct TrainingSubject {
  SubjectRecord record;
  Volume image;
  LabelVolume labels;
  std::vector<std::uint32_t> foreground;       // label != 0
  std::vector<std::uint32_t> near_background;  // background within 2 voxels of foreground
  std::vector<std::uint32_t> background;       // all background
};

namespace detail {

// Chebyshev dilation of a binary mask by `radius` voxels (separable max filter).
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mask, const VolumeHeader& h, int radius) {
  std::vector<std::uint8_t> cur = mask, next(mask.size());
  const std::array<std::int64_t, 3> stride{1, h.dims[0], static_cast<std::int64_t>(h.dims[0]) * h.dims[1]};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto idx = h.unravel(i);
      std::uint8_t v = 0;
      for (int d = -radius; d <= radius && !v; ++d) {
        const std::int64_t p = idx[axis] + d;
        if (p < 0 || p >= h.dims[axis]) continue;
        v = cur[static_cast<std::size_t>(static_cast<std::int64_t>(i) + d * stride[axis])];
      }
      next[i] = v;
    }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace detail

inline TrainingSubject make_training_subject(SubjectRecord record, Volume image, LabelVolume labels) {
  if (!image.header.same_grid(labels.header)) throw ShapeError("subject " + record.id + ": image and labels differ in grid");
  labels.validate();
  TrainingSubject s{std::move(record), std::move(image), std::move(labels), {}, {}, {}};
  std::vector<std::uint8_t> fg(s.labels.data.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = s.labels.data[i] != 0;
  const auto dil = detail::dilate(fg, s.labels.header, 2);
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const auto u = static_cast<std::uint32_t>(i);
    if (fg[i]) {
      s.foreground.push_back(u);
    } else {
      s.background.push_back(u);
      if (dil[i]) s.near_background.push_back(u);
    }
  }
  if (s.foreground.empty()) throw DomainError("subject " + s.record.id + ": label map has no foreground");
  return s;
}

struct IntensityNormalization {
  bool enabled = true;
  double lo_pct = 1.0;
  double hi_pct = 99.0;
};

inline Volume prepare_intensities(const Volume& raw, const IntensityNormalization& norm) {
  if (!norm.enabled) return raw;
  return normalize_intensities(raw, norm.lo_pct, norm.hi_pct).volume;
}

// Subjects on one shared (pre-aligned) grid plus the coordinate frame of
// that grid.
struct TrainingSet {
  VolumeHeader grid;
  CoordinateFrame frame;
  std::vector<TrainingSubject> subjects;
  std::array<std::vector<double>, 3> axis_coords;  // network coordinate per voxel index and axis

  std::array<double, 3> coord(std::uint32_t linear) const {
    const auto idx = grid.unravel(linear);
    return {axis_coords[0][idx[0]], axis_coords[1][idx[1]], axis_coords[2][idx[2]]};
  }
};

inline std::array<std::vector<double>, 3> axis_coordinates(const CoordinateFrame& frame, const VolumeHeader& grid) {
  std::array<std::vector<double>, 3> out;
  for (int a = 0; a < 3; ++a) {
    out[a].resize(static_cast<std::size_t>(grid.dims[a]));
    for (int i = 0; i < grid.dims[a]; ++i) {
      std::array<std::int64_t, 3> idx{0, 0, 0};
      idx[a] = i;
      out[a][static_cast<std::size_t>(i)] = frame.coord_of(grid, idx[0], idx[1], idx[2])[a];
    }
  }
  return out;
}

inline TrainingSet make_training_set(std::vector<TrainingSubject> subjects) {
  if (subjects.empty()) throw ConfigError("training set is empty");
  TrainingSet set;
  set.grid = subjects.front().image.header;
  for (const auto& s : subjects)
    if (!s.image.header.same_grid(set.grid))
      throw ShapeError("subject " + s.record.id + " is not on the common training grid (inputs must be pre-aligned)");
  set.frame = CoordinateFrame::from_header(set.grid);
  set.axis_coords = axis_coordinates(set.frame, set.grid);
  set.subjects = std::move(subjects);
  return set;
}

inline TrainingSet load_training_set(const Cohort& cohort, const IntensityNormalization& norm = {}) {
  std::vector<TrainingSubject> subjects;
  for (const auto& r : cohort.subjects) {
    if (r.label_path.empty()) throw IoError("subject " + r.id + " has no label map; training needs segmentations");
    auto image = prepare_intensities(read_volume(r.volume_path), norm);
    auto labels = read_labels(r.label_path);
    subjects.push_back(make_training_subject(r, std::move(image), std::move(labels)));
  }
  return make_training_set(std::move(subjects));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 200;
  double lr = 2e-4;
  double lr_decay = 0.98;  // multiplicative, per epoch
  double latent_lr = 1e-2;
  int voxels_per_subject = 2048;
  int subjects_per_step = 4;
  int visits_per_epoch = 20;  // times each subject is drawn per epoch
  double background_fraction = 0.2;
  std::uint64_t seed = 0;
  bool freeze_latents = false;
  int threads = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(lr > 0.0) || !(latent_lr >= 0.0)) throw ConfigError("learning rates must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
    if (voxels_per_subject < 1 || subjects_per_step < 1 || visits_per_epoch < 1)
      throw ConfigError("sampling sizes must be >= 1");
    if (!(background_fraction >= 0.0 && background_fraction <= 1.0))
      throw ConfigError("background_fraction must lie in [0, 1]");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"lr_decay", lr_decay},
            {"latent_lr", latent_lr},
            {"voxels_per_subject", voxels_per_subject},
            {"subjects_per_step", subjects_per_step},
            {"visits_per_epoch", visits_per_epoch},
            {"background_fraction", background_fraction},
            {"seed", seed},
            {"freeze_latents", freeze_latents}};
  }
};

struct EpochLoss {
  int epoch = 0;
  double mse = 0.0;
  double ce = 0.0;
};

struct TrainResult {
  std::vector<EpochLoss> trace;
  bool aborted = false;  // non-finite loss; model and latents hold the last good epoch
  std::string message;
};

namespace detail {

inline void sample_training_voxels(const TrainingSubject& s, int n, double bg_fraction, std::mt19937_64& rng,
                                   std::vector<std::uint32_t>& out) {
  out.clear();
  int n_bg = static_cast<int>(std::lround(bg_fraction * n));
  if (s.background.empty()) n_bg = 0;
  const int n_fg = n - n_bg;
  auto draw = [&](const std::vector<std::uint32_t>& pool, int count) {
    std::uniform_int_distribution<std::size_t> u(0, pool.size() - 1);
    for (int i = 0; i < count; ++i) out.push_back(pool[u(rng)]);
  };
  draw(s.foreground, n_fg);
  // half of the background budget hugs the brain, the rest covers empty space
  const int n_near = s.near_background.empty() ? 0 : n_bg / 2;
  if (n_near > 0) draw(s.near_background, n_near);
  if (n_bg - n_near > 0) draw(s.background, n_bg - n_near);
}

template <typename S>
struct SubjectBatch {
  std::size_t subject = 0;
  Tensor2<S> coords;
  Tensor2<S> intensity;
  std::vector<std::uint8_t> labels;
};

template <typename S>
struct StepPartial {
  ModelGrads<S> grads;
  std::vector<Vec<S>> dz;  // per batch entry
  double mse_sum = 0.0;    // sum over samples
  double ce_sum = 0.0;
};

template <typename S>
void run_batches(const CinaModel<S>& model, const LatentTable<S>& table, std::span<const SubjectBatch<S>> batches,
                 double total, StepPartial<S>& part) {
  ForwardTape<S> tape;
  for (const auto& b : batches) {
    const Vec<S> z = table.full(b.subject);
    const auto out = forward(model, b.coords, z, tape);
    const double n = static_cast<double>(b.coords.rows());
    const S w = static_cast<S>(n / total);
    part.mse_sum += static_cast<double>(mse_loss(out.intensity, b.intensity)) * n;
    part.ce_sum += static_cast<double>(cross_entropy_loss<S, std::uint8_t>(out.logits, b.labels)) * n;
    const Tensor2<S> d_int = mse_loss_grad(out.intensity, b.intensity, w);
    const Tensor2<S> d_log = cross_entropy_loss_grad<S, std::uint8_t>(out.logits, b.labels, w);
    Vec<S> dz = Vec<S>::Zero(model.config.latent_dim);
    backward(model, tape, d_int, d_log, &part.grads, &dz);
    part.dz.push_back(std::move(dz));
  }
}

}  // namespace detail

template <typename S>
TrainResult train(const TrainingSet& data, CinaModel<S>& model, LatentTable<S>& table, const TrainConfig& cfg,
                  const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  cfg.validate();
  if (table.size() != data.subjects.size()) throw ShapeError("train: latent table and training set differ in size");
  if (table.latent_dim != model.config.latent_dim) throw ShapeError("train: latent table does not match model");

  TrainResult result;
  std::mt19937_64 rng(cfg.seed);
  const std::size_t n_subjects = data.subjects.size();
  const int threads = std::max(1, std::min<int>(cfg.threads, cfg.subjects_per_step));

  std::vector<std::uint32_t> voxels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const CinaModel<S> model_snapshot = model;
    const LatentTable<S> table_snapshot = table;
    const double decay = std::pow(cfg.lr_decay, epoch);
    const AdamOptions theta_opt{cfg.lr * decay};
    const AdamOptions latent_opt{cfg.latent_lr * decay};

    std::vector<std::size_t> order;
    for (int v = 0; v < cfg.visits_per_epoch; ++v) {
      std::vector<std::size_t> perm(n_subjects);
      for (std::size_t i = 0; i < n_subjects; ++i) perm[i] = i;
      std::shuffle(perm.begin(), perm.end(), rng);
      order.insert(order.end(), perm.begin(), perm.end());
    }

    double mse_sum = 0.0, ce_sum = 0.0, count = 0.0;
    bool failed = false;
    for (std::size_t start = 0; start < order.size() && !failed; start += static_cast<std::size_t>(cfg.subjects_per_step)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.subjects_per_step));
      std::vector<detail::SubjectBatch<S>> batches;
      double total = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& subj = data.subjects[order[k]];
        detail::sample_training_voxels(subj, cfg.voxels_per_subject, cfg.background_fraction, rng, voxels);
        detail::SubjectBatch<S> b;
        b.subject = order[k];
        b.coords.resize(static_cast<Eigen::Index>(voxels.size()), 3);
        b.intensity.resize(static_cast<Eigen::Index>(voxels.size()), 1);
        b.labels.resize(voxels.size());
        for (std::size_t i = 0; i < voxels.size(); ++i) {
          const auto c = data.coord(voxels[i]);
          const auto r = static_cast<Eigen::Index>(i);
          b.coords(r, 0) = static_cast<S>(c[0]);
          b.coords(r, 1) = static_cast<S>(c[1]);
          b.coords(r, 2) = static_cast<S>(c[2]);
          b.intensity(r, 0) = static_cast<S>(subj.image.data[voxels[i]]);
          b.labels[i] = subj.labels.data[voxels[i]];
        }
        total += static_cast<double>(voxels.size());
        batches.push_back(std::move(b));
      }

      // Workers take contiguous slices of the batch list; partial results
      // are reduced in worker order so the sum is reproducible.
      const int workers = std::min<int>(threads, static_cast<int>(batches.size()));
      std::vector<detail::StepPartial<S>> parts(static_cast<std::size_t>(workers));
      for (auto& p : parts) p.grads = ModelGrads<S>(model);
      auto slice = [&](int w) {
        const std::size_t lo = batches.size() * static_cast<std::size_t>(w) / static_cast<std::size_t>(workers);
        const std::size_t hi = batches.size() * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(workers);
        return std::span<const detail::SubjectBatch<S>>(batches.data() + lo, hi - lo);
      };
      if (workers == 1) {
        detail::run_batches<S>(model, table, slice(0), total, parts[0]);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
          pool.emplace_back([&, w] { detail::run_batches<S>(model, table, slice(w), total, parts[static_cast<std::size_t>(w)]); });
        for (auto& t : pool) t.join();
      }

      double step_mse = 0.0, step_ce = 0.0;
      std::vector<Vec<S>> dz;
      for (std::size_t w = 0; w < parts.size(); ++w) {
        if (w > 0) parts[0].grads.add(parts[w].grads);
        step_mse += parts[w].mse_sum;
        step_ce += parts[w].ce_sum;
        for (auto& d : parts[w].dz) dz.push_back(std::move(d));
      }
      if (!std::isfinite(step_mse) || !std::isfinite(step_ce)) {
        failed = true;
        break;
      }
      parts[0].grads.add_to(model);
      try {
        auto params = model.parameters();
        adam_step<S>(std::span<Param<S>* const>(params), theta_opt);
        if (!cfg.freeze_latents) {
          // one Adam step per distinct subject in this step
          std::map<std::size_t, Vec<S>> per_subject;
          for (std::size_t i = 0; i < batches.size(); ++i) {
            auto [it, inserted] = per_subject.try_emplace(batches[i].subject, dz[i]);
            if (!inserted) it->second += dz[i];
          }
          const Eigen::Index free = table.free_dims();
          for (auto& [subject, g] : per_subject) {
            auto& p = table.entries[subject].free;
            p.grad.row(0) = g.head(free).transpose();
            adam_step(p, latent_opt);
          }
        }
      } catch (const NumericalError&) {
        failed = true;
        break;
      }
      mse_sum += step_mse;
      ce_sum += step_ce;
      count += total;
    }

    if (failed) {
      model = model_snapshot;
      table = table_snapshot;
      result.aborted = true;
      result.message = "non-finite loss or gradient in epoch " + std::to_string(epoch) +
                       "; restored parameters from the end of the previous epoch";
      return result;
    }
    EpochLoss e{epoch, mse_sum / count, ce_sum / count};
    result.trace.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Latent regression over age

inline constexpr double kDefaultKernelSigma = 0.35;
// Queries may leave the cohort's age range by at most this many kernel widths.
inline constexpr double kMaxKernelDistance = 4.0;

// Normalized Gaussian weights exp(-(t - t_i)^2 / (2 sigma^2)) / sum, formed
// relative to the nearest subject so sparse cohorts never underflow.
inline std::vector<double> kernel_weights(double t, std::span<const double> ages, double sigma) {
  if (ages.empty()) throw ConfigError("kernel regression over an empty latent table");
  if (!(sigma > 0.0)) throw ConfigError("kernel sigma must be positive");
  std::vector<double> e(ages.size());
  double emin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ages.size(); ++i) {
    const double d = (t - ages[i]) / sigma;
    e[i] = 0.5 * d * d;
    emin = std::min(emin, e[i]);
  }
  const auto [lo, hi] = std::minmax_element(ages.begin(), ages.end());
  if (!(t >= *lo - kMaxKernelDistance * sigma && t <= *hi + kMaxKernelDistance * sigma))
    throw DomainError("extrapolation beyond cohort: t=" + std::to_string(t) + " lies more than " +
                      std::to_string(kMaxKernelDistance) + " kernel widths outside the training ages");
  double sum = 0.0;
  for (auto& x : e) {
    x = std::exp(-(x - emin));
    sum += x;
  }
  for (auto& x : e) x /= sum;
  return e;
}

template <typename S>
Vec<double> regress_latent(double t, const LatentTable<S>& table, double sigma = kDefaultKernelSigma) {
  std::vector<double> ages;
  for (const auto& e : table.entries) ages.push_back(e.ga_weeks);
  const auto w = kernel_weights(t, ages, sigma);
  Vec<double> z = Vec<double>::Zero(table.latent_dim);
  for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * table.full(i).template cast<double>();
  return z;
}

// Resolves a condition name exactly or by unique prefix ("lv" -> "lv_volume_norm").
inline std::size_t resolve_condition(const std::vector<std::string>& names, const std::string& key) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == key) return i;
  std::size_t found = names.size();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i].rfind(key, 0) == 0) {
      if (found != names.size()) throw ConfigError("condition '" + key + "' is ambiguous");
      found = i;
    }
  if (found == names.size()) throw ConfigError("model has no condition named '" + key + "'");
  return found;
}

inline void apply_conditions(Vec<double>& z, const std::vector<std::string>& names,
                             const std::map<std::string, double>& overrides) {
  const auto free = z.size() - static_cast<Eigen::Index>(names.size());
  for (const auto& [key, value] : overrides) {
    if (!(value >= 0.0 && value <= 1.0)) throw ConfigError("condition '" + key + "' must lie in [0, 1]");
    z[free + static_cast<Eigen::Index>(resolve_condition(names, key))] = value;
  }
}

// ---------------------------------------------------------------------------
// Decoding

// Sampling grid placed in a training frame. Voxel k on an axis with n
// samples sits at -1 + 2k/n (scaled by the axis' share of the longest
// extent), so grids whose sizes divide each other share points exactly.
struct AtlasGrid {
  std::array<std::int32_t, 3> dims{64, 64, 64};

  static AtlasGrid from_resolution(const CoordinateFrame& frame, double mm) {
    if (!(mm > 0.0)) throw ConfigError("atlas resolution must be positive");
    AtlasGrid g;
    for (int a = 0; a < 3; ++a) g.dims[a] = std::max<std::int32_t>(1, static_cast<std::int32_t>(std::lround(frame.extent[a] / mm)));
    return g;
  }

  VolumeHeader header(const CoordinateFrame& frame) const {
    VolumeHeader h;
    h.dims = dims;
    for (int a = 0; a < 3; ++a) {
      h.spacing[a] = frame.extent[a] / dims[a];
      h.origin[a] = frame.center[a] - frame.extent[a] / 2.0;
    }
    return h;
  }

  double axis_coord(const CoordinateFrame& frame, int axis, std::int64_t k) const {
    const double share = frame.extent[axis] / (2.0 * frame.half_extent());
    return share * (static_cast<double>(2 * k - dims[axis]) / static_cast<double>(dims[axis]));
  }
};

struct DecodedVolumes {
  Volume intensity;
  std::vector<Volume> probabilities;  // one per class, background first
  LabelVolume labels;
};

namespace detail {

template <typename S>
DecodedVolumes decode(const CinaModel<S>& model, const Vec<double>& z_in, const VolumeHeader& header,
                      const std::array<std::vector<double>, 3>& axis_coords, int threads) {
  if (z_in.size() != model.config.latent_dim) throw ShapeError("decode: latent size does not match model");
  const Vec<S> z = z_in.cast<S>();
  const int C = model.config.num_classes;
  DecodedVolumes out;
  out.intensity = Volume(header);
  out.probabilities.assign(static_cast<std::size_t>(C), Volume(header));
  out.labels = LabelVolume(header);

  const std::size_t n = header.voxel_count();
  const std::size_t chunk = static_cast<std::size_t>(kForwardChunk) * 8;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  auto work = [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const std::size_t lo = c * chunk, hi = std::min(n, lo + chunk);
      Tensor2<S> coords(static_cast<Eigen::Index>(hi - lo), 3);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto idx = header.unravel(i);
        for (int a = 0; a < 3; ++a) coords(static_cast<Eigen::Index>(i - lo), a) = static_cast<S>(axis_coords[a][idx[a]]);
      }
      const auto res = forward(model, coords, z);
      const Tensor2<S> prob = softmax_rows(res.logits);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto r = static_cast<Eigen::Index>(i - lo);
        out.intensity.data[i] = static_cast<float>(res.intensity(r, 0));
        Eigen::Index best = 0;
        for (Eigen::Index k = 0; k < C; ++k) {
          out.probabilities[static_cast<std::size_t>(k)].data[i] = static_cast<float>(prob(r, k));
          if (res.logits(r, k) > res.logits(r, best)) best = k;
        }
        out.labels.data[i] = static_cast<std::uint8_t>(best);
      }
    }
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n_chunks)));
  if (workers == 1) {
    work(0, n_chunks);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back(work, n_chunks * static_cast<std::size_t>(w) / static_cast<std::size_t>(workers),
                        n_chunks * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(workers));
    for (auto& t : pool) t.join();
  }
  return out;
}

}  // namespace detail

template <typename S>
DecodedVolumes generate_atlas(const CinaModel<S>& model, const Vec<double>& z, const CoordinateFrame& frame,
                              const AtlasGrid& grid, int threads = 1) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a)
    for (int k = 0; k < grid.dims[a]; ++k) axis[a].push_back(grid.axis_coord(frame, a, k));
  return detail::decode(model, z, grid.header(frame), axis, threads);
}

// Decodes on the subject's own voxel centres.
template <typename S>
DecodedVolumes segment_subject(const CinaModel<S>& model, const Vec<double>& z, const CoordinateFrame& frame,
                               const VolumeHeader& subject_grid, int threads = 1) {
  return detail::decode(model, z, subject_grid, axis_coordinates(frame, subject_grid), threads);
}

// ---------------------------------------------------------------------------
// Test-time fitting

enum class FitInit { kernel_regressed, zero_random };

struct FitConfig {
  int steps = 400;
  double lr = 1e-2;
  double reg_weight = 100.0;  // 1 / prior variance of the latent init
  int voxels_per_step = 4096;
  double foreground_fraction = 0.8;   // share drawn from voxels brighter than the threshold
  double foreground_threshold = 0.05;
  int eval_every = 10;
  int eval_voxels = 16384;
  int divergence_patience = 10;
  // Random inits: this many draws each run probe_steps, and the one with the
  // lowest objective carries on. Unused when the init comes from a known age.
  int restarts = 4;
  int probe_steps = 40;
  double kernel_sigma = kDefaultKernelSigma;
  std::uint64_t seed = 0;
  std::map<std::string, double> pinned_conditions;  // held fixed instead of optimized

  void validate() const {
    if (steps < 1 || voxels_per_step < 1 || eval_every < 1 || eval_voxels < 1) throw ConfigError("fit sizes must be >= 1");
    if (restarts < 1 || probe_steps < 0) throw ConfigError("fit restarts must be >= 1 and probe_steps >= 0");
    if (!(reg_weight >= 0.0)) throw ConfigError("reg_weight must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("fit lr must be positive");
    if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0))
      throw ConfigError("foreground_fraction must lie in [0, 1]");
  }
};

struct FitResult {
  Vec<double> z;
  std::vector<double> loss_trace;  // evaluation loss every eval_every steps
  double best_loss = 0.0;
  int steps_run = 0;
  bool diverged = false;
};

namespace detail {

struct FitSamples {
  std::vector<std::uint32_t> bright;
  std::vector<std::uint32_t> all;
};

inline void sample_fit_voxels(const FitSamples& pools, int n, double fg_fraction, std::mt19937_64& rng,
                              std::vector<std::uint32_t>& out) {
  out.clear();
  const int n_fg = pools.bright.empty() ? 0 : static_cast<int>(std::lround(fg_fraction * n));
  std::uniform_int_distribution<std::size_t> ub(0, pools.bright.empty() ? 0 : pools.bright.size() - 1);
  std::uniform_int_distribution<std::size_t> ua(0, pools.all.size() - 1);
  for (int i = 0; i < n_fg; ++i) out.push_back(pools.bright[ub(rng)]);
  for (int i = n_fg; i < n; ++i) out.push_back(pools.all[ua(rng)]);
}

}  // namespace detail

// Optimizes a fresh latent against the frozen network using intensities
// only: N * mean squared error over sampled voxels (an estimate of the sum
// over the volume) + reg_weight * |z_free|^2. Condition dims, when the
// model has them, are optimized on their own [0, 1] scale.
template <typename S>
FitResult fit_subject(const CinaModel<S>& model, const LatentTable<S>& table, const CoordinateFrame& frame,
                      const Volume& image, const FitConfig& cfg, std::optional<double> known_t = std::nullopt) {
  cfg.validate();
  const int D = model.config.latent_dim;
  const int F = model.config.free_latent_dims();
  const auto& cond_names = model.config.condition_dims;
  std::mt19937_64 rng(cfg.seed);

  // Condition dims live on the [0, 1] condition scale rather than under the
  // latent prior: unpenalized, clamped, and started from the training mean
  // unless a known age already placed them.
  Vec<S> cond_start(D - F);
  for (int c = F; c < D; ++c) {
    double mean = 0.0;
    for (const auto& e : table.entries) mean += static_cast<double>(e.conditions[c - F]);
    cond_start[c - F] = static_cast<S>(table.entries.empty() ? 0.5 : mean / static_cast<double>(table.size()));
  }
  std::vector<bool> pinned(static_cast<std::size_t>(D), false);
  std::vector<std::pair<Eigen::Index, S>> pinned_values;
  for (const auto& [name, value] : cfg.pinned_conditions) {
    if (!(value >= 0.0 && value <= 1.0)) throw ConfigError("pinned condition '" + name + "' must lie in [0, 1]");
    const auto idx = static_cast<std::size_t>(F) + resolve_condition(cond_names, name);
    pinned[idx] = true;
    pinned_values.emplace_back(static_cast<Eigen::Index>(idx), static_cast<S>(value));
  }

  const int candidates = known_t ? 1 : cfg.restarts;
  std::vector<Param<S>> starts;
  for (int k = 0; k < candidates; ++k) {
    Param<S> z(1, D);
    if (known_t) {
      z.value.row(0) = regress_latent(*known_t, table, cfg.kernel_sigma).template cast<S>().transpose();
    } else {
      std::normal_distribution<double> normal(0.0, model.config.latent_init_std);
      for (int i = 0; i < D; ++i) z.value(0, i) = static_cast<S>(normal(rng));
      for (int c = F; c < D; ++c) z.value(0, c) = cond_start[c - F];
    }
    for (const auto& [idx, value] : pinned_values) z.value(0, idx) = value;
    starts.push_back(std::move(z));
  }

  const auto axis = axis_coordinates(frame, image.header);
  detail::FitSamples pools;
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const auto u = static_cast<std::uint32_t>(i);
    pools.all.push_back(u);
    if (image.data[i] > cfg.foreground_threshold) pools.bright.push_back(u);
  }
  const double n_total = static_cast<double>(image.data.size());

  auto make_batch = [&](const std::vector<std::uint32_t>& vox, Tensor2<S>& coords, Tensor2<S>& target) {
    coords.resize(static_cast<Eigen::Index>(vox.size()), 3);
    target.resize(static_cast<Eigen::Index>(vox.size()), 1);
    for (std::size_t i = 0; i < vox.size(); ++i) {
      const auto idx = image.header.unravel(vox[i]);
      const auto r = static_cast<Eigen::Index>(i);
      for (int a = 0; a < 3; ++a) coords(r, a) = static_cast<S>(axis[a][idx[a]]);
      target(r, 0) = static_cast<S>(image.data[vox[i]]);
    }
  };

  std::vector<std::uint32_t> vox;
  Tensor2<S> eval_coords, eval_target;
  detail::sample_fit_voxels(pools, cfg.eval_voxels, cfg.foreground_fraction, rng, vox);
  make_batch(vox, eval_coords, eval_target);
  auto objective = [&](const Vec<S>& zv) {
    const auto out = forward(model, eval_coords, zv);
    return n_total * static_cast<double>(mse_loss(out.intensity, eval_target)) +
           cfg.reg_weight * zv.head(F).template cast<double>().squaredNorm();
  };

  ForwardTape<S> tape;
  Tensor2<S> coords, target;
  const Tensor2<S> no_logits_grad = Tensor2<S>::Zero(cfg.voxels_per_step, model.config.num_classes);
  const AdamOptions opt{cfg.lr};
  // One Adam step on a fresh voxel sample; throws NumericalError on a non-finite update.
  auto step_once = [&](Param<S>& z) {
    detail::sample_fit_voxels(pools, cfg.voxels_per_step, cfg.foreground_fraction, rng, vox);
    make_batch(vox, coords, target);
    const Vec<S> zv = z.value.row(0).transpose();
    const auto out = forward(model, coords, zv, tape);
    const Tensor2<S> d_int = mse_loss_grad(out.intensity, target, static_cast<S>(n_total));
    Vec<S> dz = Vec<S>::Zero(D);
    backward<S>(model, tape, d_int, no_logits_grad, nullptr, &dz);
    dz.head(F) += static_cast<S>(2.0 * cfg.reg_weight) * zv.head(F);
    for (int i = 0; i < D; ++i)
      if (pinned[static_cast<std::size_t>(i)]) dz[i] = S(0);
    z.grad.row(0) = dz.transpose();
    adam_step(z, opt);
    for (int c = F; c < D; ++c) z.value(0, c) = std::clamp(z.value(0, c), S(0), S(1));
  };

  FitResult res;
  int first_step = 1;
  std::size_t chosen = 0;
  std::vector<Vec<S>> inits;
  for (const auto& z : starts) inits.push_back(z.value.row(0).transpose());
  double probe_loss = std::numeric_limits<double>::quiet_NaN();
  if (candidates > 1) {
    // Short probes weed out inits that fall into a far, poorly fitting basin.
    const int probe = std::min(cfg.probe_steps, cfg.steps);
    double chosen_loss = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < starts.size(); ++k) {
      double loss = std::numeric_limits<double>::infinity();
      try {
        for (int s = 0; s < probe; ++s) step_once(starts[k]);
        loss = objective(starts[k].value.row(0).transpose());
      } catch (const NumericalError&) {
      }
      if (std::isfinite(loss) && loss < chosen_loss) {
        chosen_loss = loss;
        chosen = k;
      }
    }
    if (!std::isfinite(chosen_loss)) {
      res.diverged = true;
      chosen = 0;
    }
    probe_loss = chosen_loss;
    first_step = probe + 1;
    res.steps_run = probe;
  }
  Param<S>& z = starts[chosen];

  // The trace starts at the chosen init; a probe adds its end point.
  Vec<S> best = inits[chosen];
  res.best_loss = objective(best);
  res.loss_trace.push_back(res.best_loss);
  if (std::isfinite(probe_loss)) {
    res.loss_trace.push_back(probe_loss);
    if (probe_loss < res.best_loss) {
      res.best_loss = probe_loss;
      best = z.value.row(0).transpose();
    }
  }
  double last = res.loss_trace.back();
  int rising = 0;

  for (int step = first_step; step <= cfg.steps && !res.diverged; ++step) {
    try {
      step_once(z);
    } catch (const NumericalError&) {
      res.diverged = true;
      break;
    }
    res.steps_run = step;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const Vec<S> zc = z.value.row(0).transpose();
      const double loss = objective(zc);
      res.loss_trace.push_back(loss);
      if (std::isfinite(loss) && loss < res.best_loss) {
        res.best_loss = loss;
        best = zc;
      }
      rising = (std::isfinite(loss) && loss <= last) ? 0 : rising + 1;
      last = loss;
      if (rising >= cfg.divergence_patience) {
        res.diverged = true;
        break;
      }
    }
  }
  res.z = best.template cast<double>();
  return res;
}

}  // namespace cina
