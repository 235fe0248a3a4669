#pragma once

// Cohort evaluation: fit each test subject from its intensities, decode a
// segmentation, predict its age, and summarize Dice / MAE-GA per method.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/analysis.hpp"
#include "cina/atlas.hpp"
#include "cina/checkpoint.hpp"
#include "cina/errors.hpp"
#include "cina/volume.hpp"

namespace cina {

inline constexpr std::array<const char*, kNumClasses - 1> kRegionNames{"CSF", "cGM", "WM", "LV", "CB", "BS"};

struct SubjectOutcome {
  std::string id;
  double ga_true = 0.0;
  double ga_pred = 0.0;
  std::array<double, kNumClasses - 1> dice{};
  double mean_dice = 0.0;
  double projection = 0.0;  // first-PC coordinate of the fitted latent
  bool fit_diverged = false;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
};

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) throw DomainError("mean_std of an empty sample");
  MeanStd out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

struct MethodReport {
  std::string method;
  std::vector<SubjectOutcome> subjects;
  std::array<MeanStd, kNumClasses - 1> dice{};
  MeanStd mean_dice;
  MeanStd mae_ga;
  double train_latent_age_r = std::numeric_limits<double>::quiet_NaN();
  double test_latent_age_r = std::numeric_limits<double>::quiet_NaN();
};

inline MethodReport summarize(std::string method, std::vector<SubjectOutcome> subjects) {
  if (subjects.empty()) throw DomainError("evaluation needs at least one test subject");
  MethodReport r;
  r.method = std::move(method);
  r.subjects = std::move(subjects);
  for (std::size_t c = 0; c < r.dice.size(); ++c) {
    std::vector<double> v;
    for (const auto& s : r.subjects) v.push_back(s.dice[c]);
    r.dice[c] = mean_std(v);
  }
  std::vector<double> md, mae, proj, ages;
  for (const auto& s : r.subjects) {
    md.push_back(s.mean_dice);
    mae.push_back(std::abs(s.ga_pred - s.ga_true));
    proj.push_back(s.projection);
    ages.push_back(s.ga_true);
  }
  r.mean_dice = mean_std(md);
  r.mae_ga = mean_std(mae);
  if (r.subjects.size() >= 2) r.test_latent_age_r = pearson(proj, ages);
  return r;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace detail

// Writes dice.csv (`method,region,dice_mean,dice_std`), age.csv
// (`method,mae_ga_mean,mae_ga_std`) and report.json. Dice of a class that
// is absent from both prediction and ground truth counts as 1.
inline void write_report(std::span<const MethodReport> reports, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream dice(dir / "dice.csv"), age(dir / "age.csv");
  if (!dice || !age) throw IoError("cannot write report files in " + dir.string());
  dice << "method,region,dice_mean,dice_std\n";
  age << "method,mae_ga_mean,mae_ga_std\n";
  nlohmann::json j;
  j["empty_class_dice"] = 1.0;
  j["methods"] = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json m{{"method", r.method}};
    for (std::size_t c = 0; c < r.dice.size(); ++c) {
      dice << r.method << "," << kRegionNames[c] << "," << detail::fmt(r.dice[c].mean) << "," << detail::fmt(r.dice[c].std) << "\n";
      m["dice"][kRegionNames[c]] = {{"mean", r.dice[c].mean}, {"std", r.dice[c].std}};
    }
    dice << r.method << ",mean," << detail::fmt(r.mean_dice.mean) << "," << detail::fmt(r.mean_dice.std) << "\n";
    m["dice"]["mean"] = {{"mean", r.mean_dice.mean}, {"std", r.mean_dice.std}};
    age << r.method << "," << detail::fmt(r.mae_ga.mean) << "," << detail::fmt(r.mae_ga.std) << "\n";
    m["mae_ga"] = {{"mean", r.mae_ga.mean}, {"std", r.mae_ga.std}};
    m["latent_age_correlation"] = {{"train", detail::finite_or_null(r.train_latent_age_r)},
                                   {"test", detail::finite_or_null(r.test_latent_age_r)}};
    m["subjects"] = nlohmann::json::array();
    for (const auto& s : r.subjects) {
      nlohmann::json sj{{"id", s.id},
                        {"ga_weeks", s.ga_true},
                        {"ga_predicted", s.ga_pred},
                        {"mean_dice", s.mean_dice},
                        {"fit_diverged", s.fit_diverged}};
      for (std::size_t c = 0; c < s.dice.size(); ++c) sj["dice"][kRegionNames[c]] = s.dice[c];
      m["subjects"].push_back(sj);
    }
    j["methods"].push_back(m);
  }
  std::ofstream js(dir / "report.json");
  if (!js) throw IoError("cannot write " + (dir / "report.json").string());
  js << j.dump(2) << "\n";
  if (!dice || !age || !js) throw IoError("write failed in " + dir.string());
}

// Latents of the training subjects as rows (full latent vectors).
template <typename S>
Eigen::MatrixXd latent_matrix(const LatentTable<S>& table) {
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(table.size()), table.latent_dim);
  for (std::size_t i = 0; i < table.size(); ++i) Z.row(static_cast<Eigen::Index>(i)) = table.full(i).template cast<double>().transpose();
  return Z;
}

template <typename S>
std::vector<double> latent_ages(const LatentTable<S>& table) {
  std::vector<double> ages;
  for (const auto& e : table.entries) ages.push_back(e.ga_weeks);
  return ages;
}

// Age regressor on the free latent dims of the training table.
template <typename S>
AgeRegressor fit_table_age_regressor(const LatentTable<S>& table) {
  return fit_age_regressor(latent_matrix(table), latent_ages(table), table.free_dims());
}

template <typename S>
double train_latent_age_correlation(const LatentTable<S>& table) {
  const Eigen::MatrixXd Z = latent_matrix(table).leftCols(table.free_dims());
  const auto ages = latent_ages(table);
  const auto axis = pca_first_component(Z, ages);
  std::vector<double> proj;
  for (Eigen::Index i = 0; i < Z.rows(); ++i) proj.push_back(axis.direction.dot(Z.row(i).transpose() - axis.mean));
  return pearson(proj, ages);
}

struct EvalSubject {
  SubjectRecord record;
  Volume image;  // prepared intensities
  LabelVolume labels;
};

// Fits every subject (in parallel when threads > 1; subject i is fitted
// with seed fit.seed + i so results do not depend on scheduling).
template <typename S>
MethodReport evaluate_cohort(const CinaModel<S>& model, const LatentTable<S>& table, const CoordinateFrame& frame,
                             const AgeRegressor& regressor, std::span<const EvalSubject> subjects, const FitConfig& fit,
                             std::string method, int threads = 1) {
  if (subjects.empty()) throw DomainError("evaluation needs at least one test subject");
  std::vector<SubjectOutcome> out(subjects.size());
  auto run = [&](std::size_t i) {
    const auto& s = subjects[i];
    if (!s.image.header.same_grid(s.labels.header)) throw ShapeError("subject " + s.record.id + ": image and labels differ in grid");
    FitConfig cfg = fit;
    cfg.seed = fit.seed + i;
    const auto res = fit_subject(model, table, frame, s.image, cfg);
    const auto seg = segment_subject(model, res.z, frame, s.image.header);
    SubjectOutcome o;
    o.id = s.record.id;
    o.ga_true = s.record.ga_weeks;
    const std::span<const double> z(res.z.data(), static_cast<std::size_t>(res.z.size()));
    o.ga_pred = regressor.predict(z);
    o.projection = regressor.project(z);
    o.dice = per_class_dice(seg.labels, s.labels);
    o.mean_dice = mean_dice(seg.labels, s.labels);
    o.fit_diverged = res.diverged;
    out[i] = std::move(o);
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(subjects.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < subjects.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = static_cast<std::size_t>(w); i < subjects.size(); i += static_cast<std::size_t>(workers)) run(i);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  auto report = summarize(std::move(method), std::move(out));
  report.train_latent_age_r = train_latent_age_correlation(table);
  return report;
}

}  // namespace cina
