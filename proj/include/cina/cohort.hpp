#pragma once

// Cohort manifests (`cohort.json`) and synthetic cohort generation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/analysis.hpp"
#include "cina/errors.hpp"
#include "cina/phantom.hpp"
#include "cina/volume.hpp"

namespace cina {

inline constexpr const char* kLvCondition = "lv_volume_norm";
inline constexpr const char* kFoldingCondition = "folding_index";

struct Cohort {
  std::vector<SubjectRecord> subjects;
  // Raw-measure bounds used to normalize each condition to [0, 1].
  std::map<std::string, CohortBounds> condition_bounds;
};

inline void write_cohort_manifest(const Cohort& cohort, const std::filesystem::path& path,
                                  const std::vector<nlohmann::json>& extras = {}) {
  const auto dir = path.parent_path();
  nlohmann::json j;
  j["format_version"] = 1;
  for (const auto& [name, b] : cohort.condition_bounds) j["condition_bounds"][name] = {{"min", b.min}, {"max", b.max}};
  j["subjects"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& r = cohort.subjects[i];
    nlohmann::json s = sidecar_json(r);
    s["volume"] = std::filesystem::relative(r.volume_path, dir).generic_string();
    if (!r.label_path.empty()) s["labels"] = std::filesystem::relative(r.label_path, dir).generic_string();
    if (i < extras.size())
      for (const auto& [k, v] : extras[i].items()) s[k] = v;
    j["subjects"].push_back(s);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

inline Cohort read_cohort_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cohort manifest " + path.string());
  const auto dir = path.parent_path();
  Cohort c;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("condition_bounds"))
      for (const auto& [name, b] : j.at("condition_bounds").items())
        c.condition_bounds[name] = CohortBounds{b.at("min").get<double>(), b.at("max").get<double>()};
    for (const auto& s : j.at("subjects")) {
      SubjectRecord r;
      r.id = s.at("id").get<std::string>();
      r.ga_weeks = s.at("ga_weeks").get<double>();
      if (s.contains("condition_values"))
        r.condition_values = s.at("condition_values").get<std::map<std::string, double>>();
      r.volume_path = dir / s.at("volume").get<std::string>();
      if (s.contains("labels")) r.label_path = dir / s.at("labels").get<std::string>();
      r.validate();
      c.subjects.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed cohort manifest: " + e.what());
  }
  return c;
}

struct CohortOptions {
  int n = 1;
  double ga_min = 22.0;
  double ga_max = 38.0;
  std::function<double(std::mt19937_64&)> lv_scale_sampler;  // default: U[0, 1]
  std::function<double(double)> folding_rule = default_folding_rule;
  std::array<std::int32_t, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
  std::string id_prefix = "sub";
};

struct GeneratedSubject {
  SubjectRecord record;
  PhantomSpec spec;
  Volume image;
  LabelVolume labels;
  double lv_volume_mm3 = 0.0;
  double folding_raw = 0.0;
};

// Generates the cohort in memory. Condition values are normalized against
// the cohort's own min/max; a single-subject cohort gets 0.5.
inline std::vector<GeneratedSubject> generate_cohort_subjects(const CohortOptions& opt, Cohort* meta = nullptr) {
  if (opt.n < 1) throw ConfigError("cohort size must be >= 1");
  if (!(opt.ga_min <= opt.ga_max)) throw ConfigError("ga_min must not exceed ga_max");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<GeneratedSubject> out;
  out.reserve(static_cast<std::size_t>(opt.n));
  for (int i = 0; i < opt.n; ++i) {
    GeneratedSubject g;
    g.spec.ga_weeks = opt.ga_min + (opt.ga_max - opt.ga_min) * unit(rng);
    g.spec.lv_scale = opt.lv_scale_sampler ? opt.lv_scale_sampler(rng) : unit(rng);
    g.spec.folding_scale = opt.folding_rule(g.spec.ga_weeks);
    g.spec.dims = opt.dims;
    g.spec.spacing = opt.spacing;
    g.spec.noise_sigma = opt.noise_sigma;
    g.spec.seed = rng();
    auto [image, labels] = generate_phantom(g.spec);
    g.image = std::move(image);
    g.labels = std::move(labels);
    g.lv_volume_mm3 = lv_volume_mm3(g.labels);
    g.folding_raw = folding_index(g.labels);
    std::ostringstream id;
    id << opt.id_prefix << "-" << std::setw(3) << std::setfill('0') << i;
    g.record.id = id.str();
    g.record.ga_weeks = g.spec.ga_weeks;
    out.push_back(std::move(g));
  }

  CohortBounds lv{1e300, -1e300}, gi{1e300, -1e300};
  for (const auto& g : out) {
    lv.min = std::min(lv.min, g.lv_volume_mm3);
    lv.max = std::max(lv.max, g.lv_volume_mm3);
    gi.min = std::min(gi.min, g.folding_raw);
    gi.max = std::max(gi.max, g.folding_raw);
  }
  for (auto& g : out) {
    g.record.condition_values[kLvCondition] = lv.valid() ? lv.normalize(g.lv_volume_mm3) : 0.5;
    g.record.condition_values[kFoldingCondition] = gi.valid() ? gi.normalize(g.folding_raw) : 0.5;
  }
  if (meta) {
    meta->condition_bounds[kLvCondition] = lv;
    meta->condition_bounds[kFoldingCondition] = gi;
  }
  return out;
}

// Writes `<id>_T2w.nii`, `<id>_dseg.nii`, the `<id>_T2w.json` sidecar and
// `cohort.json` into `dir`. Returns the manifest path.
inline std::filesystem::path generate_cohort(const CohortOptions& opt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  Cohort cohort;
  auto subjects = generate_cohort_subjects(opt, &cohort);
  std::vector<nlohmann::json> extras;
  for (auto& g : subjects) {
    g.record.volume_path = dir / (g.record.id + "_T2w.nii");
    g.record.label_path = dir / (g.record.id + "_dseg.nii");
    write_nifti(g.image, g.record.volume_path);
    write_nifti(g.labels, g.record.label_path);
    write_sidecar(g.record, sidecar_path(g.record.volume_path));
    extras.push_back({{"phantom",
                       {{"lv_scale", g.spec.lv_scale},
                        {"folding_scale", g.spec.folding_scale},
                        {"noise_sigma", g.spec.noise_sigma},
                        {"seed", g.spec.seed}}},
                      {"measures", {{"lv_volume_mm3", g.lv_volume_mm3}, {kFoldingCondition, g.folding_raw}}}});
    cohort.subjects.push_back(g.record);
  }
  const auto manifest = dir / "cohort.json";
  write_cohort_manifest(cohort, manifest, extras);
  return manifest;
}

}  // namespace cina
