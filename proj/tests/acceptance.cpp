// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// all pass. Criteria 2-5 share one desk-scale training run on a 40-subject
// phantom cohort; criterion 5 adds a second run with LV conditioning.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cina/analysis.hpp"
#include "cina/atlas.hpp"
#include "cina/checkpoint.hpp"
#include "cina/cohort.hpp"
#include "cina/evaluate.hpp"
#include "cina/model.hpp"
#include "cina/volume.hpp"
#include "gradcheck.hpp"

using namespace cina;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int worker_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

template <typename S>
std::string model_bytes(const CinaModel<S>& m) {
  std::string out;
  m.for_each_param([&](const std::string&, const Param<S>& p) {
    out.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.size()) * sizeof(S));
  });
  return out;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class ScratchDir {
 public:
  ScratchDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("cina-acceptance-" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Shared desk-scale cohort and trained atlases

constexpr int kTrainSubjects = 40;
constexpr int kHeldOut = 8;
constexpr int kHighLvSubjects = 6;

struct TrainedAtlas {
  CinaModel<float> model;
  LatentTable<float> table;
  TrainResult result;
  double train_seconds = 0.0;
};

struct Study {
  TrainingSet set;
  std::vector<SubjectRecord> records;
  std::vector<EvalSubject> held_out;
  std::vector<EvalSubject> high_lv;
  std::optional<TrainedAtlas> plain;
  std::optional<TrainedAtlas> conditioned;
};

TrainConfig desk_training() {
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 7;
  tc.threads = worker_threads();
  return tc;
}

std::vector<EvalSubject> held_out_subjects(CohortOptions opt) {
  std::vector<EvalSubject> out;
  for (auto& g : generate_cohort_subjects(opt))
    out.push_back({g.record, prepare_intensities(g.image, {}), std::move(g.labels)});
  return out;
}

Study make_study() {
  Study s;
  CohortOptions opt;
  opt.n = kTrainSubjects;
  opt.ga_min = 22.0;
  opt.ga_max = 38.0;
  opt.seed = 11;
  std::vector<TrainingSubject> subs;
  for (auto& g : generate_cohort_subjects(opt)) {
    g.record.condition_values.erase(kFoldingCondition);
    s.records.push_back(g.record);
    subs.push_back(make_training_subject(g.record, prepare_intensities(g.image, {}), g.labels));
  }
  s.set = make_training_set(std::move(subs));

  CohortOptions test;
  test.n = kHeldOut;
  test.seed = 99;
  test.id_prefix = "test";
  s.held_out = held_out_subjects(test);

  CohortOptions high = test;
  high.n = kHighLvSubjects;
  high.seed = 101;
  high.id_prefix = "highlv";
  high.lv_scale_sampler = [](std::mt19937_64& r) { return std::uniform_real_distribution<double>(0.7, 1.0)(r); };
  s.high_lv = held_out_subjects(high);
  return s;
}

TrainedAtlas train_atlas(const Study& s, bool with_lv_condition) {
  CinaConfig cfg = CinaConfig::desk();
  if (with_lv_condition) cfg.condition_dims = {kLvCondition};
  TrainedAtlas a{init_model<float>(cfg, 1), init_latents<float>(s.records, cfg, 2), {}, 0.0};
  const auto t0 = Clock::now();
  a.result = train(s.set, a.model, a.table, desk_training());
  a.train_seconds = seconds_since(t0);
  if (a.result.aborted) throw NumericalError("training aborted: " + a.result.message);
  return a;
}

const TrainedAtlas& plain_atlas(Study& s) {
  if (!s.plain) s.plain = train_atlas(s, false);
  return *s.plain;
}

const TrainedAtlas& conditioned_atlas(Study& s) {
  if (!s.conditioned) s.conditioned = train_atlas(s, true);
  return *s.conditioned;
}

MethodReport evaluate(const TrainedAtlas& a, const Study& s, const std::vector<EvalSubject>& subjects, const char* name) {
  FitConfig fc;
  fc.seed = 5;
  return evaluate_cohort(a.model, a.table, s.set.frame, fit_table_age_regressor(a.table), subjects, fc, name,
                         worker_threads());
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t entries = 0;
  const int cases = 50;
  for (int seed = 0; seed < cases; ++seed) {
    const auto c = cina::testing::random_gradcheck_case(static_cast<std::uint64_t>(seed));
    const auto r = cina::testing::compare_gradients(cina::testing::analytic_gradient<double>(c),
                                                    cina::testing::numeric_gradient(c), 1e-4);
    worst = std::max(worst, r.max_rel_error);
    entries += r.entries;
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 60.0, std::to_string(cases) + " random graphs, " + std::to_string(entries) +
                                           " partials, max rel error " + fmt("%.3g", worst) + ", " +
                                           fmt("%.1f", secs) + " s"};
}

Outcome latent_age_encoding(Study& s) {
  const auto& a = plain_atlas(s);
  const double r = train_latent_age_correlation(a.table);
  return {std::abs(r) >= 0.95 && a.train_seconds <= 1800.0,
          "|r| " + fmt("%.4f", std::abs(r)) + ", training " + fmt("%.0f", a.train_seconds) + " s"};
}

Outcome age_prediction(const MethodReport& rep) {
  return {rep.mae_ga.mean <= 0.5, "MAE " + fmt("%.3f", rep.mae_ga.mean) + " weeks over " +
                                      std::to_string(rep.subjects.size()) + " held-out subjects"};
}

Outcome segmentation_fidelity(const MethodReport& rep) {
  const double lv = rep.dice[static_cast<std::size_t>(TissueClass::lv) - 1].mean;
  return {rep.mean_dice.mean >= 0.85 && lv >= 0.80,
          "mean Dice " + fmt("%.4f", rep.mean_dice.mean) + ", LV Dice " + fmt("%.4f", lv)};
}

std::size_t lv_voxels(const LabelVolume& l) {
  return static_cast<std::size_t>(std::count(l.data.begin(), l.data.end(), static_cast<std::uint8_t>(TissueClass::lv)));
}

Outcome conditioning_direction(Study& s) {
  const auto& plain = plain_atlas(s);
  const auto& ec = conditioned_atlas(s);
  const auto rp = evaluate(plain, s, s.high_lv, "plain");
  const auto re = evaluate(ec, s, s.high_lv, "e/c");
  const std::size_t lv = static_cast<std::size_t>(TissueClass::lv) - 1;
  int wins = 0;
  std::string pairs;
  for (std::size_t i = 0; i < rp.subjects.size(); ++i) {
    wins += re.subjects[i].dice[lv] >= rp.subjects[i].dice[lv];
    pairs += (i ? " " : "") + fmt("%.3f", re.subjects[i].dice[lv]) + "/" + fmt("%.3f", rp.subjects[i].dice[lv]);
  }

  Vec<double> z = regress_latent(30.0, ec.table);
  bool monotone = true;
  std::string sweep;
  std::size_t prev = 0;
  for (int k = 0; k <= 6; ++k) {
    const double v = 0.2 + 0.1 * k;
    apply_conditions(z, ec.model.config.condition_dims, {{kLvCondition, v}});
    const auto n = lv_voxels(generate_atlas(ec.model, z, s.set.frame, AtlasGrid{}, worker_threads()).labels);
    if (k > 0 && n < prev) monotone = false;
    sweep += (k ? "," : "") + std::to_string(n);
    prev = n;
  }
  return {wins >= 5 && monotone, "e/c LV Dice >= plain in " + std::to_string(wins) + "/" +
                                     std::to_string(rp.subjects.size()) + " (mean " +
                                     fmt("%.4f", re.dice[lv].mean) + " vs " + fmt("%.4f", rp.dice[lv].mean) +
                                     "; e/c/plain per subject " + pairs + "); LV voxels over 0.2..0.8 at 30 w: " + sweep};
}

Outcome kernel_regression() {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> n_dist(2, 40), d_dist(1, 24);
    std::uniform_real_distribution<double> age(22.0, 38.0), sigma(0.2, 2.0);
    std::vector<SubjectRecord> recs(static_cast<std::size_t>(n_dist(rng)));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      recs[i].id = "s" + std::to_string(i);
      recs[i].ga_weeks = age(rng);
    }
    CinaConfig c;
    c.latent_dim = d_dist(rng);
    c.latent_init_std = 1.0;
    const auto table = init_latents<double>(recs, c, rng());
    const double sg = sigma(rng);
    const double t = recs[0].ga_weeks + std::uniform_real_distribution<double>(-2.0, 2.0)(rng) * sg;
    const auto z = regress_latent(t, table, sg);
    // brute force: raw Gaussian sums in long double
    long double total = 0.0L;
    std::vector<long double> acc(static_cast<std::size_t>(c.latent_dim), 0.0L);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const long double d = t - recs[i].ga_weeks;
      const long double w = std::exp(-d * d / (2.0L * sg * sg));
      total += w;
      for (int k = 0; k < c.latent_dim; ++k) acc[static_cast<std::size_t>(k)] += w * table.full(i)[k];
    }
    for (int k = 0; k < c.latent_dim; ++k)
      worst = std::max(worst, static_cast<double>(std::abs(acc[static_cast<std::size_t>(k)] / total - z[k])));
  }

  CinaConfig c;
  c.latent_dim = 16;
  SubjectRecord one;
  one.id = "one";
  one.ga_weeks = 31.0;
  const auto single = init_latents<double>(std::vector<SubjectRecord>{one}, c, 3);
  bool single_ok = true;
  for (double t : {31.0, 30.2, 32.1}) single_ok = single_ok && (regress_latent(t, single) == single.full(0));

  SubjectRecord a = one, b = one;
  a.ga_weeks = 24.0;
  b.ga_weeks = 28.0;
  const auto pair = init_latents<double>(std::vector<SubjectRecord>{a, b}, c, 4);
  const Vec<double> mid = 0.5 * pair.full(0) + 0.5 * pair.full(1);
  const bool midpoint_ok = regress_latent(26.0, pair, 1.0) == mid;

  return {worst <= 1e-12 && single_ok && midpoint_ok, "max deviation " + fmt("%.3g", worst) + ", single-subject " +
                                                          (single_ok ? "exact" : "MISMATCH") + ", midpoint " +
                                                          (midpoint_ok ? "exact" : "MISMATCH")};
}

Outcome resolution_agnosticism(Study& s) {
  const auto& a = plain_atlas(s);
  const Vec<double> z = regress_latent(30.0, a.table);
  const auto v32 = generate_atlas(a.model, z, s.set.frame, AtlasGrid{{32, 32, 32}}, worker_threads());
  const auto v64 = generate_atlas(a.model, z, s.set.frame, AtlasGrid{{64, 64, 64}}, worker_threads());
  const auto v96 = generate_atlas(a.model, z, s.set.frame, AtlasGrid{{96, 96, 96}}, worker_threads());
  std::size_t compared = 0, mismatched = 0;
  auto same = [&](const DecodedVolumes& p, std::size_t ip, const DecodedVolumes& q, std::size_t iq) {
    bool eq = std::memcmp(&p.intensity.data[ip], &q.intensity.data[iq], sizeof(float)) == 0 &&
              p.labels.data[ip] == q.labels.data[iq];
    for (std::size_t c = 0; c < p.probabilities.size(); ++c)
      eq = eq && std::memcmp(&p.probabilities[c].data[ip], &q.probabilities[c].data[iq], sizeof(float)) == 0;
    ++compared;
    mismatched += !eq;
  };
  // voxel k of an n-grid sits at (2k - n) / n, so 32-grid voxel j meets 64-grid 2j and 96-grid 3j
  for (std::int64_t x = 0; x < 32; ++x)
    for (std::int64_t y = 0; y < 32; ++y)
      for (std::int64_t zz = 0; zz < 32; ++zz) {
        const auto i32 = v32.labels.header.index(x, y, zz);
        const auto i64 = v64.labels.header.index(2 * x, 2 * y, 2 * zz);
        const auto i96 = v96.labels.header.index(3 * x, 3 * y, 3 * zz);
        same(v32, i32, v64, i64);
        same(v32, i32, v96, i96);
      }
  return {mismatched == 0, std::to_string(compared) + " shared points, " + std::to_string(mismatched) + " differ"};
}

Outcome frozen_fitting(Study& s) {
  const auto& a = plain_atlas(s);
  const std::uint64_t before = fnv1a(model_bytes(a.model));
  std::mt19937_64 rng(23);
  std::size_t changed = 0;
  for (int run = 0; run < 100; ++run) {
    FitConfig fc;
    fc.seed = rng();
    fc.steps = std::uniform_int_distribution<int>(1, 12)(rng);
    fc.voxels_per_step = std::uniform_int_distribution<int>(16, 512)(rng);
    fc.eval_every = std::uniform_int_distribution<int>(1, 5)(rng);
    fc.eval_voxels = 256;
    fc.lr = std::uniform_real_distribution<double>(1e-3, 1e-1)(rng);
    fc.reg_weight = std::uniform_real_distribution<double>(0.0, 1000.0)(rng);
    const auto& subj = s.held_out[static_cast<std::size_t>(run) % s.held_out.size()];
    std::optional<double> known_t;
    if (run % 2) known_t = subj.record.ga_weeks;
    fit_subject(a.model, a.table, s.set.frame, subj.image, fc, known_t);
    changed += fnv1a(model_bytes(a.model)) != before;
  }
  return {changed == 0, "100 fits, checksum " + std::to_string(before) + ", changed after " + std::to_string(changed)};
}

Outcome persistence(Study& s, const fs::path& dir) {
  bool ok = true;
  std::string detail;

  const auto& subj = s.held_out.front();
  write_nifti(subj.image, dir / "img.nii");
  write_nifti(subj.labels, dir / "lab.nii");
  const auto img = read_volume(dir / "img.nii");
  const auto lab = read_labels(dir / "lab.nii");
  write_nifti(img, dir / "img2.nii");
  write_nifti(lab, dir / "lab2.nii");
  const bool nifti_ok = img.data == subj.image.data && lab.data == subj.labels.data &&
                        img.header.same_grid(subj.image.header) && slurp(dir / "img.nii") == slurp(dir / "img2.nii") &&
                        slurp(dir / "lab.nii") == slurp(dir / "lab2.nii");
  ok = ok && nifti_ok;
  detail += std::string("NIfTI ") + (nifti_ok ? "exact" : "MISMATCH");

  const auto& a = plain_atlas(s);
  Checkpoint ck;
  ck.model = a.model;
  ck.latents = a.table;
  ck.frame = s.set.frame;
  ck.grid = s.set.grid;
  ck.age_regressor = fit_table_age_regressor(a.table);
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  const bool ckpt_ok = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt") && model_bytes(back.model) == model_bytes(a.model);
  ok = ok && ckpt_ok;
  detail += std::string(", checkpoint ") + (ckpt_ok ? "exact" : "MISMATCH");

  // fixed-seed retraining, single-threaded 64-bit
  CohortOptions opt;
  opt.n = 6;
  opt.dims = {48, 48, 48};
  opt.ga_min = 22.0;
  opt.ga_max = 25.0;
  opt.seed = 31;
  std::vector<TrainingSubject> subs;
  std::vector<SubjectRecord> recs;
  for (auto& g : generate_cohort_subjects(opt)) {
    g.record.condition_values.clear();
    recs.push_back(g.record);
    subs.push_back(make_training_subject(g.record, prepare_intensities(g.image, {}), g.labels));
  }
  const auto set = make_training_set(std::move(subs));
  TrainConfig tc;
  tc.epochs = 4;
  tc.visits_per_epoch = 4;
  tc.voxels_per_subject = 1024;
  tc.seed = 42;
  tc.threads = 1;
  auto run = [&] {
    auto m = init_model<double>(CinaConfig::desk(), tc.seed);
    auto t = init_latents<double>(recs, CinaConfig::desk(), tc.seed + 1);
    return train(set, m, t, tc).trace;
  };
  const auto first = run(), second = run();
  bool trace_ok = first.size() == second.size() && !first.empty();
  for (std::size_t i = 0; trace_ok && i < first.size(); ++i)
    trace_ok = first[i].mse == second[i].mse && first[i].ce == second[i].ce;
  ok = ok && trace_ok;
  detail += ", " + std::to_string(first.size()) + "-epoch 64-bit trace " + (trace_ok ? "identical" : "DIFFERS");
  return {ok, detail};
}

Outcome compactness(Study& s, const fs::path& dir) {
  const CinaConfig paper = CinaConfig::paper();
  constexpr std::size_t kPaperSubjects = 128;
  constexpr std::size_t kLimit = 35u * 1000 * 1000;
  const std::size_t arithmetic = checkpoint_payload_bytes(paper, kPaperSubjects);

  // the full-size preset file itself, serialized in memory
  std::vector<SubjectRecord> recs(kPaperSubjects);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].id = "sub-" + std::to_string(1000 + i);
    recs[i].ga_weeks = 21.0 + 17.0 * static_cast<double>(i) / kPaperSubjects;
  }
  Checkpoint big;
  big.model = init_model<float>(paper, 1);
  big.latents = init_latents<float>(recs, paper, 2);
  big.grid = s.set.grid;
  big.frame = s.set.frame;
  const std::size_t serialized = serialize_checkpoint(big).size();

  const auto& a = plain_atlas(s);
  Checkpoint desk;
  desk.model = a.model;
  desk.latents = a.table;
  desk.frame = s.set.frame;
  desk.grid = s.set.grid;
  save_checkpoint(desk, dir / "desk.ckpt");
  const std::size_t desk_file = fs::file_size(dir / "desk.ckpt");
  const bool desk_ok = desk_file > checkpoint_payload_bytes(a.model.config, a.table.size()) &&
                       desk_file == serialize_checkpoint(desk).size();
  return {arithmetic <= kLimit && serialized <= kLimit && desk_ok,
          "paper preset payload " + fmt("%.2f", arithmetic / 1e6) + " MB, serialized " + fmt("%.2f", serialized / 1e6) +
              " MB; desk file " + fmt("%.3f", desk_file / 1e6) + " MB"};
}

}  // namespace

int main() {
  ScratchDir scratch;
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };

  std::optional<Study> study;
  auto st = [&]() -> Study& {
    if (!study) study = make_study();
    return *study;
  };
  std::optional<MethodReport> held_out;
  auto held = [&]() -> const MethodReport& {
    if (!held_out) held_out = evaluate(plain_atlas(st()), st(), st().held_out, "plain");
    return *held_out;
  };

  report(1, "gradient correctness", gradient_correctness);
  report(2, "latent-age encoding", [&] { return latent_age_encoding(st()); });
  report(3, "age prediction", [&] { return age_prediction(held()); });
  report(4, "segmentation fidelity", [&] { return segmentation_fidelity(held()); });
  report(5, "explicit conditioning direction", [&] { return conditioning_direction(st()); });
  report(6, "kernel regression oracle", kernel_regression);
  report(7, "resolution agnosticism", [&] { return resolution_agnosticism(st()); });
  report(8, "frozen-network fitting", [&] { return frozen_fitting(st()); });
  report(9, "persistence", [&] { return persistence(st(), scratch.path()); });
  report(10, "compactness", [&] { return compactness(st(), scratch.path()); });
  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
