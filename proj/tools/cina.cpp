// Command-line entry point.
//
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure, 5 domain error.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cina/analysis.hpp"
#include "cina/atlas.hpp"
#include "cina/checkpoint.hpp"
#include "cina/cohort.hpp"
#include "cina/evaluate.hpp"
#include "cina/model.hpp"
#include "cina/phantom.hpp"
#include "cina/png.hpp"
#include "cina/volume.hpp"

namespace fs = std::filesystem;
using namespace cina;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4, kDomain = 5 };

// Worker count: the request (0 = all cores), capped by CINA_THREADS.
int worker_count(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* cap = std::getenv("CINA_THREADS")) {
    const int c = std::atoi(cap);
    if (c >= 1) n = std::min(n, c);
  }
  return std::max(1, n);
}

std::map<std::string, double> parse_conditions(const std::vector<std::string>& items) {
  std::map<std::string, double> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--cond expects name=value, got '" + item + "'");
    try {
      std::size_t used = 0;
      const std::string v = item.substr(eq + 1);
      out[item.substr(0, eq)] = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::logic_error&) {
      throw ConfigError("--cond value is not a number in '" + item + "'");
    }
  }
  return out;
}

IntensityNormalization checkpoint_normalization(const Checkpoint& ck) {
  IntensityNormalization n;
  if (ck.provenance.contains("normalization")) {
    const auto& j = ck.provenance.at("normalization");
    n.enabled = j.value("enabled", true);
    n.lo_pct = j.value("lo_pct", 1.0);
    n.hi_pct = j.value("hi_pct", 99.0);
  }
  return n;
}

void write_decoded(const DecodedVolumes& d, const fs::path& dir, const std::string& stem, bool png) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_nifti(d.intensity, dir / (stem + "_T2w.nii"));
  write_nifti(d.labels, dir / (stem + "_dseg.nii"));
  for (std::size_t c = 0; c < d.probabilities.size(); ++c)
    write_nifti(d.probabilities[c], dir / (stem + "_prob-" + kClassNames[c] + ".nii"));
  if (png) write_png(slice_montage(d.intensity, &d.labels), dir / (stem + "_montage.png"));
}

nlohmann::json vec_json(const Vec<double>& z) { return std::vector<double>(z.data(), z.data() + z.size()); }

Vec<double> read_latent_json(const fs::path& path, int latent_dim) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    const auto v = j.at("z").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != latent_dim)
      throw ShapeError(path.string() + ": latent has " + std::to_string(v.size()) + " dims, checkpoint expects " +
                       std::to_string(latent_dim));
    return Eigen::Map<const Vec<double>>(v.data(), static_cast<Eigen::Index>(v.size()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed latent file: " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  int n = 8;
  double ga_min = 22.0, ga_max = 38.0;
  std::vector<int> dims{64};
  double spacing = 1.0;
  double noise = 0.02;
  double lv_min = 0.0, lv_max = 1.0;
  std::uint64_t seed = 0;
  std::string prefix = "sub";
  std::string out;
};

int run_make_phantoms(const PhantomArgs& a) {
  if (!(a.ga_min <= a.ga_max)) throw ConfigError("--ga-min must not exceed --ga-max");
  if (!(a.lv_min >= 0.0 && a.lv_min <= a.lv_max && a.lv_max <= 1.0)) throw ConfigError("need 0 <= --lv-min <= --lv-max <= 1");
  if (a.dims.size() != 1 && a.dims.size() != 3) throw ConfigError("--dims takes one or three values");
  CohortOptions opt;
  opt.n = a.n;
  opt.ga_min = a.ga_min;
  opt.ga_max = a.ga_max;
  for (int k = 0; k < 3; ++k) {
    opt.dims[k] = a.dims.size() == 1 ? a.dims[0] : a.dims[static_cast<std::size_t>(k)];
    opt.spacing[k] = a.spacing;
  }
  opt.noise_sigma = a.noise;
  opt.seed = a.seed;
  opt.id_prefix = a.prefix;
  const double lo = a.lv_min, hi = a.lv_max;
  opt.lv_scale_sampler = [lo, hi](std::mt19937_64& rng) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::cout << generate_cohort(opt, a.out).string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline constexpr int kDeskEpochs = 30;

struct TrainArgs {
  std::string cohort, out, loss_csv, preset = "desk";
  int precision = 32;
  int threads = 0;
  int hidden_layers = 0, hidden_width = 0, latent_dim = 0;
  int epochs = 0;  // 0: preset default
  std::vector<int> mod_after;
  std::vector<std::string> conditions;
  double kernel_sigma = kDefaultKernelSigma;
  bool no_normalize = false;
  TrainConfig train;
  bool quiet = false;
};

template <typename S>
int train_impl(const TrainArgs& a, const CinaConfig& cfg, const Cohort& cohort, const TrainingSet& set,
               const IntensityNormalization& norm) {
  TrainConfig tc = a.train;
  tc.threads = worker_count(a.threads);
  auto model = init_model<S>(cfg, tc.seed);
  auto table = init_latents<S>(cohort.subjects, cfg, tc.seed + 1);
  const auto result = train(set, model, table, tc, [&](const EpochLoss& e) {
    if (!a.quiet) std::fprintf(stderr, "epoch %d  mse %.6g  ce %.6g\n", e.epoch, e.mse, e.ce);
  });

  const fs::path loss_csv = a.loss_csv.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.loss_csv);
  {
    std::ofstream f(loss_csv);
    if (!f) throw IoError("cannot write " + loss_csv.string());
    f << "epoch,loss_mse,loss_ce\n";
    char buf[96];
    for (const auto& e : result.trace) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", e.epoch, e.mse, e.ce);
      f << buf;
    }
  }

  Checkpoint ck;
  ck.model = cast_model<float>(model);
  ck.latents = cast_latents<float>(table);
  ck.frame = set.frame;
  ck.grid = set.grid;
  ck.kernel_sigma = a.kernel_sigma;
  for (const auto& name : cfg.condition_dims) {
    auto it = cohort.condition_bounds.find(name);
    if (it != cohort.condition_bounds.end()) ck.condition_bounds[name] = it->second;
  }
  if (table.size() >= 3) {
    try {
      ck.age_regressor = fit_table_age_regressor(ck.latents);
    } catch (const NumericalError& e) {
      std::cerr << "warning: no age regressor stored: " << e.what() << "\n";
    }
  }
  ck.provenance = {{"train", tc.to_json()},
                   {"precision", a.precision},
                   {"epochs_completed", result.trace.size()},
                   {"aborted", result.aborted},
                   {"normalization", {{"enabled", norm.enabled}, {"lo_pct", norm.lo_pct}, {"hi_pct", norm.hi_pct}}}};
  if (!result.trace.empty())
    ck.provenance["final_loss"] = {{"mse", result.trace.back().mse}, {"ce", result.trace.back().ce}};
  save_checkpoint(ck, a.out);
  std::cout << a.out << "\n";
  if (result.aborted) {
    std::cerr << "error: " << result.message << "\n";
    return kNumerical;
  }
  return kOk;
}

int run_train(TrainArgs a) {
  CinaConfig cfg;
  if (a.preset == "desk") cfg = CinaConfig::desk();
  else if (a.preset == "paper") cfg = CinaConfig::paper();
  else throw ConfigError("--preset must be desk or paper");
  if (a.hidden_layers > 0) cfg.hidden_layers = a.hidden_layers;
  if (a.hidden_width > 0) cfg.hidden_width = a.hidden_width;
  if (a.latent_dim > 0) cfg.latent_dim = a.latent_dim;
  if (!a.mod_after.empty()) cfg.mod_after = a.mod_after;
  if (a.epochs > 0) a.train.epochs = a.epochs;
  else if (a.epochs == 0) a.train.epochs = a.preset == "desk" ? kDeskEpochs : TrainConfig{}.epochs;
  else throw ConfigError("--epochs must be >= 1");
  cfg.condition_dims = a.conditions;
  cfg.validate();
  if (!(a.kernel_sigma > 0.0)) throw ConfigError("--kernel-sigma must be positive");

  const auto cohort = read_cohort_manifest(a.cohort);
  IntensityNormalization norm;
  norm.enabled = !a.no_normalize;
  const auto set = load_training_set(cohort, norm);
  if (a.precision == 32) return train_impl<float>(a, cfg, cohort, set, norm);
  if (a.precision == 64) return train_impl<double>(a, cfg, cohort, set, norm);
  throw ConfigError("--precision must be 32 or 64");
}

// ---------------------------------------------------------------------------

struct AtlasArgs {
  std::string ckpt, out;
  double t = 0.0;
  double res = 1.0;
  std::vector<std::string> cond;
  std::optional<double> sigma;
  bool png = false;
  int threads = 0;
};

int run_atlas(const AtlasArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  const double sigma = a.sigma.value_or(ck.kernel_sigma);
  if (!(sigma > 0.0)) throw ConfigError("--sigma must be positive");
  Vec<double> z = regress_latent(a.t, ck.latents, sigma);
  const auto overrides = parse_conditions(a.cond);
  apply_conditions(z, ck.config().condition_dims, overrides);
  const auto grid = AtlasGrid::from_resolution(ck.frame, a.res);
  const auto decoded = generate_atlas(ck.model, z, ck.frame, grid, worker_count(a.threads));
  write_decoded(decoded, a.out, "atlas", a.png);

  nlohmann::json meta{{"t", a.t}, {"sigma", sigma}, {"resolution_mm", a.res}, {"dims", grid.dims}, {"z", vec_json(z)}};
  meta["conditions"] = nlohmann::json::object();
  const auto& names = ck.config().condition_dims;
  for (std::size_t c = 0; c < names.size(); ++c)
    meta["conditions"][names[c]] = z[z.size() - static_cast<Eigen::Index>(names.size()) + static_cast<Eigen::Index>(c)];
  std::ofstream f(fs::path(a.out) / "atlas.json");
  if (!f) throw IoError("cannot write atlas.json");
  f << meta.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string ckpt, vol, out;
  std::optional<double> t;
  FitConfig fit;
  bool strict = false;
};

int run_fit(const FitArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto image = prepare_intensities(read_volume(a.vol), checkpoint_normalization(ck));
  FitConfig fc = a.fit;
  fc.kernel_sigma = ck.kernel_sigma;
  const auto res = fit_subject(ck.model, ck.latents, ck.frame, image, fc, a.t);
  nlohmann::json j{{"z", vec_json(res.z)},
                   {"init", a.t ? "kernel_regressed" : "zero_random"},
                   {"loss_trace", res.loss_trace},
                   {"best_loss", res.best_loss},
                   {"steps_run", res.steps_run},
                   {"diverged", res.diverged},
                   {"volume", fs::absolute(a.vol).string()},
                   {"grid", detail::header_json(image.header)},
                   {"seed", fc.seed}};
  if (a.t) j["t"] = *a.t;
  std::ofstream f(a.out);
  if (!f) throw IoError("cannot write " + a.out);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed for " + a.out);
  if (res.diverged) {
    std::cerr << "warning: fit loss kept increasing; kept the best latent seen\n";
    if (a.strict) return kNumerical;
  }
  return kOk;
}

struct SegmentArgs {
  std::string ckpt, z, out, vol;
  bool png = false;
  int threads = 0;
};

int run_segment(const SegmentArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto z = read_latent_json(a.z, ck.config().latent_dim);
  VolumeHeader grid;
  if (!a.vol.empty()) {
    grid = read_nifti(a.vol).header;
  } else {
    std::ifstream in(a.z);
    const auto j = nlohmann::json::parse(in);
    if (!j.contains("grid")) throw ConfigError("latent file has no grid; pass --vol");
    grid = detail::header_from_json(j.at("grid"));
  }
  const auto decoded = segment_subject(ck.model, z, ck.frame, grid, worker_count(a.threads));
  write_decoded(decoded, a.out, "seg", a.png);
  return kOk;
}

int run_predict_age(const std::string& ckpt, const std::string& zpath) {
  const auto ck = load_checkpoint(ckpt);
  if (!ck.age_regressor) throw DomainError("checkpoint has no age regressor (trained on fewer than three subjects?)");
  const auto z = read_latent_json(zpath, ck.config().latent_dim);
  const double ga = ck.age_regressor->predict(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
  if (!std::isfinite(ga) || ga < 15.0 || ga > 45.0)
    throw DomainError("predicted age " + std::to_string(ga) + " weeks lies outside the [15, 45] guard");
  std::printf("%.4f\n", ga);
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, cohort, out, method = "CINA";
  FitConfig fit;
  int threads = 0;
};

int run_eval(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  if (!ck.age_regressor) throw DomainError("checkpoint has no age regressor");
  const auto cohort = read_cohort_manifest(a.cohort);
  const auto norm = checkpoint_normalization(ck);
  std::vector<EvalSubject> subjects;
  for (const auto& r : cohort.subjects) {
    if (r.label_path.empty()) throw IoError("subject " + r.id + " has no ground-truth label map");
    subjects.push_back({r, prepare_intensities(read_volume(r.volume_path), norm), read_labels(r.label_path)});
  }
  FitConfig fc = a.fit;
  fc.kernel_sigma = ck.kernel_sigma;
  const auto report =
      evaluate_cohort(ck.model, ck.latents, ck.frame, *ck.age_regressor, subjects, fc, a.method, worker_count(a.threads));
  write_report(std::span<const MethodReport>(&report, 1), a.out);
  std::printf("mean_dice %.4f  mae_ga %.4f\n", report.mean_dice.mean, report.mae_ga.mean);
  return kOk;
}

void add_fit_options(CLI::App* app, FitConfig& f) {
  app->add_option("--steps", f.steps, "Optimization steps")->capture_default_str();
  app->add_option("--lr", f.lr, "Adam learning rate for the latent")->capture_default_str();
  app->add_option("--reg-weight", f.reg_weight, "L2 weight on the latent (1 / prior variance)")->capture_default_str();
  app->add_option("--voxels", f.voxels_per_step, "Voxels sampled per step")->capture_default_str();
  app->add_option("--restarts", f.restarts, "Random inits probed before the full fit")->capture_default_str();
  app->add_option("--seed", f.seed, "Random seed")->capture_default_str();
}

// Config files are flat key=value lists; unsectioned keys belong to train.
struct TrainConfigFile : CLI::ConfigINI {
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    auto items = CLI::ConfigINI::from_config(in);
    for (auto& item : items)
      if (item.parents.empty()) item.parents = {"train"};
    return items;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional implicit neural atlas"};
  app.require_subcommand(1);
  // CLI11 only reads config files at the root, so train reaches this option by fallthrough.
  app.set_config("--config", "", "Flat key=value file of train options; command-line flags take precedence");
  app.config_formatter(std::make_shared<TrainConfigFile>());
  app.allow_config_extras(CLI::config_extras_mode::error);
  int code = kOk;

  PhantomArgs pa;
  auto* mk = app.add_subcommand("make-phantoms", "Generate a synthetic phantom cohort");
  mk->add_option("--n", pa.n, "Number of subjects")->capture_default_str();
  mk->add_option("--ga-min", pa.ga_min, "Youngest gestational age (weeks)")->capture_default_str();
  mk->add_option("--ga-max", pa.ga_max, "Oldest gestational age (weeks)")->capture_default_str();
  mk->add_option("--dims", pa.dims, "Grid size: one value or three")->capture_default_str();
  mk->add_option("--spacing", pa.spacing, "Voxel spacing (mm)")->capture_default_str();
  mk->add_option("--noise", pa.noise, "Gaussian intensity noise sigma")->capture_default_str();
  mk->add_option("--lv-min", pa.lv_min, "Lower bound of the ventricle scale")->capture_default_str();
  mk->add_option("--lv-max", pa.lv_max, "Upper bound of the ventricle scale")->capture_default_str();
  mk->add_option("--prefix", pa.prefix, "Subject id prefix")->capture_default_str();
  mk->add_option("--seed", pa.seed, "Random seed")->capture_default_str();
  mk->add_option("--out", pa.out, "Output directory")->required();
  mk->callback([&] { code = run_make_phantoms(pa); });

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train network weights and subject latents");
  tr->fallthrough();
  tr->add_option("--cohort", ta.cohort, "cohort.json")->required();
  tr->add_option("--out", ta.out, "Checkpoint path")->required();
  tr->add_option("--loss-csv", ta.loss_csv, "Loss trace CSV (default: <out>.loss.csv)");
  tr->add_option("--preset", ta.preset, "Architecture preset: desk or paper")->capture_default_str();
  tr->add_option("--hidden-layers", ta.hidden_layers, "Override hidden layer count");
  tr->add_option("--hidden-width", ta.hidden_width, "Override hidden width");
  tr->add_option("--latent-dim", ta.latent_dim, "Override latent size");
  tr->add_option("--mod-after", ta.mod_after, "Modulated hidden layers (1-based)")->delimiter(',');
  tr->add_option("--conditions", ta.conditions, "Condition names pinned to trailing latent dims")->delimiter(',');
  tr->add_option("--precision", ta.precision, "32 or 64")->capture_default_str();
  tr->add_option("--epochs", ta.epochs, "Epochs (default: 30 for desk, 200 for paper)");
  tr->add_option("--lr", ta.train.lr)->capture_default_str();
  tr->add_option("--lr-decay", ta.train.lr_decay, "Per-epoch multiplicative decay")->capture_default_str();
  tr->add_option("--latent-lr", ta.train.latent_lr)->capture_default_str();
  tr->add_option("--voxels-per-subject", ta.train.voxels_per_subject)->capture_default_str();
  tr->add_option("--subjects-per-step", ta.train.subjects_per_step)->capture_default_str();
  tr->add_option("--visits-per-epoch", ta.train.visits_per_epoch)->capture_default_str();
  tr->add_option("--background-fraction", ta.train.background_fraction)->capture_default_str();
  tr->add_option("--seed", ta.train.seed)->capture_default_str();
  tr->add_option("--kernel-sigma", ta.kernel_sigma, "Age kernel width stored for atlas generation")->capture_default_str();
  tr->add_flag("--no-normalize", ta.no_normalize, "Use intensities as stored");
  tr->add_option("--threads", ta.threads, "Worker threads (0 = all cores, capped by CINA_THREADS)");
  tr->add_flag("--quiet", ta.quiet, "No per-epoch progress");
  tr->callback([&] { code = run_train(ta); });

  AtlasArgs aa;
  auto* at = app.add_subcommand("atlas", "Generate an atlas at a given age");
  at->add_option("--ckpt", aa.ckpt)->required();
  at->add_option("--t", aa.t, "Gestational age (weeks)")->required();
  at->add_option("--res", aa.res, "Isotropic resolution (mm)")->capture_default_str();
  at->add_option("--cond", aa.cond, "Condition override name=value (value in [0, 1])");
  at->add_option("--sigma", aa.sigma, "Kernel width (default: from checkpoint)");
  at->add_flag("--png", aa.png, "Also write a slice montage");
  at->add_option("--threads", aa.threads);
  at->add_option("--out", aa.out)->required();
  at->callback([&] { code = run_atlas(aa); });

  FitArgs fa;
  auto* fi = app.add_subcommand("fit", "Fit a latent to a new volume (intensities only)");
  fi->add_option("--ckpt", fa.ckpt)->required();
  fi->add_option("--vol", fa.vol)->required();
  fi->add_option("--t", fa.t, "Known age: initialize from the kernel-regressed latent");
  fi->add_option("--out", fa.out, "Latent JSON")->required();
  fi->add_flag("--strict", fa.strict, "Treat a divergence warning as failure (exit 4)");
  add_fit_options(fi, fa.fit);
  fi->callback([&] { code = run_fit(fa); });

  SegmentArgs sa;
  auto* sg = app.add_subcommand("segment", "Decode labels and probabilities from a fitted latent");
  sg->add_option("--ckpt", sa.ckpt)->required();
  sg->add_option("--z", sa.z)->required();
  sg->add_option("--vol", sa.vol, "Volume defining the output grid (default: grid stored with the latent)");
  sg->add_flag("--png", sa.png, "Also write a slice montage");
  sg->add_option("--threads", sa.threads);
  sg->add_option("--out", sa.out)->required();
  sg->callback([&] { code = run_segment(sa); });

  std::string pa_ckpt, pa_z;
  auto* pr = app.add_subcommand("predict-age", "Print the gestational age predicted from a fitted latent");
  pr->add_option("--ckpt", pa_ckpt)->required();
  pr->add_option("--z", pa_z)->required();
  pr->callback([&] { code = run_predict_age(pa_ckpt, pa_z); });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Fit, segment and age every subject of a labelled cohort");
  ev->add_option("--ckpt", ea.ckpt)->required();
  ev->add_option("--cohort", ea.cohort)->required();
  ev->add_option("--out", ea.out, "Report directory")->required();
  ev->add_option("--method", ea.method, "Method name in the report")->capture_default_str();
  ev->add_option("--threads", ea.threads);
  add_fit_options(ev, ea.fit);
  ev->callback([&] { code = run_eval(ea); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::FileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDomain;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDomain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return code;
}
