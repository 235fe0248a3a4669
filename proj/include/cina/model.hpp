#pragma once

// The conditional atlas network: coordinates -> stack of sine layers, some of
// them modulated by the latent code -> intensity head and tissue-logit head.
// Also the per-subject latent table of the auto-decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/diffnet.hpp"
#include "cina/errors.hpp"
#include "cina/volume.hpp"

namespace cina {

struct CinaConfig {
  int hidden_layers = 5;
  int hidden_width = 512;
  int latent_dim = 330;
  std::vector<int> mod_after{1, 3, 5};  // 1-based hidden layer indices
  double omega0_first = 30.0;
  double omega0_hidden = 30.0;
  int num_classes = kNumClasses;
  std::vector<std::string> condition_dims;  // trailing latent dims pinned to these conditions
  double latent_init_std = 0.1;             // N(0, 1e-2) read as variance 1e-2
  double modulation_init_std = 0.01;        // M ~ N(0, 1e-4)

  static CinaConfig paper() { return CinaConfig{}; }
  static CinaConfig desk() {
    CinaConfig c;
    c.hidden_layers = 3;
    c.hidden_width = 128;
    c.latent_dim = 32;
    c.mod_after = {1, 2, 3};
    return c;
  }

  int condition_count() const { return static_cast<int>(condition_dims.size()); }
  int free_latent_dims() const { return latent_dim - condition_count(); }
  bool modulated(int layer) const { return std::find(mod_after.begin(), mod_after.end(), layer) != mod_after.end(); }

  void validate() const {
    if (hidden_layers < 1) throw ConfigError("hidden_layers must be >= 1");
    if (hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    for (int l : mod_after)
      if (l < 1 || l > hidden_layers)
        throw ConfigError("mod_after entry " + std::to_string(l) + " outside 1.." + std::to_string(hidden_layers));
    if (latent_dim < 1 + condition_count()) throw ConfigError("latent_dim must be >= 1 + number of condition dims");
    if (!(omega0_first > 0.0) || !(omega0_hidden > 0.0)) throw ConfigError("omega0 must be positive");
    std::set<std::string> unique(condition_dims.begin(), condition_dims.end());
    if (unique.size() != condition_dims.size()) throw ConfigError("condition_dims contains duplicates");
  }

  nlohmann::json to_json() const {
    return {{"hidden_layers", hidden_layers},
            {"hidden_width", hidden_width},
            {"latent_dim", latent_dim},
            {"mod_after", mod_after},
            {"omega0_first", omega0_first},
            {"omega0_hidden", omega0_hidden},
            {"num_classes", num_classes},
            {"condition_dims", condition_dims},
            {"latent_init_std", latent_init_std},
            {"modulation_init_std", modulation_init_std}};
  }
  static CinaConfig from_json(const nlohmann::json& j) {
    CinaConfig c;
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.hidden_width = j.at("hidden_width").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.mod_after = j.at("mod_after").get<std::vector<int>>();
    c.omega0_first = j.at("omega0_first").get<double>();
    c.omega0_hidden = j.at("omega0_hidden").get<double>();
    c.num_classes = j.at("num_classes").get<int>();
    c.condition_dims = j.at("condition_dims").get<std::vector<std::string>>();
    c.latent_init_std = j.value("latent_init_std", 0.1);
    c.modulation_init_std = j.value("modulation_init_std", 0.01);
    c.validate();
    return c;
  }
};

template <typename S>
struct SineLayer {
  Param<S> W;  // width x fan_in
  Param<S> b;  // 1 x width
  Param<S> M;  // (2 width) x latent_dim, empty when unmodulated
  Param<S> mu;  // (2 width) x 1
  bool modulated = false;
  S omega0 = S(30);
};

template <typename S>
struct CinaModel {
  CinaConfig config;
  std::vector<SineLayer<S>> layers;
  Param<S> img_W, img_b;  // intensity head: 1 x width, 1 x 1
  Param<S> seg_W, seg_b;  // tissue head: classes x width, 1 x classes

  CinaModel() = default;

  // All parameters zero, shapes from the config.
  explicit CinaModel(CinaConfig cfg) : config(std::move(cfg)) {
    config.validate();
    const int H = config.hidden_width;
    for (int l = 1; l <= config.hidden_layers; ++l) {
      SineLayer<S> layer;
      const int fan_in = l == 1 ? 3 : H;
      layer.W = Param<S>(H, fan_in);
      layer.b = Param<S>(1, H);
      layer.modulated = config.modulated(l);
      if (layer.modulated) {
        layer.M = Param<S>(2 * H, config.latent_dim);
        layer.mu = Param<S>(2 * H, 1);
      }
      layer.omega0 = static_cast<S>(l == 1 ? config.omega0_first : config.omega0_hidden);
      layers.push_back(std::move(layer));
    }
    img_W = Param<S>(1, H);
    img_b = Param<S>(1, 1);
    seg_W = Param<S>(config.num_classes, H);
    seg_b = Param<S>(1, config.num_classes);
  }

  // Stable order used by checkpoints and optimizers.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l + 1) + ".";
      fn(p + "W", layers[l].W);
      fn(p + "b", layers[l].b);
      if (layers[l].modulated) {
        fn(p + "M", layers[l].M);
        fn(p + "mu", layers[l].mu);
      }
    }
    fn(std::string("head_img.W"), img_W);
    fn(std::string("head_img.b"), img_b);
    fn(std::string("head_seg.W"), seg_W);
    fn(std::string("head_seg.b"), seg_b);
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    const_cast<CinaModel*>(this)->for_each_param(
        [&](const std::string& name, Param<S>& p) { fn(name, static_cast<const Param<S>&>(p)); });
  }

  std::vector<Param<S>*> parameters() {
    std::vector<Param<S>*> out;
    for_each_param([&](const std::string&, Param<S>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Param<S>& p) { n += static_cast<std::size_t>(p.size()); });
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
};

// Parameter count for a config without materializing the model.
inline std::size_t parameter_count(const CinaConfig& c) {
  const std::size_t H = static_cast<std::size_t>(c.hidden_width);
  std::size_t n = 0;
  for (int l = 1; l <= c.hidden_layers; ++l) {
    const std::size_t fan_in = l == 1 ? 3 : H;
    n += H * fan_in + H;
    if (c.modulated(l)) n += 2 * H * static_cast<std::size_t>(c.latent_dim) + 2 * H;
  }
  n += H + 1;
  n += static_cast<std::size_t>(c.num_classes) * (H + 1);
  return n;
}

template <typename S>
CinaModel<S> init_model(const CinaConfig& config, std::uint64_t seed) {
  CinaModel<S> m(config);
  std::mt19937_64 rng(seed);
  auto fill_uniform = [&](Tensor2<S>& t, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(u(rng));
  };
  auto fill_normal = [&](Tensor2<S>& t, double std) {
    std::normal_distribution<double> n(0.0, std);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(n(rng));
  };
  const double H = config.hidden_width;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const double fan_in = static_cast<double>(layer.W.cols());
    const double w0 = static_cast<double>(layer.omega0);
    if (l == 0)
      fill_uniform(layer.W.value, 1.0 / fan_in);
    else
      fill_uniform(layer.W.value, std::sqrt(6.0 / fan_in) / w0);
    // b sits outside the omega0 product, so it carries the omega0 factor itself
    fill_uniform(layer.b.value, w0 / std::sqrt(fan_in));
    if (layer.modulated) {
      fill_normal(layer.M.value, config.modulation_init_std);
      layer.mu.value.setZero();
      layer.mu.value.topRows(config.hidden_width).setOnes();
    }
  }
  const double head_bound = std::sqrt(6.0 / H) / config.omega0_hidden;
  fill_uniform(m.img_W.value, head_bound);
  fill_uniform(m.seg_W.value, head_bound);
  m.img_b.value.setZero();
  m.seg_b.value.setZero();
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename S>
struct ForwardOutput {
  Tensor2<S> intensity;  // batch x 1
  Tensor2<S> logits;     // batch x classes
};

// Activations recorded by a forward pass; everything backward needs.
template <typename S>
struct ForwardTape {
  Vec<S> z;
  std::vector<SineCache<S>> layers;
  std::vector<Vec<S>> phi, psi;  // empty vectors for unmodulated layers
  Tensor2<S> hidden;
  bool recorded = false;
};

inline constexpr double kCoordinateGuard = 1.5;

template <typename S>
void check_coords(const Tensor2<S>& coords) {
  if (coords.cols() != 3) throw ShapeError("forward: coordinates must be batch x 3");
  if (coords.size() > 0 && coords.cwiseAbs().maxCoeff() > static_cast<S>(kCoordinateGuard))
    throw DomainError("forward: coordinate outside [-1.5, 1.5]^3 (physical units passed by mistake?)");
  if (!coords.allFinite()) throw DomainError("forward: non-finite coordinate");
}

template <typename S>
ForwardOutput<S> forward_batch(const CinaModel<S>& model, const Tensor2<S>& coords, const Vec<S>& z,
                               ForwardTape<S>* tape) {
  if (z.size() != model.config.latent_dim) throw ShapeError("forward: latent size does not match config");
  check_coords(coords);
  if (tape) {
    tape->z = z;
    tape->layers.assign(model.layers.size(), {});
    tape->phi.assign(model.layers.size(), {});
    tape->psi.assign(model.layers.size(), {});
    tape->recorded = false;
  }
  Tensor2<S> h = coords;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    SineCache<S>* cache = tape ? &tape->layers[l] : nullptr;
    if (layer.modulated) {
      auto [phi, psi] = modulation_map(layer.M, layer.mu, z);
      h = modulated_sine_forward(layer.W, layer.b, h, phi, psi, layer.omega0, cache);
      if (tape) {
        tape->phi[l] = std::move(phi);
        tape->psi[l] = std::move(psi);
      }
    } else {
      h = sine_forward(layer.W.value, layer.b.value, h, layer.omega0, cache);
    }
  }
  ForwardOutput<S> out;
  out.intensity = linear_forward(model.img_W, model.img_b, h);
  out.logits = linear_forward(model.seg_W, model.seg_b, h);
  if (tape) {
    tape->hidden = std::move(h);
    tape->recorded = true;
  }
  return out;
}

// Rows per dense product in `forward`. Every product runs on exactly this
// many rows (padding the tail), so a coordinate's output never depends on
// which batch it arrived in.
inline constexpr Eigen::Index kForwardChunk = 512;

// Pure evaluation INR(X | z). Bit-identical per coordinate regardless of
// batch composition.
template <typename S>
ForwardOutput<S> forward(const CinaModel<S>& model, const Tensor2<S>& coords, const Vec<S>& z) {
  check_coords(coords);
  const Eigen::Index n = coords.rows();
  ForwardOutput<S> out;
  out.intensity.resize(n, 1);
  out.logits.resize(n, model.config.num_classes);
  Tensor2<S> chunk = Tensor2<S>::Zero(kForwardChunk, 3);
  for (Eigen::Index start = 0; start < n; start += kForwardChunk) {
    const Eigen::Index len = std::min(kForwardChunk, n - start);
    chunk.setZero();
    chunk.topRows(len) = coords.middleRows(start, len);
    const auto part = forward_batch<S>(model, chunk, z, nullptr);
    out.intensity.middleRows(start, len) = part.intensity.topRows(len);
    out.logits.middleRows(start, len) = part.logits.topRows(len);
  }
  return out;
}

// Forward that records the tape for a subsequent backward.
template <typename S>
ForwardOutput<S> forward(const CinaModel<S>& model, const Tensor2<S>& coords, const Vec<S>& z,
                         ForwardTape<S>& tape) {
  return forward_batch<S>(model, coords, z, &tape);
}

// Gradient buffers mirroring the model's parameters, so that several
// workers can run backward without touching the shared Param::grad.
template <typename S>
struct ModelGrads {
  struct Layer {
    Tensor2<S> W, b, M, mu;
  };
  std::vector<Layer> layers;
  Tensor2<S> img_W, img_b, seg_W, seg_b;

  ModelGrads() = default;
  explicit ModelGrads(const CinaModel<S>& m) {
    for (const auto& l : m.layers) {
      Layer g;
      g.W = Tensor2<S>::Zero(l.W.rows(), l.W.cols());
      g.b = Tensor2<S>::Zero(l.b.rows(), l.b.cols());
      if (l.modulated) {
        g.M = Tensor2<S>::Zero(l.M.rows(), l.M.cols());
        g.mu = Tensor2<S>::Zero(l.mu.rows(), l.mu.cols());
      }
      layers.push_back(std::move(g));
    }
    img_W = Tensor2<S>::Zero(m.img_W.rows(), m.img_W.cols());
    img_b = Tensor2<S>::Zero(1, 1);
    seg_W = Tensor2<S>::Zero(m.seg_W.rows(), m.seg_W.cols());
    seg_b = Tensor2<S>::Zero(1, m.seg_b.cols());
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& l : layers) {
      fn(l.W);
      fn(l.b);
      if (l.M.size() > 0) {
        fn(l.M);
        fn(l.mu);
      }
    }
    fn(img_W);
    fn(img_b);
    fn(seg_W);
    fn(seg_b);
  }

  void zero() {
    for_each([](Tensor2<S>& t) { t.setZero(); });
  }

  void add(ModelGrads& other) {
    std::vector<Tensor2<S>*> mine, theirs;
    for_each([&](Tensor2<S>& t) { mine.push_back(&t); });
    other.for_each([&](Tensor2<S>& t) { theirs.push_back(&t); });
    for (std::size_t i = 0; i < mine.size(); ++i) *mine[i] += *theirs[i];
  }

  // Param::grad += buffers, in parameter order.
  void add_to(CinaModel<S>& model) {
    std::vector<Tensor2<S>*> mine;
    for_each([&](Tensor2<S>& t) { mine.push_back(&t); });
    std::size_t i = 0;
    model.for_each_param([&](const std::string&, Param<S>& p) { p.grad += *mine[i++]; });
  }
};

// Reverse pass. Adds parameter gradients into `grads` (skipped when null)
// and the latent gradient into `dz` (skipped when null).
template <typename S>
void backward(const CinaModel<S>& model, const ForwardTape<S>& tape, const Tensor2<S>& d_intensity,
              const Tensor2<S>& d_logits, ModelGrads<S>* grads, Vec<S>* dz) {
  if (!tape.recorded) throw Error("backward called without a recorded forward pass");
  const Eigen::Index B = tape.hidden.rows();
  if (d_intensity.rows() != B || d_intensity.cols() != 1) throw ShapeError("backward: d_intensity must be batch x 1");
  if (d_logits.rows() != B || d_logits.cols() != model.config.num_classes)
    throw ShapeError("backward: d_logits must be batch x classes");
  if (dz && dz->size() != model.config.latent_dim) throw ShapeError("backward: dz has wrong size");

  Tensor2<S> dh(B, model.config.hidden_width);
  if (B > 0) {
    dh.noalias() = d_intensity * model.img_W.value;
    dh.noalias() += d_logits * model.seg_W.value;
  }
  if (grads && B > 0) {
    grads->img_W.noalias() += d_intensity.transpose() * tape.hidden;
    grads->img_b.row(0) += d_intensity.colwise().sum();
    grads->seg_W.noalias() += d_logits.transpose() * tape.hidden;
    grads->seg_b.row(0) += d_logits.colwise().sum();
  }

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& layer = model.layers[li];
    const bool need_dx = li > 0;
    Tensor2<S> scratch_W, scratch_b;
    Tensor2<S>* dW = nullptr;
    Tensor2<S>* db = nullptr;
    if (grads) {
      dW = &grads->layers[li].W;
      db = &grads->layers[li].b;
    }
    if (layer.modulated) {
      Vec<S> dphi = Vec<S>::Zero(model.config.hidden_width);
      Vec<S> dpsi = Vec<S>::Zero(model.config.hidden_width);
      dh = sine_backward(layer.W.value, tape.layers[li], &tape.phi[li], layer.omega0, dh, dW, db, &dphi, &dpsi,
                         need_dx);
      if (grads) {
        Vec<S> dzl = modulation_backward(layer.M.value, tape.z, dphi, dpsi, grads->layers[li].M, grads->layers[li].mu);
        if (dz) *dz += dzl;
      } else if (dz) {
        Vec<S> dout(2 * model.config.hidden_width);
        dout << dphi, dpsi;
        dz->noalias() += layer.M.value.transpose() * dout;
      }
    } else {
      dh = sine_backward<S>(layer.W.value, tape.layers[li], nullptr, layer.omega0, dh, dW, db, nullptr, nullptr,
                            need_dx);
    }
  }
}

// ---------------------------------------------------------------------------
// Latent table

template <typename S>
struct LatentEntry {
  std::string id;
  double ga_weeks = 0.0;
  Param<S> free;       // 1 x free dims, optimized
  Vec<S> conditions;   // pinned trailing dims
};

template <typename S>
struct LatentTable {
  int latent_dim = 0;
  std::vector<std::string> condition_dims;
  std::vector<LatentEntry<S>> entries;

  int free_dims() const { return latent_dim - static_cast<int>(condition_dims.size()); }
  std::size_t size() const { return entries.size(); }

  Vec<S> full(std::size_t i) const {
    const auto& e = entries.at(i);
    Vec<S> z(latent_dim);
    z.head(free_dims()) = e.free.value.row(0).transpose();
    if (!condition_dims.empty()) z.tail(static_cast<Eigen::Index>(condition_dims.size())) = e.conditions;
    return z;
  }
};

template <typename S>
LatentTable<S> init_latents(std::span<const SubjectRecord> records, const CinaConfig& config, std::uint64_t seed) {
  LatentTable<S> t;
  t.latent_dim = config.latent_dim;
  t.condition_dims = config.condition_dims;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.latent_init_std);
  for (const auto& r : records) {
    LatentEntry<S> e;
    e.id = r.id;
    e.ga_weeks = r.ga_weeks;
    e.free = Param<S>(1, t.free_dims());
    for (Eigen::Index i = 0; i < e.free.value.size(); ++i) e.free.value(0, i) = static_cast<S>(normal(rng));
    e.conditions.resize(static_cast<Eigen::Index>(t.condition_dims.size()));
    for (std::size_t c = 0; c < t.condition_dims.size(); ++c) {
      auto it = r.condition_values.find(t.condition_dims[c]);
      if (it == r.condition_values.end())
        throw ConfigError("subject " + r.id + " has no value for condition '" + t.condition_dims[c] + "'");
      e.conditions[static_cast<Eigen::Index>(c)] = static_cast<S>(it->second);
    }
    t.entries.push_back(std::move(e));
  }
  return t;
}

}  // namespace cina
