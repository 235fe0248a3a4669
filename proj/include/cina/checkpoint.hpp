#pragma once

// Single-file checkpoint:
//
//   "CINACKPT"            8 bytes
//   manifest length       u64 little-endian
//   manifest              JSON (keys sorted, compact)
//   parameter blocks      little-endian float32, in manifest order
//   latent block          little-endian float32, subjects x latent_dim
//
// Parameters are always stored as float32 whatever precision they were
// trained in.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/analysis.hpp"
#include "cina/atlas.hpp"
#include "cina/errors.hpp"
#include "cina/model.hpp"
#include "cina/volume.hpp"

namespace cina {

inline constexpr char kCheckpointMagic[8] = {'C', 'I', 'N', 'A', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  CinaModel<float> model;
  LatentTable<float> latents;
  CoordinateFrame frame;
  VolumeHeader grid;  // training grid
  std::optional<AgeRegressor> age_regressor;
  std::map<std::string, CohortBounds> condition_bounds;
  double kernel_sigma = kDefaultKernelSigma;
  nlohmann::json provenance = nlohmann::json::object();

  const CinaConfig& config() const { return model.config; }
};

template <typename To, typename From>
CinaModel<To> cast_model(const CinaModel<From>& src) {
  CinaModel<To> dst(src.config);
  std::vector<const Param<From>*> from;
  src.for_each_param([&](const std::string&, const Param<From>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.for_each_param([&](const std::string&, Param<To>& p) { p.value = from[i++]->value.template cast<To>(); });
  return dst;
}

template <typename To, typename From>
LatentTable<To> cast_latents(const LatentTable<From>& src) {
  LatentTable<To> dst;
  dst.latent_dim = src.latent_dim;
  dst.condition_dims = src.condition_dims;
  for (const auto& e : src.entries) {
    LatentEntry<To> d;
    d.id = e.id;
    d.ga_weeks = e.ga_weeks;
    d.free = Param<To>(1, static_cast<int>(e.free.value.cols()));
    d.free.value = e.free.value.template cast<To>();
    d.conditions = e.conditions.template cast<To>();
    dst.entries.push_back(std::move(d));
  }
  return dst;
}

namespace detail {

inline nlohmann::json header_json(const VolumeHeader& h) {
  return {{"dims", h.dims}, {"spacing", h.spacing}, {"origin", h.origin}};
}

inline VolumeHeader header_from_json(const nlohmann::json& j) {
  VolumeHeader h;
  h.dims = j.at("dims").get<std::array<std::int32_t, 3>>();
  h.spacing = j.at("spacing").get<std::array<double, 3>>();
  h.origin = j.at("origin").get<std::array<double, 3>>();
  h.dtype = DType::f32;
  h.validate();
  return h;
}

inline void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& cfg = ck.model.config;
  if (ck.latents.latent_dim != cfg.latent_dim) throw ShapeError("checkpoint: latent table does not match model");
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["config"] = cfg.to_json();
  m["frame"] = ck.frame.to_json();
  m["grid"] = detail::header_json(ck.grid);
  m["kernel_sigma"] = ck.kernel_sigma;
  m["provenance"] = ck.provenance;
  m["condition_bounds"] = nlohmann::json::object();
  for (const auto& [name, b] : ck.condition_bounds) m["condition_bounds"][name] = {{"min", b.min}, {"max", b.max}};
  if (ck.age_regressor) {
    const auto& r = *ck.age_regressor;
    m["age_regressor"] = {{"projection", std::vector<double>(r.projection.data(), r.projection.data() + r.projection.size())},
                          {"slope", r.slope},
                          {"intercept", r.intercept}};
  }
  m["subjects"] = nlohmann::json::array();
  for (const auto& e : ck.latents.entries) {
    nlohmann::json s{{"id", e.id}, {"ga_weeks", e.ga_weeks}, {"conditions", nlohmann::json::object()}};
    for (std::size_t c = 0; c < ck.latents.condition_dims.size(); ++c)
      s["conditions"][ck.latents.condition_dims[c]] = static_cast<double>(e.conditions[static_cast<Eigen::Index>(c)]);
    m["subjects"].push_back(s);
  }

  std::string payload;
  m["blocks"] = nlohmann::json::array();
  ck.model.for_each_param([&](const std::string& name, const Param<float>& p) {
    m["blocks"].push_back({{"name", name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"bytes", 4 * p.value.size()}});
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) detail::put_f32(payload, p.value(r, c));
  });
  const auto n = static_cast<std::int64_t>(ck.latents.size());
  m["latent_block"] = {{"rows", n}, {"cols", cfg.latent_dim}, {"bytes", 4 * n * cfg.latent_dim}};
  for (std::size_t i = 0; i < ck.latents.size(); ++i) {
    const auto z = ck.latents.full(i);
    for (Eigen::Index k = 0; k < z.size(); ++k) detail::put_f32(payload, z[k]);
  }

  const std::string manifest = m.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, manifest.size());
  out += manifest;
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint (bad magic)");
  const auto mlen = detail::get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw IoError("checkpoint truncated (manifest)");
  Checkpoint ck;
  try {
    const auto m = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
    if (m.at("format_version").get<int>() != kCheckpointVersion)
      throw IoError("unsupported checkpoint format_version " + m.at("format_version").dump());
    ck.model = CinaModel<float>(CinaConfig::from_json(m.at("config")));
    ck.frame = CoordinateFrame::from_json(m.at("frame"));
    ck.grid = detail::header_from_json(m.at("grid"));
    ck.kernel_sigma = m.at("kernel_sigma").get<double>();
    ck.provenance = m.at("provenance");
    for (const auto& [name, b] : m.at("condition_bounds").items())
      ck.condition_bounds[name] = CohortBounds{b.at("min").get<double>(), b.at("max").get<double>()};
    if (m.contains("age_regressor")) {
      const auto& r = m.at("age_regressor");
      AgeRegressor reg;
      const auto proj = r.at("projection").get<std::vector<double>>();
      reg.projection = Eigen::Map<const Eigen::VectorXd>(proj.data(), static_cast<Eigen::Index>(proj.size()));
      reg.slope = r.at("slope").get<double>();
      reg.intercept = r.at("intercept").get<double>();
      ck.age_regressor = reg;
    }

    std::size_t pos = 16 + mlen;
    auto take = [&](std::size_t nbytes) {
      if (nbytes > bytes.size() - pos) throw IoError("checkpoint truncated (parameter data)");
      const char* p = bytes.data() + pos;
      pos += nbytes;
      return p;
    };
    const auto& blocks = m.at("blocks");
    std::size_t bi = 0;
    ck.model.for_each_param([&](const std::string& name, Param<float>& p) {
      if (bi >= blocks.size()) throw IoError("checkpoint is missing block " + name);
      const auto& b = blocks[bi++];
      if (b.at("name").get<std::string>() != name || b.at("rows").get<Eigen::Index>() != p.value.rows() ||
          b.at("cols").get<Eigen::Index>() != p.value.cols() ||
          b.at("bytes").get<std::int64_t>() != 4 * p.value.size())
        throw IoError("checkpoint block " + b.dump() + " does not match the model layout at " + name);
      const char* src = take(static_cast<std::size_t>(4 * p.value.size()));
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c, src += 4) p.value(r, c) = detail::get_f32(src);
    });
    if (bi != blocks.size()) throw IoError("checkpoint declares more blocks than the model has");

    const auto& cfg = ck.model.config;
    const auto& lb = m.at("latent_block");
    const auto& subjects = m.at("subjects");
    const auto n = static_cast<std::int64_t>(subjects.size());
    if (lb.at("rows").get<std::int64_t>() != n || lb.at("cols").get<int>() != cfg.latent_dim ||
        lb.at("bytes").get<std::int64_t>() != 4 * n * cfg.latent_dim)
      throw IoError("checkpoint latent block does not match its subject list");
    ck.latents.latent_dim = cfg.latent_dim;
    ck.latents.condition_dims = cfg.condition_dims;
    const int free = ck.latents.free_dims();
    const char* src = take(static_cast<std::size_t>(4 * n * cfg.latent_dim));
    for (const auto& s : subjects) {
      LatentEntry<float> e;
      e.id = s.at("id").get<std::string>();
      e.ga_weeks = s.at("ga_weeks").get<double>();
      e.free = Param<float>(1, free);
      e.conditions.resize(static_cast<Eigen::Index>(cfg.condition_dims.size()));
      for (int k = 0; k < cfg.latent_dim; ++k, src += 4) {
        const float v = detail::get_f32(src);
        if (k < free) e.free.value(0, k) = v;
        else e.conditions[k - free] = v;
      }
      ck.latents.entries.push_back(std::move(e));
    }
    if (pos != bytes.size()) throw IoError("checkpoint has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Serialized size without building the payload.
inline std::size_t checkpoint_payload_bytes(const CinaConfig& cfg, std::size_t subjects) {
  return 4 * (parameter_count(cfg) + subjects * static_cast<std::size_t>(cfg.latent_dim));
}

}  // namespace cina
