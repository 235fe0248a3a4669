#pragma once

// Voxel grids, NIfTI-1 single-file I/O, label harmonization, intensity
// normalization and the voxel -> network-coordinate mapping.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cina/errors.hpp"

namespace cina {

enum class DType : std::int16_t { u8 = 2, i16 = 4, f32 = 16 };

inline int bits_per_voxel(DType t) {
  switch (t) {
    case DType::u8: return 8;
    case DType::i16: return 16;
    case DType::f32: return 32;
  }
  return 0;
}

struct VolumeHeader {
  std::array<std::int32_t, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, centre of voxel (0,0,0)
  DType dtype = DType::f32;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  // x-fastest linear index
  std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return static_cast<std::size_t>(i + dims[0] * (j + static_cast<std::int64_t>(dims[1]) * k));
  }
  std::array<std::int32_t, 3> unravel(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<std::int32_t>(idx % nx), static_cast<std::int32_t>((idx / nx) % ny),
            static_cast<std::int32_t>(idx / (nx * ny))};
  }
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }
  bool same_grid(const VolumeHeader& o) const {
    return dims == o.dims && spacing == o.spacing && origin == o.origin;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw ShapeError("volume dims must be >= 1 on every axis");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw ShapeError("volume spacing must be positive and finite on every axis");
      if (!std::isfinite(origin[a])) throw ShapeError("volume origin must be finite");
    }
  }
};

struct Volume {
  VolumeHeader header;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(VolumeHeader h, float fill = 0.0f) : header(h), data(h.voxel_count(), fill) {
    header.dtype = DType::f32;
  }
  float& at(int i, int j, int k) { return data[header.index(i, j, k)]; }
  float at(int i, int j, int k) const { return data[header.index(i, j, k)]; }
};

enum class TissueClass : std::uint8_t { background = 0, csf = 1, cgm = 2, wm = 3, lv = 4, cb = 5, bs = 6 };
inline constexpr int kNumClasses = 7;
inline constexpr std::array<const char*, kNumClasses> kClassNames{"BG", "CSF", "cGM", "WM", "LV", "CB", "BS"};

struct LabelVolume {
  VolumeHeader header;
  std::vector<std::uint8_t> data;

  LabelVolume() = default;
  explicit LabelVolume(VolumeHeader h, std::uint8_t fill = 0) : header(h), data(h.voxel_count(), fill) {
    header.dtype = DType::u8;
  }
  std::uint8_t& at(int i, int j, int k) { return data[header.index(i, j, k)]; }
  std::uint8_t at(int i, int j, int k) const { return data[header.index(i, j, k)]; }

  void validate() const {
    for (auto v : data)
      if (v >= kNumClasses) throw ShapeError("label value outside {0..6}: " + std::to_string(v));
  }
};

// Label map before harmonization; ids are whatever the source segmentation uses.
struct RawLabelVolume {
  VolumeHeader header;
  std::vector<std::int32_t> data;
};

// ---------------------------------------------------------------------------
// NIfTI-1

enum class NiftiErrorKind { bad_magic, unsupported_dtype, truncated, bad_dims };

class NiftiError : public IoError {
 public:
  NiftiError(NiftiErrorKind kind, const std::string& what) : IoError(what), kind_(kind) {}
  NiftiErrorKind kind() const { return kind_; }

 private:
  NiftiErrorKind kind_;
};

// Decoded image with scaling already applied.
struct NiftiImage {
  VolumeHeader header;
  std::vector<double> data;
};

namespace detail {

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiVoxOffset = 352;

template <typename T>
T byteswap(T v) {
  auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
T load(const std::vector<char>& buf, std::size_t offset, bool swap) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  return swap ? byteswap(v) : v;
}

// Writes are always little-endian.
template <typename T>
void store(std::vector<char>& buf, std::size_t offset, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline NiftiImage read_nifti(const std::filesystem::path& path) {
  using detail::load;
  const auto buf = detail::read_file(path);
  if (buf.size() < detail::kNiftiHeaderSize)
    throw NiftiError(NiftiErrorKind::truncated, path.string() + ": file shorter than NIfTI-1 header");

  const auto sizeof_hdr = load<std::int32_t>(buf, 0, false);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (detail::byteswap(sizeof_hdr) != 348)
      throw NiftiError(NiftiErrorKind::bad_magic, path.string() + ": sizeof_hdr is not 348");
    swap = true;
  }
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0)
    throw NiftiError(NiftiErrorKind::bad_magic, path.string() + ": magic is not \"n+1\"");

  NiftiImage img;
  auto& h = img.header;
  const auto ndim = load<std::int16_t>(buf, 40, swap);
  if (ndim < 3 || ndim > 7) throw NiftiError(NiftiErrorKind::bad_dims, path.string() + ": expected a 3-D volume");
  for (int a = 0; a < 3; ++a) h.dims[a] = load<std::int16_t>(buf, 42 + 2 * a, swap);
  for (int a = 3; a < ndim; ++a)
    if (load<std::int16_t>(buf, 42 + 2 * a, swap) > 1)
      throw NiftiError(NiftiErrorKind::bad_dims, path.string() + ": 4-D and higher volumes are not supported");
  for (int a = 0; a < 3; ++a) {
    h.spacing[a] = load<float>(buf, 80 + 4 * a, swap);
    h.origin[a] = load<float>(buf, 268 + 4 * a, swap);
  }
  if (h.dims[0] < 1 || h.dims[1] < 1 || h.dims[2] < 1)
    throw NiftiError(NiftiErrorKind::bad_dims, path.string() + ": non-positive dimension");
  for (auto& s : h.spacing)
    if (!(s > 0.0)) s = 1.0;

  const auto code = load<std::int16_t>(buf, 70, swap);
  if (code != 2 && code != 4 && code != 16)
    throw NiftiError(NiftiErrorKind::unsupported_dtype,
                     path.string() + ": unsupported datatype code " + std::to_string(code));
  h.dtype = static_cast<DType>(code);

  const auto vox_offset = static_cast<std::size_t>(load<float>(buf, 108, swap));
  const double slope = load<float>(buf, 112, swap);
  const double inter = load<float>(buf, 116, swap);
  const bool scaled = slope != 0.0 && std::isfinite(slope);

  const std::size_t n = h.voxel_count();
  const std::size_t bytes = n * static_cast<std::size_t>(bits_per_voxel(h.dtype) / 8);
  const std::size_t start = std::max(vox_offset, detail::kNiftiHeaderSize);
  if (buf.size() < start + bytes)
    throw NiftiError(NiftiErrorKind::truncated, path.string() + ": voxel payload truncated");

  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double raw = 0.0;
    switch (h.dtype) {
      case DType::u8: raw = static_cast<unsigned char>(buf[start + i]); break;
      case DType::i16: raw = load<std::int16_t>(buf, start + 2 * i, swap); break;
      case DType::f32: raw = load<float>(buf, start + 4 * i, swap); break;
    }
    img.data[i] = scaled ? raw * slope + inter : raw;
  }
  return img;
}

namespace detail {

inline std::vector<char> nifti_header_bytes(const VolumeHeader& h) {
  std::vector<char> buf(kNiftiVoxOffset, 0);
  store<std::int32_t>(buf, 0, 348);
  store<std::int16_t>(buf, 40, 3);
  for (int a = 0; a < 3; ++a) store<std::int16_t>(buf, 42 + 2 * a, static_cast<std::int16_t>(h.dims[a]));
  for (int a = 3; a < 8; ++a) store<std::int16_t>(buf, 42 + 2 * a, 1);
  store<std::int16_t>(buf, 70, static_cast<std::int16_t>(h.dtype));
  store<std::int16_t>(buf, 72, static_cast<std::int16_t>(bits_per_voxel(h.dtype)));
  store<float>(buf, 76, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) store<float>(buf, 80 + 4 * a, static_cast<float>(h.spacing[a]));
  for (int a = 3; a < 7; ++a) store<float>(buf, 80 + 4 * a, 1.0f);
  store<float>(buf, 108, static_cast<float>(kNiftiVoxOffset));
  store<float>(buf, 112, 0.0f);  // scl_slope 0: stored values are final
  store<float>(buf, 116, 0.0f);
  buf[123] = 2;  // xyzt_units: mm
  store<std::int16_t>(buf, 252, 1);  // qform_code
  store<std::int16_t>(buf, 254, 1);  // sform_code
  for (int a = 0; a < 3; ++a) {
    store<float>(buf, 268 + 4 * a, static_cast<float>(h.origin[a]));
    // srow_x/y/z: diagonal spacing plus translation
    store<float>(buf, 280 + 16 * a + 4 * a, static_cast<float>(h.spacing[a]));
    store<float>(buf, 280 + 16 * a + 12, static_cast<float>(h.origin[a]));
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  return buf;
}

template <typename T, typename Src>
void write_nifti_payload(const std::filesystem::path& path, VolumeHeader h, DType dtype, const std::vector<Src>& data) {
  h.validate();
  if (data.size() != h.voxel_count()) throw ShapeError("volume data length does not match dims");
  h.dtype = dtype;
  auto buf = nifti_header_bytes(h);
  const std::size_t start = buf.size();
  buf.resize(start + data.size() * sizeof(T));
  for (std::size_t i = 0; i < data.size(); ++i) store<T>(buf, start + i * sizeof(T), static_cast<T>(data[i]));
  write_file(path, buf);
}

}  // namespace detail

inline void write_nifti(const Volume& v, const std::filesystem::path& path) {
  detail::write_nifti_payload<float>(path, v.header, DType::f32, v.data);
}

inline void write_nifti(const LabelVolume& v, const std::filesystem::path& path) {
  detail::write_nifti_payload<std::uint8_t>(path, v.header, DType::u8, v.data);
}

inline Volume read_volume(const std::filesystem::path& path) {
  auto img = read_nifti(path);
  Volume v;
  v.header = img.header;
  v.data.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    if (!std::isfinite(img.data[i])) throw IoError(path.string() + ": non-finite voxel value");
    v.data[i] = static_cast<float>(img.data[i]);
  }
  return v;
}

inline RawLabelVolume read_raw_labels(const std::filesystem::path& path) {
  auto img = read_nifti(path);
  RawLabelVolume v;
  v.header = img.header;
  v.data.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double x = img.data[i];
    if (x != std::round(x)) throw IoError(path.string() + ": label map contains non-integer values");
    v.data[i] = static_cast<std::int32_t>(x);
  }
  return v;
}

// Reads a map that is already in the six-tissue scheme.
inline LabelVolume read_labels(const std::filesystem::path& path) {
  auto raw = read_raw_labels(path);
  LabelVolume v;
  v.header = raw.header;
  v.data.resize(raw.data.size());
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    if (raw.data[i] < 0 || raw.data[i] >= kNumClasses)
      throw ShapeError(path.string() + ": label " + std::to_string(raw.data[i]) + " outside {0..6}");
    v.data[i] = static_cast<std::uint8_t>(raw.data[i]);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Preprocessing

inline LabelVolume harmonize_labels(const RawLabelVolume& raw, const std::map<std::int32_t, std::uint8_t>& mapping) {
  for (const auto& [from, to] : mapping)
    if (to >= kNumClasses) throw ShapeError("mapping target " + std::to_string(to) + " outside {0..6}");
  LabelVolume out;
  out.header = raw.header;
  out.header.dtype = DType::u8;
  out.data.resize(raw.data.size());
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    auto it = mapping.find(raw.data[i]);
    if (it == mapping.end()) throw ShapeError("raw label id " + std::to_string(raw.data[i]) + " has no mapping");
    out.data[i] = it->second;
  }
  return out;
}

struct NormalizedVolume {
  Volume volume;
  bool degenerate = false;  // input had zero range; output is all zeros
};

// Linear-interpolated percentile of an already sorted sample.
inline double percentile_sorted(const std::vector<float>& sorted, double pct) {
  if (sorted.empty()) return 0.0;
  const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

inline NormalizedVolume normalize_intensities(const Volume& v, double lo_pct = 1.0, double hi_pct = 99.0) {
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
    throw ConfigError("normalize_intensities requires 0 <= lo_pct < hi_pct <= 100");
  NormalizedVolume out;
  out.volume.header = v.header;
  out.volume.header.dtype = DType::f32;
  out.volume.data.assign(v.data.size(), 0.0f);

  std::vector<float> sorted = v.data;
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile_sorted(sorted, lo_pct);
  const double hi = percentile_sorted(sorted, hi_pct);
  if (!(hi > lo)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const double x = std::clamp(static_cast<double>(v.data[i]), lo, hi);
    out.volume.data[i] = static_cast<float>((x - lo) / (hi - lo));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Coordinates

// Physical box that is mapped onto the network input cube: its centre goes to
// the origin and its longest axis spans [-1, 1].
struct CoordinateFrame {
  std::array<double, 3> center{0.0, 0.0, 0.0};
  std::array<double, 3> extent{2.0, 2.0, 2.0};  // mm per axis

  double half_extent() const { return std::max({extent[0], extent[1], extent[2]}) / 2.0; }

  // Bounding box of a voxel grid, voxel faces included.
  static CoordinateFrame from_header(const VolumeHeader& h) {
    CoordinateFrame f;
    for (int a = 0; a < 3; ++a) {
      f.center[a] = h.origin[a] + (h.dims[a] - 1) * h.spacing[a] / 2.0;
      f.extent[a] = h.dims[a] * h.spacing[a];
    }
    return f;
  }

  std::array<double, 3> to_coord(const std::array<double, 3>& mm) const {
    const double half = half_extent();
    return {(mm[0] - center[0]) / half, (mm[1] - center[1]) / half, (mm[2] - center[2]) / half};
  }

  // Network coordinate of voxel (i,j,k) of a grid living in this frame.
  std::array<double, 3> coord_of(const VolumeHeader& h, std::int64_t i, std::int64_t j, std::int64_t k) const {
    const std::array<std::int64_t, 3> idx{i, j, k};
    std::array<double, 3> out{};
    const double half = half_extent();
    for (int a = 0; a < 3; ++a) {
      const double mm = h.origin[a] + static_cast<double>(idx[a]) * h.spacing[a];
      out[a] = (mm - center[a]) / half;
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"center", center}, {"extent", extent}}; }
  static CoordinateFrame from_json(const nlohmann::json& j) {
    CoordinateFrame f;
    f.center = j.at("center").get<std::array<double, 3>>();
    f.extent = j.at("extent").get<std::array<double, 3>>();
    return f;
  }
};

inline std::array<double, 3> voxel_to_coord(const VolumeHeader& h, const std::array<std::int64_t, 3>& idx) {
  return CoordinateFrame::from_header(h).coord_of(h, idx[0], idx[1], idx[2]);
}

// ---------------------------------------------------------------------------
// Subject metadata

struct SubjectRecord {
  std::string id;
  double ga_weeks = 0.0;
  std::map<std::string, double> condition_values;
  std::filesystem::path volume_path;
  std::filesystem::path label_path;  // empty when no segmentation exists

  void validate() const {
    if (!std::isfinite(ga_weeks) || ga_weeks < 15.0 || ga_weeks > 45.0)
      throw ConfigError("subject " + id + ": ga_weeks must be a finite value in [15, 45]");
    for (const auto& [name, value] : condition_values)
      if (!(value >= 0.0 && value <= 1.0))
        throw ConfigError("subject " + id + ": condition '" + name + "' must be normalized to [0, 1]");
  }
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& volume_path) {
  auto p = volume_path;
  p.replace_extension(".json");
  return p;
}

inline nlohmann::json sidecar_json(const SubjectRecord& r) {
  return {{"id", r.id}, {"ga_weeks", r.ga_weeks}, {"condition_values", r.condition_values}};
}

inline void write_sidecar(const SubjectRecord& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << sidecar_json(r).dump(2) << "\n";
}

inline SubjectRecord read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  SubjectRecord r;
  try {
    const auto j = nlohmann::json::parse(in);
    r.id = j.at("id").get<std::string>();
    r.ga_weeks = j.at("ga_weeks").get<double>();
    if (j.contains("condition_values"))
      r.condition_values = j.at("condition_values").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed sidecar: " + e.what());
  }
  r.validate();
  return r;
}

}  // namespace cina
