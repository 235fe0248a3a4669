#pragma once

// Slice montage export: mid-axial, mid-coronal and mid-sagittal slices side
// by side, grayscale intensity with a 50% tissue-colour overlay.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "cina/errors.hpp"
#include "cina/volume.hpp"

namespace cina {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kClassColors{{
    {0, 0, 0},
    {70, 130, 255},   // CSF
    {255, 80, 60},    // cGM
    {245, 245, 220},  // WM
    {60, 220, 240},   // LV
    {250, 200, 40},   // CB
    {180, 90, 240},   // BS
}};

namespace detail {

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
  };
  be32(static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  out += body;
  be32(static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

inline void write_png(const RgbImage& img, const std::filesystem::path& path) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (1 + 3 * img.width));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(img.rgb.data()) + static_cast<std::size_t>(y) * img.width * 3,
               static_cast<std::size_t>(img.width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png compression failed");
  z.resize(zlen);

  std::string ihdr;
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<char>((v >> s) & 0xff));
  };
  be32(static_cast<std::uint32_t>(img.width));
  be32(static_cast<std::uint32_t>(img.height));
  ihdr += std::string{8, 2, 0, 0, 0};  // 8-bit RGB, deflate, no filter, no interlace

  std::string out("\x89PNG\r\n\x1a\n", 8);
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", "");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline RgbImage slice_montage(const Volume& intensity, const LabelVolume* labels = nullptr) {
  const auto& h = intensity.header;
  if (labels && !labels->header.same_grid(h)) throw ShapeError("montage: labels and intensities differ in grid");
  const int nx = h.dims[0], ny = h.dims[1], nz = h.dims[2];
  const int gap = 2;
  RgbImage img(nx + nx + ny + 2 * gap, std::max(ny, nz));

  auto paint = [&](int px, int py, std::int64_t x, std::int64_t y, std::int64_t z) {
    const std::size_t i = h.index(x, y, z);
    const double v = std::clamp(static_cast<double>(intensity.data[i]), 0.0, 1.0) * 255.0;
    auto* p = img.px(px, py);
    for (int c = 0; c < 3; ++c) {
      double out = v;
      if (labels && labels->data[i] != 0) out = 0.5 * v + 0.5 * kClassColors[labels->data[i]][c];
      p[c] = static_cast<std::uint8_t>(std::lround(out));
    }
  };
  // Image rows run top-down, so the vertical axis is flipped to put +y / +z up.
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) paint(x, ny - 1 - y, x, y, nz / 2);
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x) paint(nx + gap + x, nz - 1 - z, x, ny / 2, z);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) paint(2 * nx + 2 * gap + y, nz - 1 - z, nx / 2, y, z);
  return img;
}

}  // namespace cina
