#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unicam {

/// Per-pixel boolean grid, row-major.
struct MaskGrid {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  MaskGrid() = default;
  MaskGrid(int w, int h, bool fill = false)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill ? 1 : 0) {}

  bool at(int row, int col) const { return data[static_cast<size_t>(row) * width + col] != 0; }
  void set(int row, int col, bool v) {
    data[static_cast<size_t>(row) * width + col] = v ? 1 : 0;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
};

/// Intensity image with values in [0,1]. Row-major, channel-interleaved.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 or 3
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int ch = 1, double fill = 0.0)
      : width(w), height(h), channels(ch), data(static_cast<size_t>(w) * h * ch, fill) {
    if (w <= 0 || h <= 0 || (ch != 1 && ch != 3)) {
      throw std::invalid_argument("Image: dimensions must be positive, channels 1 or 3");
    }
  }

  double at(int row, int col, int ch = 0) const {
    return data[(static_cast<size_t>(row) * width + col) * channels + ch];
  }
  double& at(int row, int col, int ch = 0) {
    return data[(static_cast<size_t>(row) * width + col) * channels + ch];
  }
};

/// Dense per-pixel depth in meters plus validity mask. Valid depths are > 0.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> depth;
  MaskGrid valid;

  DepthMap() = default;
  DepthMap(int w, int h)
      : width(w), height(h), depth(static_cast<size_t>(w) * h, 0.0), valid(w, h, false) {}

  double at(int row, int col) const { return depth[static_cast<size_t>(row) * width + col]; }
  double& at(int row, int col) { return depth[static_cast<size_t>(row) * width + col]; }
};

// ---------------------------------------------------------------------------
// File formats: binary PGM (P5) / PPM (P6) at 8 bit, and raw little-endian
// float32 depth with a 16-byte header {magic "DPTH", u32 width, u32 height,
// u32 reserved}.
// ---------------------------------------------------------------------------

inline void write_image(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_image: cannot open " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.width) * img.channels);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < img.channels; ++ch) {
        const double v = std::clamp(img.at(r, c, ch), 0.0, 1.0);
        row[static_cast<size_t>(c) * img.channels + ch] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write_image: write failed for " + path);
}

namespace detail {

inline int read_pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("read_image: malformed PNM header");
  return value;
}

}  // namespace detail

inline Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image: cannot open " + path);
  char magic[2];
  in.read(magic, 2);
  int channels;
  if (magic[0] == 'P' && magic[1] == '5') {
    channels = 1;
  } else if (magic[0] == 'P' && magic[1] == '6') {
    channels = 3;
  } else {
    throw std::runtime_error("read_image: not a binary PGM/PPM file: " + path);
  }
  const int width = detail::read_pnm_token(in);
  const int height = detail::read_pnm_token(in);
  const int maxval = detail::read_pnm_token(in);
  if (maxval != 255) throw std::runtime_error("read_image: only 8-bit PGM/PPM supported");
  // Single whitespace byte separates header from raster.
  Image img(width, height, channels);
  std::vector<unsigned char> raw(static_cast<size_t>(width) * height * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw std::runtime_error("read_image: truncated raster in " + path);
  }
  for (size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.0;
  return img;
}

inline void write_depth(const std::string& path, const DepthMap& depth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_depth: cannot open " + path);
  const char magic[4] = {'D', 'P', 'T', 'H'};
  const std::uint32_t w = static_cast<std::uint32_t>(depth.width);
  const std::uint32_t h = static_cast<std::uint32_t>(depth.height);
  const std::uint32_t reserved = 0;
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&reserved), 4);
  std::vector<float> buf(depth.depth.size());
  for (size_t i = 0; i < buf.size(); ++i) {
    buf[i] = depth.valid.data[i] ? static_cast<float>(depth.depth[i]) : 0.0f;
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_depth: write failed for " + path);
}

inline DepthMap read_depth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_depth: cannot open " + path);
  char magic[4];
  std::uint32_t w = 0, h = 0, reserved = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&reserved), 4);
  if (!in || std::memcmp(magic, "DPTH", 4) != 0) {
    throw std::runtime_error("read_depth: bad header in " + path);
  }
  DepthMap depth(static_cast<int>(w), static_cast<int>(h));
  std::vector<float> buf(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float))) {
    throw std::runtime_error("read_depth: truncated data in " + path);
  }
  for (size_t i = 0; i < buf.size(); ++i) {
    depth.depth[i] = buf[i];
    depth.valid.data[i] = (buf[i] > 0.0f && std::isfinite(buf[i])) ? 1 : 0;
  }
  return depth;
}

/// Bilinear sample with border clamp. `needed_clamp` reports whether the
/// coordinate was outside [0,w-1]x[0,h-1] (callers mask such pixels out).
inline double sample_bilinear(const Image& img, double u, double v, int ch = 0,
                              bool* needed_clamp = nullptr) {
  const double uc = std::clamp(u, 0.0, static_cast<double>(img.width - 1));
  const double vc = std::clamp(v, 0.0, static_cast<double>(img.height - 1));
  if (needed_clamp) *needed_clamp = (uc != u) || (vc != v);
  const int c0 = std::min(static_cast<int>(uc), img.width - 2 >= 0 ? img.width - 2 : 0);
  const int r0 = std::min(static_cast<int>(vc), img.height - 2 >= 0 ? img.height - 2 : 0);
  const double fu = uc - c0;
  const double fv = vc - r0;
  const int c1 = std::min(c0 + 1, img.width - 1);
  const int r1 = std::min(r0 + 1, img.height - 1);
  const double i00 = img.at(r0, c0, ch), i01 = img.at(r0, c1, ch);
  const double i10 = img.at(r1, c0, ch), i11 = img.at(r1, c1, ch);
  return (1 - fv) * ((1 - fu) * i00 + fu * i01) + fv * ((1 - fu) * i10 + fu * i11);
}

/// Analytic gradient of sample_bilinear w.r.t. (u, v) at the sample location.
inline void sample_bilinear_grad(const Image& img, double u, double v, int ch, double& du,
                                 double& dv) {
  const double uc = std::clamp(u, 0.0, static_cast<double>(img.width - 1));
  const double vc = std::clamp(v, 0.0, static_cast<double>(img.height - 1));
  const int c0 = std::min(static_cast<int>(uc), img.width - 2 >= 0 ? img.width - 2 : 0);
  const int r0 = std::min(static_cast<int>(vc), img.height - 2 >= 0 ? img.height - 2 : 0);
  const double fu = uc - c0;
  const double fv = vc - r0;
  const int c1 = std::min(c0 + 1, img.width - 1);
  const int r1 = std::min(r0 + 1, img.height - 1);
  const double i00 = img.at(r0, c0, ch), i01 = img.at(r0, c1, ch);
  const double i10 = img.at(r1, c0, ch), i11 = img.at(r1, c1, ch);
  du = (1 - fv) * (i01 - i00) + fv * (i11 - i10);
  dv = (1 - fu) * (i10 - i00) + fu * (i11 - i01);
}

}  // namespace unicam
