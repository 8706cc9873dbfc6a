#include "mer/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "mer/error.hpp"

namespace mer {

namespace {

void write_u32le(std::ostream& os, std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& is) {
  std::uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

// 55-entry hue wheel with uneven sector sizes (RY/YG/GC/CB/BM/MR).
struct ColorWheel {
  std::vector<std::array<int, 3>> colors;
  ColorWheel() {
    const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    auto push_ramp = [&](int n, std::array<int, 3> from, std::array<int, 3> to) {
      for (int i = 0; i < n; ++i) {
        std::array<int, 3> c;
        for (int k = 0; k < 3; ++k)
          c[k] = from[k] + (to[k] - from[k]) * i / n;
        colors.push_back(c);
      }
    };
    push_ramp(RY, {255, 0, 0}, {255, 255, 0});
    push_ramp(YG, {255, 255, 0}, {0, 255, 0});
    push_ramp(GC, {0, 255, 0}, {0, 255, 255});
    push_ramp(CB, {0, 255, 255}, {0, 0, 255});
    push_ramp(BM, {0, 0, 255}, {255, 0, 255});
    push_ramp(MR, {255, 0, 255}, {255, 0, 0});
  }
};

}  // namespace

void write_flow_file(const std::string& path, const FlowField& field) {
  if (static_cast<std::int64_t>(field.v.size()) != field.h * field.w * 2)
    throw UsageError("write_flow_file: buffer size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_u32le(os, static_cast<std::uint32_t>(field.h));
  write_u32le(os, static_cast<std::uint32_t>(field.w));
  os.write(reinterpret_cast<const char*>(field.v.data()),
           static_cast<std::streamsize>(field.v.size() * sizeof(float)));
  if (!os) throw IoError("short write: " + path);
}

FlowField read_flow_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  FlowField field;
  field.h = static_cast<std::int64_t>(read_u32le(is));
  field.w = static_cast<std::int64_t>(read_u32le(is));
  if (!is || field.h <= 0 || field.w <= 0 || field.h * field.w > (1 << 28))
    throw ParseError(path + ": bad field header");
  field.v.resize(static_cast<std::size_t>(field.h * field.w * 2));
  is.read(reinterpret_cast<char*>(field.v.data()),
          static_cast<std::streamsize>(field.v.size() * sizeof(float)));
  if (!is) throw ParseError(path + ": truncated field data");
  return field;
}

std::vector<std::uint8_t> flow_to_rgb(const FlowField& field,
                                      double max_magnitude) {
  static const ColorWheel wheel;
  const int ncols = static_cast<int>(wheel.colors.size());

  double maxrad = max_magnitude;
  if (maxrad <= 0.0) {
    for (std::int64_t i = 0; i < field.h * field.w; ++i) {
      const double fx = field.v[i * 2], fy = field.v[i * 2 + 1];
      maxrad = std::max(maxrad, std::sqrt(fx * fx + fy * fy));
    }
    if (maxrad <= 0.0) maxrad = 1.0;  // all-zero field renders white
  }

  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(field.h * field.w * 3));
  for (std::int64_t i = 0; i < field.h * field.w; ++i) {
    const double fx = field.v[i * 2] / maxrad;
    const double fy = field.v[i * 2 + 1] / maxrad;
    const double rad = std::min(1.0, std::sqrt(fx * fx + fy * fy));
    const double angle = std::atan2(-fy, -fx) / std::numbers::pi;
    const double fk = (angle + 1.0) / 2.0 * (ncols - 1);
    const int k0 = static_cast<int>(fk) % ncols;
    const int k1 = (k0 + 1) % ncols;
    const double f = fk - std::floor(fk);
    for (int ch = 0; ch < 3; ++ch) {
      double col = (1.0 - f) * wheel.colors[k0][ch] / 255.0 +
                   f * wheel.colors[k1][ch] / 255.0;
      col = 1.0 - rad * (1.0 - col);  // saturate with magnitude
      rgb[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(255.0 * col));
    }
  }
  return rgb;
}

}  // namespace mer
