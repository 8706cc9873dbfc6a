// Displacement-field file format and color-wheel rendering.
//
// Field file layout: u32 height, u32 width (little-endian), then h*w pixels
// row-major, each pixel a float32 pair (dx, dy), little-endian.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mer {

struct FlowField {
  std::int64_t h = 0, w = 0;
  std::vector<float> v;  // interleaved (dx, dy), row-major

  float dx(std::int64_t y, std::int64_t x) const { return v[(y * w + x) * 2]; }
  float dy(std::int64_t y, std::int64_t x) const { return v[(y * w + x) * 2 + 1]; }
};

void write_flow_file(const std::string& path, const FlowField& field);
FlowField read_flow_file(const std::string& path);

// Color-wheel encoding (hue = direction, saturation = magnitude, zero motion
// renders white). max_magnitude <= 0 selects the field's own maximum.
std::vector<std::uint8_t> flow_to_rgb(const FlowField& field,
                                      double max_magnitude = 0.0);

}  // namespace mer
