// Facial geometry: the 68-point landmark set, the editable region table that
// maps each of the 9 action-unit crop regions to its landmark anchors, and
// box construction (padded anchor bounding boxes squared to 1:1).
#pragma once

#include <array>
#include <string>
#include <vector>

#include "mer/error.hpp"

namespace mer {

constexpr int kNumLandmarks = 68;
constexpr int kNumAuRegions = 9;

struct Point2 {
  double x = 0.0, y = 0.0;
};

struct LandmarkSet {
  std::array<Point2, kNumLandmarks> pts;
};

// Text format: 68 lines of "x y" decimals.
LandmarkSet load_landmarks(const std::string& path);
void save_landmarks(const std::string& path, const LandmarkSet& lm);
// Bounds check against a calibrated image size.
void validate_landmarks(const LandmarkSet& lm, double width, double height);

// Axis-aligned box in continuous pixel coordinates, corners inclusive.
struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double cx() const { return (x0 + x1) / 2.0; }
  double cy() const { return (y0 + y1) / 2.0; }
  bool contains(double x, double y) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
};

struct AuRegionSpec {
  std::string id;
  std::vector<int> anchors;  // landmark indices
  double pad = 0.15;         // padding as a fraction of the anchor extent
};

struct RegionGeometry {
  std::vector<AuRegionSpec> regions;  // exactly kNumAuRegions entries
  double full_face_pad = 0.15;

  static RegionGeometry defaults();
};

RegionGeometry load_region_geometry(const std::string& path);
void save_region_geometry(const std::string& path, const RegionGeometry& g);

struct AuRegionSet {
  std::array<Box, kNumAuRegions> boxes;
  Box full_face;
};

// Padded, squared bounding boxes of each region's anchor landmarks, plus the
// full-face box over all 68 points. Translation-equivariant by construction.
AuRegionSet compute_au_boxes(const LandmarkSet& lm, const RegionGeometry& geo);

// Ablation alternative: the full-face box tiled into an even 3x3 grid.
AuRegionSet compute_grid3x3_boxes(const LandmarkSet& lm,
                                  const RegionGeometry& geo);

}  // namespace mer
