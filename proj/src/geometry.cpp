#include "mer/geometry.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace mer {

LandmarkSet load_landmarks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open landmark file: " + path);
  LandmarkSet lm;
  std::string line;
  int count = 0;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    // skip blank lines
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (count >= kNumLandmarks)
      throw ParseError(path + ": more than 68 landmark lines (line " +
                       std::to_string(line_no) + ")");
    std::istringstream ls(line);
    double x, y;
    if (!(ls >> x >> y))
      throw ParseError(path + ": expected 'x y' at line " +
                       std::to_string(line_no));
    std::string extra;
    if (ls >> extra)
      throw ParseError(path + ": trailing data at line " +
                       std::to_string(line_no));
    lm.pts[count++] = {x, y};
  }
  if (count != kNumLandmarks)
    throw ParseError(path + ": expected 68 landmarks, found " +
                     std::to_string(count));
  return lm;
}

void save_landmarks(const std::string& path, const LandmarkSet& lm) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.precision(6);
  os << std::fixed;
  for (const auto& p : lm.pts) os << p.x << " " << p.y << "\n";
  if (!os) throw IoError("short write: " + path);
}

void validate_landmarks(const LandmarkSet& lm, double width, double height) {
  for (int i = 0; i < kNumLandmarks; ++i) {
    const auto& p = lm.pts[i];
    if (p.x < 0 || p.y < 0 || p.x >= width || p.y >= height)
      throw GeometryError("landmark " + std::to_string(i) + " at (" +
                          std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") outside image " + std::to_string(width) + "x" +
                          std::to_string(height));
  }
}

RegionGeometry RegionGeometry::defaults() {
  // 68-point layout: 0-16 jaw, 17-21 / 22-26 brows, 27-35 nose, 36-41 / 42-47
  // eyes, 48-67 mouth. Region 1 covers brow+eye per side, region 2 the
  // between-brows band, 3/4 the nose and lower eyelids, 5/6 mouth, chin and
  // cheeks. Left/right pairs use mirrored anchor lists.
  RegionGeometry g;
  g.regions = {
      {"au1_right", {17, 18, 19, 20, 21, 36, 37, 38, 39, 40, 41}, 0.15},
      {"au1_left", {22, 23, 24, 25, 26, 42, 43, 44, 45, 46, 47}, 0.15},
      {"au2", {19, 20, 21, 22, 23, 24, 27, 28}, 0.15},
      {"au3_right", {36, 40, 41, 29, 30, 31}, 0.15},
      {"au3_left", {45, 46, 47, 29, 30, 35}, 0.15},
      {"au4", {28, 29, 30, 31, 32, 33, 34, 35, 40, 41, 46, 47}, 0.15},
      {"au5_right", {48, 49, 50, 58, 59, 60, 61, 67, 4, 5, 6}, 0.15},
      {"au5_left", {52, 53, 54, 55, 56, 63, 64, 65, 10, 11, 12}, 0.15},
      {"au6", {48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 5, 6, 7, 8, 9,
               10, 11}, 0.15},
  };
  g.full_face_pad = 0.15;
  return g;
}

RegionGeometry load_region_geometry(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open geometry config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  RegionGeometry g;
  try {
    g.full_face_pad = j.value("full_face_pad", 0.15);
    for (const auto& r : j.at("regions")) {
      AuRegionSpec spec;
      spec.id = r.at("id").get<std::string>();
      spec.pad = r.value("pad", 0.15);
      for (const auto& a : r.at("landmarks")) {
        const int idx = a.get<int>();
        if (idx < 0 || idx >= kNumLandmarks)
          throw ParseError(path + ": landmark index " + std::to_string(idx) +
                           " out of range in region " + spec.id);
        spec.anchors.push_back(idx);
      }
      g.regions.push_back(std::move(spec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (static_cast<int>(g.regions.size()) != kNumAuRegions)
    throw ParseError(path + ": expected " + std::to_string(kNumAuRegions) +
                     " regions, found " + std::to_string(g.regions.size()));
  return g;
}

void save_region_geometry(const std::string& path, const RegionGeometry& g) {
  nlohmann::json j;
  j["full_face_pad"] = g.full_face_pad;
  j["regions"] = nlohmann::json::array();
  for (const auto& r : g.regions)
    j["regions"].push_back(
        {{"id", r.id}, {"landmarks", r.anchors}, {"pad", r.pad}});
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << "\n";
}

namespace {

Box anchor_bbox(const LandmarkSet& lm, const std::vector<int>& anchors,
                const std::string& id) {
  if (anchors.empty()) throw GeometryError("region " + id + " has no anchors");
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
  double x1 = -x0, y1 = -x0;
  for (int idx : anchors) {
    x0 = std::min(x0, lm.pts[idx].x);
    x1 = std::max(x1, lm.pts[idx].x);
    y0 = std::min(y0, lm.pts[idx].y);
    y1 = std::max(y1, lm.pts[idx].y);
  }
  if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0)
    throw GeometryError("region " + id + " has a degenerate anchor box (" +
                        std::to_string(x1 - x0) + " x " +
                        std::to_string(y1 - y0) + ")");
  return {x0, y0, x1, y1};
}

Box pad_and_square(Box b, double pad) {
  const double px = pad * b.width();
  const double py = pad * b.height();
  b.x0 -= px;
  b.x1 += px;
  b.y0 -= py;
  b.y1 += py;
  const double side = std::max(b.width(), b.height());
  const double cx = b.cx(), cy = b.cy();
  return {cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0};
}

Box full_face_box(const LandmarkSet& lm, double pad) {
  std::vector<int> all(kNumLandmarks);
  for (int i = 0; i < kNumLandmarks; ++i) all[i] = i;
  return pad_and_square(anchor_bbox(lm, all, "full_face"), pad);
}

}  // namespace

AuRegionSet compute_au_boxes(const LandmarkSet& lm, const RegionGeometry& geo) {
  if (static_cast<int>(geo.regions.size()) != kNumAuRegions)
    throw GeometryError("geometry config must define exactly " +
                        std::to_string(kNumAuRegions) + " regions");
  AuRegionSet out;
  for (int i = 0; i < kNumAuRegions; ++i) {
    const auto& spec = geo.regions[i];
    out.boxes[i] = pad_and_square(anchor_bbox(lm, spec.anchors, spec.id),
                                  spec.pad);
  }
  out.full_face = full_face_box(lm, geo.full_face_pad);
  return out;
}

AuRegionSet compute_grid3x3_boxes(const LandmarkSet& lm,
                                  const RegionGeometry& geo) {
  AuRegionSet out;
  out.full_face = full_face_box(lm, geo.full_face_pad);
  const Box& f = out.full_face;
  const double cw = f.width() / 3.0, ch = f.height() / 3.0;
  for (int gy = 0; gy < 3; ++gy)
    for (int gx = 0; gx < 3; ++gx)
      out.boxes[gy * 3 + gx] = {f.x0 + gx * cw, f.y0 + gy * ch,
                                f.x0 + (gx + 1) * cw, f.y0 + (gy + 1) * ch};
  return out;
}

}  // namespace mer
