#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mer/displacement.hpp"
#include "mer/regions.hpp"
#include "testutil.hpp"

using namespace mer;
using mer::testing::gradcheck;
using mer::testing::random_signed;

namespace {

// Plausible 68-point layout around a face ellipse; enough structure for the
// geometric invariants.
LandmarkSet canonical_landmarks(double cx = 64, double cy = 66, double rx = 38,
                                double ry = 48) {
  LandmarkSet lm;
  const double pi = 3.14159265358979323846;
  for (int i = 0; i <= 16; ++i) {
    const double phi = 0.2 + (16 - i) / 16.0 * (pi - 0.4);
    lm.pts[i] = {cx + rx * std::cos(phi), cy + ry * std::sin(phi)};
  }
  const double eye_dx = 0.42 * rx, eye_y = cy - 0.18 * ry;
  const double brow_y = eye_y - 0.16 * ry, brow_rx = 0.22 * rx;
  for (int i = 0; i < 5; ++i) {
    const double u = -1.0 + i / 2.0;
    const double y = brow_y - 0.05 * ry * (1.0 - u * u);
    lm.pts[17 + i] = {cx - eye_dx + u * brow_rx, y};
    lm.pts[26 - i] = {cx + eye_dx - u * brow_rx, y};
  }
  for (int k = 0; k < 4; ++k)
    lm.pts[27 + k] = {cx, eye_y + k / 3.0 * (cy + 0.1 * ry - eye_y)};
  for (int k = 0; k < 5; ++k)
    lm.pts[31 + k] = {cx + (k - 2) / 2.0 * 0.1 * rx, cy + 0.13 * ry};
  const double erx = 0.16 * rx, ery = 0.085 * ry;
  auto eye = [&](double ex, int base) {
    lm.pts[base + 0] = {ex - erx, eye_y};
    lm.pts[base + 1] = {ex - 0.4 * erx, eye_y - ery};
    lm.pts[base + 2] = {ex + 0.4 * erx, eye_y - ery};
    lm.pts[base + 3] = {ex + erx, eye_y};
    lm.pts[base + 4] = {ex + 0.4 * erx, eye_y + ery};
    lm.pts[base + 5] = {ex - 0.4 * erx, eye_y + ery};
  };
  eye(cx - eye_dx, 36);
  eye(cx + eye_dx, 42);
  const double my = cy + 0.45 * ry, mrx = 0.30 * rx, mry = 0.055 * ry;
  auto mouth = [&](double theta, double s) {
    return Point2{cx + s * mrx * std::cos(theta), my - s * mry * std::sin(theta)};
  };
  for (int k = 0; k <= 6; ++k) lm.pts[48 + k] = mouth(pi - k * pi / 6.0, 1.0);
  for (int k = 1; k <= 5; ++k) lm.pts[54 + k] = mouth(-k * pi / 6.0, 1.0);
  lm.pts[60] = mouth(pi, 0.6);
  lm.pts[61] = mouth(2 * pi / 3, 0.6);
  lm.pts[62] = mouth(pi / 2, 0.6);
  lm.pts[63] = mouth(pi / 3, 0.6);
  lm.pts[64] = mouth(0.0, 0.6);
  lm.pts[65] = mouth(-pi / 3, 0.6);
  lm.pts[66] = mouth(-pi / 2, 0.6);
  lm.pts[67] = mouth(-2 * pi / 3, 0.6);
  return lm;
}

// iBUG-style left/right landmark correspondence under a horizontal mirror.
int mirror_index(int i) {
  static const auto table = [] {
    std::array<int, 68> t{};
    for (int k = 0; k <= 16; ++k) t[k] = 16 - k;
    for (int k = 0; k < 5; ++k) t[17 + k] = 26 - k;
    for (int k = 0; k < 5; ++k) t[22 + k] = 21 - k;
    for (int k = 0; k < 4; ++k) t[27 + k] = 27 + k;
    for (int k = 0; k < 5; ++k) t[31 + k] = 35 - k;
    t[36] = 45; t[37] = 44; t[38] = 43; t[39] = 42; t[40] = 47; t[41] = 46;
    t[42] = 39; t[43] = 38; t[44] = 37; t[45] = 36; t[46] = 41; t[47] = 40;
    for (int k = 0; k <= 6; ++k) t[48 + k] = 54 - k;
    t[55] = 59; t[56] = 58; t[57] = 57; t[58] = 56; t[59] = 55;
    t[60] = 64; t[61] = 63; t[62] = 62; t[63] = 61; t[64] = 60;
    t[65] = 67; t[66] = 66; t[67] = 65;
    return t;
  }();
  return table[i];
}

}  // namespace

TEST_CASE("landmark files round trip and validate") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mer_lm.txt").string();
  LandmarkSet lm = canonical_landmarks();
  save_landmarks(path, lm);
  LandmarkSet loaded = load_landmarks(path);
  for (int i = 0; i < kNumLandmarks; ++i) {
    CHECK(loaded.pts[i].x == doctest::Approx(lm.pts[i].x).epsilon(1e-6));
    CHECK(loaded.pts[i].y == doctest::Approx(lm.pts[i].y).epsilon(1e-6));
  }
  validate_landmarks(loaded, 128, 128);
  CHECK_THROWS_AS(validate_landmarks(loaded, 64, 64), GeometryError);
  std::remove(path.c_str());
}

TEST_CASE("landmark parser reports wrong counts and bad lines") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mer_lm_bad.txt").string();
  {
    std::ofstream os(path);
    for (int i = 0; i < 67; ++i) os << i << " " << i << "\n";
  }
  try {
    load_landmarks(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("68") != std::string::npos);
  }
  {
    std::ofstream os(path);
    for (int i = 0; i < 10; ++i) os << i << " " << i << "\n";
    os << "12 oops\n";
  }
  try {
    load_landmarks(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 11") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("au boxes: cardinality, positive area, containment") {
  LandmarkSet lm = canonical_landmarks();
  auto set = compute_au_boxes(lm, RegionGeometry::defaults());
  for (const auto& b : set.boxes) {
    CHECK(b.width() > 0);
    CHECK(b.height() > 0);
  }
  CHECK(set.full_face.width() > 0);

  // eye landmarks inside the per-side regions, nose base inside the mid-face
  // region, mouth inside the lower region
  for (int i = 36; i <= 41; ++i)
    CHECK(set.boxes[0].contains(lm.pts[i].x, lm.pts[i].y));
  for (int i = 42; i <= 47; ++i)
    CHECK(set.boxes[1].contains(lm.pts[i].x, lm.pts[i].y));
  for (int i = 31; i <= 35; ++i)
    CHECK(set.boxes[5].contains(lm.pts[i].x, lm.pts[i].y));
  for (int i = 48; i <= 67; ++i)
    CHECK(set.boxes[8].contains(lm.pts[i].x, lm.pts[i].y));
  // every landmark sits inside the padded full-face box
  for (const auto& p : lm.pts) CHECK(set.full_face.contains(p.x, p.y));
}

TEST_CASE("mirrored landmarks produce mirrored left/right boxes") {
  LandmarkSet lm = canonical_landmarks();
  const double width = 128.0;
  LandmarkSet mirrored;
  for (int i = 0; i < kNumLandmarks; ++i) {
    mirrored.pts[mirror_index(i)] = {width - 1.0 - lm.pts[i].x, lm.pts[i].y};
  }
  auto geo = RegionGeometry::defaults();
  auto a = compute_au_boxes(lm, geo);
  auto b = compute_au_boxes(mirrored, geo);
  // paired regions: 0<->1 (upper), 3<->4 (mid), 6<->7 (lower)
  auto mirrors = [&](const Box& x, const Box& y) {
    CHECK(std::abs((width - 1.0 - x.x1) - y.x0) <= 1.0);
    CHECK(std::abs((width - 1.0 - x.x0) - y.x1) <= 1.0);
    CHECK(std::abs(x.y0 - y.y0) <= 1.0);
    CHECK(std::abs(x.y1 - y.y1) <= 1.0);
  };
  mirrors(a.boxes[0], b.boxes[1]);
  mirrors(a.boxes[1], b.boxes[0]);
  mirrors(a.boxes[3], b.boxes[4]);
  mirrors(a.boxes[4], b.boxes[3]);
  mirrors(a.boxes[6], b.boxes[7]);
  mirrors(a.boxes[7], b.boxes[6]);
}

TEST_CASE("au boxes are equivariant to landmark translation") {
  LandmarkSet lm = canonical_landmarks();
  const double dx = 7.25, dy = -3.5;
  LandmarkSet moved = lm;
  for (auto& p : moved.pts) {
    p.x += dx;
    p.y += dy;
  }
  auto geo = RegionGeometry::defaults();
  auto a = compute_au_boxes(lm, geo);
  auto b = compute_au_boxes(moved, geo);
  for (int r = 0; r < kNumAuRegions; ++r) {
    CHECK(b.boxes[r].x0 == doctest::Approx(a.boxes[r].x0 + dx).epsilon(1e-12));
    CHECK(b.boxes[r].y1 == doctest::Approx(a.boxes[r].y1 + dy).epsilon(1e-12));
  }
}

TEST_CASE("degenerate anchor sets raise geometry errors") {
  LandmarkSet lm = canonical_landmarks();
  // collapse the first region's anchors onto a vertical line
  RegionGeometry geo = RegionGeometry::defaults();
  for (int idx : geo.regions[0].anchors) lm.pts[idx].x = 10.0;
  CHECK_THROWS_AS(compute_au_boxes(lm, geo), GeometryError);
}

TEST_CASE("grid3x3 tiles the full-face box into nine cells") {
  LandmarkSet lm = canonical_landmarks();
  auto geo = RegionGeometry::defaults();
  auto set = compute_grid3x3_boxes(lm, geo);
  const Box& f = set.full_face;
  CHECK(set.boxes[0].x0 == doctest::Approx(f.x0));
  CHECK(set.boxes[8].x1 == doctest::Approx(f.x1));
  CHECK(set.boxes[4].cx() == doctest::Approx(f.cx()));
  double area = 0;
  for (const auto& b : set.boxes) area += b.width() * b.height();
  CHECK(area == doctest::Approx(f.width() * f.height()).epsilon(1e-9));
}

TEST_CASE("geometry config round trips through json") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mer_geo.json").string();
  auto geo = RegionGeometry::defaults();
  save_region_geometry(path, geo);
  auto loaded = load_region_geometry(path);
  CHECK(loaded.regions.size() == geo.regions.size());
  for (std::size_t i = 0; i < geo.regions.size(); ++i) {
    CHECK(loaded.regions[i].id == geo.regions[i].id);
    CHECK(loaded.regions[i].anchors == geo.regions[i].anchors);
  }
  std::remove(path.c_str());
}

// ---------------------------------------------------------------------------
// crop_resize
// ---------------------------------------------------------------------------

TEST_CASE("crop_resize with the full-image box at source size is the identity") {
  Rng rng(51);
  auto stack = Tensor<float>::uniform({2, 3, 6, 8}, rng, 0.0, 1.0);
  std::vector<Box> boxes(2, Box{0, 0, 7, 5});
  auto out = crop_resize(stack, boxes, 6, 8);
  for (std::int64_t i = 0; i < stack.size(); ++i)
    CHECK(out.data()[i] == stack.data()[i]);
}

TEST_CASE("crop_resize of a constant image stays constant") {
  auto stack = Tensor<double>::full({1, 1, 10, 10}, 0.42);
  std::vector<Box> boxes = {Box{1.3, 2.7, 8.1, 9.4}};
  auto out = crop_resize(stack, boxes, 5, 7);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("crop_resize matches a direct bilinear oracle on a checkerboard") {
  const std::int64_t h = 8, w = 8;
  auto stack = Tensor<double>::zeros({1, 1, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      stack.mutable_data()[y * w + x] = ((x + y) % 2 == 0) ? 1.0 : 0.0;
  const Box box{0, 0, 7, 7};
  const std::int64_t oh = 4, ow = 4;  // 2x downscale
  auto out = crop_resize(stack, {box}, oh, ow);
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      const double sx = box.x0 + x * box.width() / (ow - 1);
      const double sy = box.y0 + y * box.height() / (oh - 1);
      const std::int64_t x0 = static_cast<std::int64_t>(sx);
      const std::int64_t y0 = static_cast<std::int64_t>(sy);
      const std::int64_t x1 = std::min(x0 + 1, w - 1);
      const std::int64_t y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      auto v = [&](std::int64_t yy, std::int64_t xx) {
        return stack.data()[yy * w + xx];
      };
      const double expected = (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) +
                              fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
      CHECK(out.data()[y * ow + x] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("crop_resize rejects non-intersecting boxes") {
  auto stack = Tensor<float>::zeros({1, 1, 8, 8});
  CHECK_THROWS_AS(crop_resize(stack, {Box{20, 20, 30, 30}}, 4, 4),
                  GeometryError);
  CHECK_THROWS_AS(crop_resize(stack, {Box{3, 3, 3, 3}}, 4, 4), GeometryError);
}

TEST_CASE("crop_resize rescales displacement channels by the resize ratio") {
  // constant flow (2, -4) in a 10x10 field, cropped 5x5 region resized to
  // 10x10: values double in x and y
  auto stack = Tensor<double>::zeros({1, 2, 10, 10});
  for (std::int64_t p = 0; p < 100; ++p) {
    stack.mutable_data()[p] = 2.0;
    stack.mutable_data()[100 + p] = -4.0;
  }
  const Box box{2, 2, 6.5, 6.5};
  auto out = crop_resize(stack, {box}, 10, 10, 0, 1);
  const double rx = 9.0 / box.width(), ry = 9.0 / box.height();
  for (std::int64_t p = 0; p < 100; ++p) {
    CHECK(out.data()[p] == doctest::Approx(2.0 * rx).epsilon(1e-9));
    CHECK(out.data()[100 + p] == doctest::Approx(-4.0 * ry).epsilon(1e-9));
  }

  // magnitude loss of the crop-resized constant field equals the original
  // magnitude loss scaled by the per-axis ratios
  auto field = slice(out, 1, 0, 2);
  const double lnm = magnitude_loss(field).item();
  CHECK(lnm == doctest::Approx(2.0 * rx + 4.0 * ry).epsilon(1e-5));
}

TEST_CASE("crop_resize differentiates into the source stack") {
  Rng rng(61);
  auto stack = random_signed<double>({2, 2, 6, 6}, rng);
  std::vector<Box> boxes = {Box{0.5, 0.5, 4.7, 4.2}, Box{1.1, 0.3, 5.4, 5.1}};
  auto r = random_signed<double>({2, 2, 4, 4}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(crop_resize(in[0], boxes, 4, 4, 0, 1), r));
  };
  CHECK(gradcheck<double>(fn, {stack}, rng) <= 1e-5);
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

TEST_CASE("patchify yields 25 patches for a 90x90 region at patch size 18") {
  auto region = Tensor<float>::zeros({1, 4, 90, 90});
  auto tokens = patchify(region, 18);
  CHECK(tokens.shape() == Shape{1, 25, 4 * 18 * 18});
}

TEST_CASE("patchify then unpatchify reproduces the region bit-exactly") {
  Rng rng(71);
  auto region = Tensor<double>::uniform({2, 3, 12, 8}, rng, -1.0, 1.0);
  auto tokens = patchify(region, 4);
  auto back = unpatchify(tokens, 3, 12, 8, 4);
  for (std::int64_t i = 0; i < region.size(); ++i)
    CHECK(back.data()[i] == region.data()[i]);
}

TEST_CASE("patchify order is row-major, verified on an indexed image") {
  // 36x36 with P=18 -> 4 patches; pixel value encodes its (row, col)
  const std::int64_t s = 36, p = 18;
  auto region = Tensor<double>::zeros({1, 1, s, s});
  for (std::int64_t y = 0; y < s; ++y)
    for (std::int64_t x = 0; x < s; ++x)
      region.mutable_data()[y * s + x] = static_cast<double>(y * 1000 + x);
  auto tokens = patchify(region, p);
  CHECK(tokens.shape() == Shape{1, 4, p * p});
  // patch 0 starts at (0,0), 1 at (0,18), 2 at (18,0), 3 at (18,18)
  CHECK(tokens.data()[0 * p * p] == 0.0);
  CHECK(tokens.data()[1 * p * p] == 18.0);
  CHECK(tokens.data()[2 * p * p] == 18000.0);
  CHECK(tokens.data()[3 * p * p] == 18018.0);
  // within a patch, values run row-major
  CHECK(tokens.data()[0 * p * p + 1] == 1.0);
  CHECK(tokens.data()[0 * p * p + p] == 1000.0);
}

TEST_CASE("patchify rejects non-divisible sizes") {
  auto region = Tensor<float>::zeros({1, 1, 20, 20});
  CHECK_THROWS_AS(patchify(region, 18), UsageError);
}

TEST_CASE("patchify differentiates") {
  Rng rng(81);
  auto region = random_signed<double>({1, 2, 6, 6}, rng);
  auto r = random_signed<double>({1, 4, 2 * 3 * 3}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(patchify(in[0], 3), r));
  };
  CHECK(gradcheck<double>(fn, {region}, rng) <= 1e-5);
}
