#include "mer/synth.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mer/flow.hpp"
#include "mer/geometry.hpp"
#include "mer/image.hpp"
#include "mer/rng.hpp"

namespace mer {

namespace fs = std::filesystem;

namespace {

constexpr int kNumClasses = 3;
const char* kClassNames[kNumClasses] = {"negative", "positive", "surprise"};

struct Wave {
  double kx, ky, phase, amp;
};

struct SubjectParams {
  double cx_rel, cy_rel;     // face center, fraction of image size
  double rx_rel, ry_rel;     // face radii, fraction of image size
  double eye_dx_rel;         // eye offset from center, fraction of rx
  double eye_y_rel;          // fraction of ry above center
  double eye_rx_rel, eye_ry_rel;
  double brow_dy_rel;        // above eye line, fraction of ry
  double brow_rx_rel, brow_arch_rel;
  double mouth_y_rel, mouth_rx_rel, mouth_ry_rel;
  double skin, bg, brow_dark, eye_dark, mouth_dark;
  std::array<Wave, 6> bg_tex;
  std::array<Wave, 6> face_tex;
};

// Absolute pixel-space layout for one rendered frame.
struct FaceLayout {
  double S;
  double cx, cy, rx, ry;
  double eye_dx, eye_y, eye_rx, eye_ry;
  double brow_y, brow_rx, brow_thick, brow_arch;
  double nose_y1, nose_w;
  double mouth_y, mouth_rx, mouth_ry;
  double skin, bg, brow_dark, eye_dark, mouth_dark;
  double illum;
  const SubjectParams* sp;
};

Wave random_wave(Rng& rng, double amp) {
  const double k = rng.uniform(0.04, 0.23);
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return {k * std::cos(ang), k * std::sin(ang),
          rng.uniform(0.0, 2.0 * std::numbers::pi), amp * rng.uniform(0.5, 1.0)};
}

SubjectParams make_subject(Rng& rng) {
  SubjectParams p;
  p.cx_rel = 0.50 + rng.uniform(-0.02, 0.02);
  p.cy_rel = 0.52 + rng.uniform(-0.02, 0.02);
  p.rx_rel = 0.30 * (1.0 + rng.uniform(-0.08, 0.08));
  p.ry_rel = 0.38 * (1.0 + rng.uniform(-0.08, 0.08));
  p.eye_dx_rel = 0.42 + rng.uniform(-0.04, 0.04);
  p.eye_y_rel = 0.18 + rng.uniform(-0.03, 0.03);
  p.eye_rx_rel = 0.16 + rng.uniform(-0.02, 0.02);
  p.eye_ry_rel = 0.085 + rng.uniform(-0.01, 0.01);
  p.brow_dy_rel = 0.16 + rng.uniform(-0.02, 0.02);
  p.brow_rx_rel = 0.22 + rng.uniform(-0.02, 0.02);
  p.brow_arch_rel = 0.05 + rng.uniform(-0.01, 0.01);
  p.mouth_y_rel = 0.45 + rng.uniform(-0.03, 0.03);
  p.mouth_rx_rel = 0.30 + rng.uniform(-0.04, 0.04);
  p.mouth_ry_rel = 0.055 + rng.uniform(-0.01, 0.01);
  p.skin = 0.68 + rng.uniform(-0.05, 0.05);
  p.bg = 0.15 + rng.uniform(-0.03, 0.03);
  p.brow_dark = 0.30 + rng.uniform(-0.04, 0.04);
  p.eye_dark = 0.22 + rng.uniform(-0.03, 0.03);
  p.mouth_dark = 0.30 + rng.uniform(-0.04, 0.04);
  for (auto& w : p.bg_tex) w = random_wave(rng, 0.020);
  for (auto& w : p.face_tex) w = random_wave(rng, 0.028);
  return p;
}

FaceLayout make_layout(double S, const SubjectParams& p, double jx, double jy,
                       double illum) {
  FaceLayout l;
  l.S = S;
  l.sp = &p;
  l.cx = S * p.cx_rel + jx;
  l.cy = S * p.cy_rel + jy;
  l.rx = S * p.rx_rel;
  l.ry = S * p.ry_rel;
  l.eye_dx = l.rx * p.eye_dx_rel;
  l.eye_y = l.cy - l.ry * p.eye_y_rel;
  l.eye_rx = l.rx * p.eye_rx_rel;
  l.eye_ry = l.ry * p.eye_ry_rel;
  l.brow_y = l.eye_y - l.ry * p.brow_dy_rel;
  l.brow_rx = l.rx * p.brow_rx_rel;
  l.brow_thick = std::max(1.2, l.ry * 0.030);
  l.brow_arch = l.ry * p.brow_arch_rel;
  l.nose_y1 = l.cy + l.ry * 0.10;
  l.nose_w = l.rx * 0.10;
  l.mouth_y = l.cy + l.ry * p.mouth_y_rel;
  l.mouth_rx = l.rx * p.mouth_rx_rel;
  l.mouth_ry = l.ry * p.mouth_ry_rel;
  l.skin = p.skin;
  l.bg = p.bg;
  l.brow_dark = p.brow_dark;
  l.eye_dark = p.eye_dark;
  l.mouth_dark = p.mouth_dark;
  l.illum = illum;
  return l;
}

double face_alpha(const FaceLayout& l, double x, double y) {
  const double dx = (x - l.cx) / l.rx;
  const double dy = (y - l.cy) / l.ry;
  const double r = std::sqrt(dx * dx + dy * dy);
  const double edge = 2.0 / std::min(l.rx, l.ry);
  return std::clamp((1.0 - r) / edge, 0.0, 1.0);
}

void paint_ellipse(ImageF& img, double cx, double cy, double rx, double ry,
                   double value, double edge_px = 1.2) {
  const std::int64_t x0 = std::max<std::int64_t>(0, std::llround(cx - rx - 2));
  const std::int64_t x1 =
      std::min<std::int64_t>(img.w - 1, std::llround(cx + rx + 2));
  const std::int64_t y0 = std::max<std::int64_t>(0, std::llround(cy - ry - 2));
  const std::int64_t y1 =
      std::min<std::int64_t>(img.h - 1, std::llround(cy + ry + 2));
  const double edge = edge_px / std::min(rx, ry);
  for (std::int64_t y = y0; y <= y1; ++y)
    for (std::int64_t x = x0; x <= x1; ++x) {
      const double dx = (x - cx) / rx;
      const double dy = (y - cy) / ry;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double a = std::clamp((1.0 - r) / edge, 0.0, 1.0);
      if (a > 0) img.at(y, x) = img.at(y, x) * (1.0 - a) + value * a;
    }
}

double eval_waves(const std::array<Wave, 6>& waves, double x, double y) {
  double v = 0.0;
  for (const auto& w : waves)
    v += w.amp * std::cos(w.kx * x + w.ky * y + w.phase);
  return v;
}

ImageF render_face(const FaceLayout& l) {
  const std::int64_t S = static_cast<std::int64_t>(l.S);
  ImageF img = ImageF::filled(S, S, 0.0);
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x)
      img.at(y, x) = l.bg + eval_waves(l.sp->bg_tex, x, y);

  paint_ellipse(img, l.cx, l.cy, l.rx, l.ry, l.skin, 2.0);
  // skin texture, faded toward the silhouette so every facial pixel carries
  // gradient information for warping
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x) {
      const double a = face_alpha(l, x, y);
      if (a > 0) img.at(y, x) += a * eval_waves(l.sp->face_tex, x, y);
    }

  // brows: disks along an arched curve
  for (int side = -1; side <= 1; side += 2) {
    const double bx = l.cx + side * l.eye_dx;
    for (int k = 0; k <= 8; ++k) {
      const double u = -1.0 + 2.0 * k / 8.0;
      paint_ellipse(img, bx + u * l.brow_rx,
                    l.brow_y - l.brow_arch * (1.0 - u * u), l.brow_thick * 1.6,
                    l.brow_thick, l.brow_dark);
    }
  }
  // eyes
  for (int side = -1; side <= 1; side += 2) {
    const double ex = l.cx + side * l.eye_dx;
    paint_ellipse(img, ex, l.eye_y, l.eye_rx, l.eye_ry, 0.92);
    paint_ellipse(img, ex, l.eye_y, l.eye_rx * 0.45, l.eye_ry * 0.9,
                  l.eye_dark);
  }
  // nose: vertical stroke
  for (int k = 0; k <= 6; ++k) {
    const double t = k / 6.0;
    const double y = l.eye_y + t * (l.nose_y1 - l.eye_y);
    paint_ellipse(img, l.cx, y, l.nose_w * 0.35, l.nose_w * 0.35,
                  l.skin * 0.82);
  }
  paint_ellipse(img, l.cx, l.nose_y1, l.nose_w, l.nose_w * 0.5, l.skin * 0.75);
  // mouth
  paint_ellipse(img, l.cx, l.mouth_y, l.mouth_rx, l.mouth_ry, l.mouth_dark);

  for (auto& v : img.v) v = std::clamp(v * l.illum, 0.0, 1.0);
  return img;
}

LandmarkSet layout_landmarks(const FaceLayout& l) {
  LandmarkSet lm;
  // jaw 0..16 along the lower face ellipse, image-left to image-right
  for (int i = 0; i <= 16; ++i) {
    const double phi = 0.2 + (16 - i) / 16.0 * (std::numbers::pi - 0.4);
    lm.pts[i] = {l.cx + l.rx * std::cos(phi), l.cy + l.ry * std::sin(phi)};
  }
  // brows 17..21 (image-left) and 22..26 (image-right)
  for (int i = 0; i < 5; ++i) {
    const double u = -1.0 + i / 2.0;
    const double y = l.brow_y - l.brow_arch * (1.0 - u * u);
    lm.pts[17 + i] = {l.cx - l.eye_dx + u * l.brow_rx, y};
    lm.pts[22 + i] = {l.cx + l.eye_dx + (u - 0.0) * l.brow_rx, y};
  }
  // the two brow runs must mirror index-wise: 17+i <-> 26-i
  for (int i = 0; i < 5; ++i) {
    const double u = -1.0 + i / 2.0;
    const double y = l.brow_y - l.brow_arch * (1.0 - u * u);
    lm.pts[26 - i] = {2.0 * l.cx - (l.cx - l.eye_dx + u * l.brow_rx), y};
  }
  // nose bridge 27..30 and base 31..35
  for (int k = 0; k < 4; ++k) {
    const double t = k / 3.0;
    lm.pts[27 + k] = {l.cx, l.eye_y + t * (l.nose_y1 - l.eye_y)};
  }
  for (int k = 0; k < 5; ++k)
    lm.pts[31 + k] = {l.cx + (k - 2) / 2.0 * l.nose_w,
                      l.nose_y1 + 0.03 * l.ry};
  // eyes 36..41 (image-left) and 42..47 (image-right)
  auto eye_points = [&](double ex, int base, bool left_to_right) {
    const double sgn = left_to_right ? 1.0 : -1.0;
    lm.pts[base + 0] = {ex - sgn * l.eye_rx, l.eye_y};
    lm.pts[base + 1] = {ex - sgn * l.eye_rx * 0.4, l.eye_y - l.eye_ry};
    lm.pts[base + 2] = {ex + sgn * l.eye_rx * 0.4, l.eye_y - l.eye_ry};
    lm.pts[base + 3] = {ex + sgn * l.eye_rx, l.eye_y};
    lm.pts[base + 4] = {ex + sgn * l.eye_rx * 0.4, l.eye_y + l.eye_ry};
    lm.pts[base + 5] = {ex - sgn * l.eye_rx * 0.4, l.eye_y + l.eye_ry};
  };
  eye_points(l.cx - l.eye_dx, 36, true);
  eye_points(l.cx + l.eye_dx, 42, true);
  // mouth outer 48..59 and inner 60..67 on ellipse arcs
  auto mouth_pt = [&](double theta, double scale) {
    return Point2{l.cx + scale * l.mouth_rx * std::cos(theta),
                  l.mouth_y - scale * l.mouth_ry * std::sin(theta)};
  };
  for (int k = 0; k <= 6; ++k)
    lm.pts[48 + k] = mouth_pt(std::numbers::pi - k * std::numbers::pi / 6.0, 1.0);
  for (int k = 1; k <= 5; ++k)
    lm.pts[54 + k] = mouth_pt(-k * std::numbers::pi / 6.0, 1.0);
  const double in = 0.6;
  lm.pts[60] = mouth_pt(std::numbers::pi, in);
  lm.pts[61] = mouth_pt(2.0 * std::numbers::pi / 3.0, in);
  lm.pts[62] = mouth_pt(std::numbers::pi / 2.0, in);
  lm.pts[63] = mouth_pt(std::numbers::pi / 3.0, in);
  lm.pts[64] = mouth_pt(0.0, in);
  lm.pts[65] = mouth_pt(-std::numbers::pi / 3.0, in);
  lm.pts[66] = mouth_pt(-std::numbers::pi / 2.0, in);
  lm.pts[67] = mouth_pt(-2.0 * std::numbers::pi / 3.0, in);
  return lm;
}

// Backward displacement field as interleaved (dx, dy) doubles.
struct FieldD {
  std::int64_t h = 0, w = 0;
  std::vector<double> v;
  static FieldD zeros(std::int64_t h, std::int64_t w) {
    return {h, w, std::vector<double>(static_cast<std::size_t>(h * w * 2), 0.0)};
  }
  void add_gaussian(double cx, double cy, double sigma, double vx, double vy) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double g = std::exp(-d2 * inv);
        if (g < 1e-4) continue;
        v[(y * w + x) * 2 + 0] += vx * g;
        v[(y * w + x) * 2 + 1] += vy * g;
      }
  }
};

// Class-specific backward fields. Upward content motion corresponds to a
// positive dy in the backward field (sample from below).
FieldD class_field(int label, const FaceLayout& l, double delta) {
  FieldD f = FieldD::zeros(static_cast<std::int64_t>(l.S),
                           static_cast<std::int64_t>(l.S));
  const double brow_sigma = l.brow_rx * 1.1;
  const double mouth_sigma = l.mouth_rx * 0.55;
  switch (label) {
    case 0:  // negative: brows knit down and inward
      f.add_gaussian(l.cx - l.eye_dx, l.brow_y, brow_sigma, -0.35 * delta,
                     -0.7 * delta);
      f.add_gaussian(l.cx + l.eye_dx, l.brow_y, brow_sigma, 0.35 * delta,
                     -0.7 * delta);
      break;
    case 1:  // positive: mouth corners lift outward
      f.add_gaussian(l.cx - l.mouth_rx, l.mouth_y, mouth_sigma, 0.35 * delta,
                     delta);
      f.add_gaussian(l.cx + l.mouth_rx, l.mouth_y, mouth_sigma, -0.35 * delta,
                     delta);
      break;
    case 2:  // surprise: brows raise
      f.add_gaussian(l.cx - l.eye_dx, l.brow_y, brow_sigma, 0.0, delta);
      f.add_gaussian(l.cx + l.eye_dx, l.brow_y, brow_sigma, 0.0, delta);
      break;
    default:
      throw UsageError("class_field: bad label");
  }
  return f;
}

ImageF warp_backward(const ImageF& src, const FieldD& field, double scale) {
  ImageF out = ImageF::filled(src.h, src.w, 0.0);
  for (std::int64_t y = 0; y < src.h; ++y)
    for (std::int64_t x = 0; x < src.w; ++x) {
      double sx = x + scale * field.v[(y * src.w + x) * 2 + 0];
      double sy = y + scale * field.v[(y * src.w + x) * 2 + 1];
      sx = std::clamp(sx, 0.0, static_cast<double>(src.w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(src.h - 1));
      const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
      const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
      const std::int64_t x1 = std::min(x0 + 1, src.w - 1);
      const std::int64_t y1 = std::min(y0 + 1, src.h - 1);
      const double fx = sx - x0, fy = sy - y0;
      out.at(y, x) = (1 - fy) * ((1 - fx) * src.at(y0, x0) + fx * src.at(y0, x1)) +
                     fy * ((1 - fx) * src.at(y1, x0) + fx * src.at(y1, x1));
    }
  return out;
}

}  // namespace

SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset spec: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  SynthSpec s;
  s.subjects = j.value("subjects", s.subjects);
  s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
  s.image_size = j.value("image_size", s.image_size);
  s.sequence_length = j.value("sequence_length", s.sequence_length);
  s.apex_index = j.value("apex_index", s.apex_index);
  s.min_shift = j.value("min_shift", s.min_shift);
  s.max_shift = j.value("max_shift", s.max_shift);
  s.seed = j.value("seed", s.seed);
  return s;
}

void save_synth_spec(const std::string& path, const SynthSpec& s) {
  nlohmann::json j = {{"subjects", s.subjects},
                      {"samples_per_class", s.samples_per_class},
                      {"image_size", s.image_size},
                      {"sequence_length", s.sequence_length},
                      {"apex_index", s.apex_index},
                      {"min_shift", s.min_shift},
                      {"max_shift", s.max_shift},
                      {"seed", s.seed}};
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << "\n";
}

DatasetManifest generate_synthetic_dataset(const SynthSpec& spec,
                                           const std::string& out_dir) {
  if (spec.subjects < 1 || spec.samples_per_class < 1)
    throw UsageError("dataset spec needs at least one subject and one sample per class");
  if (spec.image_size < 32)
    throw UsageError("dataset spec image_size must be >= 32");
  if (spec.sequence_length < 3 || spec.apex_index < 1 ||
      spec.apex_index >= spec.sequence_length)
    throw UsageError("dataset spec needs sequence_length >= 3 with an interior apex");

  fs::create_directories(out_dir);
  DatasetManifest m;
  m.classes = {kClassNames[0], kClassNames[1], kClassNames[2]};
  m.image_h = spec.image_size;
  m.image_w = spec.image_size;
  m.root = out_dir;

  Rng master(spec.seed);
  const double S = static_cast<double>(spec.image_size);
  const double size_scale = S / 128.0;  // deformations specified at 128 px

  for (int s = 0; s < spec.subjects; ++s) {
    Rng subject_rng = master.fork(1000 + s);
    const SubjectParams params = make_subject(subject_rng);
    char subj_name[16];
    std::snprintf(subj_name, sizeof subj_name, "s%02d", s + 1);

    for (int cls = 0; cls < kNumClasses; ++cls) {
      for (int k = 0; k < spec.samples_per_class; ++k) {
        Rng sample_rng = subject_rng.fork(cls * 10000 + k);
        const double jx = sample_rng.uniform(-1.5, 1.5) * size_scale;
        const double jy = sample_rng.uniform(-1.5, 1.5) * size_scale;
        const double illum = 1.0 + sample_rng.uniform(-0.03, 0.03);
        const FaceLayout layout = make_layout(S, params, jx, jy, illum);
        const double delta =
            sample_rng.uniform(spec.min_shift, spec.max_shift) * size_scale;

        const ImageF onset = render_face(layout);
        const FieldD field = class_field(cls, layout, delta);
        const LandmarkSet lm = layout_landmarks(layout);
        validate_landmarks(lm, S, S);

        char sample_name[48];
        std::snprintf(sample_name, sizeof sample_name, "%s_%03d",
                      kClassNames[cls], k);
        const fs::path rel_dir = fs::path(subj_name) / sample_name;
        fs::create_directories(fs::path(out_dir) / rel_dir);

        SampleMeta meta;
        meta.id = std::string(subj_name) + "_" + sample_name;
        meta.subject = subj_name;
        meta.label = cls;
        meta.apex_index = spec.apex_index;

        for (int t = 0; t < spec.sequence_length; ++t) {
          double scale;
          if (t <= spec.apex_index)
            scale = static_cast<double>(t) / spec.apex_index;
          else
            scale = 1.0 - 0.15 * (t - spec.apex_index);
          const ImageF frame =
              t == 0 ? onset : warp_backward(onset, field, scale);
          const std::string rel =
              (rel_dir / ("frame_" + std::to_string(t) + ".pgm")).string();
          write_pgm((fs::path(out_dir) / rel).string(), frame);
          meta.sequence.push_back(rel);
        }

        const std::string lm_rel = (rel_dir / "landmarks.txt").string();
        save_landmarks((fs::path(out_dir) / lm_rel).string(), lm);
        meta.landmarks = lm_rel;

        FlowField ff;
        ff.h = field.h;
        ff.w = field.w;
        ff.v.assign(field.v.begin(), field.v.end());
        const std::string flow_rel = (rel_dir / "gt_flow.bin").string();
        write_flow_file((fs::path(out_dir) / flow_rel).string(), ff);
        meta.gt_flow = flow_rel;

        // difference image, usable as a substituted dynamic feature
        {
          const ImageF apex = warp_backward(onset, field, 1.0);
          ImageF diff = ImageF::filled(onset.h, onset.w, 0.0);
          for (std::size_t i = 0; i < diff.v.size(); ++i)
            diff.v[i] = std::clamp(0.5 + (apex.v[i] - onset.v[i]) * 2.0, 0.0, 1.0);
          const std::string dyn_rel = (rel_dir / "dyn_image.pgm").string();
          write_pgm((fs::path(out_dir) / dyn_rel).string(), diff);
          meta.dyn_image = dyn_rel;
        }

        m.samples.push_back(std::move(meta));
      }
    }
  }

  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace mer
