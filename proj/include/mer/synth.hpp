// Synthetic expression dataset generator: procedural faces built from soft
// ellipse primitives, per-subject appearance variation, class-specific
// parametric deformations with known ground-truth displacement fields, and
// landmark files matching the rendered geometry.
#pragma once

#include <cstdint>
#include <string>

#include "mer/manifest.hpp"

namespace mer {

struct SynthSpec {
  int subjects = 10;
  int samples_per_class = 6;
  std::int64_t image_size = 128;
  int sequence_length = 6;
  int apex_index = 4;
  double min_shift = 3.0;  // deformation magnitude range, pixels
  double max_shift = 7.0;
  std::uint64_t seed = 20240401;
};

SynthSpec load_synth_spec(const std::string& path);
void save_synth_spec(const std::string& path, const SynthSpec& spec);

// Writes frames, landmark files, ground-truth fields and manifest.json under
// out_dir, and returns the manifest. Deterministic for a fixed spec.
DatasetManifest generate_synthetic_dataset(const SynthSpec& spec,
                                           const std::string& out_dir);

}  // namespace mer
