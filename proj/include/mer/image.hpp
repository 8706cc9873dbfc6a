// Grayscale image container plus PGM/PPM/PNG file I/O. Pipeline images are
// stored as doubles in [0, 1]; 8-bit quantization happens only at the file
// boundary.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mer {

struct ImageF {
  std::int64_t h = 0, w = 0;
  std::vector<double> v;  // row-major, [0, 1]

  double& at(std::int64_t y, std::int64_t x) { return v[y * w + x]; }
  double at(std::int64_t y, std::int64_t x) const { return v[y * w + x]; }
  static ImageF filled(std::int64_t h, std::int64_t w, double value) {
    return ImageF{h, w, std::vector<double>(static_cast<std::size_t>(h * w), value)};
  }
};

// Binary PGM (P5), 8-bit.
void write_pgm(const std::string& path, const ImageF& img);
ImageF read_pgm(const std::string& path);

// Binary PPM (P6), 8-bit RGB interleaved.
void write_ppm(const std::string& path, std::int64_t h, std::int64_t w,
               const std::vector<std::uint8_t>& rgb);

// Minimal zlib-backed PNG writer (8-bit, RGB or grayscale, filter 0).
void write_png_rgb(const std::string& path, std::int64_t h, std::int64_t w,
                   const std::vector<std::uint8_t>& rgb);
void write_png_gray(const std::string& path, std::int64_t h, std::int64_t w,
                    const std::vector<std::uint8_t>& gray);

}  // namespace mer
