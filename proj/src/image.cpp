#include "mer/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mer/error.hpp"

namespace mer {

namespace {

std::uint8_t quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

void write_pgm(const std::string& path, const ImageF& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.w));
  for (std::int64_t y = 0; y < img.h; ++y) {
    for (std::int64_t x = 0; x < img.w; ++x) row[x] = quantize(img.at(y, x));
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("short write: " + path);
}

ImageF read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw ParseError(path + ": not a binary PGM (P5)");
  auto next_int = [&](const char* what) {
    // skip whitespace and '#' comments
    int c = is.get();
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        while (c != '\n' && c != EOF) c = is.get();
      c = is.get();
    }
    is.unget();
    long long v = 0;
    if (!(is >> v)) throw ParseError(path + ": missing " + what);
    return v;
  };
  const std::int64_t w = next_int("width");
  const std::int64_t h = next_int("height");
  const long long maxval = next_int("maxval");
  if (w <= 0 || h <= 0 || maxval != 255)
    throw ParseError(path + ": unsupported PGM geometry/maxval");
  is.get();  // single whitespace after header
  ImageF img = ImageF::filled(h, w, 0.0);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h * w));
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is) throw ParseError(path + ": truncated pixel data");
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.v[i] = static_cast<double>(raw[i]) / 255.0;
  return img;
}

void write_ppm(const std::string& path, std::int64_t h, std::int64_t w,
               const std::vector<std::uint8_t>& rgb) {
  if (static_cast<std::int64_t>(rgb.size()) != h * w * 3)
    throw UsageError("write_ppm: buffer size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()),
           static_cast<std::streamsize>(rgb.size()));
  if (!os) throw IoError("short write: " + path);
}

namespace {

void png_write_chunk(std::ofstream& os, const char type[4],
                     const std::vector<std::uint8_t>& payload) {
  auto write_be32 = [&](std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24),
                         static_cast<std::uint8_t>(v >> 16),
                         static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  write_be32(static_cast<std::uint32_t>(payload.size()));
  os.write(type, 4);
  if (!payload.empty())
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
  std::uint32_t crc =
      crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty())
    crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  write_be32(crc);
}

void write_png(const std::string& path, std::int64_t h, std::int64_t w,
               const std::vector<std::uint8_t>& pixels, int channels) {
  if (static_cast<std::int64_t>(pixels.size()) != h * w * channels)
    throw UsageError("write_png: buffer size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  os.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<std::uint8_t> ihdr(13);
  auto put_be32 = [](std::uint8_t* p, std::uint32_t v) {
    p[0] = static_cast<std::uint8_t>(v >> 24);
    p[1] = static_cast<std::uint8_t>(v >> 16);
    p[2] = static_cast<std::uint8_t>(v >> 8);
    p[3] = static_cast<std::uint8_t>(v);
  };
  put_be32(ihdr.data(), static_cast<std::uint32_t>(w));
  put_be32(ihdr.data() + 4, static_cast<std::uint32_t>(h));
  ihdr[8] = 8;                                   // bit depth
  ihdr[9] = channels == 3 ? 2 : 0;               // color type
  ihdr[10] = ihdr[11] = ihdr[12] = 0;            // compression/filter/interlace
  png_write_chunk(os, "IHDR", ihdr);

  // one filter byte (0) per scanline
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h * (w * channels + 1)));
  for (std::int64_t y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + y * w * channels,
               pixels.begin() + (y + 1) * w * channels);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("write_png: deflate failed for " + path);
  compressed.resize(bound);
  png_write_chunk(os, "IDAT", compressed);
  png_write_chunk(os, "IEND", {});
  if (!os) throw IoError("short write: " + path);
}

}  // namespace

void write_png_rgb(const std::string& path, std::int64_t h, std::int64_t w,
                   const std::vector<std::uint8_t>& rgb) {
  write_png(path, h, w, rgb, 3);
}

void write_png_gray(const std::string& path, std::int64_t h, std::int64_t w,
                    const std::vector<std::uint8_t>& gray) {
  write_png(path, h, w, gray, 1);
}

}  // namespace mer
