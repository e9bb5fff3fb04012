#pragma once

#include "medvill/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace medvill {

/// Single-channel intensity grid, row-major, values in [0, 1].
struct ImageGrid {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  ImageGrid() = default;
  ImageGrid(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const ImageGrid&) const = default;
};

/// Binary PGM (P5, maxval 255).
inline std::string encode_pgm(const ImageGrid& img) {
  std::ostringstream out;
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::string body(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0);
    body[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out << body;
  return out.str();
}

inline ImageGrid decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P5" || !in || w <= 0 || h <= 0 || maxval != 255) throw DataError("not a P5/255 PGM image");
  in.get();
  ImageGrid img(h, w);
  for (auto& p : img.pixels) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw DataError("truncated PGM payload");
    p = static_cast<double>(c) / 255.0;
  }
  return img;
}

inline void write_pgm(const std::string& path, const ImageGrid& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path);
  out << encode_pgm(img);
  if (!out) throw DataError("failed writing image " + path);
}

inline ImageGrid read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read image " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return decode_pgm(buf.str());
}

/// 8-bit quantisation as stored on disk; studies are generated pre-quantised
/// so in-memory and reloaded images agree exactly.
inline double quantize_intensity(double v) { return static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0; }

}  // namespace medvill
