#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "holdfield/geometry.hpp"

namespace holdfield {

// 8-bit image, 1 (gray/label) or 3 (RGB) channels, row-major from the top.
struct ImageU8 {
  int width = 0, height = 0, channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t& at(int x, int y, int c = 0) {
    return pixels[((size_t)y * width + x) * channels + c];
  }
  uint8_t at(int x, int y, int c = 0) const {
    return pixels[((size_t)y * width + x) * channels + c];
  }
};

void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_png(const std::string& path);

inline uint8_t to_u8(double v) {
  const int q = (int)std::lround(v * 255.0);
  return (uint8_t)std::clamp(q, 0, 255);
}
inline double from_u8(uint8_t v) { return v / 255.0; }

// Single-channel float map (PFM, grayscale, little-endian).
void save_pfm(const std::string& path, int width, int height, const std::vector<double>& values);
std::vector<double> load_pfm(const std::string& path, int& width, int& height);

// Point cloud as binary little-endian PLY with float x/y/z.
void save_ply(const std::string& path, const std::vector<Vec3>& points);
std::vector<Vec3> load_ply(const std::string& path);

}  // namespace holdfield
