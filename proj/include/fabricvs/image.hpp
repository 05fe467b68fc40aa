#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fabricvs {

/// Row-major grayscale image with intensities in [0, 1].
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  double pitch_mm = 1.0;  // mm per pixel at the table plane
  std::vector<double> data;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), data(w * h, fill) {}

  [[nodiscard]] double& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  [[nodiscard]] double at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  [[nodiscard]] bool empty() const { return data.empty(); }
  [[nodiscard]] double mean() const;
};

/// Binary PGM (P5, maxval 255). Values are quantized on write.
void write_pgm(const std::string& path, const GrayImage& img);
GrayImage read_pgm(const std::string& path);

/// Sum of squared per-pixel differences.
double ssd(const GrayImage& a, const GrayImage& b);

}  // namespace fabricvs
