#pragma once

// Binary PPM (P6) / PGM (P5) with maxval 255.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hdmnet/tensor.hpp"

namespace hdmnet {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

// [3 x H x W] tensor with values in [0, 1] (clamped, rounded).
void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

// Min-max scales values to 0..255; a constant map becomes mid-grey (128).
GrayImage heatmap(std::span<const double> values, std::size_t height, std::size_t width);
// Binary mask to 0/255.
GrayImage mask_image(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width);

GrayImage read_pgm(const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

}  // namespace hdmnet
