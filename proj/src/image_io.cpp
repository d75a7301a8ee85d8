#include "hdmnet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace hdmnet {
namespace {

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return out;
}

// Header fields separated by whitespace, '#' comments allowed.
std::size_t read_header_value(std::istream& in) {
  in >> std::ws;
  while (in.peek() == '#') {
    std::string line;
    std::getline(in, line);
    in >> std::ws;
  }
  std::size_t v = 0;
  if (!(in >> v)) throw Error("malformed PNM header");
  return v;
}

std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, const char* magic,
                                   std::size_t channels, std::size_t& h, std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string m;
  in >> m;
  if (m != magic) throw Error(path.string() + ": expected " + magic + " file");
  w = read_header_value(in);
  h = read_header_value(in);
  const std::size_t maxval = read_header_value(in);
  if (maxval != 255) throw Error(path.string() + ": only maxval 255 is supported");
  in.get();
  std::vector<std::uint8_t> px(h * w * channels);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) {
    throw Error(path.string() + ": truncated pixel data");
  }
  return px;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3 x H x W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const auto v = image.data();
  std::vector<std::uint8_t> px(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = to_byte(v[c * h * w + i]);
  std::ofstream out = open_out(path);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.height * image.width) throw ShapeError("write_pgm: size mismatch");
  std::ofstream out = open_out(path);
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

GrayImage heatmap(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw ShapeError("heatmap: size mismatch");
  GrayImage img{height, width, std::vector<std::uint8_t>(values.size(), 128)};
  if (values.empty()) return img;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*hi > *lo) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      img.pixels[i] = to_byte((values[i] - *lo) / (*hi - *lo));
    }
  }
  return img;
}

GrayImage mask_image(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw ShapeError("mask_image: size mismatch");
  GrayImage img{height, width, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  GrayImage img;
  img.pixels = read_pnm(path, "P5", 1, img.height, img.width);
  return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  RgbImage img;
  img.pixels = read_pnm(path, "P6", 3, img.height, img.width);
  return img;
}

}  // namespace hdmnet
