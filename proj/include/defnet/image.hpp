#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "defnet/geometry.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

/// 8-bit interleaved RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {}

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3 +
               static_cast<std::size_t>(c)];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3 +
               static_cast<std::size_t>(c)];
  }
  void set(int x, int y, const std::uint8_t (&color)[3]) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int c = 0; c < 3; ++c) at(x, y, c) = color[c];
  }
  bool operator==(const Image&) const = default;
};

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write image " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing image " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open image " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  require(in && magic == "P6" && w > 0 && h > 0 && maxval == 255, ErrorCode::kMalformedFile,
          "image " + path + " is not an 8-bit binary PPM");
  in.get();  // single whitespace after the header
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  require(in.gcount() == static_cast<std::streamsize>(img.rgb.size()), ErrorCode::kMalformedFile,
          "image " + path + " is truncated");
  return img;
}

/// [channels, H, W] tensor with values in [-0.5, 0.5]. One channel averages RGB.
inline Tensor image_to_tensor(const Image& img, int channels = 3) {
  require(channels == 1 || channels == 3, ErrorCode::kInvalidArgument, "image channels must be 1 or 3");
  const auto H = static_cast<std::size_t>(img.height), W = static_cast<std::size_t>(img.width);
  Tensor t({static_cast<std::size_t>(channels), H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = (y * W + x) * 3;
      if (channels == 1) {
        t[y * W + x] = (img.rgb[p] + img.rgb[p + 1] + img.rgb[p + 2]) / (3.0 * 255.0) - 0.5;
      } else {
        for (std::size_t c = 0; c < 3; ++c) t[(c * H + y) * W + x] = img.rgb[p + c] / 255.0 - 0.5;
      }
    }
  }
  return t;
}

/// Bilinear crop of `box` resampled to out_h x out_w. Output pixel u samples
/// source x = x1 + (u + 0.5) * width/out_w - 0.5, so a box equal to the full
/// image at its own size reproduces the image exactly. Samples outside the
/// image replicate the border.
inline Tensor crop_and_warp(const Tensor& image, const BoundingBox& box, std::size_t out_h, std::size_t out_w) {
  require(image.rank() == 3, ErrorCode::kShapeMismatch, "crop_and_warp expects [C,H,W]");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const BoundingBox b = clamp_box(box, static_cast<double>(W), static_cast<double>(H));
  require(b.valid(), ErrorCode::kGeometry, "degenerate box " + box.str() + " after clamping to the image");
  Tensor out({C, out_h, out_w});
  const double sx = b.width() / static_cast<double>(out_w);
  const double sy = b.height() / static_cast<double>(out_h);
  const auto sample_axis = [](double s, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const double fl = std::floor(s);
    i0 = static_cast<std::size_t>(fl);
    i1 = std::min(i0 + 1, n - 1);
    f = s - fl;
  };
  for (std::size_t v = 0; v < out_h; ++v) {
    std::size_t y0, y1;
    double fy;
    sample_axis(b.y1 + (static_cast<double>(v) + 0.5) * sy - 0.5, H, y0, y1, fy);
    for (std::size_t u = 0; u < out_w; ++u) {
      std::size_t x0, x1;
      double fx;
      sample_axis(b.x1 + (static_cast<double>(u) + 0.5) * sx - 0.5, W, x0, x1, fx);
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = c * H * W;
        const double top = image[base + y0 * W + x0] * (1 - fx) + image[base + y0 * W + x1] * fx;
        const double bot = image[base + y1 * W + x0] * (1 - fx) + image[base + y1 * W + x1] * fx;
        out[(c * out_h + v) * out_w + u] = fy == 0.0 ? top : top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

}  // namespace defnet
