#ifndef FUSIONDET_IMAGE_HPP
#define FUSIONDET_IMAGE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

/// 8-bit interleaved RGB raster.
struct Image8 {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // height*width*3, row-major

  Image8() = default;
  Image8(Index w, Index h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<size_t>(w * h * 3), fill) {}

  std::uint8_t& at(Index x, Index y, Index c) {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(Index x, Index y, Index c) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  bool empty() const { return pixels.empty(); }
};

// PNG (8-bit RGB) is the interchange format; binary PPM (P6) is accepted for
// tests. read_image dispatches on the file magic.
Image8 read_image(const std::string& path);
void write_png(const std::string& path, const Image8& image);
void write_ppm(const std::string& path, const Image8& image);

struct ResizeResult {
  Image8 image;
  std::vector<Box> boxes;
};

/// Direct bilinear resample to target dims (aspect ratio not preserved);
/// boxes are scaled by the same per-axis factors.
ResizeResult resize_image(const Image8& image, const std::vector<Box>& boxes, Index target_w,
                          Index target_h);

struct AugmentationConfig {
  double darken_lo = 0.5;
  double darken_hi = 1.0;
  double brighten_lo = 1.0;
  double brighten_hi = 1.5;
  double darken_probability = 0.5;  // chance of the darkening branch

  void validate() const {
    if (!(darken_lo > 0 && darken_lo <= darken_hi) ||
        !(brighten_lo > 0 && brighten_lo <= brighten_hi)) {
      throw ContractError("AugmentationConfig: ranges must be ordered and positive");
    }
    if (!(darken_probability >= 0 && darken_probability <= 1)) {
      throw ContractError("AugmentationConfig: probability must lie in [0,1]");
    }
  }
};

/// One multiplicative brightness factor per image, drawn from the darken or
/// brighten range; results are clamped to [0,255]. Boxes and dims are
/// untouched. Deterministic per seed.
Image8 augment_brightness(const Image8& image, const AugmentationConfig& cfg, std::uint64_t seed);

void draw_box_outline(Image8& image, const Box& box, std::uint8_t r, std::uint8_t g,
                      std::uint8_t b);

// Network input convention: pixel intensities scaled to [0,1].
template <typename Scalar>
Tensor4<Scalar> to_tensor(const Image8& image) {
  Tensor4<Scalar> t(1, image.height, image.width, 3);
  for (Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<Scalar>(image.pixels[static_cast<size_t>(i)]) / Scalar(255);
  }
  return t;
}

}  // namespace fusiondet

#endif  // FUSIONDET_IMAGE_HPP
