#include "fusiondet/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <png.h>

namespace fusiondet {

namespace {

Image8 read_ppm(std::ifstream& in, const std::string& path) {
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("read_image: unsupported PPM variant in " + path);
  auto next_token = [&]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    throw IoError("read_image: truncated PPM header in " + path);
  };
  const long w = std::stol(next_token());
  const long h = std::stol(next_token());
  const long maxval = std::stol(next_token());
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw IoError("read_image: bad PPM header in " + path);
  }
  in.get();  // single whitespace after maxval
  Image8 img(static_cast<Index>(w), static_cast<Index>(h));
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw IoError("read_image: truncated PPM data in " + path);
  }
  return img;
}

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

Image8 read_png(const std::string& path) {
  PngReadCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "rb");
  if (!ctx.fp) throw IoError("read_image: cannot open " + path);
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw IoError("read_image: libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw IoError("read_image: libpng failed to decode " + path);
  }
  png_init_io(ctx.png, ctx.fp);
  png_read_info(ctx.png, ctx.info);

  png_set_palette_to_rgb(ctx.png);
  png_set_expand_gray_1_2_4_to_8(ctx.png);
  if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(ctx.png);
  if (png_get_bit_depth(ctx.png, ctx.info) == 16) png_set_strip_16(ctx.png);
  const png_byte color = png_get_color_type(ctx.png, ctx.info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(ctx.png);
  }
  png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  const Index w = static_cast<Index>(png_get_image_width(ctx.png, ctx.info));
  const Index h = static_cast<Index>(png_get_image_height(ctx.png, ctx.info));
  Image8 img(w, h);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (Index y = 0; y < h; ++y) {
    rows[static_cast<size_t>(y)] = img.pixels.data() + y * w * 3;
  }
  png_read_image(ctx.png, rows.data());
  return img;
}

}  // namespace

Image8 read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_image: cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in) throw IoError("read_image: empty file " + path);
  if (magic[0] == 'P' && magic[1] == '6') {
    in.seekg(0);
    return read_ppm(in, path);
  }
  if (static_cast<unsigned char>(magic[0]) == 0x89 && magic[1] == 'P') {
    in.close();
    return read_png(path);
  }
  throw IoError("read_image: unknown image format in " + path);
}

void write_ppm(const std::string& path, const Image8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_ppm: cannot open " + path + " for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write_ppm: write failed for " + path);
}

namespace {
struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngWriteCloser() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};
}  // namespace

void write_png(const std::string& path, const Image8& image) {
  PngWriteCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (!ctx.fp) throw IoError("write_png: cannot open " + path + " for writing");
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw IoError("write_png: libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw IoError("write_png: libpng failed to encode " + path);
  }
  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  for (Index y = 0; y < image.height; ++y) {
    png_write_row(ctx.png, const_cast<png_bytep>(image.pixels.data() + y * image.width * 3));
  }
  png_write_end(ctx.png, nullptr);
}

ResizeResult resize_image(const Image8& image, const std::vector<Box>& boxes, Index target_w,
                          Index target_h) {
  if (target_w <= 0 || target_h <= 0) {
    throw ContractError("resize_image: target dims must be positive");
  }
  if (image.empty()) throw ContractError("resize_image: empty image");
  ResizeResult out;
  out.image = Image8(target_w, target_h);
  const double sx = static_cast<double>(image.width) / static_cast<double>(target_w);
  const double sy = static_cast<double>(image.height) / static_cast<double>(target_h);
  for (Index y = 0; y < target_h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const Index y0 = std::clamp<Index>(static_cast<Index>(std::floor(fy)), 0, image.height - 1);
    const Index y1 = std::min<Index>(y0 + 1, image.height - 1);
    const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
    for (Index x = 0; x < target_w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const Index x0 = std::clamp<Index>(static_cast<Index>(std::floor(fx)), 0, image.width - 1);
      const Index x1 = std::min<Index>(x0 + 1, image.width - 1);
      const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
      for (Index c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * image.at(x0, y0, c) + wx * image.at(x1, y0, c);
        const double bot = (1.0 - wx) * image.at(x0, y1, c) + wx * image.at(x1, y1, c);
        const double v = (1.0 - wy) * top + wy * bot;
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::llround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  const double bx = static_cast<double>(target_w) / static_cast<double>(image.width);
  const double by = static_cast<double>(target_h) / static_cast<double>(image.height);
  out.boxes.reserve(boxes.size());
  for (const Box& b : boxes) {
    out.boxes.push_back(Box{b.x * bx, b.y * by, b.w * bx, b.h * by});
  }
  return out;
}

Image8 augment_brightness(const Image8& image, const AugmentationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, 0x627269ULL);
  std::uniform_real_distribution<double> pick(0.0, 1.0);
  double factor;
  if (pick(rng) < cfg.darken_probability) {
    factor = std::uniform_real_distribution<double>(cfg.darken_lo, cfg.darken_hi)(rng);
  } else {
    factor = std::uniform_real_distribution<double>(cfg.brighten_lo, cfg.brighten_hi)(rng);
  }
  Image8 out = image;
  for (auto& p : out.pixels) {
    p = static_cast<std::uint8_t>(
        std::clamp(std::llround(static_cast<double>(p) * factor), 0ll, 255ll));
  }
  return out;
}

void draw_box_outline(Image8& image, const Box& box, std::uint8_t r, std::uint8_t g,
                      std::uint8_t b) {
  const Index x0 = std::clamp<Index>(static_cast<Index>(std::llround(box.x)), 0, image.width - 1);
  const Index y0 = std::clamp<Index>(static_cast<Index>(std::llround(box.y)), 0, image.height - 1);
  const Index x1 =
      std::clamp<Index>(static_cast<Index>(std::llround(box.x + box.w)) - 1, 0, image.width - 1);
  const Index y1 =
      std::clamp<Index>(static_cast<Index>(std::llround(box.y + box.h)) - 1, 0, image.height - 1);
  for (Index x = x0; x <= x1; ++x) {
    image.at(x, y0, 0) = r;
    image.at(x, y0, 1) = g;
    image.at(x, y0, 2) = b;
    image.at(x, y1, 0) = r;
    image.at(x, y1, 1) = g;
    image.at(x, y1, 2) = b;
  }
  for (Index y = y0; y <= y1; ++y) {
    image.at(x0, y, 0) = r;
    image.at(x0, y, 1) = g;
    image.at(x0, y, 2) = b;
    image.at(x1, y, 0) = r;
    image.at(x1, y, 1) = g;
    image.at(x1, y, 2) = b;
  }
}

}  // namespace fusiondet
