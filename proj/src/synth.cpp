#include "fusiondet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace fusiondet {

namespace {

void fill_rect(Image8& img, Index x0, Index y0, Index x1, Index y1, int r, int g, int b) {
  x0 = std::clamp<Index>(x0, 0, img.width);
  x1 = std::clamp<Index>(x1, 0, img.width);
  y0 = std::clamp<Index>(y0, 0, img.height);
  y1 = std::clamp<Index>(y1, 0, img.height);
  for (Index y = y0; y < y1; ++y) {
    for (Index x = x0; x < x1; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>(std::clamp(r, 0, 255));
      img.at(x, y, 1) = static_cast<std::uint8_t>(std::clamp(g, 0, 255));
      img.at(x, y, 2) = static_cast<std::uint8_t>(std::clamp(b, 0, 255));
    }
  }
}

void blend_rect(Image8& img, Index x0, Index y0, Index x1, Index y1, double factor) {
  x0 = std::clamp<Index>(x0, 0, img.width);
  x1 = std::clamp<Index>(x1, 0, img.width);
  y0 = std::clamp<Index>(y0, 0, img.height);
  y1 = std::clamp<Index>(y1, 0, img.height);
  for (Index y = y0; y < y1; ++y) {
    for (Index x = x0; x < x1; ++x) {
      for (Index c = 0; c < 3; ++c) {
        img.at(x, y, c) = static_cast<std::uint8_t>(
            std::clamp(std::llround(img.at(x, y, c) * factor), 0ll, 255ll));
      }
    }
  }
}

// Saturated body colors; grayscale is reserved for road, shadows and lane
// markers so color is the cue separating vehicles from distractors.
constexpr int kPalette[][3] = {
    {200, 40, 40}, {40, 70, 200}, {30, 160, 60},  {210, 170, 30},
    {30, 170, 180}, {180, 50, 170}, {230, 110, 30}, {120, 40, 200},
};

}  // namespace

void SynthConfig::validate() const {
  if (width < 16 || height < 16) throw ContractError("SynthConfig: scene dims too small");
  if (min_objects < 0 || max_objects < min_objects) {
    throw ContractError("SynthConfig: object count range is invalid");
  }
  if (!(min_size > 0 && min_size <= max_size)) {
    throw ContractError("SynthConfig: object size range is invalid");
  }
  if (noise < 0) throw ContractError("SynthConfig: noise must be non-negative");
}

SynthScene synth_scene(const SynthConfig& cfg, Index index) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, mix_seed(0x7363656eULL, static_cast<std::uint64_t>(index)));
  std::uniform_int_distribution<int> base_gray(78, 110);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SynthScene scene;
  scene.image = Image8(cfg.width, cfg.height);
  const int road = base_gray(rng);
  fill_rect(scene.image, 0, 0, cfg.width, cfg.height, road, road, road);

  // Lane markers: thin bright dashes, horizontal or vertical.
  std::uniform_int_distribution<Index> lane_count(0, cfg.max_lane_markers);
  const Index lanes = lane_count(rng);
  for (Index i = 0; i < lanes; ++i) {
    const bool horizontal = unit(rng) < 0.5;
    const int bright = 190 + static_cast<int>(unit(rng) * 50);
    const Index thickness = 1 + static_cast<Index>(unit(rng) * 2);
    if (horizontal) {
      const Index y = static_cast<Index>(unit(rng) * static_cast<double>(cfg.height - 2));
      Index x = static_cast<Index>(unit(rng) * 8);
      while (x < cfg.width) {
        const Index len = 6 + static_cast<Index>(unit(rng) * 8);
        fill_rect(scene.image, x, y, x + len, y + thickness, bright, bright, bright);
        x += len + 5 + static_cast<Index>(unit(rng) * 6);
      }
    } else {
      const Index x = static_cast<Index>(unit(rng) * static_cast<double>(cfg.width - 2));
      Index y = static_cast<Index>(unit(rng) * 8);
      while (y < cfg.height) {
        const Index len = 6 + static_cast<Index>(unit(rng) * 8);
        fill_rect(scene.image, x, y, x + thickness, y + len, bright, bright, bright);
        y += len + 5 + static_cast<Index>(unit(rng) * 6);
      }
    }
  }

  // Shadow distractors: low-contrast dark quads, vehicle-sized, no box.
  std::uniform_int_distribution<Index> shadow_count(0, cfg.max_shadows);
  const Index shadows = shadow_count(rng);
  for (Index i = 0; i < shadows; ++i) {
    const double w = cfg.min_size + unit(rng) * (cfg.max_size - cfg.min_size);
    const double h = w * (0.6 + unit(rng) * 1.0);
    const Index x = static_cast<Index>(unit(rng) * std::max(1.0, cfg.width - w));
    const Index y = static_cast<Index>(unit(rng) * std::max(1.0, cfg.height - h));
    blend_rect(scene.image, x, y, x + static_cast<Index>(w), y + static_cast<Index>(h),
               0.55 + unit(rng) * 0.2);
  }

  // Target objects: placed with bounded retries, limited mutual overlap.
  std::uniform_int_distribution<Index> object_count(cfg.min_objects, cfg.max_objects);
  const Index objects = object_count(rng);
  for (Index i = 0; i < objects; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      // Crowded scenes shrink the draw toward min_size as attempts mount.
      const double upper =
          cfg.max_size - (cfg.max_size - cfg.min_size) * (attempt / 200.0);
      const double w = cfg.min_size + unit(rng) * (upper - cfg.min_size);
      const double aspect = 0.75 + unit(rng) * 0.6;
      const double h = std::clamp(w * aspect, cfg.min_size, upper);
      const double max_x = static_cast<double>(cfg.width) - w - 2.0;
      const double max_y = static_cast<double>(cfg.height) - h - 2.0;
      if (max_x < 1.0 || max_y < 1.0) continue;
      Box candidate{1.0 + unit(rng) * max_x, 1.0 + unit(rng) * max_y, w, h};
      // Targets stay near-disjoint so per-object detections are separable.
      bool overlaps = false;
      for (const Box& existing : scene.boxes) {
        if (iou(candidate, existing) > 0.08) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;

      candidate.x = std::floor(candidate.x);
      candidate.y = std::floor(candidate.y);
      candidate.w = std::floor(candidate.w);
      candidate.h = std::floor(candidate.h);
      const auto& color = kPalette[rng() % (sizeof(kPalette) / sizeof(kPalette[0]))];
      std::uniform_int_distribution<int> jitter(-25, 25);
      const int r = color[0] + jitter(rng);
      const int g = color[1] + jitter(rng);
      const int b = color[2] + jitter(rng);
      const Index x0 = static_cast<Index>(candidate.x);
      const Index y0 = static_cast<Index>(candidate.y);
      const Index x1 = x0 + static_cast<Index>(candidate.w);
      const Index y1 = y0 + static_cast<Index>(candidate.h);
      fill_rect(scene.image, x0, y0, x1, y1, r, g, b);
      // Darker outline and a lighter windshield stripe for texture.
      fill_rect(scene.image, x0, y0, x1, y0 + 1, r / 2, g / 2, b / 2);
      fill_rect(scene.image, x0, y1 - 1, x1, y1, r / 2, g / 2, b / 2);
      fill_rect(scene.image, x0, y0, x0 + 1, y1, r / 2, g / 2, b / 2);
      fill_rect(scene.image, x1 - 1, y0, x1, y1, r / 2, g / 2, b / 2);
      const Index stripe_y0 = y0 + std::max<Index>(1, (y1 - y0) / 5);
      const Index stripe_y1 = stripe_y0 + std::max<Index>(1, (y1 - y0) / 6);
      fill_rect(scene.image, x0 + 1, stripe_y0, x1 - 1, stripe_y1, std::min(255, r + 60),
                std::min(255, g + 60), std::min(255, b + 60));

      scene.boxes.push_back(candidate);
      scene.class_ids.push_back(1);
      placed = true;
    }
    if (!placed) {
      throw GenerationError("synth_scene: could not place object " + std::to_string(i) +
                            " after bounded retries (scene " + std::to_string(index) + ")");
    }
  }

  if (cfg.noise > 0) {
    std::uniform_int_distribution<int> noise(-static_cast<int>(cfg.noise),
                                             static_cast<int>(cfg.noise));
    for (auto& p : scene.image.pixels) {
      p = static_cast<std::uint8_t>(std::clamp(static_cast<int>(p) + noise(rng), 0, 255));
    }
  }
  return scene;
}

DatasetManifest synth_generate(const SynthConfig& cfg, Index n, const std::string& out_dir) {
  if (n < 1) throw ContractError("synth_generate: n must be at least 1");
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  manifest.class_names = {kSynthClassName};
  for (Index i = 0; i < n; ++i) {
    SynthScene scene = synth_scene(cfg, i);
    char name[64];
    std::snprintf(name, sizeof(name), "scene_%06lld.png", static_cast<long long>(i));
    write_png((std::filesystem::path(out_dir) / name).string(), scene.image);
    ManifestRecord rec;
    rec.image = name;
    rec.boxes = scene.boxes;
    rec.labels.assign(scene.boxes.size(), kSynthClassName);
    manifest.records.push_back(std::move(rec));
  }
  save_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.jsonl").string());
  return manifest;
}

}  // namespace fusiondet
