#ifndef FUSIONDET_SYNTH_HPP
#define FUSIONDET_SYNTH_HPP

#include <string>
#include <vector>

#include "fusiondet/common.hpp"
#include "fusiondet/dataset.hpp"
#include "fusiondet/image.hpp"

namespace fusiondet {

/// Seeded road-scene generator standing in for a recorded dataset. Target
/// objects are filled color-jittered rectangles and carry exact ground-truth
/// boxes; shadow quads and lane-marker segments are rendered as distractors
/// and carry none.
struct SynthConfig {
  Index width = 64;
  Index height = 64;
  Index min_objects = 1;
  Index max_objects = 3;
  double min_size = 14;
  double max_size = 32;
  double noise = 6.0;      // per-pixel uniform noise amplitude
  Index max_shadows = 2;   // 0 disables shadow distractors
  Index max_lane_markers = 2;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthScene {
  Image8 image;
  std::vector<Box> boxes;
  std::vector<int> class_ids;  // all 1 ("vehicle")
};

// Deterministic per (cfg.seed, index); bit-identical across runs.
SynthScene synth_scene(const SynthConfig& cfg, Index index);

// Renders n scenes as PNGs under out_dir and writes out_dir/manifest.jsonl;
// returns the loaded manifest.
DatasetManifest synth_generate(const SynthConfig& cfg, Index n, const std::string& out_dir);

inline const char* kSynthClassName = "vehicle";

}  // namespace fusiondet

#endif  // FUSIONDET_SYNTH_HPP
