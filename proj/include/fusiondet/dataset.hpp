#ifndef FUSIONDET_DATASET_HPP
#define FUSIONDET_DATASET_HPP

#include <string>
#include <utility>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/image.hpp"

namespace fusiondet {

struct ManifestRecord {
  std::string image;  // path relative to the manifest directory
  std::vector<Box> boxes;
  std::vector<std::string> labels;  // parallel to boxes
};

/// Labeled-image index. The manifest file is UTF-8 JSON Lines, one object
/// per line:
///   {"image": "<relative path>", "boxes": [{"x":..,"y":..,"w":..,"h":..,
///    "label": "<class>"}]}
/// Coordinates are source-image pixels, top-left origin. class_names is the
/// sorted set of labels; class ids are 1-based in that order (0 is
/// background).
struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> class_names;
  std::string base_dir;

  int class_id(const std::string& label) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// Seeded shuffle then split; the two halves are disjoint and exhaustive.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double train_fraction,
                                                          std::uint64_t seed);

/// A record with pixels materialized, resized to the network input dims and
/// boxes scaled along.
struct LoadedExample {
  Image8 image;
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::string source;  // original image path (diagnostics)
};

LoadedExample load_example(const DatasetManifest& manifest, size_t record_index, Index target_w,
                           Index target_h);

}  // namespace fusiondet

#endif  // FUSIONDET_DATASET_HPP
