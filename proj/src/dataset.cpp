#include "fusiondet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace fusiondet {

using nlohmann::json;

int DatasetManifest::class_id(const std::string& label) const {
  const auto it = std::find(class_names.begin(), class_names.end(), label);
  if (it == class_names.end()) {
    throw ValidationError("manifest: unknown class label '" + label + "'");
  }
  return static_cast<int>(it - class_names.begin()) + 1;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_manifest: cannot open " + path);
  DatasetManifest manifest;
  manifest.base_dir = std::filesystem::path(path).parent_path().string();

  std::set<std::string> seen_paths;
  std::set<std::string> labels;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("load_manifest: " + path + " line " + std::to_string(line_no) +
                            ": " + e.what());
    }
    ManifestRecord rec;
    if (!j.contains("image") || !j["image"].is_string()) {
      throw ValidationError("load_manifest: line " + std::to_string(line_no) +
                            " missing \"image\"");
    }
    rec.image = j["image"].get<std::string>();
    if (!seen_paths.insert(rec.image).second) {
      throw ValidationError("load_manifest: duplicate image path '" + rec.image + "'");
    }
    for (const auto& jb : j.value("boxes", json::array())) {
      Box b{jb.at("x").get<double>(), jb.at("y").get<double>(), jb.at("w").get<double>(),
            jb.at("h").get<double>()};
      if (!b.valid()) {
        throw ValidationError("load_manifest: record '" + rec.image +
                              "' has a box with non-positive size");
      }
      rec.boxes.push_back(b);
      const std::string label = jb.value("label", std::string("object"));
      rec.labels.push_back(label);
      labels.insert(label);
    }
    manifest.records.push_back(std::move(rec));
  }
  manifest.class_names.assign(labels.begin(), labels.end());
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_manifest: cannot open " + path + " for writing");
  for (const auto& rec : manifest.records) {
    json j;
    j["image"] = rec.image;
    json boxes = json::array();
    for (size_t i = 0; i < rec.boxes.size(); ++i) {
      const Box& b = rec.boxes[i];
      boxes.push_back({{"x", b.x},
                       {"y", b.y},
                       {"w", b.w},
                       {"h", b.h},
                       {"label", rec.labels[i]}});
    }
    j["boxes"] = std::move(boxes);
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("save_manifest: write failed for " + path);
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double train_fraction,
                                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split_dataset: train_fraction must lie in (0,1)");
  }
  std::vector<size_t> order(manifest.records.size());
  std::iota(order.begin(), order.end(), size_t(0));
  Rng rng = make_rng(seed, 0x73706c6974ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const size_t train_count = static_cast<size_t>(
      std::llround(train_fraction * static_cast<double>(manifest.records.size())));
  DatasetManifest train;
  DatasetManifest test;
  train.base_dir = test.base_dir = manifest.base_dir;
  train.class_names = test.class_names = manifest.class_names;
  for (size_t i = 0; i < order.size(); ++i) {
    (i < train_count ? train : test).records.push_back(manifest.records[order[i]]);
  }
  return {std::move(train), std::move(test)};
}

LoadedExample load_example(const DatasetManifest& manifest, size_t record_index, Index target_w,
                           Index target_h) {
  const ManifestRecord& rec = manifest.records.at(record_index);
  const std::filesystem::path full =
      manifest.base_dir.empty() ? std::filesystem::path(rec.image)
                                : std::filesystem::path(manifest.base_dir) / rec.image;
  Image8 raw = read_image(full.string());
  ResizeResult resized = resize_image(raw, rec.boxes, target_w, target_h);
  LoadedExample out;
  out.image = std::move(resized.image);
  out.boxes = std::move(resized.boxes);
  out.class_ids.reserve(rec.labels.size());
  for (const auto& label : rec.labels) out.class_ids.push_back(manifest.class_id(label));
  out.source = rec.image;
  return out;
}

}  // namespace fusiondet
