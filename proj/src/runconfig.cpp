#include "fusiondet/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fusiondet {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& section,
                  const std::set<std::string>& allowed) {
  if (!obj.is_object()) {
    throw ValidationError("config: section '" + section + "' must be an object");
  }
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key())) {
      throw ValidationError("config: unknown key '" + item.key() + "' in " + section);
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void read_range(const json& obj, const char* key, std::array<double, 2>& out) {
  if (!obj.contains(key)) return;
  const auto& a = obj.at(key);
  if (!a.is_array() || a.size() != 2) {
    throw ValidationError(std::string("config: '") + key + "' must be a [lo, hi] pair");
  }
  out = {a[0].get<double>(), a[1].get<double>()};
}

}  // namespace

void RunConfig::validate() const {
  backbone_config().validate();
  if (num_classes < 1) throw ValidationError("config: num_classes must be at least 1");
  if (static_cast<Index>(class_names.size()) != num_classes) {
    throw ValidationError("config: class_names must list exactly num_classes names");
  }
  if (fc_hidden < 1) throw ValidationError("config: fc_hidden must be at least 1");
  if (anchor_k < 1 && anchor_shapes.empty()) {
    throw ValidationError("config: anchors need k >= 1 or explicit shapes");
  }
  if (!(learning_rate > 0)) throw ValidationError("config: learning_rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ValidationError("config: momentum must lie in [0,1)");
  if (batch_size < 1) throw ValidationError("config: batch_size must be at least 1");
  if (iterations < 0) throw ValidationError("config: iterations must be non-negative");
  if (log_every < 1) throw ValidationError("config: log_every must be at least 1");
  if (!(positive_overlap[0] <= positive_overlap[1] &&
        negative_overlap[0] <= negative_overlap[1] &&
        negative_overlap[1] <= positive_overlap[0])) {
    throw ValidationError("config: overlap bands must be ordered and disjoint");
  }
  if (!(train_fraction > 0 && train_fraction < 1)) {
    throw ValidationError("config: train_fraction must lie in (0,1)");
  }
  augmentation.validate();
  synth.validate();
}

RunConfig default_run_config() { return RunConfig{}; }

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: parse error: ") + e.what());
  }
  require_keys(j, "config root",
               {"architecture", "anchors", "training", "detection", "augmentation", "synth",
                "seed"});
  RunConfig c;

  if (j.contains("architecture")) {
    const auto& a = j["architecture"];
    require_keys(a, "architecture",
                 {"block_filters", "width_scale", "input_height", "input_width",
                  "input_channels", "num_classes", "class_names", "fc_hidden"});
    if (a.contains("block_filters")) {
      const auto& f = a["block_filters"];
      if (!f.is_array() || f.size() != 5) {
        throw ValidationError("config: block_filters must list exactly 5 counts");
      }
      for (size_t i = 0; i < 5; ++i) c.block_filters[i] = f[i].get<Index>();
    }
    read(a, "width_scale", c.width_scale);
    read(a, "input_height", c.input_height);
    read(a, "input_width", c.input_width);
    read(a, "input_channels", c.input_channels);
    read(a, "num_classes", c.num_classes);
    read(a, "class_names", c.class_names);
    read(a, "fc_hidden", c.fc_hidden);
  }

  if (j.contains("anchors")) {
    const auto& a = j["anchors"];
    require_keys(a, "anchors", {"k", "shapes"});
    read(a, "k", c.anchor_k);
    if (a.contains("shapes")) {
      for (const auto& s : a["shapes"]) {
        if (!s.is_array() || s.size() != 2) {
          throw ValidationError("config: anchor shapes must be [w, h] pairs");
        }
        c.anchor_shapes.push_back({s[0].get<double>(), s[1].get<double>()});
      }
    }
  }

  if (j.contains("training")) {
    const auto& t = j["training"];
    require_keys(t, "training",
                 {"learning_rate", "momentum", "batch_size", "iterations", "log_every",
                  "positive_overlap", "negative_overlap", "rpn_batch", "rpn_positive_fraction",
                  "roi_batch", "roi_positive_fraction", "lambda_rpn", "lambda_rcnn",
                  "train_fraction"});
    read(t, "learning_rate", c.learning_rate);
    read(t, "momentum", c.momentum);
    read(t, "batch_size", c.batch_size);
    read(t, "iterations", c.iterations);
    read(t, "log_every", c.log_every);
    read_range(t, "positive_overlap", c.positive_overlap);
    read_range(t, "negative_overlap", c.negative_overlap);
    read(t, "rpn_batch", c.rpn_batch);
    read(t, "rpn_positive_fraction", c.rpn_positive_fraction);
    read(t, "roi_batch", c.roi_batch);
    read(t, "roi_positive_fraction", c.roi_positive_fraction);
    read(t, "lambda_rpn", c.lambda_rpn);
    read(t, "lambda_rcnn", c.lambda_rcnn);
    read(t, "train_fraction", c.train_fraction);
  }

  if (j.contains("detection")) {
    const auto& d = j["detection"];
    require_keys(d, "detection",
                 {"score_threshold", "nms_threshold", "proposal_nms_threshold",
                  "min_proposal_size", "pre_nms_top_n", "post_nms_top_n"});
    read(d, "score_threshold", c.score_threshold);
    read(d, "nms_threshold", c.detection_nms);
    read(d, "proposal_nms_threshold", c.proposal_nms);
    read(d, "min_proposal_size", c.min_proposal_size);
    read(d, "pre_nms_top_n", c.pre_nms_top_n);
    read(d, "post_nms_top_n", c.post_nms_top_n);
  }

  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    require_keys(a, "augmentation",
                 {"enabled", "darken_range", "brighten_range", "darken_probability"});
    read(a, "enabled", c.augment);
    std::array<double, 2> darken{c.augmentation.darken_lo, c.augmentation.darken_hi};
    std::array<double, 2> brighten{c.augmentation.brighten_lo, c.augmentation.brighten_hi};
    read_range(a, "darken_range", darken);
    read_range(a, "brighten_range", brighten);
    c.augmentation.darken_lo = darken[0];
    c.augmentation.darken_hi = darken[1];
    c.augmentation.brighten_lo = brighten[0];
    c.augmentation.brighten_hi = brighten[1];
    read(a, "darken_probability", c.augmentation.darken_probability);
  }

  if (j.contains("synth")) {
    const auto& s = j["synth"];
    require_keys(s, "synth",
                 {"width", "height", "min_objects", "max_objects", "min_size", "max_size",
                  "noise", "max_shadows", "max_lane_markers"});
    read(s, "width", c.synth.width);
    read(s, "height", c.synth.height);
    read(s, "min_objects", c.synth.min_objects);
    read(s, "max_objects", c.synth.max_objects);
    read(s, "min_size", c.synth.min_size);
    read(s, "max_size", c.synth.max_size);
    read(s, "noise", c.synth.noise);
    read(s, "max_shadows", c.synth.max_shadows);
    read(s, "max_lane_markers", c.synth.max_lane_markers);
  }

  read(j, "seed", c.seed);
  c.synth.seed = c.seed;
  c.validate();
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["architecture"] = {
      {"block_filters", c.block_filters}, {"width_scale", c.width_scale},
      {"input_height", c.input_height},   {"input_width", c.input_width},
      {"input_channels", c.input_channels}, {"num_classes", c.num_classes},
      {"class_names", c.class_names},       {"fc_hidden", c.fc_hidden}};
  json shapes = json::array();
  for (const auto& s : c.anchor_shapes) shapes.push_back({s.first, s.second});
  j["anchors"] = {{"k", c.anchor_k}, {"shapes", std::move(shapes)}};
  j["training"] = {{"learning_rate", c.learning_rate},
                   {"momentum", c.momentum},
                   {"batch_size", c.batch_size},
                   {"iterations", c.iterations},
                   {"log_every", c.log_every},
                   {"positive_overlap", c.positive_overlap},
                   {"negative_overlap", c.negative_overlap},
                   {"rpn_batch", c.rpn_batch},
                   {"rpn_positive_fraction", c.rpn_positive_fraction},
                   {"roi_batch", c.roi_batch},
                   {"roi_positive_fraction", c.roi_positive_fraction},
                   {"lambda_rpn", c.lambda_rpn},
                   {"lambda_rcnn", c.lambda_rcnn},
                   {"train_fraction", c.train_fraction}};
  j["detection"] = {{"score_threshold", c.score_threshold},
                    {"nms_threshold", c.detection_nms},
                    {"proposal_nms_threshold", c.proposal_nms},
                    {"min_proposal_size", c.min_proposal_size},
                    {"pre_nms_top_n", c.pre_nms_top_n},
                    {"post_nms_top_n", c.post_nms_top_n}};
  j["augmentation"] = {{"enabled", c.augment},
                       {"darken_range", {c.augmentation.darken_lo, c.augmentation.darken_hi}},
                       {"brighten_range", {c.augmentation.brighten_lo, c.augmentation.brighten_hi}},
                       {"darken_probability", c.augmentation.darken_probability}};
  j["synth"] = {{"width", c.synth.width},
                {"height", c.synth.height},
                {"min_objects", c.synth.min_objects},
                {"max_objects", c.synth.max_objects},
                {"min_size", c.synth.min_size},
                {"max_size", c.synth.max_size},
                {"noise", c.synth.noise},
                {"max_shadows", c.synth.max_shadows},
                {"max_lane_markers", c.synth.max_lane_markers}};
  j["seed"] = c.seed;
  return j.dump(2);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_run_config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

}  // namespace fusiondet
