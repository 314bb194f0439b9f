#ifndef FUSIONDET_RUNCONFIG_HPP
#define FUSIONDET_RUNCONFIG_HPP

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "fusiondet/backbone.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/image.hpp"
#include "fusiondet/synth.hpp"

namespace fusiondet {

/// Full run configuration. Defaults reproduce the reference training setup:
/// learning rate 1e-3, momentum 0.9, batch 20, log every 20 iterations,
/// overlap bands [0.6,1.0]/[0,0.3], brightness ranges [0.5,1.0]/[1.0,1.5],
/// 224x224x3 input, 80/20 split. The JSON form rejects unknown keys.
struct RunConfig {
  // architecture
  std::array<Index, 5> block_filters{64, 128, 256, 512, 512};
  double width_scale = 1.0;
  Index input_height = 224;
  Index input_width = 224;
  Index input_channels = 3;
  Index num_classes = 1;
  std::vector<std::string> class_names{"vehicle"};  // 1-based ids follow this order
  Index fc_hidden = 256;

  // anchors
  Index anchor_k = 5;
  std::vector<std::pair<double, double>> anchor_shapes;  // explicit override of estimation

  // training
  double learning_rate = 1e-3;
  double momentum = 0.9;
  Index batch_size = 20;
  Index iterations = 1000;
  Index log_every = 20;
  std::array<double, 2> positive_overlap{0.6, 1.0};
  std::array<double, 2> negative_overlap{0.0, 0.3};
  Index rpn_batch = 128;
  double rpn_positive_fraction = 0.5;
  Index roi_batch = 64;
  double roi_positive_fraction = 0.25;
  double lambda_rpn = 1.0;
  double lambda_rcnn = 1.0;
  double train_fraction = 0.8;

  // detection
  double score_threshold = 0.5;
  double detection_nms = 0.3;
  double proposal_nms = 0.7;
  double min_proposal_size = 2.0;
  Index pre_nms_top_n = 600;
  Index post_nms_top_n = 100;

  // augmentation
  bool augment = true;
  AugmentationConfig augmentation;

  // synthetic data source
  SynthConfig synth;

  std::uint64_t seed = 1;

  BackboneConfig backbone_config() const {
    BackboneConfig c;
    c.block_filters = block_filters;
    c.width_scale = width_scale;
    c.input_height = input_height;
    c.input_width = input_width;
    c.input_channels = input_channels;
    return c;
  }

  void validate() const;
};

RunConfig default_run_config();

// Strict parse: any unrecognized key is a validation error naming the key.
RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::string& path);

}  // namespace fusiondet

#endif  // FUSIONDET_RUNCONFIG_HPP
