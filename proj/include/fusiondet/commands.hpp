#ifndef FUSIONDET_COMMANDS_HPP
#define FUSIONDET_COMMANDS_HPP

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fusiondet/common.hpp"
#include "fusiondet/dataset.hpp"
#include "fusiondet/loss.hpp"
#include "fusiondet/model.hpp"
#include "fusiondet/runconfig.hpp"
#include "fusiondet/trainer.hpp"

namespace fusiondet {

// Exit code convention: 0 success, 1 usage, 2 data/validation, 3 numeric.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

int exit_code_for(const std::exception& e);

// Anchor text file: one "w h" pair per line, full double precision.
void save_anchor_file(const AnchorSet& anchors, const std::string& path);
AnchorSet load_anchor_file(const std::string& path, double stride = 32.0);

/// A preprocessed training example: pixels resized to the network input,
/// boxes in input coordinates.
struct TrainingExample {
  Image8 image;
  std::vector<Box> boxes;
  std::vector<int> class_ids;
};

struct TrainLoopResult {
  LossBreakdown first;
  LossBreakdown last;
};

/// Deterministic training loop from iteration `iteration` (in-out) up to
/// end_iteration. All randomness derives from (config.seed, global sample
/// index or iteration), so resuming from a checkpoint at any iteration
/// boundary replays the exact uninterrupted trajectory.
TrainLoopResult run_training_loop(DetectorModel<float>& model, SgdmState<float>& state,
                                  std::uint64_t& iteration,
                                  const std::vector<TrainingExample>& data,
                                  const RunConfig& config, Index end_iteration,
                                  const LogSink& log);

TrainSettings train_settings_from(const RunConfig& config);
DetectConfig detect_config_from(const RunConfig& config);

std::vector<TrainingExample> examples_from_manifest(const DatasetManifest& manifest,
                                                    const RunConfig& config);

struct EstimateAnchorsOptions {
  std::string manifest;
  Index k = 5;
  std::uint64_t seed = 1;
  std::string out;
};
int cmd_estimate_anchors(const EstimateAnchorsOptions& opt, std::ostream& os);

struct SynthOptions {
  std::string config;  // optional config path
  std::string out_dir;
  Index count = 100;
  std::optional<std::uint64_t> seed;
};
int cmd_synth(const SynthOptions& opt, std::ostream& os);

struct TrainOptions {
  std::string config;             // optional config path
  std::string manifest;           // one of manifest / synth_count
  Index synth_count = 0;          // > 0 generates scenes under <out>.synth/
  std::string out;                // checkpoint path
  std::string resume;             // optional checkpoint to continue from
  std::string emit_test_manifest; // optional path for the held-out split
  std::optional<std::uint64_t> seed;
};
int cmd_train(const TrainOptions& opt, std::ostream& os);

struct DetectOptions {
  std::string checkpoint;
  std::string image;  // one of image / dir
  std::string dir;
  std::string out;      // detection JSONL
  std::string annotate; // optional directory for annotated copies
};
int cmd_detect(const DetectOptions& opt, std::ostream& os);

struct EvalOptions {
  std::string checkpoint;
  std::string manifest;
  double iou_threshold = 0.5;
  std::string out;  // report JSON
};
int cmd_eval(const EvalOptions& opt, std::ostream& os);

struct GradcheckOptions {
  std::string scale = "tiny";
  std::uint64_t seed = 1;
};
int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& os);

}  // namespace fusiondet

#endif  // FUSIONDET_COMMANDS_HPP
