#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fusiondet/checkpoint.hpp"
#include "fusiondet/commands.hpp"
#include "fusiondet/runconfig.hpp"
#include "fusiondet/synth.hpp"

using namespace fusiondet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fusiondet_ckpt_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Desk-scale config for fast training in tests.
RunConfig tiny_config() {
  RunConfig c;
  c.width_scale = 1.0 / 16.0;
  c.input_height = 32;
  c.input_width = 32;
  c.fc_hidden = 16;
  c.anchor_k = 2;
  c.batch_size = 2;
  c.iterations = 8;
  c.log_every = 2;
  c.rpn_batch = 16;
  c.roi_batch = 8;
  c.pre_nms_top_n = 12;
  c.post_nms_top_n = 6;
  c.synth.width = 32;
  c.synth.height = 32;
  c.synth.min_objects = 1;
  c.synth.max_objects = 2;
  c.synth.min_size = 8;
  c.synth.max_size = 14;
  c.seed = 4;
  c.synth.seed = 4;
  return c;
}

std::vector<TrainingExample> tiny_dataset(const RunConfig& config, Index n) {
  std::vector<TrainingExample> data;
  for (Index i = 0; i < n; ++i) {
    const SynthScene scene = synth_scene(config.synth, i);
    data.push_back(TrainingExample{scene.image, scene.boxes, scene.class_ids});
  }
  return data;
}

struct TrainedState {
  DetectorModel<float> model;
  SgdmState<float> state;
  std::uint64_t iteration = 0;
  std::string log;
};

TrainedState train_fresh(const RunConfig& config, const std::vector<TrainingExample>& data,
                         Index end_iteration) {
  TrainedState out;
  AnchorSet anchors;
  anchors.shapes = {{9, 9}, {13, 11}};
  anchors.stride = 32;
  out.model = make_detector_model<float>(config.backbone_config(), config.num_classes,
                                         config.fc_hidden, anchors, config.seed);
  out.state = make_sgdm_state(out.model, static_cast<float>(config.learning_rate),
                              static_cast<float>(config.momentum));
  run_training_loop(out.model, out.state, out.iteration, data, config, end_iteration,
                    [&](const std::string& line) { out.log += line + "\n"; });
  return out;
}

}  // namespace

TEST_CASE("default config reproduces the documented training parameters") {
  const RunConfig c = default_run_config();
  CHECK(c.learning_rate == doctest::Approx(1e-3));
  CHECK(c.momentum == doctest::Approx(0.9));
  CHECK(c.batch_size == 20);
  CHECK(c.log_every == 20);
  CHECK(c.positive_overlap[0] == doctest::Approx(0.6));
  CHECK(c.positive_overlap[1] == doctest::Approx(1.0));
  CHECK(c.negative_overlap[0] == doctest::Approx(0.0));
  CHECK(c.negative_overlap[1] == doctest::Approx(0.3));
  CHECK(c.augmentation.darken_lo == doctest::Approx(0.5));
  CHECK(c.augmentation.darken_hi == doctest::Approx(1.0));
  CHECK(c.augmentation.brighten_lo == doctest::Approx(1.0));
  CHECK(c.augmentation.brighten_hi == doctest::Approx(1.5));
  CHECK(c.input_height == 224);
  CHECK(c.input_width == 224);
  CHECK(c.input_channels == 3);
  CHECK(c.train_fraction == doctest::Approx(0.8));
  CHECK(c.block_filters == std::array<Index, 5>{64, 128, 256, 512, 512});
}

TEST_CASE("config JSON round-trip preserves every default") {
  const RunConfig c = default_run_config();
  const RunConfig back = run_config_from_json(run_config_to_json(c));
  CHECK(run_config_to_json(back) == run_config_to_json(c));
  CHECK(back.learning_rate == c.learning_rate);
  CHECK(back.momentum == c.momentum);
  CHECK(back.batch_size == c.batch_size);
  CHECK(back.log_every == c.log_every);
  CHECK(back.positive_overlap == c.positive_overlap);
  CHECK(back.negative_overlap == c.negative_overlap);
}

TEST_CASE("config parsing rejects unknown keys, naming them") {
  CHECK_THROWS_WITH_AS(run_config_from_json(R"({"trainnig": {}})"),
                       doctest::Contains("trainnig"), ValidationError);
  CHECK_THROWS_WITH_AS(run_config_from_json(R"({"training": {"learning_rte": 0.1}})"),
                       doctest::Contains("learning_rte"), ValidationError);
}

TEST_CASE("config parsing accepts partial overrides") {
  const RunConfig c = run_config_from_json(
      R"({"training": {"batch_size": 4}, "architecture": {"width_scale": 0.125,
          "input_height": 64, "input_width": 64}})");
  CHECK(c.batch_size == 4);
  CHECK(c.width_scale == doctest::Approx(0.125));
  CHECK(c.learning_rate == doctest::Approx(1e-3));  // untouched default
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  const auto dir = temp_dir("roundtrip");
  const RunConfig config = tiny_config();
  const auto data = tiny_dataset(config, 6);
  TrainedState trained = train_fresh(config, data, 4);

  const std::string path_a = (dir / "a.ckpt").string();
  save_checkpoint(path_a, trained.model, trained.state, trained.iteration, config);
  LoadedCheckpoint<float> loaded = load_checkpoint<float>(path_a);
  CHECK(loaded.iteration == trained.iteration);
  const std::string path_b = (dir / "b.ckpt").string();
  save_checkpoint(path_b, loaded.model, loaded.state, loaded.iteration, loaded.config);
  CHECK(file_bytes(path_a) == file_bytes(path_b));
}

TEST_CASE("checkpoint: corrupt magic fails naming the format version") {
  const auto dir = temp_dir("corrupt");
  const std::string path = (dir / "bad.ckpt").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACHECKPOINT";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(path), doctest::Contains("format version"),
                       ValidationError);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("resume from a checkpoint replays the uninterrupted trajectory bit-for-bit") {
  const auto dir = temp_dir("resume");
  const RunConfig config = tiny_config();
  const auto data = tiny_dataset(config, 6);

  // Uninterrupted: 8 iterations.
  TrainedState full = train_fresh(config, data, 8);

  // Interrupted: 4 iterations, checkpoint, reload, 4 more.
  TrainedState half = train_fresh(config, data, 4);
  const std::string path = (dir / "half.ckpt").string();
  save_checkpoint(path, half.model, half.state, half.iteration, config);
  LoadedCheckpoint<float> resumed = load_checkpoint<float>(path);
  std::string tail_log;
  run_training_loop(resumed.model, resumed.state, resumed.iteration, data, config, 8,
                    [&](const std::string& line) { tail_log += line + "\n"; });

  CHECK(resumed.iteration == full.iteration);
  auto pa = collect_parameters(full.model);
  auto pb = collect_parameters(resumed.model);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].size == pb[i].size);
    CHECK(std::memcmp(pa[i].data, pb[i].data, sizeof(float) * static_cast<size_t>(pa[i].size)) ==
          0);
  }
  // The resumed tail log must be the tail of the uninterrupted log.
  CHECK(full.log.find(tail_log) != std::string::npos);
}

TEST_CASE("training is deterministic: same seed, same losses, bit-identical logs") {
  const RunConfig config = tiny_config();
  const auto data = tiny_dataset(config, 6);
  TrainedState a = train_fresh(config, data, 6);
  TrainedState b = train_fresh(config, data, 6);
  CHECK(a.log == b.log);
  CHECK(!a.log.empty());
}

TEST_CASE("zero iterations leaves the checkpoint equal to initialization") {
  const auto dir = temp_dir("zero_iters");
  const RunConfig config = tiny_config();
  const auto data = tiny_dataset(config, 4);
  TrainedState zero = train_fresh(config, data, 0);
  CHECK(zero.iteration == 0);

  AnchorSet anchors;
  anchors.shapes = {{9, 9}, {13, 11}};
  anchors.stride = 32;
  auto init = make_detector_model<float>(config.backbone_config(), config.num_classes,
                                         config.fc_hidden, anchors, config.seed);
  auto pa = collect_parameters(zero.model);
  auto pb = collect_parameters(init);
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(std::memcmp(pa[i].data, pb[i].data, sizeof(float) * static_cast<size_t>(pa[i].size)) ==
          0);
  }
}

TEST_CASE("anchor file round-trips into an identical anchor set") {
  const auto dir = temp_dir("anchorfile");
  AnchorSet anchors;
  anchors.shapes = {{10.25, 8.5}, {33.125, 20.75}};
  anchors.stride = 32;
  const std::string path = (dir / "anchors.txt").string();
  save_anchor_file(anchors, path);
  const AnchorSet back = load_anchor_file(path);
  REQUIRE(back.shapes.size() == anchors.shapes.size());
  for (size_t i = 0; i < anchors.shapes.size(); ++i) {
    CHECK(back.shapes[i].first == anchors.shapes[i].first);
    CHECK(back.shapes[i].second == anchors.shapes[i].second);
  }
}

TEST_CASE("non-finite loss aborts with the offending batch seed in the message") {
  const RunConfig config = tiny_config();
  const auto data = tiny_dataset(config, 4);
  AnchorSet anchors;
  anchors.shapes = {{9, 9}};
  anchors.stride = 32;
  auto model = make_detector_model<float>(config.backbone_config(), 1, config.fc_hidden, anchors,
                                          1);
  // Poison one parameter so the first forward pass produces NaN.
  auto params = collect_parameters(model);
  params[0].data[0] = std::numeric_limits<float>::quiet_NaN();
  auto state = make_sgdm_state(model, 1e-3f, 0.9f);
  std::uint64_t iteration = 0;
  CHECK_THROWS_WITH_AS(
      run_training_loop(model, state, iteration, data, config, 2, [](const std::string&) {}),
      doctest::Contains("batch seed"), NumericError);
}
