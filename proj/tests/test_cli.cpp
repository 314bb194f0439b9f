// Drives the installed binary end to end; the path arrives in FUSIONDET_CLI.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fusiondet/commands.hpp"
#include "fusiondet/dataset.hpp"
#include "fusiondet/runconfig.hpp"
#include "fusiondet/synth.hpp"

using namespace fusiondet;
namespace fs = std::filesystem;

namespace {

std::string cli_binary() {
  const char* env = std::getenv("FUSIONDET_CLI");
  REQUIRE_MESSAGE(env != nullptr, "FUSIONDET_CLI must point at the built binary");
  return env;
}

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string command = cli_binary() + " " + args + " 2>&1";
  std::array<char, 512> buffer{};
  RunResult result;
  FILE* pipe = popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (fgets(buffer.data(), buffer.size(), pipe)) result.output += buffer.data();
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fusiondet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Desk-scale config file shared by the CLI tests.
fs::path write_tiny_config(const fs::path& dir) {
  const fs::path path = dir / "config.json";
  std::ofstream out(path);
  out << R"({
  "architecture": {"width_scale": 0.0625, "input_height": 32, "input_width": 32,
                   "fc_hidden": 16},
  "anchors": {"k": 2},
  "training": {"batch_size": 2, "iterations": 6, "log_every": 2, "rpn_batch": 16,
               "roi_batch": 8},
  "detection": {"pre_nms_top_n": 12, "post_nms_top_n": 6},
  "synth": {"width": 32, "height": 32, "min_objects": 1, "max_objects": 2,
            "min_size": 8, "max_size": 14},
  "seed": 3
})";
  return path;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run_cli("").exit_code == 1);
  CHECK(run_cli("no-such-command").exit_code == 1);
  CHECK(run_cli("estimate-anchors").exit_code == 1);  // missing required flag
}

TEST_CASE("estimate-anchors: missing manifest exits 2 naming the path") {
  const auto result = run_cli("estimate-anchors --manifest /nonexistent/m.jsonl --k 2");
  CHECK(result.exit_code == 2);
  CHECK(result.output.find("/nonexistent/m.jsonl") != std::string::npos);
}

TEST_CASE("estimate-anchors: uniform boxes give one shape, file parses back") {
  const auto dir = temp_dir("anchors");
  {
    std::ofstream out(dir / "m.jsonl");
    for (int i = 0; i < 4; ++i) {
      out << R"({"image":"img)" << i
          << R"(.png","boxes":[{"x":1,"y":2,"w":12,"h":9,"label":"vehicle"}]})" << "\n";
    }
  }
  const fs::path anchor_file = dir / "anchors.txt";
  const auto result = run_cli("estimate-anchors --manifest " + (dir / "m.jsonl").string() +
                              " --k 1 --seed 5 --out " + anchor_file.string());
  CHECK(result.exit_code == 0);
  CHECK(result.output.find("mean_iou=1.000000") != std::string::npos);
  const AnchorSet parsed = load_anchor_file(anchor_file.string());
  REQUIRE(parsed.shapes.size() == 1);
  CHECK(parsed.shapes[0].first == doctest::Approx(12.0));
  CHECK(parsed.shapes[0].second == doctest::Approx(9.0));
}

TEST_CASE("synth writes scenes deterministically per seed") {
  const auto dir_a = temp_dir("synth_a");
  const auto dir_b = temp_dir("synth_b");
  CHECK(run_cli("synth --out " + dir_a.string() + " --n 3 --seed 9").exit_code == 0);
  CHECK(run_cli("synth --out " + dir_b.string() + " --n 3 --seed 9").exit_code == 0);
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%06d.png", i);
    CHECK(file_bytes(dir_a / name) == file_bytes(dir_b / name));
  }
  CHECK(load_manifest((dir_a / "manifest.jsonl").string()).records.size() == 3);
}

TEST_CASE("train/detect/eval pipeline at desk scale") {
  const auto dir = temp_dir("pipeline");
  const auto config = write_tiny_config(dir);
  const fs::path ckpt = dir / "model.ckpt";
  const fs::path test_manifest = dir / "test.jsonl";

  const auto train = run_cli("train --config " + config.string() + " --synth 10 --out " +
                             ckpt.string() + " --emit-test-manifest " + test_manifest.string());
  INFO(train.output);
  CHECK(train.exit_code == 0);
  CHECK(train.output.find("iter=") != std::string::npos);
  CHECK(fs::exists(ckpt));

  // Same seed reruns produce identical loss logs.
  const fs::path ckpt2 = dir / "model2.ckpt";
  const auto rerun = run_cli("train --config " + config.string() + " --synth 10 --out " +
                             ckpt2.string());
  CHECK(rerun.exit_code == 0);
  auto logs_only = [](const std::string& text) {
    std::string lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("iter=", 0) == 0) lines += line + "\n";
    }
    return lines;
  };
  CHECK(logs_only(train.output) == logs_only(rerun.output));
  CHECK(file_bytes(ckpt) == file_bytes(ckpt2));

  // detect on a single image, twice, identical JSON.
  const fs::path scene_dir = dir / "model.ckpt.synth";
  fs::path sample;
  for (const auto& entry : fs::directory_iterator(scene_dir)) {
    if (entry.path().extension() == ".png") {
      sample = entry.path();
      break;
    }
  }
  REQUIRE(!sample.empty());
  const fs::path det_a = dir / "det_a.jsonl";
  const fs::path det_b = dir / "det_b.jsonl";
  CHECK(run_cli("detect --checkpoint " + ckpt.string() + " --image " + sample.string() +
                " --out " + det_a.string())
            .exit_code == 0);
  CHECK(run_cli("detect --checkpoint " + ckpt.string() + " --image " + sample.string() +
                " --out " + det_b.string())
            .exit_code == 0);
  CHECK(file_bytes(det_a) == file_bytes(det_b));

  // eval over the held-out manifest writes a report with the count identities.
  const fs::path report = dir / "report.json";
  const auto eval = run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                            test_manifest.string() + " --out " + report.string());
  INFO(eval.output);
  CHECK(eval.exit_code == 0);
  CHECK(fs::exists(report));
  CHECK(eval.output.find("Dataset | TPR (%) | FDR (%) | Frame Rate (fps)") != std::string::npos);
}

TEST_CASE("detect: empty directory gives an empty results file and exit 0") {
  const auto dir = temp_dir("detect_empty");
  const auto config = write_tiny_config(dir);
  const fs::path ckpt = dir / "model.ckpt";
  REQUIRE(run_cli("train --config " + config.string() + " --synth 6 --out " + ckpt.string())
              .exit_code == 0);
  const fs::path empty = dir / "no_images";
  fs::create_directories(empty);
  const fs::path out = dir / "out.jsonl";
  const auto result = run_cli("detect --checkpoint " + ckpt.string() + " --dir " +
                              empty.string() + " --out " + out.string());
  CHECK(result.exit_code == 0);
  CHECK(fs::exists(out));
  CHECK(file_bytes(out).empty());
}

TEST_CASE("detect: corrupt checkpoint exits nonzero naming the format-version failure") {
  const auto dir = temp_dir("corrupt_ckpt");
  const fs::path bad = dir / "bad.ckpt";
  {
    std::ofstream out(bad, std::ios::binary);
    out << "garbage bytes that are not a checkpoint";
  }
  const auto result = run_cli("detect --checkpoint " + bad.string() + " --image x.png");
  CHECK(result.exit_code == 2);
  CHECK(result.output.find("format version") != std::string::npos);
}

TEST_CASE("eval: manifest without ground truth reports undefined TPR, exit 0") {
  const auto dir = temp_dir("eval_undef");
  const auto config = write_tiny_config(dir);
  const fs::path ckpt = dir / "model.ckpt";
  REQUIRE(run_cli("train --config " + config.string() + " --synth 6 --out " + ckpt.string())
              .exit_code == 0);

  // A manifest whose single record has no boxes: TPR undefined.
  SynthConfig scfg;
  scfg.width = 32;
  scfg.height = 32;
  scfg.min_objects = 1;
  scfg.max_objects = 1;
  scfg.min_size = 8;
  scfg.max_size = 14;
  scfg.seed = 3;
  const SynthScene scene = synth_scene(scfg, 0);
  const fs::path img = dir / "no_gt.png";
  write_png(img.string(), scene.image);
  const fs::path manifest = dir / "no_gt.jsonl";
  {
    std::ofstream out(manifest);
    out << R"({"image":")" << img.filename().string() << R"(","boxes":[]})" << "\n";
  }
  const auto result = run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                              manifest.string());
  INFO(result.output);
  CHECK(result.exit_code == 0);
  CHECK(result.output.find("undefined") != std::string::npos);
}

TEST_CASE("gradcheck exits 0 at tiny scale and is seed-stable in its output") {
  const auto a = run_cli("gradcheck --scale tiny --seed 17");
  CHECK(a.exit_code == 0);
  CHECK(a.output.find("end_to_end_loss") != std::string::npos);
  const auto b = run_cli("gradcheck --scale tiny --seed 17");
  CHECK(a.output == b.output);
}

TEST_CASE("train refuses ambiguous or missing data sources") {
  const auto dir = temp_dir("badtrain");
  const auto config = write_tiny_config(dir);
  CHECK(run_cli("train --config " + config.string() + " --out " + (dir / "x.ckpt").string())
            .exit_code == 2);
}
