// Command-line surface: estimate-anchors, synth, train, detect, eval,
// gradcheck. Exit codes: 0 success, 1 usage, 2 data/validation, 3 numeric.
#include <iostream>

#include <CLI11.hpp>

#include "fusiondet/commands.hpp"

using namespace fusiondet;

int main(int argc, char** argv) {
  CLI::App app{"Dual-backbone fused detector: training, inference and evaluation"};
  app.require_subcommand(1);

  EstimateAnchorsOptions anchors_opt;
  auto* anchors_cmd = app.add_subcommand("estimate-anchors",
                                         "Cluster ground-truth box shapes into anchors");
  anchors_cmd->add_option("--manifest", anchors_opt.manifest, "Dataset manifest (JSONL)")
      ->required();
  anchors_cmd->add_option("--k", anchors_opt.k, "Number of anchor shapes");
  anchors_cmd->add_option("--seed", anchors_opt.seed, "Clustering seed");
  anchors_cmd->add_option("--out", anchors_opt.out, "Anchor file to write");

  SynthOptions synth_opt;
  std::uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic labeled scenes");
  synth_cmd->add_option("--config", synth_opt.config, "Run config (JSON)");
  synth_cmd->add_option("--out", synth_opt.out_dir, "Output directory")->required();
  synth_cmd->add_option("--n", synth_opt.count, "Number of scenes");
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "Generator seed");

  TrainOptions train_opt;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train the detector");
  train_cmd->add_option("--config", train_opt.config, "Run config (JSON)");
  train_cmd->add_option("--manifest", train_opt.manifest, "Dataset manifest (JSONL)");
  train_cmd->add_option("--synth", train_opt.synth_count,
                        "Generate this many synthetic scenes instead of a manifest");
  train_cmd->add_option("--out", train_opt.out, "Checkpoint to write")->required();
  train_cmd->add_option("--resume", train_opt.resume, "Checkpoint to continue from");
  train_cmd->add_option("--emit-test-manifest", train_opt.emit_test_manifest,
                        "Write the held-out split to this manifest");
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Run seed");

  DetectOptions detect_opt;
  auto* detect_cmd = app.add_subcommand("detect", "Run inference on images");
  detect_cmd->add_option("--checkpoint", detect_opt.checkpoint, "Trained checkpoint")->required();
  detect_cmd->add_option("--image", detect_opt.image, "Single image (PNG or PPM)");
  detect_cmd->add_option("--dir", detect_opt.dir, "Directory of images");
  detect_cmd->add_option("--out", detect_opt.out, "Detections JSONL to write");
  detect_cmd->add_option("--annotate", detect_opt.annotate,
                         "Directory for annotated copies");

  EvalOptions eval_opt;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint against a manifest");
  eval_cmd->add_option("--checkpoint", eval_opt.checkpoint, "Trained checkpoint")->required();
  eval_cmd->add_option("--manifest", eval_opt.manifest, "Dataset manifest (JSONL)")->required();
  eval_cmd->add_option("--iou-threshold", eval_opt.iou_threshold, "Matching IoU threshold");
  eval_cmd->add_option("--out", eval_opt.out, "Report JSON to write");

  GradcheckOptions grad_opt;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  grad_cmd->add_option("--scale", grad_opt.scale, "tiny or small");
  grad_cmd->add_option("--seed", grad_opt.seed, "Probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (*synth_seed_opt) synth_opt.seed = synth_seed;
  if (*train_seed_opt) train_opt.seed = train_seed;

  try {
    if (anchors_cmd->parsed()) return cmd_estimate_anchors(anchors_opt, std::cout);
    if (synth_cmd->parsed()) return cmd_synth(synth_opt, std::cout);
    if (train_cmd->parsed()) return cmd_train(train_opt, std::cout);
    if (detect_cmd->parsed()) return cmd_detect(detect_opt, std::cout);
    if (eval_cmd->parsed()) return cmd_eval(eval_opt, std::cout);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_opt, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitUsage;
}
