#include "fusiondet/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fusiondet/checkpoint.hpp"
#include "fusiondet/evalmetrics.hpp"
#include "fusiondet/gradcheck.hpp"
#include "fusiondet/synth.hpp"

namespace fusiondet {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitData;
}

void save_anchor_file(const AnchorSet& anchors, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_anchor_file: cannot open " + path + " for writing");
  char line[80];
  for (const auto& s : anchors.shapes) {
    std::snprintf(line, sizeof(line), "%.17g %.17g\n", s.first, s.second);
    out << line;
  }
  if (!out) throw IoError("save_anchor_file: write failed for " + path);
}

AnchorSet load_anchor_file(const std::string& path, double stride) {
  std::ifstream in(path);
  if (!in) throw IoError("load_anchor_file: cannot open " + path);
  AnchorSet anchors;
  anchors.stride = stride;
  double w = 0;
  double h = 0;
  while (in >> w >> h) {
    if (!(w > 0 && h > 0)) throw ValidationError("load_anchor_file: non-positive shape in " + path);
    anchors.shapes.push_back({w, h});
  }
  if (anchors.shapes.empty()) throw ValidationError("load_anchor_file: no shapes in " + path);
  return anchors;
}

TrainSettings train_settings_from(const RunConfig& config) {
  TrainSettings s;
  s.bands = OverlapBands{config.positive_overlap[0], config.positive_overlap[1],
                         config.negative_overlap[0], config.negative_overlap[1]};
  s.rpn_batch = config.rpn_batch;
  s.rpn_positive_fraction = config.rpn_positive_fraction;
  s.roi_batch = config.roi_batch;
  s.roi_positive_fraction = config.roi_positive_fraction;
  s.lambda_rpn = config.lambda_rpn;
  s.lambda_rcnn = config.lambda_rcnn;
  s.proposals = ProposalConfig{config.pre_nms_top_n, config.post_nms_top_n, config.proposal_nms,
                               config.min_proposal_size};
  return s;
}

DetectConfig detect_config_from(const RunConfig& config) {
  DetectConfig d;
  d.proposals = ProposalConfig{config.pre_nms_top_n, config.post_nms_top_n, config.proposal_nms,
                               config.min_proposal_size};
  d.score_threshold = config.score_threshold;
  d.nms_threshold = config.detection_nms;
  return d;
}

std::vector<TrainingExample> examples_from_manifest(const DatasetManifest& manifest,
                                                    const RunConfig& config) {
  std::vector<TrainingExample> out;
  out.reserve(manifest.records.size());
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    LoadedExample ex = load_example(manifest, i, config.input_width, config.input_height);
    out.push_back(TrainingExample{std::move(ex.image), std::move(ex.boxes),
                                  std::move(ex.class_ids)});
  }
  return out;
}

namespace {

std::string format_loss_line(std::uint64_t iteration, const LossBreakdown& loss) {
  char line[256];
  std::snprintf(line, sizeof(line),
                "iter=%llu rpn_cls=%.6f rpn_reg=%.6f rcnn_cls=%.6f rcnn_reg=%.6f total=%.6f",
                static_cast<unsigned long long>(iteration), loss.rpn_cls, loss.rpn_reg,
                loss.rcnn_cls, loss.rcnn_reg, loss.total());
  return line;
}

std::vector<size_t> epoch_permutation(size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  Rng rng = make_rng(seed, mix_seed(0x65706f6368ULL, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

RunConfig config_for(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig config = path.empty() ? default_run_config() : load_run_config(path);
  if (seed) {
    config.seed = *seed;
    config.synth.seed = *seed;
  }
  return config;
}

}  // namespace

TrainLoopResult run_training_loop(DetectorModel<float>& model, SgdmState<float>& state,
                                  std::uint64_t& iteration,
                                  const std::vector<TrainingExample>& data,
                                  const RunConfig& config, Index end_iteration,
                                  const LogSink& log) {
  if (data.empty()) throw ValidationError("training: no examples");
  const size_t n = data.size();
  const Index batch_size = config.batch_size;
  const TrainSettings settings = train_settings_from(config);

  TrainLoopResult result;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<size_t> order;
  bool first_recorded = iteration > 0;  // resumed runs report only the tail

  while (static_cast<Index>(iteration) < end_iteration) {
    const std::uint64_t iter = iteration;
    std::vector<TrainSample<float>> batch;
    std::vector<size_t> batch_indices;
    batch.reserve(static_cast<size_t>(batch_size));
    for (Index s = 0; s < batch_size; ++s) {
      const std::uint64_t g = iter * static_cast<std::uint64_t>(batch_size) +
                              static_cast<std::uint64_t>(s);
      const std::uint64_t epoch = g / n;
      if (epoch != cached_epoch) {
        order = epoch_permutation(n, config.seed, epoch);
        cached_epoch = epoch;
      }
      const size_t idx = order[g % n];
      batch_indices.push_back(idx);
      const TrainingExample& ex = data[idx];
      TrainSample<float> sample;
      if (config.augment) {
        sample.image = to_tensor<float>(
            augment_brightness(ex.image, config.augmentation, mix_seed(config.seed, 0x617567, g)));
      } else {
        sample.image = to_tensor<float>(ex.image);
      }
      sample.boxes = ex.boxes;
      sample.classes = ex.class_ids;
      batch.push_back(std::move(sample));
    }

    const std::uint64_t step_seed = mix_seed(config.seed, 0x73746570ULL, iter);
    LossBreakdown loss;
    try {
      loss = train_step(model, state, batch, settings, step_seed);
    } catch (const NumericError& e) {
      std::string dump = "training aborted at iteration " + std::to_string(iter + 1) +
                         ": " + e.what() + "; batch seed " + std::to_string(step_seed) +
                         "; examples [";
      for (size_t i = 0; i < batch_indices.size(); ++i) {
        dump += (i ? "," : "") + std::to_string(batch_indices[i]);
      }
      dump += "]";
      throw NumericError(dump);
    }
    iteration = iter + 1;
    if (!first_recorded) {
      result.first = loss;
      first_recorded = true;
    }
    result.last = loss;
    if (iteration == 1 || iteration % static_cast<std::uint64_t>(config.log_every) == 0 ||
        static_cast<Index>(iteration) == end_iteration) {
      log(format_loss_line(iteration, loss));
    }
  }
  return result;
}

int cmd_estimate_anchors(const EstimateAnchorsOptions& opt, std::ostream& os) {
  DatasetManifest manifest = load_manifest(opt.manifest);
  std::vector<Box> boxes;
  for (const auto& rec : manifest.records) {
    boxes.insert(boxes.end(), rec.boxes.begin(), rec.boxes.end());
  }
  if (boxes.empty()) throw ValidationError("estimate-anchors: manifest has no boxes");
  AnchorSet anchors = estimate_anchors(boxes, opt.k, opt.seed);
  if (!opt.out.empty()) save_anchor_file(anchors, opt.out);
  char line[64];
  std::snprintf(line, sizeof(line), "mean_iou=%.6f", mean_shape_iou(boxes, anchors));
  os << line << "\n";
  for (const auto& s : anchors.shapes) {
    std::snprintf(line, sizeof(line), "anchor %.2f %.2f", s.first, s.second);
    os << line << "\n";
  }
  return kExitOk;
}

int cmd_synth(const SynthOptions& opt, std::ostream& os) {
  RunConfig config = config_for(opt.config, opt.seed);
  DatasetManifest manifest = synth_generate(config.synth, opt.count, opt.out_dir);
  os << "generated " << manifest.records.size() << " scenes under " << opt.out_dir << "\n";
  return kExitOk;
}

int cmd_train(const TrainOptions& opt, std::ostream& os) {
  RunConfig config = config_for(opt.config, opt.seed);
  if (opt.out.empty()) throw ValidationError("train: --out checkpoint path required");
  if (opt.manifest.empty() == (opt.synth_count == 0)) {
    throw ValidationError("train: exactly one of --manifest or --synth required");
  }

  DatasetManifest manifest;
  if (opt.synth_count > 0) {
    const std::string dir = opt.out + ".synth";
    manifest = synth_generate(config.synth, opt.synth_count, dir);
    os << "synthesized " << manifest.records.size() << " scenes under " << dir << "\n";
  } else {
    manifest = load_manifest(opt.manifest);
  }
  if (static_cast<Index>(manifest.class_names.size()) != config.num_classes) {
    throw ValidationError("train: manifest has " + std::to_string(manifest.class_names.size()) +
                          " classes but config.num_classes is " +
                          std::to_string(config.num_classes));
  }
  config.class_names = manifest.class_names;

  auto [train_manifest, test_manifest] = split_dataset(manifest, config.train_fraction,
                                                       config.seed);
  if (!opt.emit_test_manifest.empty()) {
    DatasetManifest absolute = test_manifest;
    for (auto& rec : absolute.records) {
      rec.image = (fs::path(test_manifest.base_dir) / rec.image).string();
    }
    absolute.base_dir.clear();
    save_manifest(absolute, opt.emit_test_manifest);
  }
  std::vector<TrainingExample> data = examples_from_manifest(train_manifest, config);
  os << "training on " << data.size() << " examples (" << test_manifest.records.size()
     << " held out)\n";

  DetectorModel<float> model;
  SgdmState<float> state;
  std::uint64_t iteration = 0;
  if (!opt.resume.empty()) {
    LoadedCheckpoint<float> loaded = load_checkpoint<float>(opt.resume);
    const std::string previous = run_config_to_json(loaded.config);
    RunConfig continued = loaded.config;
    continued.iterations = config.iterations;
    if (run_config_to_json(continued) != run_config_to_json(config)) {
      throw ValidationError("train: --resume config differs from checkpoint snapshot "
                            "(only training.iterations may change)");
    }
    model = std::move(loaded.model);
    state = std::move(loaded.state);
    iteration = loaded.iteration;
  } else {
    AnchorSet anchors;
    if (!config.anchor_shapes.empty()) {
      anchors.shapes = config.anchor_shapes;
      std::sort(anchors.shapes.begin(), anchors.shapes.end(), [](const auto& a, const auto& b) {
        return a.first * a.second < b.first * b.second;
      });
    } else {
      std::vector<Box> boxes;
      for (const auto& ex : data) boxes.insert(boxes.end(), ex.boxes.begin(), ex.boxes.end());
      if (boxes.empty()) throw ValidationError("train: no ground-truth boxes to estimate anchors");
      std::set<std::pair<double, double>> distinct;
      for (const Box& b : boxes) distinct.insert({b.w, b.h});
      const Index k = std::min<Index>(config.anchor_k, static_cast<Index>(distinct.size()));
      anchors = estimate_anchors(boxes, k, config.seed);
    }
    anchors.stride = 32.0;
    model = make_detector_model<float>(config.backbone_config(), config.num_classes,
                                       config.fc_hidden, anchors, config.seed);
    state = make_sgdm_state(model, static_cast<float>(config.learning_rate),
                            static_cast<float>(config.momentum));
  }

  LogSink sink = [&os](const std::string& line) { os << line << "\n"; };
  run_training_loop(model, state, iteration, data, config, config.iterations, sink);
  save_checkpoint(opt.out, model, state, iteration, config);
  os << "checkpoint written to " << opt.out << " at iteration " << iteration << "\n";
  return kExitOk;
}

namespace {

nlohmann::json detections_json(const std::string& image_name,
                               const std::vector<Detection>& detections,
                               const std::vector<std::string>& class_names, double scale_x,
                               double scale_y) {
  nlohmann::json j;
  j["image"] = image_name;
  j["detections"] = nlohmann::json::array();
  for (const auto& det : detections) {
    nlohmann::json d;
    d["box"] = {{"x", det.box.x * scale_x},
                {"y", det.box.y * scale_y},
                {"w", det.box.w * scale_x},
                {"h", det.box.h * scale_y}};
    const size_t idx = static_cast<size_t>(det.class_id - 1);
    d["label"] = idx < class_names.size() ? class_names[idx] : std::to_string(det.class_id);
    d["score"] = det.score;
    j["detections"].push_back(std::move(d));
  }
  return j;
}

}  // namespace

int cmd_detect(const DetectOptions& opt, std::ostream& os) {
  LoadedCheckpoint<float> loaded = load_checkpoint<float>(opt.checkpoint);
  const RunConfig& config = loaded.config;
  const DetectConfig dcfg = detect_config_from(config);

  std::vector<std::string> paths;
  if (!opt.image.empty()) {
    paths.push_back(opt.image);
  } else if (!opt.dir.empty()) {
    if (!fs::is_directory(opt.dir)) throw IoError("detect: not a directory: " + opt.dir);
    for (const auto& entry : fs::directory_iterator(opt.dir)) {
      const std::string ext = entry.path().extension().string();
      if (ext == ".png" || ext == ".ppm") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
  } else {
    throw ValidationError("detect: one of --image or --dir required");
  }

  std::ofstream out;
  if (!opt.out.empty()) {
    out.open(opt.out);
    if (!out) throw IoError("detect: cannot open " + opt.out + " for writing");
  }
  if (!opt.annotate.empty()) fs::create_directories(opt.annotate);

  for (const auto& path : paths) {
    Image8 raw = read_image(path);
    ResizeResult resized = resize_image(raw, {}, config.input_width, config.input_height);
    std::vector<Detection> detections =
        detect(loaded.model, to_tensor<float>(resized.image), dcfg);
    const double sx = static_cast<double>(raw.width) / static_cast<double>(config.input_width);
    const double sy = static_cast<double>(raw.height) / static_cast<double>(config.input_height);
    const nlohmann::json j = detections_json(path, detections, config.class_names, sx, sy);
    if (out.is_open()) out << j.dump() << "\n";
    os << path << ": " << detections.size() << " detections\n";
    if (!opt.annotate.empty()) {
      Image8 annotated = raw;
      for (const auto& det : detections) {
        draw_box_outline(annotated,
                         Box{det.box.x * sx, det.box.y * sy, det.box.w * sx, det.box.h * sy}, 255,
                         40, 40);
      }
      const fs::path dst = fs::path(opt.annotate) / fs::path(path).filename();
      write_png(dst.string(), annotated);
    }
  }
  return kExitOk;
}

int cmd_eval(const EvalOptions& opt, std::ostream& os) {
  LoadedCheckpoint<float> loaded = load_checkpoint<float>(opt.checkpoint);
  const RunConfig& config = loaded.config;
  const DetectConfig dcfg = detect_config_from(config);
  DatasetManifest manifest = load_manifest(opt.manifest);
  if (manifest.records.empty()) throw ValidationError("eval: manifest is empty");

  MatchResult totals;
  std::vector<TrainingExample> examples = examples_from_manifest(manifest, config);
  for (const auto& ex : examples) {
    const std::vector<Detection> detections =
        detect(loaded.model, to_tensor<float>(ex.image), dcfg);
    totals += match_detections(detections, ex.boxes, opt.iou_threshold);
  }

  const Index n = static_cast<Index>(examples.size());
  const Index warmup = std::min<Index>(2, n - 1);
  const double fps = measure_frame_rate(
      [&](Index i) {
        detect(loaded.model, to_tensor<float>(examples[static_cast<size_t>(i)].image), dcfg);
      },
      n, warmup);

  EvalRow row;
  row.dataset = fs::path(opt.manifest).stem().string();
  try {
    row.tpr_percent = tpr(totals);
  } catch (const UndefinedMetricError&) {
  }
  try {
    row.fdr_percent = fdr(totals);
  } catch (const UndefinedMetricError&) {
  }
  row.frame_rate_fps = fps;

  os << render_report({row});
  char counts[96];
  std::snprintf(counts, sizeof(counts), "tp=%lld fp=%lld fn=%lld",
                static_cast<long long>(totals.tp), static_cast<long long>(totals.fp),
                static_cast<long long>(totals.fn));
  os << counts << "\n";
  if (!opt.out.empty()) {
    std::ofstream out(opt.out);
    if (!out) throw IoError("eval: cannot open " + opt.out + " for writing");
    out << report_to_json({row});
  }
  return kExitOk;
}

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& os) {
  const std::vector<GradCheckReport> reports = run_gradient_suite(opt.scale, opt.seed);
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    char line[128];
    const bool ok = r.max_rel_error <= kGradCheckTolerance;
    std::snprintf(line, sizeof(line), "%-16s max_rel_error=%.3e %s", r.component.c_str(),
                  r.max_rel_error, ok ? "ok" : "FAIL");
    os << line << "\n";
    if (!ok) failed.push_back(r.component);
  }
  if (!failed.empty()) {
    std::string msg = "gradcheck failed:";
    for (const auto& f : failed) msg += " " + f;
    os << msg << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace fusiondet
