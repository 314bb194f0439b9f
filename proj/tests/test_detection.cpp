#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "fusiondet/loss.hpp"
#include "fusiondet/model.hpp"
#include "fusiondet/roi_pool.hpp"
#include "fusiondet/target.hpp"
#include "fusiondet/trainer.hpp"

using namespace fusiondet;

TEST_CASE("assign_targets follows the 0.6/0.3 overlap bands") {
  const std::vector<Box> gt = {Box{0, 0, 10, 10}};
  // Candidates engineered to hit the three bands: IoU 0.7, 0.2, 0.45.
  const Box positive{0, 0, 10, 7};    // IoU 0.7
  const Box negative{8, 8, 10, 10};   // IoU 4/196 ~ 0.02
  const Box between{0, 0, 10, 4.5};   // IoU 0.45
  CHECK(iou(positive, gt[0]) == doctest::Approx(0.7));
  CHECK(iou(between, gt[0]) == doctest::Approx(0.45));

  const auto assignment = assign_targets({positive, negative, between}, gt, OverlapBands{});
  CHECK(assignment.labels[0] == BoxLabel::kPositive);
  CHECK(assignment.labels[1] == BoxLabel::kNegative);
  CHECK(assignment.labels[2] == BoxLabel::kIgnore);
  CHECK(assignment.matched_gt[0] == 0);
}

TEST_CASE("assign_targets: empty gt labels everything negative") {
  const auto assignment = assign_targets({Box{0, 0, 4, 4}}, {}, OverlapBands{});
  CHECK(assignment.labels[0] == BoxLabel::kNegative);
}

TEST_CASE("assign_targets partitions candidates and forces the best anchor per gt") {
  Rng rng = make_rng(211);
  std::uniform_real_distribution<double> pos(0, 50);
  std::uniform_real_distribution<double> size(4, 16);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Box> candidates;
    for (int i = 0; i < 40; ++i) candidates.push_back(Box{pos(rng), pos(rng), size(rng), size(rng)});
    std::vector<Box> gt;
    for (int g = 0; g < 3; ++g) gt.push_back(Box{pos(rng), pos(rng), size(rng), size(rng)});

    const auto assignment = assign_targets(candidates, gt, OverlapBands{}, true);
    // Labels partition the list: every candidate has exactly one label.
    CHECK(assignment.labels.size() == candidates.size());

    // Every gt with any overlap has its argmax candidate labeled positive.
    for (size_t g = 0; g < gt.size(); ++g) {
      double best = 0;
      size_t best_i = 0;
      for (size_t i = 0; i < candidates.size(); ++i) {
        const double v = iou(candidates[i], gt[g]);
        if (v > best) {
          best = v;
          best_i = i;
        }
      }
      if (best > 0) CHECK(assignment.labels[best_i] == BoxLabel::kPositive);
    }
  }
}

TEST_CASE("sample_minibatch caps positives and fills with negatives") {
  TargetAssignment assignment;
  assignment.labels.assign(100, BoxLabel::kNegative);
  for (int i = 0; i < 10; ++i) assignment.labels[static_cast<size_t>(i)] = BoxLabel::kPositive;
  assignment.matched_gt.assign(100, 0);
  Rng rng = make_rng(5);
  const auto sampled = sample_minibatch(assignment, 16, 0.25, rng);
  CHECK(sampled.positives.size() == 4);  // capped at 16*0.25
  CHECK(sampled.negatives.size() == 12);
}

TEST_CASE("roi_pool: constant map, single cell, and the 2x2 bin-max fixture") {
  Tensor4<double> constant(1, 4, 4, 1);
  constant.vec().setConstant(2.5);
  RoiPoolConfig cfg{2, 2, 1.0};
  const auto pooled = roi_pool(constant, Box{0, 0, 4, 4}, cfg);
  CHECK(pooled.output.vec().minCoeff() == 2.5);
  CHECK(pooled.output.vec().maxCoeff() == 2.5);

  Tensor4<double> grid(1, 4, 4, 1);
  for (Index i = 0; i < 16; ++i) grid.data()[i] = static_cast<double>(i + 1);
  RoiPoolConfig one{1, 1, 1.0};
  const auto cell = roi_pool(grid, Box{2, 1, 1, 1}, one);
  CHECK(cell.output.data()[0] == doctest::Approx(7.0));  // row 1, col 2 -> value 7

  // Whole-map ROI pooled to 2x2: direct bin-max oracle gives [[6,8],[14,16]].
  const auto quad = roi_pool(grid, Box{0, 0, 4, 4}, cfg);
  CHECK(quad.output(0, 0, 0, 0) == doctest::Approx(6.0));
  CHECK(quad.output(0, 0, 1, 0) == doctest::Approx(8.0));
  CHECK(quad.output(0, 1, 0, 0) == doctest::Approx(14.0));
  CHECK(quad.output(0, 1, 1, 0) == doctest::Approx(16.0));
}

TEST_CASE("roi_pool: roi outside the feature map is a contract error") {
  Tensor4<double> features(1, 4, 4, 1);
  RoiPoolConfig cfg{2, 2, 1.0};
  CHECK_THROWS_AS(roi_pool(features, Box{10, 10, 2, 2}, cfg), ContractError);
}

TEST_CASE("roi_pool backward passes finite differences on random 1x4x4x2 features") {
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng = make_rng(300 + trial);
    Tensor4<double> features(1, 4, 4, 2);
    std::uniform_real_distribution<double> dist(-1, 1);
    for (Index i = 0; i < features.size(); ++i) features.data()[i] = dist(rng);
    std::uniform_real_distribution<double> roi_pos(0, 2);
    std::uniform_real_distribution<double> roi_size(1.2, 3.0);
    const Box roi{roi_pos(rng), roi_pos(rng), roi_size(rng), roi_size(rng)};
    RoiPoolConfig cfg{2, 2, 1.0};

    Tensor4<double> weights(1, 2, 2, 2);
    for (Index i = 0; i < weights.size(); ++i) {
      weights.data()[i] = std::uniform_real_distribution<double>(0.25, 1.0)(rng);
    }
    auto loss = [&]() { return roi_pool(features, roi, cfg).output.vec().dot(weights.vec()); };
    const auto pooled = roi_pool(features, roi, cfg);
    Tensor4<double> analytic(1, 4, 4, 2);
    roi_pool_backward(pooled, weights, analytic);
    std::vector<ParamView<double>> views = {
        {"features", features.data(), features.size(), analytic.data()}};
    worst = std::max(worst, finite_diff_check<double>(views, loss, 1e-6));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("rpn_loss: perfect predictions, lambda scaling, and -ln(0.5)") {
  // Perfect: p matches the binary label exactly and deltas are exact.
  {
    std::vector<double> p = {1.0, 0.0, 0.0};
    std::vector<int> labels = {1, 0, 0};
    std::vector<BoxDeltas> deltas = {{0.1, 0.2, 0.3, 0.4}, {}, {}};
    const auto terms = rpn_loss(p, labels, deltas, deltas, 4);
    CHECK(terms.cls == doctest::Approx(0.0));
    CHECK(terms.reg == doctest::Approx(0.0));
  }
  // Single positive anchor at p = 0.5, exact deltas -> cls = -ln 0.5.
  {
    std::vector<double> p = {0.5};
    std::vector<int> labels = {1};
    std::vector<BoxDeltas> deltas = {{0, 0, 0, 0}};
    const auto terms = rpn_loss(p, labels, deltas, deltas, 4);
    CHECK(terms.cls == doctest::Approx(0.6931).epsilon(1e-3));
    CHECK(terms.cls == doctest::Approx(-std::log(0.5)));
    CHECK(terms.reg == doctest::Approx(0.0));
  }
  // lambda = 0 contributes nothing to the total.
  {
    LossBreakdown loss;
    loss.rpn_reg = 5.0;
    loss.lambda_rpn = 0.0;
    CHECK(loss.total() == doctest::Approx(0.0));
  }
  CHECK_THROWS_AS(rpn_loss({}, {}, {}, {}, 4), ContractError);
}

TEST_CASE("rcnn_loss: perfect, all-background, and ln 4 fixtures") {
  {
    MatX<double> probs(2, 2);
    probs << 0.0, 1.0, 1.0, 0.0;
    std::vector<int> labels = {1, 0};
    std::vector<BoxDeltas> deltas = {{0.3, 0, 0, 0}, {}};
    const auto terms = rcnn_loss(probs, labels, deltas, deltas);
    CHECK(terms.cls == doctest::Approx(0.0));
    CHECK(terms.reg == doctest::Approx(0.0));
  }
  {
    // All background: regression term vanishes by the Iverson convention.
    MatX<double> probs(2, 2);
    probs << 0.8, 0.2, 0.6, 0.4;
    std::vector<int> labels = {0, 0};
    std::vector<BoxDeltas> none = {{}, {}};
    const auto terms = rcnn_loss(probs, labels, none, none);
    CHECK(terms.reg == doctest::Approx(0.0));
    CHECK(terms.cls == doctest::Approx((-std::log(0.8) - std::log(0.6)) / 2.0));
  }
  {
    // One ROI with p[u] = 0.25 and exact regression -> ln 4.
    MatX<double> probs(1, 2);
    probs << 0.75, 0.25;
    std::vector<int> labels = {1};
    std::vector<BoxDeltas> deltas = {{0.1, 0.1, 0.1, 0.1}};
    const auto terms = rcnn_loss(probs, labels, deltas, deltas);
    CHECK(terms.cls == doctest::Approx(std::log(4.0)));
    CHECK(terms.cls == doctest::Approx(1.3863).epsilon(1e-3));
  }
  {
    MatX<double> bad(1, 2);
    bad << 0.9, 0.3;  // not normalized
    std::vector<int> labels = {0};
    std::vector<BoxDeltas> none = {{}};
    CHECK_THROWS_AS(rcnn_loss(bad, labels, none, none), ContractError);
  }
}

TEST_CASE("loss terms are non-negative on random inputs") {
  Rng rng = make_rng(401);
  std::uniform_real_distribution<double> unit(0.01, 0.99);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p;
    std::vector<int> labels;
    std::vector<BoxDeltas> pred;
    std::vector<BoxDeltas> target;
    for (int i = 0; i < 8; ++i) {
      p.push_back(unit(rng));
      labels.push_back(i % 2);
      pred.push_back({d(rng), d(rng), d(rng), d(rng)});
      target.push_back({d(rng), d(rng), d(rng), d(rng)});
    }
    const auto terms = rpn_loss(p, labels, pred, target, 16);
    CHECK(terms.cls >= 0.0);
    CHECK(terms.reg >= 0.0);
  }
}

namespace {

DetectorModel<float> tiny_model(std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.width_scale = 1.0 / 16.0;
  cfg.input_height = 64;
  cfg.input_width = 64;
  AnchorSet anchors;
  anchors.shapes = {{12, 12}, {20, 14}, {14, 20}};
  anchors.stride = 32;
  return make_detector_model<float>(cfg, 1, 32, anchors, seed);
}

Tensor4<float> random_image64(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  Tensor4<float> t(1, 64, 64, 3);
  std::uniform_real_distribution<double> dist(0, 1);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(dist(rng));
  return t;
}

}  // namespace

TEST_CASE("propose: single anchor with uniform objectness returns it clipped") {
  auto model = tiny_model(3);
  AnchorSet one;
  one.shapes = {{40, 40}};
  one.stride = 32;
  const auto anchors = generate_anchors(one, 1, 1, 32, 32);
  Tensor4<float> obj(1, 1, 1, 2);  // equal logits -> p = 0.5
  Tensor4<float> reg(1, 1, 1, 4);  // zero deltas -> anchor itself
  const auto proposals = propose(obj, reg, 0, anchors, 32, 32, ProposalConfig{10, 5, 0.7, 2.0});
  REQUIRE(proposals.size() == 1);
  CHECK(proposals[0].box.x == doctest::Approx(0.0));  // clipped from -4
  CHECK(proposals[0].box.w == doctest::Approx(32.0));
  CHECK(proposals[0].objectness == doctest::Approx(0.5));
}

TEST_CASE("propose: post_nms_top_n = 1 keeps the single best survivor") {
  AnchorSet set;
  set.shapes = {{12, 12}, {24, 24}};
  set.stride = 32;
  const auto anchors = generate_anchors(set, 2, 2, 64, 64);
  Rng rng = make_rng(405);
  Tensor4<float> obj(1, 2, 2, 4);
  Tensor4<float> reg(1, 2, 2, 8);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (Index i = 0; i < obj.size(); ++i) obj.data()[i] = static_cast<float>(dist(rng));
  const auto all = propose(obj, reg, 0, anchors, 64, 64, ProposalConfig{20, 20, 0.7, 2.0});
  const auto one = propose(obj, reg, 0, anchors, 64, 64, ProposalConfig{20, 1, 0.7, 2.0});
  REQUIRE(!all.empty());
  REQUIRE(one.size() == 1);
  CHECK(one[0].objectness == doctest::Approx(all[0].objectness));
}

TEST_CASE("propose equals the step-by-step oracle composition on a 4-anchor fixture") {
  AnchorSet set;
  set.shapes = {{20, 20}};
  set.stride = 32;
  const auto anchors = generate_anchors(set, 2, 2, 64, 64);
  REQUIRE(anchors.size() == 4);
  Tensor4<float> obj(1, 2, 2, 2);
  Tensor4<float> reg(1, 2, 2, 4);
  Rng rng = make_rng(406);
  std::uniform_real_distribution<double> dist(-0.4, 0.4);
  for (Index i = 0; i < obj.size(); ++i) obj.data()[i] = static_cast<float>(dist(rng));
  for (Index i = 0; i < reg.size(); ++i) reg.data()[i] = static_cast<float>(dist(rng));
  const ProposalConfig cfg{3, 2, 0.5, 2.0};

  // Oracle: decode each anchor by hand, clip, filter, sort, NMS, truncate.
  struct Cand {
    Box box;
    double score;
    size_t index;
  };
  std::vector<Cand> cands;
  for (Index y = 0; y < 2; ++y) {
    for (Index x = 0; x < 2; ++x) {
      const size_t a = static_cast<size_t>(y * 2 + x);
      const double p =
          1.0 / (1.0 + std::exp(static_cast<double>(obj(0, y, x, 0) - obj(0, y, x, 1))));
      BoxDeltas d{reg(0, y, x, 0), reg(0, y, x, 1), reg(0, y, x, 2), reg(0, y, x, 3)};
      Box b = clip_to_image(decode_deltas(anchors[a], d), 64, 64);
      if (b.w < cfg.min_size || b.h < cfg.min_size) continue;
      cands.push_back({b, p, a});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (static_cast<Index>(cands.size()) > cfg.pre_nms_top_n) {
    cands.resize(static_cast<size_t>(cfg.pre_nms_top_n));
  }
  std::vector<Cand> kept;
  for (const auto& c : cands) {
    bool keep = true;
    for (const auto& k : kept) {
      if (iou(c.box, k.box) > cfg.nms_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(c);
  }
  if (static_cast<Index>(kept.size()) > cfg.post_nms_top_n) {
    kept.resize(static_cast<size_t>(cfg.post_nms_top_n));
  }

  const auto proposals = propose(obj, reg, 0, anchors, 64, 64, cfg);
  REQUIRE(proposals.size() == kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    CHECK(proposals[i].objectness == doctest::Approx(kept[i].score));
    CHECK(proposals[i].box.x == doctest::Approx(kept[i].box.x));
    CHECK(proposals[i].box.w == doctest::Approx(kept[i].box.w));
  }
}

TEST_CASE("detect: score threshold 1.0 gives empty output") {
  auto model = tiny_model(21);
  DetectConfig cfg;
  cfg.score_threshold = 1.0;
  const auto detections = detect(model, random_image64(22), cfg);
  CHECK(detections.empty());
}

TEST_CASE("detect: untrained model with a fixed seed is deterministic") {
  auto model = tiny_model(23);
  DetectConfig cfg;
  cfg.score_threshold = 0.1;
  const auto image = random_image64(24);
  const auto a = detect(model, image, cfg);
  const auto b = detect(model, image, cfg);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].box.x == b[i].box.x);
    CHECK(a[i].class_id == b[i].class_id);
  }
  for (const auto& det : a) {
    CHECK(det.box.x >= 0.0);
    CHECK(det.box.y >= 0.0);
    CHECK(det.box.x + det.box.w <= 64.0);
    CHECK(det.box.y + det.box.h <= 64.0);
    CHECK(det.class_id >= 1);
  }
}

TEST_CASE("trainer loss formulas agree with the loss ops on matched inputs") {
  // One synthetic image through the full step; the logit-space values the
  // trainer logs must equal the probability-space operations.
  auto model = tiny_model(31);
  std::vector<TrainSample<float>> batch(1);
  batch[0].image = random_image64(32);
  batch[0].boxes = {Box{10, 12, 20, 18}};
  batch[0].classes = {1};
  TrainSettings settings;
  settings.rpn_batch = 16;
  settings.roi_batch = 8;

  StepForward<float> fwd = run_forward(model, batch);
  StepSelections selections = make_selections(model, fwd, batch, settings, 7);
  const LossBreakdown loss =
      compute_losses(model, fwd, selections, settings, static_cast<DetectorModel<float>*>(nullptr));

  // Rebuild the RPN inputs as probabilities and evaluate the op.
  const auto& sel = selections.rpn[0];
  std::vector<double> probs;
  std::vector<BoxDeltas> predicted;
  const Index fw_cells = fwd.fusion.output.width();
  const Index k = model.rpn.k;
  for (size_t i = 0; i < sel.anchor_indices.size(); ++i) {
    const Index a = sel.anchor_indices[i];
    const Index y = a / (fw_cells * k);
    const Index x = (a / k) % fw_cells;
    const Index s = a % k;
    const double lb = fwd.rpn.obj_logits(0, y, x, 2 * s);
    const double lf = fwd.rpn.obj_logits(0, y, x, 2 * s + 1);
    probs.push_back(1.0 / (1.0 + std::exp(lb - lf)));
    predicted.push_back(BoxDeltas{fwd.rpn.reg(0, y, x, 4 * s), fwd.rpn.reg(0, y, x, 4 * s + 1),
                                  fwd.rpn.reg(0, y, x, 4 * s + 2),
                                  fwd.rpn.reg(0, y, x, 4 * s + 3)});
  }
  const auto terms = rpn_loss(probs, sel.labels, predicted, sel.reg_targets,
                              fwd.fusion.output.height() * fwd.fusion.output.width());
  CHECK(loss.rpn_cls == doctest::Approx(terms.cls).epsilon(1e-5));
  CHECK(loss.rpn_reg == doctest::Approx(terms.reg).epsilon(1e-5));
  CHECK(loss.total() == doctest::Approx(loss.rpn_cls + loss.rpn_reg + loss.rcnn_cls +
                                        loss.rcnn_reg));
}
