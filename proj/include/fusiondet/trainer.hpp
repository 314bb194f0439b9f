#ifndef FUSIONDET_TRAINER_HPP
#define FUSIONDET_TRAINER_HPP

#include <algorithm>
#include <string>
#include <vector>

#include "fusiondet/anchor.hpp"
#include "fusiondet/loss.hpp"
#include "fusiondet/model.hpp"
#include "fusiondet/target.hpp"

namespace fusiondet {

struct TrainSettings {
  OverlapBands bands;
  Index rpn_batch = 128;
  double rpn_positive_fraction = 0.5;
  Index roi_batch = 64;
  double roi_positive_fraction = 0.25;
  double lambda_rpn = 1.0;
  double lambda_rcnn = 1.0;
  ProposalConfig proposals{600, 100, 0.7, 2.0};
  // Ground-truth boxes join the ROI sampling pool so the detection head sees
  // foreground from the first iteration, before the RPN produces usable
  // proposals. The jittered copies land inside the positive overlap band
  // with nonzero regression targets, which is what teaches the head to snap
  // imperfect boxes onto objects.
  bool append_gt_rois = true;
  Index gt_jitter_candidates = 3;
};

template <typename Scalar>
struct TrainSample {
  Tensor4<Scalar> image;  // 1 x H x W x C, already resized to the model input
  std::vector<Box> boxes;
  std::vector<int> classes;  // 1-based foreground ids, parallel to boxes
};

// Sampled anchors with their binary labels and regression targets.
struct RpnSelection {
  std::vector<Index> anchor_indices;
  std::vector<int> labels;
  std::vector<BoxDeltas> reg_targets;
};

// Sampled ROIs (boxes treated as constants) with class labels and targets.
struct RoiSelection {
  std::vector<Box> rois;
  std::vector<int> labels;
  std::vector<BoxDeltas> reg_targets;
};

struct StepSelections {
  std::vector<RpnSelection> rpn;
  std::vector<RoiSelection> rois;
};

template <typename Scalar>
struct StepForward {
  Tensor4<Scalar> images;
  BackboneTrace<Scalar> dcon;
  BackboneTrace<Scalar> vedcon;
  FusionTrace<Scalar> fusion;
  RpnOutputs<Scalar> rpn;
  std::vector<Box> anchors;
  std::vector<char> anchor_valid;  // inside-image mask for training targets
};

template <typename Scalar>
Tensor4<Scalar> stack_batch(const std::vector<TrainSample<Scalar>>& batch) {
  if (batch.empty()) throw ContractError("stack_batch: empty batch");
  const auto& first = batch[0].image;
  Tensor4<Scalar> out(static_cast<Index>(batch.size()), first.height(), first.width(),
                      first.channels());
  const Index per = first.size();
  for (size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].image.size() != per || batch[b].image.batch() != 1) {
      throw DimensionError("stack_batch: inconsistent image dims in batch");
    }
    std::copy(batch[b].image.data(), batch[b].image.data() + per,
              out.data() + static_cast<Index>(b) * per);
  }
  return out;
}

template <typename Scalar>
StepForward<Scalar> run_forward(const DetectorModel<Scalar>& model,
                                const std::vector<TrainSample<Scalar>>& batch) {
  StepForward<Scalar> fwd;
  fwd.images = stack_batch(batch);
  backbone_forward_cached(model.dcon, fwd.images, fwd.dcon);
  backbone_forward_cached(model.vedcon, fwd.images, fwd.vedcon);
  fuse_cached(fwd.dcon.output, fwd.vedcon.output, model.fusion, fwd.fusion);
  fwd.rpn = rpn_forward(model.rpn, fwd.fusion.output);
  const double image_w = static_cast<double>(model.config.input_width);
  const double image_h = static_cast<double>(model.config.input_height);
  fwd.anchors = generate_anchors(model.anchors, fwd.fusion.output.height(),
                                 fwd.fusion.output.width(), image_w, image_h);
  fwd.anchor_valid.resize(fwd.anchors.size());
  for (size_t i = 0; i < fwd.anchors.size(); ++i) {
    fwd.anchor_valid[i] = inside_image(fwd.anchors[i], image_w, image_h) ? 1 : 0;
  }
  return fwd;
}

/// Samples RPN anchor minibatches and ROI minibatches for one training step.
/// Proposal boxes are detached here: gradients never flow through box
/// coordinates, so a frozen selection makes the loss a smooth function of
/// the parameters (up to ReLU/max kinks).
template <typename Scalar>
StepSelections make_selections(const DetectorModel<Scalar>& model, const StepForward<Scalar>& fwd,
                               const std::vector<TrainSample<Scalar>>& batch,
                               const TrainSettings& settings, std::uint64_t seed) {
  StepSelections sel;
  const double image_w = static_cast<double>(model.config.input_width);
  const double image_h = static_cast<double>(model.config.input_height);
  for (size_t b = 0; b < batch.size(); ++b) {
    const auto& gt = batch[b].boxes;

    TargetAssignment assignment =
        assign_targets(fwd.anchors, gt, settings.bands, true, &fwd.anchor_valid);
    Rng rpn_rng = make_rng(seed, 2 * b);
    SampledMinibatch sampled =
        sample_minibatch(assignment, settings.rpn_batch, settings.rpn_positive_fraction, rpn_rng);
    RpnSelection rsel;
    for (Index i : sampled.positives) {
      rsel.anchor_indices.push_back(i);
      rsel.labels.push_back(1);
      const Index g = assignment.matched_gt[static_cast<size_t>(i)];
      rsel.reg_targets.push_back(
          encode_deltas(fwd.anchors[static_cast<size_t>(i)], gt[static_cast<size_t>(g)]));
    }
    for (Index i : sampled.negatives) {
      rsel.anchor_indices.push_back(i);
      rsel.labels.push_back(0);
      rsel.reg_targets.push_back(BoxDeltas{});
    }
    sel.rpn.push_back(std::move(rsel));

    std::vector<Proposal> proposals = propose(fwd.rpn.obj_logits, fwd.rpn.reg,
                                              static_cast<Index>(b), fwd.anchors, image_w,
                                              image_h, settings.proposals);
    std::vector<Box> candidates;
    candidates.reserve(proposals.size() + gt.size());
    for (const auto& p : proposals) candidates.push_back(p.box);
    if (settings.append_gt_rois) {
      for (const auto& g : gt) candidates.push_back(g);
      Rng jitter_rng = make_rng(seed, mix_seed(0x6a697474ULL, b));
      std::uniform_real_distribution<double> shift(-0.06, 0.06);
      std::uniform_real_distribution<double> scale(-0.08, 0.08);
      for (const auto& g : gt) {
        for (Index j = 0; j < settings.gt_jitter_candidates; ++j) {
          const double w = g.w * std::exp(scale(jitter_rng));
          const double h = g.h * std::exp(scale(jitter_rng));
          const double cx = g.cx() + shift(jitter_rng) * g.w;
          const double cy = g.cy() + shift(jitter_rng) * g.h;
          const Box jittered =
              clip_to_image(Box{cx - w / 2, cy - h / 2, w, h}, image_w, image_h);
          if (jittered.valid()) candidates.push_back(jittered);
        }
      }
    }
    RoiSelection roi_sel;
    if (!candidates.empty()) {
      TargetAssignment roi_assign = assign_targets(candidates, gt, settings.bands, false);
      Rng roi_rng = make_rng(seed, 2 * b + 1);
      SampledMinibatch roi_sampled =
          sample_minibatch(roi_assign, settings.roi_batch, settings.roi_positive_fraction, roi_rng);
      for (Index i : roi_sampled.positives) {
        const Index g = roi_assign.matched_gt[static_cast<size_t>(i)];
        roi_sel.rois.push_back(candidates[static_cast<size_t>(i)]);
        roi_sel.labels.push_back(batch[b].classes[static_cast<size_t>(g)]);
        roi_sel.reg_targets.push_back(
            encode_deltas(candidates[static_cast<size_t>(i)], gt[static_cast<size_t>(g)]));
      }
      for (Index i : roi_sampled.negatives) {
        roi_sel.rois.push_back(candidates[static_cast<size_t>(i)]);
        roi_sel.labels.push_back(0);
        roi_sel.reg_targets.push_back(BoxDeltas{});
      }
    }
    sel.rois.push_back(std::move(roi_sel));
  }
  return sel;
}

template <typename Scalar>
DetectorModel<Scalar> clone_zeroed(const DetectorModel<Scalar>& model) {
  DetectorModel<Scalar> grads = model;
  for_each_parameter(grads, [](const NamedParam<Scalar>& p) {
    std::fill(p.data, p.data + p.size, Scalar(0));
  });
  return grads;
}

/// Loss (and optionally gradients) for fixed selections over the latest
/// forward pass. RPN terms are averaged per image then over the batch; the
/// detection-head terms are taken over the pooled ROI minibatch as a whole.
template <typename Scalar>
LossBreakdown compute_losses(const DetectorModel<Scalar>& model, const StepForward<Scalar>& fwd,
                             const StepSelections& selections, const TrainSettings& settings,
                             DetectorModel<Scalar>* grads) {
  const Index batch = fwd.images.batch();
  if (static_cast<Index>(selections.rpn.size()) != batch ||
      static_cast<Index>(selections.rois.size()) != batch) {
    throw DimensionError("compute_losses: selections do not match batch");
  }
  const Index fh = fwd.fusion.output.height();
  const Index fw = fwd.fusion.output.width();
  const Index k = model.rpn.k;
  const Index anchor_positions = fh * fw;

  LossBreakdown loss;
  loss.lambda_rpn = settings.lambda_rpn;
  loss.lambda_rcnn = settings.lambda_rcnn;

  Tensor4<Scalar> d_obj;
  Tensor4<Scalar> d_reg;
  if (grads) {
    d_obj = Tensor4<Scalar>(batch, fh, fw, 2 * k);
    d_reg = Tensor4<Scalar>(batch, fh, fw, 4 * k);
  }

  // RPN terms, computed in logit space so saturated probabilities stay finite.
  for (Index b = 0; b < batch; ++b) {
    const RpnSelection& sel = selections.rpn[static_cast<size_t>(b)];
    const Index n = static_cast<Index>(sel.anchor_indices.size());
    if (n == 0) throw ContractError("compute_losses: no sampled anchors for image");
    double cls = 0;
    double reg = 0;
    for (Index i = 0; i < n; ++i) {
      const Index a = sel.anchor_indices[static_cast<size_t>(i)];
      const Index y = a / (fw * k);
      const Index x = (a / k) % fw;
      const Index s = a % k;
      const Scalar logits[2] = {fwd.rpn.obj_logits(b, y, x, 2 * s),
                                fwd.rpn.obj_logits(b, y, x, 2 * s + 1)};
      const int target = sel.labels[static_cast<size_t>(i)];
      const Scalar lse = log_sum_exp(logits, 2);
      cls += static_cast<double>(lse - logits[target]);
      if (grads) {
        const Scalar p0 = std::exp(logits[0] - lse);
        const Scalar p1 = std::exp(logits[1] - lse);
        const Scalar scale = Scalar(1) / static_cast<Scalar>(batch * n);
        d_obj(b, y, x, 2 * s) += (p0 - Scalar(target == 0)) * scale;
        d_obj(b, y, x, 2 * s + 1) += (p1 - Scalar(target == 1)) * scale;
      }
      if (target == 1) {
        const BoxDeltas& v = sel.reg_targets[static_cast<size_t>(i)];
        const Scalar q[4] = {fwd.rpn.reg(b, y, x, 4 * s), fwd.rpn.reg(b, y, x, 4 * s + 1),
                             fwd.rpn.reg(b, y, x, 4 * s + 2), fwd.rpn.reg(b, y, x, 4 * s + 3)};
        const double t[4] = {v.tx, v.ty, v.tw, v.th};
        for (int c = 0; c < 4; ++c) {
          const double diff = static_cast<double>(q[c]) - t[c];
          reg += smooth_l1(diff);
          if (grads) {
            const Scalar g = static_cast<Scalar>(
                settings.lambda_rpn * smooth_l1_grad(diff) /
                static_cast<double>(batch * anchor_positions));
            d_reg(b, y, x, 4 * s + c) += g;
          }
        }
      }
    }
    loss.rpn_cls += cls / static_cast<double>(n) / static_cast<double>(batch);
    loss.rpn_reg += reg / static_cast<double>(anchor_positions) / static_cast<double>(batch);
  }

  // Detection head over the pooled ROI minibatch.
  std::vector<RoiPoolResult<Scalar>> pooled;
  std::vector<Index> roi_image;  // batch index per row
  Index total_rois = 0;
  for (Index b = 0; b < batch; ++b) total_rois += static_cast<Index>(
      selections.rois[static_cast<size_t>(b)].rois.size());

  Tensor4<Scalar> d_features(batch, fh, fw, model.feature_channels());
  if (total_rois > 0) {
    RowMajorMatX<Scalar> rows(total_rois, model.head.in_features);
    std::vector<int> labels;
    std::vector<const BoxDeltas*> targets;
    Index row = 0;
    for (Index b = 0; b < batch; ++b) {
      const RoiSelection& sel = selections.rois[static_cast<size_t>(b)];
      if (sel.rois.empty()) continue;
      RowMajorMatX<Scalar> image_rows =
          pooled_rows(model, fwd.fusion.output, b, sel.rois, grads ? &pooled : nullptr);
      rows.middleRows(row, image_rows.rows()) = image_rows;
      for (size_t r = 0; r < sel.rois.size(); ++r) {
        labels.push_back(sel.labels[r]);
        targets.push_back(&sel.reg_targets[r]);
        roi_image.push_back(b);
      }
      row += image_rows.rows();
    }

    HeadTrace<Scalar> trace;
    head_forward(model.head, std::move(rows), trace);
    const Index cls_out = model.num_classes + 1;

    RowMajorMatX<Scalar> d_cls;
    RowMajorMatX<Scalar> d_regout;
    if (grads) {
      d_cls = RowMajorMatX<Scalar>::Zero(total_rois, cls_out);
      d_regout = RowMajorMatX<Scalar>::Zero(total_rois, 4 * cls_out);
    }

    Index foreground = 0;
    for (Index r = 0; r < total_rois; ++r) {
      if (labels[static_cast<size_t>(r)] > 0) ++foreground;
    }
    double cls = 0;
    double reg = 0;
    for (Index r = 0; r < total_rois; ++r) {
      const int u = labels[static_cast<size_t>(r)];
      std::vector<Scalar> logits(static_cast<size_t>(cls_out));
      for (Index j = 0; j < cls_out; ++j) logits[static_cast<size_t>(j)] = trace.cls_logits(r, j);
      const Scalar lse = log_sum_exp(logits.data(), cls_out);
      cls += static_cast<double>(lse - logits[static_cast<size_t>(u)]);
      if (grads) {
        for (Index j = 0; j < cls_out; ++j) {
          const Scalar p = std::exp(logits[static_cast<size_t>(j)] - lse);
          d_cls(r, j) = (p - Scalar(j == u)) / static_cast<Scalar>(total_rois);
        }
      }
      if (u > 0) {
        const BoxDeltas& v = *targets[static_cast<size_t>(r)];
        const double t[4] = {v.tx, v.ty, v.tw, v.th};
        for (int c = 0; c < 4; ++c) {
          const double diff = static_cast<double>(trace.reg(r, 4 * u + c)) - t[c];
          reg += smooth_l1(diff);
          if (grads) {
            d_regout(r, 4 * u + c) = static_cast<Scalar>(
                settings.lambda_rcnn * smooth_l1_grad(diff) / static_cast<double>(foreground));
          }
        }
      }
    }
    loss.rcnn_cls = cls / static_cast<double>(total_rois);
    loss.rcnn_reg = foreground > 0 ? reg / static_cast<double>(foreground) : 0.0;

    if (grads) {
      HeadGrads<Scalar> hg;
      RowMajorMatX<Scalar> d_rows = head_backward(model.head, trace, d_cls, d_regout, hg);
      grads->head.fc1_w += hg.fc1_w;
      grads->head.fc1_b += hg.fc1_b;
      grads->head.fc2_w += hg.fc2_w;
      grads->head.fc2_b += hg.fc2_b;
      grads->head.cls_w += hg.cls_w;
      grads->head.cls_b += hg.cls_b;
      grads->head.reg_w += hg.reg_w;
      grads->head.reg_b += hg.reg_b;
      for (Index r = 0; r < total_rois; ++r) {
        Tensor4<Scalar> d_pooled(1, model.roi_cfg.output_h, model.roi_cfg.output_w,
                                 model.feature_channels());
        Eigen::Map<VecX<Scalar>>(d_pooled.data(), d_pooled.size()) =
            d_rows.row(r).transpose();
        roi_pool_backward(pooled[static_cast<size_t>(r)], d_pooled, d_features);
      }
    }
  }

  if (grads) {
    RpnGrads<Scalar> rg;
    Tensor4<Scalar> d_feat_rpn =
        rpn_backward(model.rpn, fwd.fusion.output, fwd.rpn, d_obj, d_reg, rg);
    grads->rpn.shared.kernel += rg.shared.kernel;
    grads->rpn.shared.bias += rg.shared.bias;
    grads->rpn.objectness.kernel += rg.objectness.kernel;
    grads->rpn.objectness.bias += rg.objectness.bias;
    grads->rpn.regression.kernel += rg.regression.kernel;
    grads->rpn.regression.bias += rg.regression.bias;

    Tensor4<Scalar> d_feat = add(d_features, d_feat_rpn);
    ConvParamGrads<Scalar> fusion_grads;
    Tensor4<Scalar> d_sum = fuse_backward(model.fusion, fwd.fusion, d_feat, fusion_grads);
    grads->fusion.smoothing.kernel += fusion_grads.kernel;
    grads->fusion.smoothing.bias += fusion_grads.bias;

    std::vector<ConvParamGrads<Scalar>> backbone_grads;
    backbone_backward(model.dcon, fwd.dcon, d_sum, backbone_grads);
    Index idx = 0;
    for (auto& block : grads->dcon.blocks) {
      for (auto& conv : block) {
        conv.kernel += backbone_grads[static_cast<size_t>(idx)].kernel;
        conv.bias += backbone_grads[static_cast<size_t>(idx)].bias;
        ++idx;
      }
    }
    backbone_backward(model.vedcon, fwd.vedcon, d_sum, backbone_grads);
    idx = 0;
    for (auto& block : grads->vedcon.blocks) {
      for (auto& conv : block) {
        conv.kernel += backbone_grads[static_cast<size_t>(idx)].kernel;
        conv.bias += backbone_grads[static_cast<size_t>(idx)].bias;
        ++idx;
      }
    }
  }
  return loss;
}

// Loss at the current parameters under frozen selections; the fragment the
// finite-difference harness probes.
template <typename Scalar>
LossBreakdown step_loss(const DetectorModel<Scalar>& model,
                        const std::vector<TrainSample<Scalar>>& batch,
                        const StepSelections& selections, const TrainSettings& settings) {
  StepForward<Scalar> fwd = run_forward(model, batch);
  return compute_losses(model, fwd, selections, settings,
                        static_cast<DetectorModel<Scalar>*>(nullptr));
}

template <typename Scalar>
struct SgdmState {
  Scalar learning_rate = Scalar(1e-3);
  Scalar momentum = Scalar(0.9);
  std::vector<VecX<Scalar>> velocity;  // aligned with collect_parameters order
};

template <typename Scalar>
SgdmState<Scalar> make_sgdm_state(DetectorModel<Scalar>& model, Scalar learning_rate,
                                  Scalar momentum) {
  SgdmState<Scalar> state;
  state.learning_rate = learning_rate;
  state.momentum = momentum;
  for_each_parameter(model, [&](const NamedParam<Scalar>& p) {
    state.velocity.push_back(VecX<Scalar>::Zero(p.size));
  });
  return state;
}

template <typename Scalar>
void apply_sgdm(DetectorModel<Scalar>& model, DetectorModel<Scalar>& grads,
                SgdmState<Scalar>& state) {
  auto pm = collect_parameters(model);
  auto pg = collect_parameters(grads);
  if (pm.size() != pg.size() || pm.size() != state.velocity.size()) {
    throw DimensionError("apply_sgdm: parameter/velocity lists misaligned");
  }
  for (size_t i = 0; i < pm.size(); ++i) {
    if (pm[i].size != pg[i].size || pm[i].size != state.velocity[i].size()) {
      throw DimensionError("apply_sgdm: size mismatch at " + pm[i].name);
    }
    sgdm_step_raw(pm[i].data, pg[i].data, state.velocity[i].data(), pm[i].size,
                  state.learning_rate, state.momentum);
  }
}

/// One SGDM training step. Throws NumericError before touching the
/// parameters if any loss term is non-finite.
template <typename Scalar>
LossBreakdown train_step(DetectorModel<Scalar>& model, SgdmState<Scalar>& state,
                         const std::vector<TrainSample<Scalar>>& batch,
                         const TrainSettings& settings, std::uint64_t selection_seed) {
  StepForward<Scalar> fwd = run_forward(model, batch);
  if (!fwd.fusion.output.all_finite() || !fwd.rpn.obj_logits.all_finite() ||
      !fwd.rpn.reg.all_finite()) {
    throw NumericError("train_step: non-finite network outputs (selection seed " +
                       std::to_string(selection_seed) + ")");
  }
  StepSelections selections = make_selections(model, fwd, batch, settings, selection_seed);
  DetectorModel<Scalar> grads = clone_zeroed(model);
  LossBreakdown loss = compute_losses(model, fwd, selections, settings, &grads);
  if (!loss.finite()) {
    throw NumericError("train_step: non-finite loss (selection seed " +
                       std::to_string(selection_seed) + ")");
  }
  apply_sgdm(model, grads, state);
  return loss;
}

}  // namespace fusiondet

#endif  // FUSIONDET_TRAINER_HPP
