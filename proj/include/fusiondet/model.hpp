#ifndef FUSIONDET_MODEL_HPP
#define FUSIONDET_MODEL_HPP

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fusiondet/anchor.hpp"
#include "fusiondet/backbone.hpp"
#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/loss.hpp"
#include "fusiondet/nn_ops.hpp"
#include "fusiondet/roi_pool.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

/// Region proposal head: shared 3x3 conv + ReLU, then 1x1 objectness
/// (2 logits per anchor shape) and 1x1 regression (4 deltas per shape).
/// Channel layout at cell (y,x): objectness (2s, 2s+1) = (background,
/// foreground) logits of shape s; regression (4s..4s+3) = (tx,ty,tw,th).
template <typename Scalar>
struct RpnHead {
  Index k = 0;
  ConvParams<Scalar> shared;
  ConvParams<Scalar> objectness;
  ConvParams<Scalar> regression;
};

template <typename Scalar>
RpnHead<Scalar> make_rpn_head(Index channels, Index k, Rng& rng) {
  RpnHead<Scalar> head;
  head.k = k;
  head.shared = make_conv_params<Scalar>(3, 3, channels, channels);
  head.objectness = make_conv_params<Scalar>(1, 1, channels, 2 * k);
  head.regression = make_conv_params<Scalar>(1, 1, channels, 4 * k);
  he_uniform_init(head.shared, rng);
  he_uniform_init(head.objectness, rng);
  he_uniform_init(head.regression, rng);
  return head;
}

template <typename Scalar>
struct RpnOutputs {
  Tensor4<Scalar> shared_pre;  // pre-activation of the shared conv
  Tensor4<Scalar> shared_act;
  Tensor4<Scalar> obj_logits;  // B x Hf x Wf x 2k
  Tensor4<Scalar> reg;         // B x Hf x Wf x 4k
};

template <typename Scalar>
RpnOutputs<Scalar> rpn_forward(const RpnHead<Scalar>& head, const Tensor4<Scalar>& features) {
  RpnOutputs<Scalar> out;
  out.shared_pre = conv2d_forward(features, head.shared);
  out.shared_act = relu(out.shared_pre);
  out.obj_logits = conv2d_forward(out.shared_act, head.objectness);
  out.reg = conv2d_forward(out.shared_act, head.regression);
  return out;
}

template <typename Scalar>
struct RpnGrads {
  ConvParamGrads<Scalar> shared;
  ConvParamGrads<Scalar> objectness;
  ConvParamGrads<Scalar> regression;
};

template <typename Scalar>
Tensor4<Scalar> rpn_backward(const RpnHead<Scalar>& head, const Tensor4<Scalar>& features,
                             const RpnOutputs<Scalar>& outputs, const Tensor4<Scalar>& d_obj,
                             const Tensor4<Scalar>& d_reg, RpnGrads<Scalar>& grads) {
  ConvGrads<Scalar> go = conv2d_backward(outputs.shared_act, head.objectness, d_obj);
  ConvGrads<Scalar> gr = conv2d_backward(outputs.shared_act, head.regression, d_reg);
  grads.objectness.kernel = std::move(go.kernel);
  grads.objectness.bias = std::move(go.bias);
  grads.regression.kernel = std::move(gr.kernel);
  grads.regression.bias = std::move(gr.bias);
  Tensor4<Scalar> d_shared_act = add(go.input, gr.input);
  Tensor4<Scalar> d_shared_pre = relu_backward(outputs.shared_pre, d_shared_act);
  ConvGrads<Scalar> gs = conv2d_backward(features, head.shared, d_shared_pre);
  grads.shared.kernel = std::move(gs.kernel);
  grads.shared.bias = std::move(gs.bias);
  return std::move(gs.input);
}

/// Two hidden fully-connected stages, then class softmax logits and
/// per-class box deltas. Weights are (in x out) row-major; rows of the
/// input matrix are ROIs.
template <typename Scalar>
struct DetectionHead {
  Index in_features = 0;
  Index hidden = 0;
  Index num_classes = 0;  // foreground classes; logits span num_classes+1
  RowMajorMatX<Scalar> fc1_w, fc2_w, cls_w, reg_w;
  VecX<Scalar> fc1_b, fc2_b, cls_b, reg_b;
};

template <typename Scalar>
void he_uniform_init_fc(RowMajorMatX<Scalar>& w, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<Scalar>(dist(rng));
  }
}

template <typename Scalar>
DetectionHead<Scalar> make_detection_head(Index in_features, Index hidden, Index num_classes,
                                          Rng& rng) {
  DetectionHead<Scalar> head;
  head.in_features = in_features;
  head.hidden = hidden;
  head.num_classes = num_classes;
  const Index cls_out = num_classes + 1;
  head.fc1_w = RowMajorMatX<Scalar>::Zero(in_features, hidden);
  head.fc2_w = RowMajorMatX<Scalar>::Zero(hidden, hidden);
  head.cls_w = RowMajorMatX<Scalar>::Zero(hidden, cls_out);
  head.reg_w = RowMajorMatX<Scalar>::Zero(hidden, 4 * cls_out);
  head.fc1_b = VecX<Scalar>::Zero(hidden);
  head.fc2_b = VecX<Scalar>::Zero(hidden);
  head.cls_b = VecX<Scalar>::Zero(cls_out);
  head.reg_b = VecX<Scalar>::Zero(4 * cls_out);
  he_uniform_init_fc(head.fc1_w, rng);
  he_uniform_init_fc(head.fc2_w, rng);
  he_uniform_init_fc(head.cls_w, rng);
  he_uniform_init_fc(head.reg_w, rng);
  return head;
}

template <typename Scalar>
struct HeadTrace {
  RowMajorMatX<Scalar> input;
  RowMajorMatX<Scalar> fc1_pre, fc1_act, fc2_pre, fc2_act;
  RowMajorMatX<Scalar> cls_logits;  // R x (C+1)
  RowMajorMatX<Scalar> reg;         // R x 4(C+1)
};

template <typename Scalar>
void head_forward(const DetectionHead<Scalar>& head, RowMajorMatX<Scalar> input,
                  HeadTrace<Scalar>& trace) {
  if (input.cols() != head.in_features) {
    throw DimensionError("head_forward: feature width mismatch");
  }
  trace.input = std::move(input);
  trace.fc1_pre.noalias() = trace.input * head.fc1_w;
  trace.fc1_pre.rowwise() += head.fc1_b.transpose();
  trace.fc1_act = trace.fc1_pre.cwiseMax(Scalar(0));
  trace.fc2_pre.noalias() = trace.fc1_act * head.fc2_w;
  trace.fc2_pre.rowwise() += head.fc2_b.transpose();
  trace.fc2_act = trace.fc2_pre.cwiseMax(Scalar(0));
  trace.cls_logits.noalias() = trace.fc2_act * head.cls_w;
  trace.cls_logits.rowwise() += head.cls_b.transpose();
  trace.reg.noalias() = trace.fc2_act * head.reg_w;
  trace.reg.rowwise() += head.reg_b.transpose();
}

template <typename Scalar>
struct HeadGrads {
  RowMajorMatX<Scalar> fc1_w, fc2_w, cls_w, reg_w;
  VecX<Scalar> fc1_b, fc2_b, cls_b, reg_b;
};

template <typename Scalar>
RowMajorMatX<Scalar> head_backward(const DetectionHead<Scalar>& head, const HeadTrace<Scalar>& trace,
                                   const RowMajorMatX<Scalar>& d_cls, const RowMajorMatX<Scalar>& d_reg,
                                   HeadGrads<Scalar>& grads) {
  grads.cls_w.noalias() = trace.fc2_act.transpose() * d_cls;
  grads.cls_b = d_cls.colwise().sum();
  grads.reg_w.noalias() = trace.fc2_act.transpose() * d_reg;
  grads.reg_b = d_reg.colwise().sum();
  RowMajorMatX<Scalar> d_fc2_act = d_cls * head.cls_w.transpose();
  d_fc2_act.noalias() += d_reg * head.reg_w.transpose();
  RowMajorMatX<Scalar> d_fc2_pre =
      (trace.fc2_pre.array() > Scalar(0)).select(d_fc2_act, Scalar(0));
  grads.fc2_w.noalias() = trace.fc1_act.transpose() * d_fc2_pre;
  grads.fc2_b = d_fc2_pre.colwise().sum();
  RowMajorMatX<Scalar> d_fc1_act = d_fc2_pre * head.fc2_w.transpose();
  RowMajorMatX<Scalar> d_fc1_pre =
      (trace.fc1_pre.array() > Scalar(0)).select(d_fc1_act, Scalar(0));
  grads.fc1_w.noalias() = trace.input.transpose() * d_fc1_pre;
  grads.fc1_b = d_fc1_pre.colwise().sum();
  return d_fc1_pre * head.fc1_w.transpose();
}

/// The composed detector: both extractors, the fusion head, RPN, and the
/// ROI-pooled detection head, plus the anchor shapes baked in at build time.
template <typename Scalar>
struct DetectorModel {
  BackboneConfig config;
  Index num_classes = 1;
  Index fc_hidden = 256;
  ConvBackbone<Scalar> dcon;
  ConvBackbone<Scalar> vedcon;
  FusionHead<Scalar> fusion;
  RpnHead<Scalar> rpn;
  DetectionHead<Scalar> head;
  AnchorSet anchors;
  RoiPoolConfig roi_cfg;

  Index feature_channels() const { return config.output_channels(); }
};

template <typename Scalar>
DetectorModel<Scalar> make_detector_model(const BackboneConfig& config, Index num_classes,
                                          Index fc_hidden, const AnchorSet& anchors,
                                          std::uint64_t seed) {
  config.validate();
  if (num_classes < 1) throw ContractError("make_detector_model: need at least one class");
  if (anchors.shapes.empty()) throw ContractError("make_detector_model: empty anchor set");
  DetectorModel<Scalar> model;
  model.config = config;
  model.num_classes = num_classes;
  model.fc_hidden = fc_hidden;
  model.anchors = anchors;
  Rng rng = make_rng(seed, 0x6d6f64656cULL);
  model.dcon = make_dconnet<Scalar>(config, rng);
  model.vedcon = make_vedconnet<Scalar>(config, rng);
  model.fusion = make_fusion_head<Scalar>(config.output_channels(), rng);
  model.rpn = make_rpn_head<Scalar>(config.output_channels(), anchors.k(), rng);
  model.roi_cfg = RoiPoolConfig{7, 7, 1.0 / anchors.stride};
  const Index in_features = model.roi_cfg.output_h * model.roi_cfg.output_w *
                            config.output_channels();
  model.head = make_detection_head<Scalar>(in_features, fc_hidden, num_classes, rng);
  return model;
}

/// Named view over every trainable tensor, in the fixed enumeration order
/// used by checkpoints and the optimizer.
template <typename Scalar>
struct NamedParam {
  std::string name;
  Scalar* data = nullptr;
  Index size = 0;
  std::array<Index, 4> dims{1, 1, 1, 1};
};

namespace detail {

template <typename Scalar, typename Fn>
void visit_conv(const std::string& name, ConvParams<Scalar>& conv, Fn&& fn) {
  fn(NamedParam<Scalar>{name + ".kernel", conv.kernel.data(), conv.kernel.size(),
                        {conv.kh, conv.kw, conv.in_channels, conv.out_channels}});
  fn(NamedParam<Scalar>{name + ".bias", conv.bias.data(), conv.bias.size(),
                        {conv.out_channels, 1, 1, 1}});
}

template <typename Scalar, typename Fn>
void visit_backbone(const std::string& name, ConvBackbone<Scalar>& net, Fn&& fn) {
  Index idx = 0;
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    for (size_t c = 0; c < net.blocks[b].size(); ++c) {
      visit_conv(name + ".b" + std::to_string(b + 1) + ".conv" + std::to_string(c + 1),
                 net.blocks[b][c], fn);
      ++idx;
    }
  }
  (void)idx;
}

template <typename Scalar, typename Fn>
void visit_fc(const std::string& name, RowMajorMatX<Scalar>& w, VecX<Scalar>& b, Fn&& fn) {
  fn(NamedParam<Scalar>{name + ".weight", w.data(), w.size(), {w.rows(), w.cols(), 1, 1}});
  fn(NamedParam<Scalar>{name + ".bias", b.data(), b.size(), {b.size(), 1, 1, 1}});
}

}  // namespace detail

template <typename Scalar, typename Fn>
void for_each_parameter(DetectorModel<Scalar>& model, Fn&& fn) {
  detail::visit_backbone("dcon", model.dcon, fn);
  detail::visit_backbone("vedcon", model.vedcon, fn);
  detail::visit_conv("fusion.smoothing", model.fusion.smoothing, fn);
  detail::visit_conv("rpn.shared", model.rpn.shared, fn);
  detail::visit_conv("rpn.objectness", model.rpn.objectness, fn);
  detail::visit_conv("rpn.regression", model.rpn.regression, fn);
  detail::visit_fc("head.fc1", model.head.fc1_w, model.head.fc1_b, fn);
  detail::visit_fc("head.fc2", model.head.fc2_w, model.head.fc2_b, fn);
  detail::visit_fc("head.cls", model.head.cls_w, model.head.cls_b, fn);
  detail::visit_fc("head.reg", model.head.reg_w, model.head.reg_b, fn);
}

template <typename Scalar>
std::vector<NamedParam<Scalar>> collect_parameters(DetectorModel<Scalar>& model) {
  std::vector<NamedParam<Scalar>> out;
  for_each_parameter(model, [&](const NamedParam<Scalar>& p) { out.push_back(p); });
  return out;
}

template <typename Scalar>
Tensor4<Scalar> extract_fused_features(const DetectorModel<Scalar>& model,
                                       const Tensor4<Scalar>& image) {
  Tensor4<Scalar> f1 = backbone_forward(model.dcon, image);
  Tensor4<Scalar> f2 = backbone_forward(model.vedcon, image);
  return fuse(f1, f2, model.fusion);
}

struct Proposal {
  Box box;
  double objectness = 0;  // foreground probability in [0,1]
};

struct ProposalConfig {
  Index pre_nms_top_n = 600;
  Index post_nms_top_n = 100;
  double nms_threshold = 0.7;
  double min_size = 2.0;
};

/// Decodes every anchor with its predicted deltas, clips to the image, drops
/// boxes under min_size, keeps the top pre_nms_top_n by objectness, applies
/// NMS and truncates to post_nms_top_n.
template <typename Scalar>
std::vector<Proposal> propose(const Tensor4<Scalar>& obj_logits, const Tensor4<Scalar>& reg,
                              Index batch_index, const std::vector<Box>& anchors, double image_w,
                              double image_h, const ProposalConfig& cfg) {
  const Index fh = obj_logits.height();
  const Index fw = obj_logits.width();
  const Index k = obj_logits.channels() / 2;
  if (static_cast<Index>(anchors.size()) != fh * fw * k) {
    throw DimensionError("propose: anchor list does not match feature grid");
  }
  struct Scored {
    Box box;
    double score;
    Index index;
  };
  std::vector<Scored> scored;
  scored.reserve(anchors.size());
  for (Index y = 0; y < fh; ++y) {
    for (Index x = 0; x < fw; ++x) {
      for (Index s = 0; s < k; ++s) {
        const Index a = (y * fw + x) * k + s;
        const double lb = static_cast<double>(obj_logits(batch_index, y, x, 2 * s));
        const double lf = static_cast<double>(obj_logits(batch_index, y, x, 2 * s + 1));
        const double p = 1.0 / (1.0 + std::exp(lb - lf));
        BoxDeltas d;
        d.tx = static_cast<double>(reg(batch_index, y, x, 4 * s));
        d.ty = static_cast<double>(reg(batch_index, y, x, 4 * s + 1));
        d.tw = static_cast<double>(reg(batch_index, y, x, 4 * s + 2));
        d.th = static_cast<double>(reg(batch_index, y, x, 4 * s + 3));
        Box b = clip_to_image(decode_deltas(anchors[static_cast<size_t>(a)], d), image_w, image_h);
        if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) ||
            !std::isfinite(b.h) || !std::isfinite(p)) {
          continue;
        }
        if (b.w < cfg.min_size || b.h < cfg.min_size) continue;
        scored.push_back({b, p, a});
      }
    }
  }
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (static_cast<Index>(scored.size()) > cfg.pre_nms_top_n) {
    scored.resize(static_cast<size_t>(cfg.pre_nms_top_n));
  }
  std::vector<std::pair<Box, double>> candidates;
  candidates.reserve(scored.size());
  for (const auto& s : scored) candidates.push_back({s.box, s.score});
  std::vector<std::pair<Box, double>> kept = nms(candidates, cfg.nms_threshold);
  if (static_cast<Index>(kept.size()) > cfg.post_nms_top_n) {
    kept.resize(static_cast<size_t>(cfg.post_nms_top_n));
  }
  std::vector<Proposal> out;
  out.reserve(kept.size());
  for (const auto& kv : kept) out.push_back(Proposal{kv.first, kv.second});
  return out;
}

struct DetectConfig {
  ProposalConfig proposals;
  double score_threshold = 0.5;
  double nms_threshold = 0.3;
};

// Pools one proposal and returns its flattened feature row.
template <typename Scalar>
RowMajorMatX<Scalar> pooled_rows(const DetectorModel<Scalar>& model,
                                 const Tensor4<Scalar>& features, Index batch_index,
                                 const std::vector<Box>& rois,
                                 std::vector<RoiPoolResult<Scalar>>* caches = nullptr) {
  const Index f = model.head.in_features;
  RowMajorMatX<Scalar> rows(static_cast<Index>(rois.size()), f);
  for (size_t r = 0; r < rois.size(); ++r) {
    RoiPoolResult<Scalar> pooled = roi_pool(features, rois[r], model.roi_cfg, batch_index);
    Eigen::Map<const VecX<Scalar>> flat(pooled.output.data(), pooled.output.size());
    rows.row(static_cast<Index>(r)) = flat.transpose();
    if (caches) caches->push_back(std::move(pooled));
  }
  return rows;
}

/// End-to-end single-image inference: fused features -> proposals -> ROI
/// pooling -> detection head -> per-class NMS -> score threshold. Output
/// boxes are clipped to the image; class ids are 1-based.
template <typename Scalar>
std::vector<Detection> detect(const DetectorModel<Scalar>& model, const Tensor4<Scalar>& image,
                              const DetectConfig& cfg) {
  if (image.batch() != 1) throw DimensionError("detect: expects a single-image tensor");
  const double image_w = static_cast<double>(model.config.input_width);
  const double image_h = static_cast<double>(model.config.input_height);
  Tensor4<Scalar> features = extract_fused_features(model, image);
  RpnOutputs<Scalar> rpn = rpn_forward(model.rpn, features);
  std::vector<Box> anchors = generate_anchors(model.anchors, features.height(), features.width(),
                                              image_w, image_h);
  std::vector<Proposal> proposals =
      propose(rpn.obj_logits, rpn.reg, 0, anchors, image_w, image_h, cfg.proposals);
  if (proposals.empty()) return {};

  std::vector<Box> rois;
  rois.reserve(proposals.size());
  for (const auto& p : proposals) rois.push_back(p.box);
  HeadTrace<Scalar> trace;
  head_forward(model.head, pooled_rows(model, features, 0, rois), trace);

  const Index cls_out = model.num_classes + 1;
  std::vector<Detection> detections;
  for (Index c = 1; c < cls_out; ++c) {
    std::vector<std::pair<Box, double>> boxes;
    std::vector<double> scores;
    for (Index r = 0; r < trace.cls_logits.rows(); ++r) {
      std::vector<double> logits(static_cast<size_t>(cls_out));
      for (Index j = 0; j < cls_out; ++j) logits[static_cast<size_t>(j)] =
          static_cast<double>(trace.cls_logits(r, j));
      softmax_inplace(logits.data(), cls_out);
      const double score = logits[static_cast<size_t>(c)];
      if (score < cfg.score_threshold) continue;
      BoxDeltas d;
      d.tx = static_cast<double>(trace.reg(r, 4 * c));
      d.ty = static_cast<double>(trace.reg(r, 4 * c + 1));
      d.tw = static_cast<double>(trace.reg(r, 4 * c + 2));
      d.th = static_cast<double>(trace.reg(r, 4 * c + 3));
      Box b = clip_to_image(decode_deltas(rois[static_cast<size_t>(r)], d), image_w, image_h);
      if (!b.valid()) continue;
      boxes.push_back({b, score});
    }
    for (const auto& kv : nms(boxes, cfg.nms_threshold)) {
      detections.push_back(Detection{kv.first, static_cast<int>(c), kv.second});
    }
  }
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return detections;
}

}  // namespace fusiondet

#endif  // FUSIONDET_MODEL_HPP
