#ifndef FUSIONDET_LOSS_HPP
#define FUSIONDET_LOSS_HPP

#include <cmath>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

/// Per-term loss record. The regression components are stored unweighted;
/// total() applies the lambdas, so
///   total = rpn_cls + lambda_rpn*rpn_reg + rcnn_cls + lambda_rcnn*rcnn_reg.
struct LossBreakdown {
  double rpn_cls = 0;
  double rpn_reg = 0;
  double rcnn_cls = 0;
  double rcnn_reg = 0;
  double lambda_rpn = 1.0;
  double lambda_rcnn = 1.0;

  double total() const {
    return rpn_cls + lambda_rpn * rpn_reg + rcnn_cls + lambda_rcnn * rcnn_reg;
  }
  bool finite() const {
    return std::isfinite(rpn_cls) && std::isfinite(rpn_reg) && std::isfinite(rcnn_cls) &&
           std::isfinite(rcnn_reg);
  }
};

struct RpnLossTerms {
  double cls = 0;  // mean binary cross-entropy over sampled anchors
  double reg = 0;  // unweighted sum of smooth-L1 / anchor positions
};

inline double delta_smooth_l1(const BoxDeltas& predicted, const BoxDeltas& target) {
  return smooth_l1(predicted.tx - target.tx) + smooth_l1(predicted.ty - target.ty) +
         smooth_l1(predicted.tw - target.tw) + smooth_l1(predicted.th - target.th);
}

/// Two-term RPN loss over one sampled anchor minibatch.
///
/// objectness holds p_i in [0,1] for every sampled anchor; labels holds
/// p_i* (1 positive, 0 negative). predicted/target deltas are consumed for
/// positives only. The classification term averages over the sampled
/// anchors; the regression term sums over positives and divides by the
/// anchor-grid position count.
inline RpnLossTerms rpn_loss(const std::vector<double>& objectness, const std::vector<int>& labels,
                             const std::vector<BoxDeltas>& predicted,
                             const std::vector<BoxDeltas>& targets, Index anchor_positions) {
  if (objectness.empty()) throw ContractError("rpn_loss: no sampled anchors");
  if (objectness.size() != labels.size() || predicted.size() != labels.size() ||
      targets.size() != labels.size()) {
    throw DimensionError("rpn_loss: input lists must be parallel");
  }
  if (anchor_positions <= 0) throw ContractError("rpn_loss: anchor position count required");
  RpnLossTerms out;
  for (size_t i = 0; i < objectness.size(); ++i) {
    const double p = objectness[i];
    out.cls += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    if (labels[i]) out.reg += delta_smooth_l1(predicted[i], targets[i]);
  }
  out.cls /= static_cast<double>(objectness.size());
  out.reg /= static_cast<double>(anchor_positions);
  return out;
}

struct RcnnLossTerms {
  double cls = 0;  // mean over ROIs of -ln p[u]
  double reg = 0;  // unweighted mean over foreground ROIs of smooth-L1
};

/// Detection-head loss over one ROI minibatch. class_probs rows must be
/// normalized within 1e-6; label 0 is background and contributes no
/// regression.
inline RcnnLossTerms rcnn_loss(const MatX<double>& class_probs, const std::vector<int>& labels,
                               const std::vector<BoxDeltas>& predicted,
                               const std::vector<BoxDeltas>& targets) {
  const Index rois = class_probs.rows();
  if (rois == 0) throw ContractError("rcnn_loss: no ROIs");
  if (static_cast<Index>(labels.size()) != rois ||
      static_cast<Index>(predicted.size()) != rois ||
      static_cast<Index>(targets.size()) != rois) {
    throw DimensionError("rcnn_loss: input lists must be parallel");
  }
  RcnnLossTerms out;
  Index foreground = 0;
  for (Index r = 0; r < rois; ++r) {
    if (std::abs(class_probs.row(r).sum() - 1.0) > 1e-6) {
      throw ContractError("rcnn_loss: class probabilities are not normalized");
    }
    const int u = labels[r];
    if (u < 0 || u >= class_probs.cols()) {
      throw DimensionError("rcnn_loss: label out of range");
    }
    out.cls += -std::log(class_probs(r, u));
    if (u > 0) {
      out.reg += delta_smooth_l1(predicted[static_cast<size_t>(r)],
                                 targets[static_cast<size_t>(r)]);
      ++foreground;
    }
  }
  out.cls /= static_cast<double>(rois);
  if (foreground > 0) out.reg /= static_cast<double>(foreground);
  return out;
}

// log(sum(exp(row))) with the usual max shift; keeps cross-entropy from
// logits finite even when softmax saturates in low precision.
template <typename Scalar>
Scalar log_sum_exp(const Scalar* logits, Index n) {
  Scalar m = logits[0];
  for (Index i = 1; i < n; ++i) m = std::max(m, logits[i]);
  Scalar s = Scalar(0);
  for (Index i = 0; i < n; ++i) s += std::exp(logits[i] - m);
  return m + std::log(s);
}

template <typename Scalar>
void softmax_inplace(Scalar* logits, Index n) {
  Scalar m = logits[0];
  for (Index i = 1; i < n; ++i) m = std::max(m, logits[i]);
  Scalar s = Scalar(0);
  for (Index i = 0; i < n; ++i) {
    logits[i] = std::exp(logits[i] - m);
    s += logits[i];
  }
  for (Index i = 0; i < n; ++i) logits[i] /= s;
}

}  // namespace fusiondet

#endif  // FUSIONDET_LOSS_HPP
