#ifndef FUSIONDET_TARGET_HPP
#define FUSIONDET_TARGET_HPP

#include <algorithm>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"

namespace fusiondet {

enum class BoxLabel { kNegative = 0, kPositive = 1, kIgnore = 2 };

// Overlap bands for target assignment: positive in [0.6, 1.0], negative in
// [0, 0.3], everything between ignored.
struct OverlapBands {
  double positive_lo = 0.6;
  double positive_hi = 1.0;
  double negative_lo = 0.0;
  double negative_hi = 0.3;
};

struct TargetAssignment {
  std::vector<BoxLabel> labels;
  std::vector<Index> matched_gt;  // argmax-IoU gt per candidate, -1 if gt empty
};

/// Labels each candidate box against ground truth by max IoU. With
/// force_best_match (RPN training), the highest-IoU candidate of every gt
/// with overlap > 0 is forced positive even below the positive band.
/// valid_mask, when given, marks candidates excluded from training targets
/// (cross-boundary anchors); they are labeled ignore and never forced.
inline TargetAssignment assign_targets(const std::vector<Box>& candidates,
                                       const std::vector<Box>& gt, const OverlapBands& bands,
                                       bool force_best_match = false,
                                       const std::vector<char>* valid_mask = nullptr) {
  if (valid_mask && valid_mask->size() != candidates.size()) {
    throw DimensionError("assign_targets: valid_mask size mismatch");
  }
  TargetAssignment out;
  out.labels.assign(candidates.size(), BoxLabel::kNegative);
  out.matched_gt.assign(candidates.size(), -1);
  if (gt.empty()) {
    if (valid_mask) {
      for (size_t i = 0; i < candidates.size(); ++i) {
        if (!(*valid_mask)[i]) out.labels[i] = BoxLabel::kIgnore;
      }
    }
    return out;
  }

  std::vector<double> best_iou(candidates.size(), 0.0);
  std::vector<double> gt_best_iou(gt.size(), 0.0);
  std::vector<Index> gt_best_candidate(gt.size(), -1);
  for (size_t i = 0; i < candidates.size(); ++i) {
    const bool usable = !valid_mask || (*valid_mask)[i];
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(candidates[i], gt[g]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        out.matched_gt[i] = static_cast<Index>(g);
      }
      if (usable && v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_candidate[g] = static_cast<Index>(i);
      }
    }
    if (best_iou[i] == 0.0) out.matched_gt[i] = 0;  // no overlap anywhere; keep a valid index
  }

  for (size_t i = 0; i < candidates.size(); ++i) {
    if (valid_mask && !(*valid_mask)[i]) {
      out.labels[i] = BoxLabel::kIgnore;
      continue;
    }
    const double v = best_iou[i];
    if (v >= bands.positive_lo && v <= bands.positive_hi) {
      out.labels[i] = BoxLabel::kPositive;
    } else if (v >= bands.negative_lo && v <= bands.negative_hi) {
      out.labels[i] = BoxLabel::kNegative;
    } else {
      out.labels[i] = BoxLabel::kIgnore;
    }
  }

  if (force_best_match) {
    for (size_t g = 0; g < gt.size(); ++g) {
      if (gt_best_iou[g] > 0.0 && gt_best_candidate[g] >= 0) {
        out.labels[static_cast<size_t>(gt_best_candidate[g])] = BoxLabel::kPositive;
      }
    }
  }
  return out;
}

struct SampledMinibatch {
  std::vector<Index> positives;
  std::vector<Index> negatives;

  Index total() const { return static_cast<Index>(positives.size() + negatives.size()); }
};

// Seeded subsample: positives capped at floor(total*positive_fraction),
// negatives fill the remainder.
inline SampledMinibatch sample_minibatch(const TargetAssignment& assignment, Index total,
                                         double positive_fraction, Rng& rng) {
  std::vector<Index> pos;
  std::vector<Index> neg;
  for (size_t i = 0; i < assignment.labels.size(); ++i) {
    if (assignment.labels[i] == BoxLabel::kPositive) pos.push_back(static_cast<Index>(i));
    if (assignment.labels[i] == BoxLabel::kNegative) neg.push_back(static_cast<Index>(i));
  }
  const Index pos_cap = static_cast<Index>(static_cast<double>(total) * positive_fraction);
  if (static_cast<Index>(pos.size()) > pos_cap) {
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(static_cast<size_t>(pos_cap));
    std::sort(pos.begin(), pos.end());
  }
  const Index neg_cap = total - static_cast<Index>(pos.size());
  if (static_cast<Index>(neg.size()) > neg_cap) {
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(static_cast<size_t>(neg_cap));
    std::sort(neg.begin(), neg.end());
  }
  return SampledMinibatch{std::move(pos), std::move(neg)};
}

}  // namespace fusiondet

#endif  // FUSIONDET_TARGET_HPP
