#ifndef FUSIONDET_ANCHOR_HPP
#define FUSIONDET_ANCHOR_HPP

#include <algorithm>
#include <set>
#include <utility>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"

namespace fusiondet {

struct AnchorSet {
  std::vector<std::pair<double, double>> shapes;  // (w, h), sorted by area
  double stride = 32.0;                           // backbone downsampling factor

  Index k() const { return static_cast<Index>(shapes.size()); }
};

inline double shape_iou_to(const Box& b, const std::pair<double, double>& shape) {
  return shape_iou(b.w, b.h, shape.first, shape.second);
}

/// k-means over box shapes with distance 1 - IoU(shapes aligned at origin).
///
/// Lloyd iterations with member-mean centroid updates; an update that would
/// raise the objective is reverted and the previous state returned, so the
/// per-iteration objective is non-increasing. Runs until assignments
/// stabilize or 300 rounds. Appends the objective after each accepted
/// iteration to objective_trace when given.
inline AnchorSet estimate_anchors(const std::vector<Box>& boxes, Index k, std::uint64_t seed,
                                  double stride = 32.0,
                                  std::vector<double>* objective_trace = nullptr) {
  if (boxes.empty()) throw ContractError("estimate_anchors: no boxes");
  if (k <= 0) throw ContractError("estimate_anchors: k must be positive");
  std::set<std::pair<double, double>> distinct;
  for (const Box& b : boxes) {
    if (!b.valid()) throw ContractError("estimate_anchors: box with non-positive size");
    distinct.insert({b.w, b.h});
  }
  if (k > static_cast<Index>(distinct.size())) {
    throw ContractError("estimate_anchors: k exceeds number of distinct shapes");
  }

  const size_t n = boxes.size();
  Rng rng = make_rng(seed, 0x616e6368ULL);
  std::vector<std::pair<double, double>> centroids;
  centroids.reserve(static_cast<size_t>(k));

  // k-means++ style seeding; weights 1-IoU squared, so duplicates of an
  // existing centroid can never be drawn.
  {
    std::uniform_int_distribution<size_t> first(0, n - 1);
    const Box& b0 = boxes[first(rng)];
    centroids.push_back({b0.w, b0.h});
    std::vector<double> d2(n);
    while (static_cast<Index>(centroids.size()) < k) {
      double total = 0;
      for (size_t i = 0; i < n; ++i) {
        double best = 0;
        for (const auto& c : centroids) best = std::max(best, shape_iou_to(boxes[i], c));
        const double d = 1.0 - best;
        d2[i] = d * d;
        total += d2[i];
      }
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      size_t pick = 0;
      for (size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target <= 0) {
          pick = i;
          break;
        }
        pick = i;
      }
      centroids.push_back({boxes[pick].w, boxes[pick].h});
    }
  }

  auto assign = [&](const std::vector<std::pair<double, double>>& cs,
                    std::vector<Index>& labels) -> double {
    double objective = 0;
    for (size_t i = 0; i < n; ++i) {
      Index best = 0;
      double best_iou = shape_iou_to(boxes[i], cs[0]);
      for (Index j = 1; j < static_cast<Index>(cs.size()); ++j) {
        const double v = shape_iou_to(boxes[i], cs[static_cast<size_t>(j)]);
        if (v > best_iou) {
          best_iou = v;
          best = j;
        }
      }
      labels[i] = best;
      objective += 1.0 - best_iou;
    }
    return objective / static_cast<double>(n);
  };

  std::vector<Index> labels(n, 0);
  double objective = assign(centroids, labels);
  if (objective_trace) objective_trace->push_back(objective);

  for (int round = 0; round < 300; ++round) {
    std::vector<std::pair<double, double>> next(centroids.size(), {0, 0});
    std::vector<Index> counts(centroids.size(), 0);
    for (size_t i = 0; i < n; ++i) {
      const size_t j = static_cast<size_t>(labels[i]);
      next[j].first += boxes[i].w;
      next[j].second += boxes[i].h;
      counts[j] += 1;
    }
    for (size_t j = 0; j < next.size(); ++j) {
      if (counts[j] > 0) {
        next[j].first /= static_cast<double>(counts[j]);
        next[j].second /= static_cast<double>(counts[j]);
      } else {
        // Re-seed an empty cluster at the worst-served box.
        size_t worst = 0;
        double worst_iou = 2.0;
        for (size_t i = 0; i < n; ++i) {
          const double v = shape_iou_to(boxes[i], centroids[static_cast<size_t>(labels[i])]);
          if (v < worst_iou) {
            worst_iou = v;
            worst = i;
          }
        }
        next[j] = {boxes[worst].w, boxes[worst].h};
      }
    }

    std::vector<Index> next_labels(n, 0);
    const double next_objective = assign(next, next_labels);
    if (next_objective > objective) break;  // mean update overshot; keep previous state
    const bool stable = (next_labels == labels);
    centroids = std::move(next);
    labels = std::move(next_labels);
    objective = next_objective;
    if (objective_trace) objective_trace->push_back(objective);
    if (stable) break;
  }

  std::sort(centroids.begin(), centroids.end(), [](const auto& a, const auto& b) {
    const double aa = a.first * a.second;
    const double bb = b.first * b.second;
    if (aa != bb) return aa < bb;
    return a < b;
  });
  AnchorSet out;
  out.shapes = std::move(centroids);
  out.stride = stride;
  return out;
}

inline double mean_shape_iou(const std::vector<Box>& boxes, const AnchorSet& anchors) {
  if (boxes.empty() || anchors.shapes.empty()) {
    throw ContractError("mean_shape_iou: empty input");
  }
  double total = 0;
  for (const Box& b : boxes) {
    double best = 0;
    for (const auto& s : anchors.shapes) best = std::max(best, shape_iou_to(b, s));
    total += best;
  }
  return total / static_cast<double>(boxes.size());
}

/// Dense anchor tiling: one box per (feature cell, shape), centered at
/// ((x+0.5)*stride, (y+0.5)*stride), unclipped. Index order is
/// (row y, col x, shape s) -> (y*W_f + x)*k + s, which fixes the RPN head
/// channel mapping.
inline std::vector<Box> generate_anchors(const AnchorSet& anchors, Index feature_h,
                                         Index feature_w, double image_w, double image_h) {
  if (anchors.shapes.empty()) throw ContractError("generate_anchors: empty anchor set");
  const double stride = anchors.stride;
  if (static_cast<double>(feature_h) * stride != image_h ||
      static_cast<double>(feature_w) * stride != image_w) {
    throw DimensionError("generate_anchors: feature dims inconsistent with image dims / stride");
  }
  std::vector<Box> out;
  out.reserve(static_cast<size_t>(feature_h * feature_w * anchors.k()));
  for (Index y = 0; y < feature_h; ++y) {
    for (Index x = 0; x < feature_w; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) * stride;
      const double cy = (static_cast<double>(y) + 0.5) * stride;
      for (const auto& s : anchors.shapes) {
        out.push_back(Box{cx - s.first / 2, cy - s.second / 2, s.first, s.second});
      }
    }
  }
  return out;
}

}  // namespace fusiondet

#endif  // FUSIONDET_ANCHOR_HPP
