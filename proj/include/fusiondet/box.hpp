#ifndef FUSIONDET_BOX_HPP
#define FUSIONDET_BOX_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fusiondet/common.hpp"

namespace fusiondet {

/// Axis-aligned rectangle in image pixels, top-left origin.
struct Box {
  double x = 0;  // left
  double y = 0;  // top
  double w = 0;
  double h = 0;

  double area() const { return w * h; }
  double aspect_ratio() const { return w / h; }
  double cx() const { return x + w / 2; }
  double cy() const { return y + h / 2; }
  bool valid() const { return w > 0 && h > 0; }
};

struct Detection {
  Box box;
  int class_id = 1;  // 0 is background and never appears in outputs
  double score = 0;
};

struct BoxDeltas {
  double tx = 0;
  double ty = 0;
  double tw = 0;
  double th = 0;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(a.x, b.x);
  const double iy = std::max(a.y, b.y);
  const double ix2 = std::min(a.x + a.w, b.x + b.w);
  const double iy2 = std::min(a.y + a.h, b.y + b.h);
  const double iw = std::max(0.0, ix2 - ix);
  const double ih = std::max(0.0, iy2 - iy);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// IoU of two shapes aligned at a common origin; the k-means clustering metric.
inline double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  const double uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_to_image(const Box& b, double image_w, double image_h) {
  const double x0 = std::clamp(b.x, 0.0, image_w);
  const double y0 = std::clamp(b.y, 0.0, image_h);
  const double x1 = std::clamp(b.x + b.w, 0.0, image_w);
  const double y1 = std::clamp(b.y + b.h, 0.0, image_h);
  return Box{x0, y0, x1 - x0, y1 - y0};
}

inline bool inside_image(const Box& b, double image_w, double image_h) {
  return b.x >= 0 && b.y >= 0 && b.x + b.w <= image_w && b.y + b.h <= image_h;
}

/// Center/log-size offsets of gt relative to an anchor:
///   tx = (gx-ax)/aw, ty = (gy-ay)/ah (centers), tw = ln(gw/aw), th = ln(gh/ah).
inline BoxDeltas encode_deltas(const Box& anchor, const Box& gt) {
  if (!(anchor.w > 0 && anchor.h > 0 && gt.w > 0 && gt.h > 0)) {
    throw ContractError("encode_deltas: boxes must have positive size");
  }
  BoxDeltas d;
  d.tx = (gt.cx() - anchor.cx()) / anchor.w;
  d.ty = (gt.cy() - anchor.cy()) / anchor.h;
  d.tw = std::log(gt.w / anchor.w);
  d.th = std::log(gt.h / anchor.h);
  return d;
}

inline Box decode_deltas(const Box& anchor, const BoxDeltas& d) {
  if (!(anchor.w > 0 && anchor.h > 0)) {
    throw ContractError("decode_deltas: anchor must have positive size");
  }
  const double cx = anchor.cx() + d.tx * anchor.w;
  const double cy = anchor.cy() + d.ty * anchor.h;
  const double w = anchor.w * std::exp(d.tw);
  const double h = anchor.h * std::exp(d.th);
  return Box{cx - w / 2, cy - h / 2, w, h};
}

inline double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

inline double smooth_l1_grad(double x) {
  return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0);
}

/// Greedy NMS: repeatedly keep the highest-scored box (ties by lowest original
/// index), dropping everything with IoU > threshold against it. Returns the
/// kept entries in descending-score order.
inline std::vector<std::pair<Box, double>> nms(const std::vector<std::pair<Box, double>>& boxes,
                                               double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw ContractError("nms: threshold must lie in (0,1]");
  }
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (boxes[a].second != boxes[b].second) return boxes[a].second > boxes[b].second;
    return a < b;
  });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<std::pair<Box, double>> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(boxes[i]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i].first, boxes[j].first) > iou_threshold) {
        suppressed[j] = 1;
      }
    }
  }
  return kept;
}

}  // namespace fusiondet

#endif  // FUSIONDET_BOX_HPP
