#ifndef FUSIONDET_EVALMETRICS_HPP
#define FUSIONDET_EVALMETRICS_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"

namespace fusiondet {

struct MatchResult {
  Index tp = 0;
  Index fp = 0;
  Index fn = 0;

  MatchResult& operator+=(const MatchResult& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

/// Greedy score-ordered matching: each detection (descending score, ties by
/// lowest index) claims its best unmatched gt when the IoU reaches the
/// threshold, otherwise counts as a false positive; unclaimed gt are false
/// negatives. tp+fn = |gt| and tp+fp = |detections| by construction.
MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<Box>& gt, double iou_threshold = 0.5);

// TPR (%) = TP/(TP+FN) x 100. Undefined (no ground truth) raises.
double tpr(const MatchResult& m);
// FDR (%) = FP/(TP+FP) x 100. Undefined (no detections) raises.
double fdr(const MatchResult& m);

/// Wall-clock frames per second over process_frame(i) calls for
/// i in [warmup, count); warmup iterations run but are not timed.
/// Single-threaded by contract so reported rates stay comparable.
double measure_frame_rate(const std::function<void(Index)>& process_frame, Index count,
                          Index warmup);

struct EvalRow {
  std::string dataset;
  std::optional<double> tpr_percent;  // empty when undefined
  std::optional<double> fdr_percent;
  double frame_rate_fps = 0;
};

// Fixed-format text table: Dataset | TPR (%) | FDR (%) | Frame Rate (fps),
// two decimals. Requires at least one row.
std::string render_report(const std::vector<EvalRow>& rows);

std::string report_to_json(const std::vector<EvalRow>& rows);
std::vector<EvalRow> report_from_json(const std::string& text);

}  // namespace fusiondet

#endif  // FUSIONDET_EVALMETRICS_HPP
