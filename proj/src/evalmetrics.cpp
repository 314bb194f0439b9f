#include "fusiondet/evalmetrics.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>

#include <json.hpp>

namespace fusiondet {

MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<Box>& gt, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw ContractError("match_detections: threshold must lie in (0,1]");
  }
  std::vector<size_t> order(detections.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (detections[a].score != detections[b].score) {
      return detections[a].score > detections[b].score;
    }
    return a < b;
  });

  MatchResult result;
  std::vector<char> claimed(gt.size(), 0);
  for (size_t oi : order) {
    const Detection& det = detections[oi];
    double best = 0.0;
    Index best_g = -1;
    for (size_t g = 0; g < gt.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(det.box, gt[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<Index>(g);
      }
    }
    if (best_g >= 0 && best >= iou_threshold) {
      claimed[static_cast<size_t>(best_g)] = 1;
      ++result.tp;
    } else {
      ++result.fp;
    }
  }
  result.fn = static_cast<Index>(gt.size()) - result.tp;
  return result;
}

double tpr(const MatchResult& m) {
  if (m.tp + m.fn <= 0) {
    throw UndefinedMetricError("tpr: undefined, no ground truth present");
  }
  return 100.0 * static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
}

double fdr(const MatchResult& m) {
  if (m.tp + m.fp <= 0) {
    throw UndefinedMetricError("fdr: undefined, no detections made");
  }
  return 100.0 * static_cast<double>(m.fp) / static_cast<double>(m.tp + m.fp);
}

double measure_frame_rate(const std::function<void(Index)>& process_frame, Index count,
                          Index warmup) {
  if (warmup < 0 || count - warmup < 1) {
    throw ContractError("measure_frame_rate: need at least one timed frame after warmup");
  }
  for (Index i = 0; i < warmup; ++i) process_frame(i);
  const auto start = std::chrono::steady_clock::now();
  for (Index i = warmup; i < count; ++i) process_frame(i);
  const auto stop = std::chrono::steady_clock::now();
  const double seconds = std::chrono::duration<double>(stop - start).count();
  if (seconds <= 0) return 0.0;
  return static_cast<double>(count - warmup) / seconds;
}

namespace {
std::string cell(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v);
  return buf;
}
}  // namespace

std::string render_report(const std::vector<EvalRow>& rows) {
  if (rows.empty()) throw ContractError("render_report: need at least one row");
  std::string out = "Dataset | TPR (%) | FDR (%) | Frame Rate (fps)\n";
  for (const auto& row : rows) {
    char fps[32];
    std::snprintf(fps, sizeof(fps), "%.2f", row.frame_rate_fps);
    out += (row.dataset.empty() ? "(unnamed)" : row.dataset);
    out += " | " + cell(row.tpr_percent) + " | " + cell(row.fdr_percent) + " | " + fps + "\n";
  }
  return out;
}

std::string report_to_json(const std::vector<EvalRow>& rows) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json r;
    r["dataset"] = row.dataset;
    r["tpr"] = row.tpr_percent ? nlohmann::json(*row.tpr_percent) : nlohmann::json(nullptr);
    r["fdr"] = row.fdr_percent ? nlohmann::json(*row.fdr_percent) : nlohmann::json(nullptr);
    r["fps"] = row.frame_rate_fps;
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2);
}

std::vector<EvalRow> report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report_from_json: ") + e.what());
  }
  std::vector<EvalRow> rows;
  for (const auto& r : j.at("rows")) {
    EvalRow row;
    row.dataset = r.at("dataset").get<std::string>();
    if (!r.at("tpr").is_null()) row.tpr_percent = r.at("tpr").get<double>();
    if (!r.at("fdr").is_null()) row.fdr_percent = r.at("fdr").get<double>();
    row.frame_rate_fps = r.at("fps").get<double>();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace fusiondet
