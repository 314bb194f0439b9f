#ifndef FUSIONDET_ROI_POOL_HPP
#define FUSIONDET_ROI_POOL_HPP

#include <cmath>
#include <vector>

#include "fusiondet/box.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

struct RoiPoolConfig {
  Index output_h = 7;
  Index output_w = 7;
  double spatial_scale = 1.0 / 32.0;
};

template <typename Scalar>
struct RoiPoolResult {
  Tensor4<Scalar> output;     // 1 x output_h x output_w x C
  std::vector<Index> argmax;  // flat feature offset per output element, -1 for empty bins
};

/// Quantized max pooling of an image-space ROI into a fixed grid.
///
/// The ROI is scaled into feature coordinates, snapped outward to integer
/// cell boundaries (floor for the origin, ceil for the extent), partitioned
/// into output_h x output_w integer bins and max-reduced per bin. Empty bins
/// produce 0 and route no gradient. Ties pick the first cell in row-major
/// order.
template <typename Scalar>
RoiPoolResult<Scalar> roi_pool(const Tensor4<Scalar>& features, const Box& roi,
                               const RoiPoolConfig& cfg, Index batch_index = 0) {
  if (cfg.output_h <= 0 || cfg.output_w <= 0) {
    throw ContractError("roi_pool: output size must be positive");
  }
  if (batch_index < 0 || batch_index >= features.batch()) {
    throw DimensionError("roi_pool: batch index out of range");
  }
  const Index fh = features.height();
  const Index fw = features.width();
  const Index ch = features.channels();

  Index y0 = static_cast<Index>(std::floor(roi.y * cfg.spatial_scale));
  Index x0 = static_cast<Index>(std::floor(roi.x * cfg.spatial_scale));
  Index y1 = static_cast<Index>(std::ceil((roi.y + roi.h) * cfg.spatial_scale));
  Index x1 = static_cast<Index>(std::ceil((roi.x + roi.w) * cfg.spatial_scale));
  y0 = std::clamp<Index>(y0, 0, fh);
  x0 = std::clamp<Index>(x0, 0, fw);
  y1 = std::clamp<Index>(y1, 0, fh);
  x1 = std::clamp<Index>(x1, 0, fw);
  const Index rh = y1 - y0;
  const Index rw = x1 - x0;
  if (rh <= 0 || rw <= 0) {
    throw ContractError("roi_pool: roi does not intersect the feature map");
  }

  RoiPoolResult<Scalar> result;
  result.output = Tensor4<Scalar>(1, cfg.output_h, cfg.output_w, ch);
  result.argmax.assign(static_cast<size_t>(result.output.size()), -1);
  for (Index i = 0; i < cfg.output_h; ++i) {
    const Index hs = y0 + (i * rh) / cfg.output_h;
    const Index he = y0 + (((i + 1) * rh) + cfg.output_h - 1) / cfg.output_h;  // ceil
    for (Index j = 0; j < cfg.output_w; ++j) {
      const Index ws = x0 + (j * rw) / cfg.output_w;
      const Index we = x0 + (((j + 1) * rw) + cfg.output_w - 1) / cfg.output_w;
      for (Index c = 0; c < ch; ++c) {
        Index best = -1;
        Scalar best_val = Scalar(0);
        for (Index y = hs; y < he; ++y) {
          for (Index x = ws; x < we; ++x) {
            const Index idx = features.offset(batch_index, y, x, c);
            const Scalar v = features.data()[idx];
            if (best < 0 || v > best_val) {
              best = idx;
              best_val = v;
            }
          }
        }
        const Index o = result.output.offset(0, i, j, c);
        result.output.data()[o] = best < 0 ? Scalar(0) : best_val;
        result.argmax[static_cast<size_t>(o)] = best;
      }
    }
  }
  return result;
}

// Scatter-adds grad_out into grad_features through the recorded argmax map.
template <typename Scalar>
void roi_pool_backward(const RoiPoolResult<Scalar>& pooled, const Tensor4<Scalar>& grad_out,
                       Tensor4<Scalar>& grad_features) {
  require_same_dims(pooled.output, grad_out, "roi_pool_backward");
  for (Index i = 0; i < grad_out.size(); ++i) {
    const Index src = pooled.argmax[static_cast<size_t>(i)];
    if (src >= 0) grad_features.data()[src] += grad_out.data()[i];
  }
}

}  // namespace fusiondet

#endif  // FUSIONDET_ROI_POOL_HPP
