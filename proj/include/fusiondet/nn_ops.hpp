#ifndef FUSIONDET_NN_OPS_HPP
#define FUSIONDET_NN_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fusiondet/common.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

/// 2-D convolution parameters, SAME zero padding, stride 1.
///
/// The kernel is stored as a (kh*kw*in_channels) x out_channels matrix so the
/// forward pass is a single GEMM against im2col patches. Row index r encodes
/// (ky, kx, ci) as r = (ky*kw + kx)*in_channels + ci, matching the flat
/// (kh, kw, in, out) layout used by the checkpoint format.
template <typename Scalar>
struct ConvParams {
  Index kh = 3;
  Index kw = 3;
  Index in_channels = 0;
  Index out_channels = 0;
  RowMajorMatX<Scalar> kernel;  // (kh*kw*in_channels) x out_channels, row-major
  VecX<Scalar> bias;    // out_channels

  Scalar& kernel_at(Index ky, Index kx, Index ci, Index co) {
    return kernel((ky * kw + kx) * in_channels + ci, co);
  }
  Scalar kernel_at(Index ky, Index kx, Index ci, Index co) const {
    return kernel((ky * kw + kx) * in_channels + ci, co);
  }
};

template <typename Scalar>
ConvParams<Scalar> make_conv_params(Index kh, Index kw, Index in_channels, Index out_channels) {
  if (kh <= 0 || kw <= 0 || kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("conv: kernel sides must be positive and odd for SAME padding");
  }
  if (in_channels <= 0 || out_channels <= 0) {
    throw DimensionError("conv: channel counts must be positive");
  }
  ConvParams<Scalar> p;
  p.kh = kh;
  p.kw = kw;
  p.in_channels = in_channels;
  p.out_channels = out_channels;
  p.kernel = RowMajorMatX<Scalar>::Zero(kh * kw * in_channels, out_channels);
  p.bias = VecX<Scalar>::Zero(out_channels);
  return p;
}

// Fan-in-scaled uniform init with the He-style bound sqrt(6/fan_in); biases stay zero.
template <typename Scalar>
void he_uniform_init(ConvParams<Scalar>& p, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(p.kh * p.kw * p.in_channels));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index r = 0; r < p.kernel.rows(); ++r) {
    for (Index c = 0; c < p.kernel.cols(); ++c) {
      p.kernel(r, c) = static_cast<Scalar>(dist(rng));
    }
  }
  p.bias.setZero();
}

namespace detail {

// Caps the im2col workspace; strips of output rows are processed per GEMM.
inline Index conv_strip_rows(Index width, Index patch_cols) {
  constexpr Index kMaxElements = Index(1) << 21;  // ~8 MB of float per strip
  const Index per_row = width * patch_cols;
  return std::max<Index>(1, kMaxElements / std::max<Index>(1, per_row));
}

// Copies (or accumulates) im2col patches for output rows [y0, y1) of image b.
// patches is (y1-y0)*W x kh*kw*Cin, row-major.
template <typename Scalar>
void im2col_strip(const Tensor4<Scalar>& input, Index b, Index y0, Index y1, Index kh, Index kw,
                  RowMajorMatX<Scalar>& patches) {
  const Index height = input.height();
  const Index width = input.width();
  const Index cin = input.channels();
  const Index pad_h = (kh - 1) / 2;
  const Index pad_w = (kw - 1) / 2;
  patches.setZero();
  for (Index y = y0; y < y1; ++y) {
    for (Index ky = 0; ky < kh; ++ky) {
      const Index iy = y + ky - pad_h;
      if (iy < 0 || iy >= height) continue;
      for (Index kx = 0; kx < kw; ++kx) {
        const Index col0 = (ky * kw + kx) * cin;
        const Index x_lo = std::max<Index>(0, pad_w - kx);
        const Index x_hi = std::min<Index>(width, width + pad_w - kx);
        const Scalar* src_row = input.data() + input.offset(b, iy, 0, 0);
        for (Index x = x_lo; x < x_hi; ++x) {
          const Index ix = x + kx - pad_w;
          Scalar* dst = patches.data() + ((y - y0) * width + x) * patches.cols() + col0;
          std::memcpy(dst, src_row + ix * cin, sizeof(Scalar) * static_cast<size_t>(cin));
        }
      }
    }
  }
}

// Scatter-adds patch gradients back into the input gradient (inverse of im2col_strip).
template <typename Scalar>
void col2im_strip(const RowMajorMatX<Scalar>& dpatches, Index b, Index y0, Index y1, Index kh,
                  Index kw, Tensor4<Scalar>& grad_input) {
  const Index height = grad_input.height();
  const Index width = grad_input.width();
  const Index cin = grad_input.channels();
  const Index pad_h = (kh - 1) / 2;
  const Index pad_w = (kw - 1) / 2;
  for (Index y = y0; y < y1; ++y) {
    for (Index ky = 0; ky < kh; ++ky) {
      const Index iy = y + ky - pad_h;
      if (iy < 0 || iy >= height) continue;
      for (Index kx = 0; kx < kw; ++kx) {
        const Index col0 = (ky * kw + kx) * cin;
        const Index x_lo = std::max<Index>(0, pad_w - kx);
        const Index x_hi = std::min<Index>(width, width + pad_w - kx);
        Scalar* dst_row = grad_input.data() + grad_input.offset(b, iy, 0, 0);
        for (Index x = x_lo; x < x_hi; ++x) {
          const Index ix = x + kx - pad_w;
          const Scalar* src = dpatches.data() + ((y - y0) * width + x) * dpatches.cols() + col0;
          Scalar* dst = dst_row + ix * cin;
          for (Index c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace detail

/// SAME-padded stride-1 convolution; output spatial dims equal input dims.
template <typename Scalar>
Tensor4<Scalar> conv2d_forward(const Tensor4<Scalar>& input, const ConvParams<Scalar>& params) {
  if (input.channels() != params.in_channels) {
    throw DimensionError("conv2d_forward: input has " + std::to_string(input.channels()) +
                         " channels, kernel expects " + std::to_string(params.in_channels));
  }
  const Index batch = input.batch();
  const Index height = input.height();
  const Index width = input.width();
  const Index patch_cols = params.kh * params.kw * params.in_channels;
  Tensor4<Scalar> out(batch, height, width, params.out_channels);

  // 1x1 kernels need no patch copy: the input already is the patch matrix.
  if (params.kh == 1 && params.kw == 1) {
    Eigen::Map<const RowMajorMatX<Scalar>> in_mat(input.data(), batch * height * width,
                                                  params.in_channels);
    Eigen::Map<RowMajorMatX<Scalar>> out_mat(out.data(), batch * height * width,
                                             params.out_channels);
    out_mat.noalias() = in_mat * params.kernel;
    out_mat.rowwise() += params.bias.transpose();
    return out;
  }

  const Index strip = detail::conv_strip_rows(width, patch_cols);
  RowMajorMatX<Scalar> patches(std::min(strip, height) * width, patch_cols);
  for (Index b = 0; b < batch; ++b) {
    for (Index y0 = 0; y0 < height; y0 += strip) {
      const Index y1 = std::min(height, y0 + strip);
      const Index rows = (y1 - y0) * width;
      detail::im2col_strip(input, b, y0, y1, params.kh, params.kw, patches);
      Eigen::Map<RowMajorMatX<Scalar>> out_mat(out.data() + out.offset(b, y0, 0, 0), rows,
                                               params.out_channels);
      out_mat.noalias() = patches.topRows(rows) * params.kernel;
      out_mat.rowwise() += params.bias.transpose();
    }
  }
  return out;
}

template <typename Scalar>
struct ConvGrads {
  Tensor4<Scalar> input;
  RowMajorMatX<Scalar> kernel;
  VecX<Scalar> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor4<Scalar>& input, const ConvParams<Scalar>& params,
                                  const Tensor4<Scalar>& grad_out) {
  if (input.channels() != params.in_channels) {
    throw DimensionError("conv2d_backward: input channel mismatch");
  }
  if (grad_out.batch() != input.batch() || grad_out.height() != input.height() ||
      grad_out.width() != input.width() || grad_out.channels() != params.out_channels) {
    throw DimensionError("conv2d_backward: grad_out dims " + grad_out.dims_str() +
                         " do not match forward output");
  }
  const Index batch = input.batch();
  const Index height = input.height();
  const Index width = input.width();
  const Index patch_cols = params.kh * params.kw * params.in_channels;

  ConvGrads<Scalar> grads;
  grads.input = Tensor4<Scalar>(batch, height, width, params.in_channels);
  grads.kernel = RowMajorMatX<Scalar>::Zero(patch_cols, params.out_channels);
  grads.bias = VecX<Scalar>::Zero(params.out_channels);

  Eigen::Map<const RowMajorMatX<Scalar>> gout_all(grad_out.data(), batch * height * width,
                                                  params.out_channels);
  grads.bias = gout_all.colwise().sum();

  if (params.kh == 1 && params.kw == 1) {
    Eigen::Map<const RowMajorMatX<Scalar>> in_mat(input.data(), batch * height * width,
                                                  params.in_channels);
    grads.kernel.noalias() = in_mat.transpose() * gout_all;
    Eigen::Map<RowMajorMatX<Scalar>> gin_mat(grads.input.data(), batch * height * width,
                                             params.in_channels);
    gin_mat.noalias() = gout_all * params.kernel.transpose();
    return grads;
  }

  const Index strip = detail::conv_strip_rows(width, patch_cols);
  RowMajorMatX<Scalar> patches(std::min(strip, height) * width, patch_cols);
  RowMajorMatX<Scalar> dpatches(patches.rows(), patch_cols);
  for (Index b = 0; b < batch; ++b) {
    for (Index y0 = 0; y0 < height; y0 += strip) {
      const Index y1 = std::min(height, y0 + strip);
      const Index rows = (y1 - y0) * width;
      detail::im2col_strip(input, b, y0, y1, params.kh, params.kw, patches);
      Eigen::Map<const RowMajorMatX<Scalar>> gout(grad_out.data() + grad_out.offset(b, y0, 0, 0),
                                                  rows, params.out_channels);
      grads.kernel.noalias() += patches.topRows(rows).transpose() * gout;
      dpatches.topRows(rows).noalias() = gout * params.kernel.transpose();
      detail::col2im_strip(dpatches, b, y0, y1, params.kh, params.kw, grads.input);
    }
  }
  return grads;
}

template <typename Scalar>
Tensor4<Scalar> relu(const Tensor4<Scalar>& input) {
  Tensor4<Scalar> out(input.batch(), input.height(), input.width(), input.channels());
  out.vec() = input.vec().cwiseMax(Scalar(0));
  return out;
}

// Subgradient at exactly zero is zero.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out) {
  require_same_dims(input, grad_out, "relu_backward");
  Tensor4<Scalar> grad(input.batch(), input.height(), input.width(), input.channels());
  const Scalar* x = input.data();
  const Scalar* g = grad_out.data();
  Scalar* out = grad.data();
  for (Index i = 0; i < input.size(); ++i) {
    out[i] = x[i] > Scalar(0) ? g[i] : Scalar(0);
  }
  return grad;
}

template <typename Scalar>
struct PoolResult {
  Tensor4<Scalar> output;
  std::vector<Index> argmax;  // flat input offset per output element
  std::array<Index, 4> input_dims;
};

/// 2x2 max pooling with stride 2. Ties resolve to the first occurrence in
/// row-major window order so the backward routing is deterministic.
template <typename Scalar>
PoolResult<Scalar> maxpool2(const Tensor4<Scalar>& input) {
  if (input.height() % 2 != 0 || input.width() % 2 != 0) {
    throw DimensionError("maxpool2: spatial dims must be even, got " + input.dims_str());
  }
  const Index batch = input.batch();
  const Index oh = input.height() / 2;
  const Index ow = input.width() / 2;
  const Index ch = input.channels();
  PoolResult<Scalar> result;
  result.output = Tensor4<Scalar>(batch, oh, ow, ch);
  result.argmax.assign(static_cast<size_t>(result.output.size()), 0);
  result.input_dims = input.dims();
  for (Index b = 0; b < batch; ++b) {
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x) {
        for (Index c = 0; c < ch; ++c) {
          Index best = input.offset(b, 2 * y, 2 * x, c);
          Scalar best_val = input.data()[best];
          for (Index dy = 0; dy < 2; ++dy) {
            for (Index dx = 0; dx < 2; ++dx) {
              const Index idx = input.offset(b, 2 * y + dy, 2 * x + dx, c);
              const Scalar v = input.data()[idx];
              if (v > best_val) {
                best_val = v;
                best = idx;
              }
            }
          }
          const Index o = result.output.offset(b, y, x, c);
          result.output.data()[o] = best_val;
          result.argmax[static_cast<size_t>(o)] = best;
        }
      }
    }
  }
  return result;
}

template <typename Scalar>
Tensor4<Scalar> maxpool2_backward(const std::vector<Index>& argmax,
                                  const std::array<Index, 4>& input_dims,
                                  const Tensor4<Scalar>& grad_out) {
  if (static_cast<Index>(argmax.size()) != grad_out.size()) {
    throw DimensionError("maxpool2_backward: argmax map does not match grad_out");
  }
  Tensor4<Scalar> grad(input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
  for (Index i = 0; i < grad_out.size(); ++i) {
    grad.data()[argmax[static_cast<size_t>(i)]] += grad_out.data()[i];
  }
  return grad;
}

template <typename Scalar>
Tensor4<Scalar> add(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  require_same_dims(a, b, "add");
  Tensor4<Scalar> out(a.batch(), a.height(), a.width(), a.channels());
  out.vec() = a.vec() + b.vec();
  return out;
}

// Multi-operand addition is defined as the pairwise left-to-right reduction.
template <typename Scalar>
Tensor4<Scalar> add_all(const std::vector<Tensor4<Scalar>>& terms) {
  if (terms.empty()) throw ContractError("add_all: no terms");
  Tensor4<Scalar> acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

/// Classic momentum: v <- momentum*v + grad; param <- param - lr*v.
template <typename Scalar>
void sgdm_step_raw(Scalar* param, const Scalar* grad, Scalar* velocity, Index n,
                   Scalar learning_rate, Scalar momentum) {
  for (Index i = 0; i < n; ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= learning_rate * velocity[i];
  }
}

template <typename Scalar>
void sgdm_step(VecX<Scalar>& param, const VecX<Scalar>& grad, VecX<Scalar>& velocity,
               Scalar learning_rate, Scalar momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgdm_step: param/grad/velocity sizes differ");
  }
  sgdm_step_raw(param.data(), grad.data(), velocity.data(), param.size(), learning_rate, momentum);
}

/// A named view of one flat parameter buffer plus its analytic gradient,
/// handed to finite_diff_check.
template <typename Scalar>
struct ParamView {
  std::string name;
  Scalar* values = nullptr;
  Index size = 0;
  const Scalar* analytic = nullptr;
};

/// Central-difference verification of analytic gradients.
///
/// Returns max over probed parameters of |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-8). max_probes_per_param = 0 probes every
/// entry; a positive cap probes the entries with the largest analytic
/// magnitude per parameter tensor. Capped probing keeps end-to-end checks
/// inside their time budget, and the dominant gradients are where wiring
/// bugs show up. min_analytic_floor skips entries whose analytic magnitude
/// sits below the resolution central differences can reach on a deep stack
/// (rounding noise in the two loss evaluations swamps such gradients).
template <typename Scalar>
Scalar finite_diff_check(const std::vector<ParamView<Scalar>>& params,
                         const std::function<Scalar()>& loss, Scalar epsilon,
                         Index max_probes_per_param = 0, Scalar min_analytic_floor = Scalar(0)) {
  if (!(epsilon > Scalar(0))) {
    throw ContractError("finite_diff_check: epsilon must be positive");
  }
  if (!std::isfinite(static_cast<double>(loss()))) {
    throw ContractError("finite_diff_check: loss is not a finite scalar");
  }
  Scalar max_rel = Scalar(0);
  for (const auto& p : params) {
    std::vector<Index> probes(static_cast<size_t>(p.size));
    std::iota(probes.begin(), probes.end(), Index(0));
    if (max_probes_per_param > 0 && p.size > max_probes_per_param) {
      std::stable_sort(probes.begin(), probes.end(), [&](Index a, Index b) {
        return std::abs(p.analytic[a]) > std::abs(p.analytic[b]);
      });
      probes.resize(static_cast<size_t>(max_probes_per_param));
    }
    for (Index i : probes) {
      if (min_analytic_floor > Scalar(0) && std::abs(p.analytic[i]) < min_analytic_floor) {
        continue;
      }
      const Scalar saved = p.values[i];
      p.values[i] = saved + epsilon;
      const Scalar up = loss();
      p.values[i] = saved - epsilon;
      const Scalar down = loss();
      p.values[i] = saved;
      const Scalar numeric = (up - down) / (Scalar(2) * epsilon);
      const Scalar analytic = p.analytic[i];
      const Scalar denom =
          std::max({std::abs(analytic), std::abs(numeric), Scalar(1e-8)});
      max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace fusiondet

#endif  // FUSIONDET_NN_OPS_HPP
