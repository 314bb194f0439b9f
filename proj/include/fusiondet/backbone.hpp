#ifndef FUSIONDET_BACKBONE_HPP
#define FUSIONDET_BACKBONE_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fusiondet/common.hpp"
#include "fusiondet/nn_ops.hpp"
#include "fusiondet/tensor.hpp"

namespace fusiondet {

/// Five-block extractor configuration. width_scale multiplies every filter
/// count uniformly; the full-size configuration is width_scale 1.
struct BackboneConfig {
  std::array<Index, 5> block_filters{64, 128, 256, 512, 512};
  double width_scale = 1.0;
  Index input_height = 224;
  Index input_width = 224;
  Index input_channels = 3;

  Index scaled(Index filters) const {
    return std::max<Index>(1, static_cast<Index>(std::llround(filters * width_scale)));
  }
  Index scaled_block(Index block) const { return scaled(block_filters[static_cast<size_t>(block)]); }
  Index output_channels() const { return scaled_block(4); }
  Index feature_height() const { return input_height / 32; }
  Index feature_width() const { return input_width / 32; }

  void validate() const {
    if (input_height % 32 != 0 || input_width % 32 != 0) {
      throw DimensionError("BackboneConfig: input dims must be divisible by 32 (five 2x2 pools)");
    }
    if (input_channels <= 0) throw DimensionError("BackboneConfig: input channels must be positive");
    if (!(width_scale > 0)) throw DimensionError("BackboneConfig: width_scale must be positive");
    for (Index f : block_filters) {
      if (scaled(f) < 1) throw DimensionError("BackboneConfig: scaled filter count below 1");
    }
  }
};

/// Stack of conv+ReLU blocks, each terminated by a 2x2 max pool. The two
/// extractors differ only in convs per block: {2,2,2,2,2} vs {2,2,4,4,4}.
template <typename Scalar>
struct ConvBackbone {
  BackboneConfig config;
  std::vector<std::vector<ConvParams<Scalar>>> blocks;

  Index conv_count() const {
    Index n = 0;
    for (const auto& b : blocks) n += static_cast<Index>(b.size());
    return n;
  }
  Index pool_count() const { return static_cast<Index>(blocks.size()); }
  Index output_channels() const { return config.output_channels(); }
};

template <typename Scalar>
ConvBackbone<Scalar> make_backbone(const BackboneConfig& config,
                                   const std::array<Index, 5>& convs_per_block, Rng& rng) {
  config.validate();
  ConvBackbone<Scalar> net;
  net.config = config;
  Index in_ch = config.input_channels;
  for (size_t b = 0; b < 5; ++b) {
    std::vector<ConvParams<Scalar>> block;
    const Index out_ch = config.scaled_block(static_cast<Index>(b));
    for (Index c = 0; c < convs_per_block[b]; ++c) {
      auto conv = make_conv_params<Scalar>(3, 3, in_ch, out_ch);
      he_uniform_init(conv, rng);
      block.push_back(std::move(conv));
      in_ch = out_ch;
    }
    net.blocks.push_back(std::move(block));
  }
  return net;
}

template <typename Scalar>
ConvBackbone<Scalar> make_dconnet(const BackboneConfig& config, Rng& rng) {
  return make_backbone<Scalar>(config, {2, 2, 2, 2, 2}, rng);
}

template <typename Scalar>
ConvBackbone<Scalar> make_vedconnet(const BackboneConfig& config, Rng& rng) {
  return make_backbone<Scalar>(config, {2, 2, 4, 4, 4}, rng);
}

template <typename Scalar>
Tensor4<Scalar> backbone_forward(const ConvBackbone<Scalar>& net, const Tensor4<Scalar>& image) {
  if (image.height() != net.config.input_height || image.width() != net.config.input_width ||
      image.channels() != net.config.input_channels) {
    throw DimensionError("backbone_forward: image dims " + image.dims_str() +
                         " do not match configured input");
  }
  Tensor4<Scalar> t = image;
  for (const auto& block : net.blocks) {
    for (const auto& conv : block) {
      t = relu(conv2d_forward(t, conv));
    }
    t = maxpool2(t).output;
  }
  return t;
}

template <typename Scalar>
struct BackboneTrace {
  std::vector<Tensor4<Scalar>> conv_inputs;   // input of each conv, enumeration order
  std::vector<Tensor4<Scalar>> conv_outputs;  // pre-activation output of each conv
  std::vector<PoolResult<Scalar>> pools;      // one per block
  Tensor4<Scalar> output;
};

template <typename Scalar>
const Tensor4<Scalar>& backbone_forward_cached(const ConvBackbone<Scalar>& net,
                                               const Tensor4<Scalar>& image,
                                               BackboneTrace<Scalar>& trace) {
  if (image.height() != net.config.input_height || image.width() != net.config.input_width ||
      image.channels() != net.config.input_channels) {
    throw DimensionError("backbone_forward_cached: image dims mismatch");
  }
  trace.conv_inputs.clear();
  trace.conv_outputs.clear();
  trace.pools.clear();
  Tensor4<Scalar> t = image;
  for (const auto& block : net.blocks) {
    for (const auto& conv : block) {
      trace.conv_inputs.push_back(t);
      Tensor4<Scalar> pre = conv2d_forward(t, conv);
      t = relu(pre);
      trace.conv_outputs.push_back(std::move(pre));
    }
    trace.pools.push_back(maxpool2(t));
    t = trace.pools.back().output;
  }
  trace.output = std::move(t);
  return trace.output;
}

template <typename Scalar>
struct ConvParamGrads {
  RowMajorMatX<Scalar> kernel;
  VecX<Scalar> bias;
};

// Gradients in the same enumeration order as the forward convs; returns the
// gradient with respect to the input image.
template <typename Scalar>
Tensor4<Scalar> backbone_backward(const ConvBackbone<Scalar>& net, const BackboneTrace<Scalar>& trace,
                                  const Tensor4<Scalar>& grad_output,
                                  std::vector<ConvParamGrads<Scalar>>& grads) {
  grads.assign(static_cast<size_t>(net.conv_count()), ConvParamGrads<Scalar>{});
  Tensor4<Scalar> g = grad_output;
  Index conv_idx = net.conv_count();
  for (Index b = static_cast<Index>(net.blocks.size()) - 1; b >= 0; --b) {
    const auto& pool = trace.pools[static_cast<size_t>(b)];
    g = maxpool2_backward(pool.argmax, pool.input_dims, g);
    const auto& block = net.blocks[static_cast<size_t>(b)];
    for (Index c = static_cast<Index>(block.size()) - 1; c >= 0; --c) {
      --conv_idx;
      const auto& conv = block[static_cast<size_t>(c)];
      const auto& pre = trace.conv_outputs[static_cast<size_t>(conv_idx)];
      const auto& in = trace.conv_inputs[static_cast<size_t>(conv_idx)];
      g = relu_backward(pre, g);
      ConvGrads<Scalar> cg = conv2d_backward(in, conv, g);
      grads[static_cast<size_t>(conv_idx)].kernel = std::move(cg.kernel);
      grads[static_cast<size_t>(conv_idx)].bias = std::move(cg.bias);
      g = std::move(cg.input);
    }
  }
  return g;
}

/// Additive fusion of two equal-shaped feature maps followed by a smoothing
/// conv and ReLU: relu(conv(f1 + f2)). Swapping f1 and f2 cannot change the
/// result. The head accepts any pair of equal-shaped maps whose channel
/// count matches the smoothing conv.
template <typename Scalar>
struct FusionHead {
  ConvParams<Scalar> smoothing;
};

template <typename Scalar>
FusionHead<Scalar> make_fusion_head(Index channels, Rng& rng) {
  FusionHead<Scalar> head;
  head.smoothing = make_conv_params<Scalar>(3, 3, channels, channels);
  he_uniform_init(head.smoothing, rng);
  return head;
}

template <typename Scalar>
Tensor4<Scalar> fuse(const Tensor4<Scalar>& f1, const Tensor4<Scalar>& f2,
                     const FusionHead<Scalar>& head) {
  require_same_dims(f1, f2, "fuse");
  return relu(conv2d_forward(add(f1, f2), head.smoothing));
}

template <typename Scalar>
struct FusionTrace {
  Tensor4<Scalar> sum;
  Tensor4<Scalar> conv_out;  // pre-activation
  Tensor4<Scalar> output;
};

template <typename Scalar>
const Tensor4<Scalar>& fuse_cached(const Tensor4<Scalar>& f1, const Tensor4<Scalar>& f2,
                                   const FusionHead<Scalar>& head, FusionTrace<Scalar>& trace) {
  require_same_dims(f1, f2, "fuse");
  trace.sum = add(f1, f2);
  trace.conv_out = conv2d_forward(trace.sum, head.smoothing);
  trace.output = relu(trace.conv_out);
  return trace.output;
}

// Returns the gradient with respect to the summed input, which flows
// unchanged into both fused feature maps.
template <typename Scalar>
Tensor4<Scalar> fuse_backward(const FusionHead<Scalar>& head, const FusionTrace<Scalar>& trace,
                              const Tensor4<Scalar>& grad_output, ConvParamGrads<Scalar>& grads) {
  Tensor4<Scalar> g = relu_backward(trace.conv_out, grad_output);
  ConvGrads<Scalar> cg = conv2d_backward(trace.sum, head.smoothing, g);
  grads.kernel = std::move(cg.kernel);
  grads.bias = std::move(cg.bias);
  return std::move(cg.input);
}

}  // namespace fusiondet

#endif  // FUSIONDET_BACKBONE_HPP
