#pragma once

#include <cstdint>
#include <string_view>
#include <variant>
#include <vector>

#include "tpnt/rng.hpp"
#include "tpnt/tensor.hpp"

namespace tpnt {

enum class LayerKind : std::uint8_t {
  Conv = 0,
  Relu = 1,
  MaxPool = 2,
  AvgPool = 3,
  GlobalAvgPool = 4,
  Dropout = 5,
  Reorder = 6,
  Rescale = 7,
};

// How a ReLU is differentiated in the pseudo-backward pass.
//   First    - identity, the derivative is dropped entirely
//   Second   - mask by a fixed random map, 1(x_rand > 0)
//   RealMask - mask by the cached pre-activation sign (the true derivative)
enum class PseudoMode : std::uint8_t { First = 0, Second = 1, RealMask = 2 };

struct ConvLayer {
  Tensor weights;  // m x m x D x C
  Tensor bias;     // C
  int pad = 0;

  int ksize() const { return weights.dim(0); }
  int in_ch() const { return weights.dim(2); }
  int out_ch() const { return weights.dim(3); }

  bool operator==(const ConvLayer&) const = default;
};

struct ReluLayer {
  PseudoMode pseudo_mode = PseudoMode::First;

  bool operator==(const ReluLayer&) const = default;
};

struct MaxPoolLayer {
  int k = 2;

  bool operator==(const MaxPoolLayer&) const = default;
};

struct AvgPoolLayer {
  int k = 2;

  bool operator==(const AvgPoolLayer&) const = default;
};

struct GlobalAvgPoolLayer {
  bool operator==(const GlobalAvgPoolLayer&) const = default;
};

struct DropoutLayer {
  float rate = 0.5f;

  bool operator==(const DropoutLayer&) const = default;
};

// out[..., c] = in[..., perm[c]]
struct ReorderLayer {
  std::vector<std::uint16_t> perm;

  bool operator==(const ReorderLayer&) const = default;
};

struct RescaleLayer {
  float beta = 1.0f;

  bool operator==(const RescaleLayer&) const = default;
};

using Layer = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, AvgPoolLayer, GlobalAvgPoolLayer, DropoutLayer,
                           ReorderLayer, RescaleLayer>;

LayerKind kind_of(const Layer& layer);
std::string_view kind_name(LayerKind kind);

// Checks m == 2p+1, perm bijectivity, beta > 0 and rate range.
void validate(const Layer& layer);

Shape output_shape(const Layer& layer, const Shape& in);

// Conv with kernels drawn uniform(-bound, +bound) and zero bias, pad = (m-1)/2.
ConvLayer make_conv(int ksize, int in_ch, int out_ch, float bound, Rng& rng);
ConvLayer identity_conv(int channels);

// Saved state from a forward pass that the true VJP needs.
struct LayerCache {
  bool valid = false;
  Tensor input;
  Tensor dropout_mask;  // empty in evaluation mode
  std::vector<std::uint32_t> argmax;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
};

Tensor forward(const Layer& layer, const Tensor& x, LayerCache* cache = nullptr, const ForwardOptions& opts = {});

struct VjpResult {
  Tensor grad_in;
  Tensor grad_weights;  // conv only, when requested
  Tensor grad_bias;
};

VjpResult vjp(const Layer& layer, const Tensor& grad_out, const LayerCache* cache, bool want_params = true);

struct PseudoStep {
  Shape in_shape;  // input shape of the layer in the forward direction
  PseudoMode relu_mode = PseudoMode::First;
  const Tensor* xrand = nullptr;
  bool substitute_pooling = true;
  bool skip_dropout = true;
  const LayerCache* cache = nullptr;  // only for RealMask / unsubstituted pooling
};

// Backward map that never reads forward activations unless the step asks for
// the real derivative. Linear in G for every layer kind.
Tensor pseudo_vjp(const Layer& layer, const Tensor& G, const PseudoStep& step);

// m x m x D x C -> m x m x C x D with spatial reversal.
Tensor flip_kernel(const Tensor& w);

// Same-padding conv of x with w (no bias); the transpose of a conv is this
// applied with the flipped kernel.
Tensor conv_nobias(const Tensor& x, const Tensor& w, int pad);
Tensor conv_transpose(const Tensor& g, const Tensor& w, int pad);
// dL/dw for y = conv(x, w) given dL/dy.
Tensor conv_weight_grad(const Tensor& x, const Tensor& gy, int ksize, int pad);

Tensor upsample_avg(const Tensor& g, int k);
Tensor pool_avg(const Tensor& x, int k);
std::vector<std::uint16_t> inverse_perm(const std::vector<std::uint16_t>& perm);
Tensor permute_channels(const Tensor& x, const std::vector<std::uint16_t>& perm);

}  // namespace tpnt
