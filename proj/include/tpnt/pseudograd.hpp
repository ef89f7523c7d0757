#pragma once

#include <cstdint>
#include <vector>

#include "tpnt/layers.hpp"
#include "tpnt/net.hpp"

namespace tpnt {

// Initial gradient used to enumerate the arbitrary scalar function J.
enum class GySpec { ScalarOne, RandomMap };

// How the ReLUs of one module are differentiated in the pseudo pass.
enum class ReluPolicy {
  Stored,        // each layer's own pseudo_mode
  First,         // identity everywhere
  Second,        // x_rand mask everywhere
  LowestSecond,  // x_rand mask on the input-most ReLU, identity elsewhere
  RealMask,      // true derivative from forward caches
};

struct PseudoGradConfig {
  GySpec gy = GySpec::ScalarOne;
  int map_size = 7;  // S for enlarged maps on scalar outputs
  ReluPolicy task_relu = ReluPolicy::Second;
  ReluPolicy adapter_relu = ReluPolicy::First;
  bool xrand = true;
  double pos_fraction = 0.2;
  bool substitute_pooling = true;
  bool skip_dropout = true;
  std::uint64_t seed = 0;

  void validate() const;

  // Inserted-adapter classification: G = 1, x_rand masks in the task module.
  static PseudoGradConfig classification_insert();
  // Classification transplant: random S x S maps, x_rand only on the lowest task ReLU.
  static PseudoGradConfig classification_transplant();
  // Segmentation transplant: random H x W x C maps, identity ReLU derivatives.
  static PseudoGradConfig segmentation_transplant();
};

// G_y' for one image. Scalar outputs get [1] (scalar-one) or S x S x 1 maps;
// map outputs get a map of the output shape. Entries lie in [-1, +1].
Tensor sample_gy(const PseudoGradConfig& cfg, std::uint64_t image_id, const Shape& output_shape);

// x_rand of shape s1 x s2 x s3: one s1 x s2 slice with round(pos_fraction*s1*s2)
// entries at +1 and the rest at -1, replicated across channels. `slot`
// distinguishes the ReLUs of a module.
Tensor sample_xrand(const PseudoGradConfig& cfg, std::uint64_t image_id, const Shape& shape, std::uint64_t slot = 0);

// Record of a pseudo-backward pass. Every node is linear in its input and
// treats masks as constants, so the tape can be replayed and differentiated
// with respect to the adapter kernels it references.
struct TapeNode {
  enum class Op { ConvTranspose, Mask, Scale, Permute, UpsampleAvg, ScatterMax, Broadcast, MulMap, Identity };

  Op op = Op::Identity;
  ModuleKind module = ModuleKind::Task;
  int layer_index = 0;
  const ConvLayer* conv = nullptr;
  Tensor input;  // map entering the node (kept for ConvTranspose)
  Tensor mask;   // select where mask > 0
  float factor = 1.0f;
  std::vector<std::uint16_t> perm;  // out = permute_channels(in, perm)
  int k = 1;
  std::vector<std::uint32_t> argmax;
  Shape out_shape;
};

struct PseudoTape {
  Tensor initial;
  std::vector<TapeNode> nodes;  // nodes[0] is nearest the network output

  Tensor replay() const;
};

struct BackwardResult {
  Tensor d;  // same shape as the category module output x
  PseudoTape tape;
};

// D' through `path` (the layers above x, in forward order). Never reads
// activations unless a RealMask policy or unsubstituted pooling asks for the
// forward caches (one per path layer).
BackwardResult pseudo_backward(const Path& path, const Tensor& gy, const PseudoGradConfig& cfg,
                               std::uint64_t image_id, const Shape& x_shape,
                               const std::vector<LayerCache>* caches = nullptr);

// True gradient of <G_y, y> with respect to x, using forward caches.
Tensor real_backward(const Path& path, const Tensor& gy, const std::vector<LayerCache>& caches,
                     const Shape& x_shape);
BackwardResult real_backward_taped(const Path& path, const Tensor& gy, const std::vector<LayerCache>& caches,
                                   const Shape& x_shape);

// Gradient of lambda * ||alpha D'_S - D'_T||^2 with respect to the adapter
// kernels recorded on the student tape (back-back-propagation). Task-module
// nodes are traversed but never receive gradients; biases get none.
ModuleGrads distill_grad(const PseudoTape& tape_s, const Tensor& d_s, const Tensor& d_t, double alpha, double lambda,
                         std::size_t adapter_layers);

double distill_loss(const Tensor& d_s, const Tensor& d_t, double alpha, double lambda);

}  // namespace tpnt
