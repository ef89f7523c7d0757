#include "tpnt/pseudograd.hpp"

#include <cmath>
#include <numeric>

#include "tpnt/error.hpp"

namespace tpnt {

namespace {

constexpr std::uint64_t kGyTag = 0x4779'0000ULL;
constexpr std::uint64_t kXrandTag = 0x7872'616eULL;

Tensor select_positive(const Tensor& g, const Tensor& mask) {
  require_same_shape(g, mask, "mask");
  Tensor out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = mask[i] > 0.0f ? g[i] : 0.0f;
  return out;
}

Tensor broadcast(const Tensor& g, const Shape& out_shape) {
  const int C = out_shape[2];
  const int pixels = out_shape[0] * out_shape[1];
  Tensor out(out_shape);
  const float inv = 1.0f / static_cast<float>(pixels);
  for (int p = 0; p < pixels; ++p)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(p) * C + c] = g[c] * inv;
  return out;
}

Tensor gap(const Tensor& x) {
  const int C = x.dim(2);
  const std::size_t pixels = x.size() / C;
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) acc += x[p * C + c];
    out[c] = static_cast<float>(acc / static_cast<double>(pixels));
  }
  return out;
}

Tensor scatter(const Tensor& g, const std::vector<std::uint32_t>& argmax, const Shape& out_shape) {
  Tensor out(out_shape);
  for (std::size_t i = 0; i < g.size(); ++i) out[argmax[i]] += g[i];
  return out;
}

Tensor gather(const Tensor& adj, const std::vector<std::uint32_t>& argmax, const Shape& pooled) {
  Tensor out(pooled);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = adj[argmax[i]];
  return out;
}

Shape pooled_shape(const TapeNode& n) {
  return {n.out_shape[0] / n.k, n.out_shape[1] / n.k, n.out_shape[2]};
}

Tensor apply_node(const TapeNode& n, const Tensor& in) {
  switch (n.op) {
    case TapeNode::Op::ConvTranspose: return conv_transpose(in, n.conv->weights, n.conv->pad);
    case TapeNode::Op::Mask: return select_positive(in, n.mask);
    case TapeNode::Op::Scale: return scale(in, n.factor);
    case TapeNode::Op::Permute: return permute_channels(in, n.perm);
    case TapeNode::Op::UpsampleAvg: return upsample_avg(in, n.k);
    case TapeNode::Op::ScatterMax: return scatter(in, n.argmax, n.out_shape);
    case TapeNode::Op::Broadcast: return broadcast(in, n.out_shape);
    case TapeNode::Op::MulMap: return zip_map(in, n.mask, ZipOp::Mul);
    case TapeNode::Op::Identity: return in;
  }
  return in;
}

PseudoMode resolve(ReluPolicy policy, const PathLayer& pl) {
  switch (policy) {
    case ReluPolicy::Stored: return std::get<ReluLayer>(*pl.layer).pseudo_mode;
    case ReluPolicy::First: return PseudoMode::First;
    case ReluPolicy::Second: return PseudoMode::Second;
    case ReluPolicy::LowestSecond: return pl.relu_slot == 0 ? PseudoMode::Second : PseudoMode::First;
    case ReluPolicy::RealMask: return PseudoMode::RealMask;
  }
  return PseudoMode::First;
}

struct ChainOptions {
  ReluPolicy task_relu;
  ReluPolicy adapter_relu;
  bool substitute_pooling;
  bool skip_dropout;
};

BackwardResult run_chain(const Path& path, const Tensor& gy, const PseudoGradConfig& cfg, const ChainOptions& opt,
                         std::uint64_t image_id, const Shape& x_shape, const std::vector<LayerCache>* caches) {
  if (caches && caches->size() != path.size()) fail(Errc::CacheRequired, "one cache per path layer");
  std::vector<Shape> in_shapes(path.size());
  Shape s = x_shape;
  for (std::size_t i = 0; i < path.size(); ++i) {
    in_shapes[i] = s;
    s = output_shape(*path[i].layer, s);
  }
  // Inject G at the topmost layer whose output has G's shape; an enlarged map
  // on a scalar head enters below the global pooling.
  std::size_t start = path.size();
  if (gy.shape() != s) {
    bool found = false;
    for (std::size_t i = path.size(); i-- > 0;) {
      if (in_shapes[i] == gy.shape()) {
        start = i;
        found = true;
        break;
      }
    }
    if (!found) fail(Errc::ShapeMismatch, "G_y' shape " + shape_str(gy.shape()) + " matches no layer output");
  }
  if (start == 0 && gy.shape() != x_shape) fail(Errc::ShapeMismatch, "G_y' does not fit the path");

  BackwardResult res;
  res.tape.initial = gy;
  Tensor g = gy;
  for (std::size_t i = start; i-- > 0;) {
    const PathLayer& pl = path[i];
    const LayerCache* cache = caches ? &(*caches)[i] : nullptr;
    PseudoStep step;
    step.in_shape = in_shapes[i];
    step.substitute_pooling = opt.substitute_pooling;
    step.skip_dropout = opt.skip_dropout;
    step.cache = cache;

    TapeNode node;
    node.module = pl.module;
    node.layer_index = pl.index;
    node.out_shape = in_shapes[i];
    Tensor xrand;
    switch (kind_of(*pl.layer)) {
      case LayerKind::Conv:
        node.op = TapeNode::Op::ConvTranspose;
        node.conv = &std::get<ConvLayer>(*pl.layer);
        node.input = g;
        break;
      case LayerKind::Relu: {
        const ReluPolicy policy = pl.module == ModuleKind::Adapter ? opt.adapter_relu : opt.task_relu;
        step.relu_mode = resolve(policy, pl);
        if (step.relu_mode == PseudoMode::Second) {
          if (!cfg.xrand) fail(Errc::MissingXRand, "second-mode dummy ReLU but x_rand is disabled");
          xrand = sample_xrand(cfg, image_id, in_shapes[i],
                               Rng::key({static_cast<std::uint64_t>(pl.module), static_cast<std::uint64_t>(pl.relu_slot)}));
          step.xrand = &xrand;
          node.op = TapeNode::Op::Mask;
          node.mask = xrand;
        } else if (step.relu_mode == PseudoMode::RealMask) {
          if (!cache || !cache->valid) fail(Errc::CacheRequired, "RealMask ReLU needs the forward cache");
          node.op = TapeNode::Op::Mask;
          node.mask = cache->input;
        } else {
          node.op = TapeNode::Op::Identity;
        }
        break;
      }
      case LayerKind::MaxPool:
        if (opt.substitute_pooling) {
          node.op = TapeNode::Op::UpsampleAvg;
          node.k = std::get<MaxPoolLayer>(*pl.layer).k;
        } else {
          if (!cache || !cache->valid) fail(Errc::CacheRequired, "max-pool routing needs the forward cache");
          node.op = TapeNode::Op::ScatterMax;
          node.k = std::get<MaxPoolLayer>(*pl.layer).k;
          node.argmax = cache->argmax;
        }
        break;
      case LayerKind::AvgPool:
        node.op = TapeNode::Op::UpsampleAvg;
        node.k = std::get<AvgPoolLayer>(*pl.layer).k;
        break;
      case LayerKind::GlobalAvgPool: node.op = TapeNode::Op::Broadcast; break;
      case LayerKind::Dropout:
        if (!opt.skip_dropout && cache && !cache->dropout_mask.empty()) {
          node.op = TapeNode::Op::MulMap;
          node.mask = cache->dropout_mask;
        } else {
          node.op = TapeNode::Op::Identity;
        }
        break;
      case LayerKind::Reorder:
        node.op = TapeNode::Op::Permute;
        node.perm = inverse_perm(std::get<ReorderLayer>(*pl.layer).perm);
        break;
      case LayerKind::Rescale:
        node.op = TapeNode::Op::Scale;
        node.factor = std::get<RescaleLayer>(*pl.layer).beta;
        break;
    }
    g = pseudo_vjp(*pl.layer, g, step);
    res.tape.nodes.push_back(std::move(node));
  }
  res.d = std::move(g);
  return res;
}

}  // namespace

void PseudoGradConfig::validate() const {
  if (gy == GySpec::RandomMap && map_size < 1) fail(Errc::InvalidConfig, "map size must be >= 1");
  if (xrand && !(pos_fraction > 0.0 && pos_fraction < 1.0)) fail(Errc::InvalidConfig, "pos_fraction must be in (0,1)");
}

PseudoGradConfig PseudoGradConfig::classification_insert() {
  PseudoGradConfig c;
  c.gy = GySpec::ScalarOne;
  c.task_relu = ReluPolicy::Second;
  c.adapter_relu = ReluPolicy::First;
  c.xrand = true;
  c.pos_fraction = 0.2;
  return c;
}

PseudoGradConfig PseudoGradConfig::classification_transplant() {
  PseudoGradConfig c;
  c.gy = GySpec::RandomMap;
  c.map_size = 7;
  c.task_relu = ReluPolicy::LowestSecond;
  c.adapter_relu = ReluPolicy::First;
  c.xrand = true;
  c.pos_fraction = 0.2;
  return c;
}

PseudoGradConfig PseudoGradConfig::segmentation_transplant() {
  PseudoGradConfig c;
  c.gy = GySpec::RandomMap;
  c.task_relu = ReluPolicy::First;
  c.adapter_relu = ReluPolicy::First;
  c.xrand = false;
  return c;
}

Tensor sample_gy(const PseudoGradConfig& cfg, std::uint64_t image_id, const Shape& output_shape) {
  const bool scalar = shape_size(output_shape) == 1;
  if (cfg.gy == GySpec::ScalarOne) {
    if (!scalar) fail(Errc::InvalidConfig, "scalar-one G_y' on a map output " + shape_str(output_shape));
    return Tensor::constant({1}, 1.0f);
  }
  Rng rng(cfg.seed, Rng::key({kGyTag, image_id}));
  const Shape shape = scalar ? Shape{cfg.map_size, cfg.map_size, 1} : output_shape;
  return Tensor::uniform(shape, -1.0f, 1.0f, rng);
}

Tensor sample_xrand(const PseudoGradConfig& cfg, std::uint64_t image_id, const Shape& shape, std::uint64_t slot) {
  if (!cfg.xrand) fail(Errc::MissingXRand, "x_rand requested but disabled");
  if (shape.size() != 3) fail(Errc::ShapeMismatch, "x_rand must be s1 x s2 x s3");
  const int plane = shape[0] * shape[1];
  const int positives = static_cast<int>(std::lround(cfg.pos_fraction * plane));
  std::vector<int> idx(static_cast<std::size_t>(plane));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(cfg.seed, Rng::key({kXrandTag, image_id, slot}));
  for (int i = 0; i < positives; ++i) std::swap(idx[i], idx[i + rng.below(static_cast<std::uint64_t>(plane - i))]);
  std::vector<float> slice(static_cast<std::size_t>(plane), -1.0f);
  for (int i = 0; i < positives; ++i) slice[idx[i]] = 1.0f;
  Tensor out(shape);
  const int C = shape[2];
  for (int p = 0; p < plane; ++p)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(p) * C + c] = slice[p];
  return out;
}

Tensor PseudoTape::replay() const {
  Tensor g = initial;
  for (const TapeNode& n : nodes) g = apply_node(n, g);
  return g;
}

BackwardResult pseudo_backward(const Path& path, const Tensor& gy, const PseudoGradConfig& cfg, std::uint64_t image_id,
                               const Shape& x_shape, const std::vector<LayerCache>* caches) {
  const ChainOptions opt{cfg.task_relu, cfg.adapter_relu, cfg.substitute_pooling, cfg.skip_dropout};
  return run_chain(path, gy, cfg, opt, image_id, x_shape, caches);
}

BackwardResult real_backward_taped(const Path& path, const Tensor& gy, const std::vector<LayerCache>& caches,
                                   const Shape& x_shape) {
  for (const auto& c : caches)
    if (!c.valid) fail(Errc::CacheRequired, "real_backward needs a cached forward pass");
  if (caches.size() != path.size()) fail(Errc::CacheRequired, "real_backward needs one cache per layer");
  const ChainOptions opt{ReluPolicy::RealMask, ReluPolicy::RealMask, false, false};
  PseudoGradConfig cfg;
  cfg.xrand = false;
  return run_chain(path, gy, cfg, opt, 0, x_shape, &caches);
}

Tensor real_backward(const Path& path, const Tensor& gy, const std::vector<LayerCache>& caches, const Shape& x_shape) {
  return real_backward_taped(path, gy, caches, x_shape).d;
}

double distill_loss(const Tensor& d_s, const Tensor& d_t, double alpha, double lambda) {
  require_same_shape(d_s, d_t, "distill loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < d_s.size(); ++i) {
    const double r = alpha * d_s[i] - static_cast<double>(d_t[i]);
    acc += r * r;
  }
  return lambda * acc;
}

ModuleGrads distill_grad(const PseudoTape& tape, const Tensor& d_s, const Tensor& d_t, double alpha, double lambda,
                         std::size_t adapter_layers) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(Errc::InvalidScale, "alpha must be > 0");
  require_same_shape(d_s, d_t, "distill_grad");
  ModuleGrads grads(adapter_layers);
  std::size_t first_trainable = tape.nodes.size();
  for (std::size_t i = 0; i < tape.nodes.size(); ++i)
    if (tape.nodes[i].module == ModuleKind::Adapter && tape.nodes[i].op == TapeNode::Op::ConvTranspose) {
      first_trainable = i;
      break;
    }
  if (first_trainable == tape.nodes.size()) return grads;

  Tensor adj(d_s.shape());
  for (std::size_t i = 0; i < d_s.size(); ++i)
    adj[i] = static_cast<float>(2.0 * lambda * alpha * (alpha * d_s[i] - static_cast<double>(d_t[i])));

  for (std::size_t i = tape.nodes.size(); i-- > first_trainable;) {
    const TapeNode& n = tape.nodes[i];
    switch (n.op) {
      case TapeNode::Op::ConvTranspose:
        if (n.module == ModuleKind::Adapter) {
          auto& slot = grads.at(static_cast<std::size_t>(n.layer_index));
          slot.weights = conv_weight_grad(adj, n.input, n.conv->ksize(), n.conv->pad);
        }
        if (i == first_trainable) return grads;
        adj = conv_nobias(adj, n.conv->weights, n.conv->pad);
        break;
      case TapeNode::Op::Mask: adj = select_positive(adj, n.mask); break;
      case TapeNode::Op::Scale: adj = scale(adj, n.factor); break;
      case TapeNode::Op::Permute: adj = permute_channels(adj, inverse_perm(n.perm)); break;
      case TapeNode::Op::UpsampleAvg: adj = pool_avg(adj, n.k); break;
      case TapeNode::Op::ScatterMax: adj = gather(adj, n.argmax, pooled_shape(n)); break;
      case TapeNode::Op::MulMap: adj = zip_map(adj, n.mask, ZipOp::Mul); break;
      case TapeNode::Op::Broadcast: adj = gap(adj); break;
      case TapeNode::Op::Identity: break;
    }
  }
  return grads;
}

}  // namespace tpnt
