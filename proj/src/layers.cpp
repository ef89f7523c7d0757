#include "tpnt/layers.hpp"

#include <algorithm>
#include <cmath>

#include "tpnt/error.hpp"
#include "tpnt/kernels.hpp"

namespace tpnt {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void require_map(const Shape& s, const char* where) {
  if (s.size() != 3) fail(Errc::ShapeMismatch, std::string(where) + ": expected H x W x C, got " + shape_str(s));
}

void require_divisible(const Shape& s, int k, const char* where) {
  require_map(s, where);
  if (k < 1 || s[0] % k != 0 || s[1] % k != 0)
    fail(Errc::ShapeMismatch, std::string(where) + ": " + shape_str(s) + " not divisible by " + std::to_string(k));
}

const LayerCache& require_cache(const LayerCache* cache, const char* where) {
  if (!cache || !cache->valid) fail(Errc::CacheRequired, where);
  return *cache;
}

Tensor mask_positive(const Tensor& g, const Tensor& ref) {
  require_same_shape(g, ref, "relu mask");
  Tensor out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = ref[i] > 0.0f ? g[i] : 0.0f;
  return out;
}

Tensor broadcast_gap(const Tensor& g, const Shape& in_shape) {
  require_map(in_shape, "global avg pool");
  const int C = in_shape[2];
  if (g.size() != static_cast<std::size_t>(C)) fail(Errc::ShapeMismatch, "global avg pool gradient");
  const int pixels = in_shape[0] * in_shape[1];
  Tensor out(in_shape);
  const float inv = 1.0f / static_cast<float>(pixels);
  for (int p = 0; p < pixels; ++p)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(p) * C + c] = g[c] * inv;
  return out;
}

Tensor scatter_argmax(const Tensor& g, const LayerCache& cache) {
  Tensor out(cache.input.shape());
  if (cache.argmax.size() != g.size()) fail(Errc::ShapeMismatch, "max pool gradient");
  for (std::size_t i = 0; i < g.size(); ++i) out[cache.argmax[i]] += g[i];
  return out;
}

}  // namespace

LayerKind kind_of(const Layer& layer) { return static_cast<LayerKind>(layer.index()); }

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Reorder: return "reorder";
    case LayerKind::Rescale: return "rescale";
  }
  return "unknown";
}

void validate(const Layer& layer) {
  std::visit(overloaded{
                 [](const ConvLayer& c) {
                   if (c.weights.rank() != 4 || c.weights.dim(0) != c.weights.dim(1))
                     fail(Errc::InvalidShape, "conv weights must be m x m x D x C");
                   if (c.ksize() != 2 * c.pad + 1) fail(Errc::InvalidShape, "conv requires m == 2p+1");
                   if (c.bias.rank() != 1 || c.bias.dim(0) != c.out_ch())
                     fail(Errc::InvalidShape, "conv bias must have C entries");
                 },
                 [](const ReorderLayer& r) {
                   std::vector<bool> seen(r.perm.size(), false);
                   for (auto p : r.perm) {
                     if (p >= r.perm.size() || seen[p]) fail(Errc::InvalidParams, "reorder is not a bijection");
                     seen[p] = true;
                   }
                 },
                 [](const RescaleLayer& r) {
                   if (!(r.beta > 0.0f) || !std::isfinite(r.beta)) fail(Errc::InvalidScale, "rescale beta must be > 0");
                 },
                 [](const DropoutLayer& d) {
                   if (!(d.rate >= 0.0f && d.rate < 1.0f)) fail(Errc::InvalidParams, "dropout rate outside [0,1)");
                 },
                 [](const MaxPoolLayer& p) {
                   if (p.k < 1) fail(Errc::InvalidParams, "pool size < 1");
                 },
                 [](const AvgPoolLayer& p) {
                   if (p.k < 1) fail(Errc::InvalidParams, "pool size < 1");
                 },
                 [](const auto&) {},
             },
             layer);
}

Shape output_shape(const Layer& layer, const Shape& in) {
  return std::visit(overloaded{
                        [&](const ConvLayer& c) -> Shape {
                          require_map(in, "conv");
                          if (in[2] != c.in_ch())
                            fail(Errc::ShapeMismatch, "conv expects " + std::to_string(c.in_ch()) + " channels, got " +
                                                          shape_str(in));
                          return {in[0], in[1], c.out_ch()};
                        },
                        [&](const MaxPoolLayer& p) -> Shape {
                          require_divisible(in, p.k, "maxpool");
                          return {in[0] / p.k, in[1] / p.k, in[2]};
                        },
                        [&](const AvgPoolLayer& p) -> Shape {
                          require_divisible(in, p.k, "avgpool");
                          return {in[0] / p.k, in[1] / p.k, in[2]};
                        },
                        [&](const GlobalAvgPoolLayer&) -> Shape {
                          require_map(in, "global avg pool");
                          return {in[2]};
                        },
                        [&](const ReorderLayer& r) -> Shape {
                          require_map(in, "reorder");
                          if (static_cast<std::size_t>(in[2]) != r.perm.size())
                            fail(Errc::ShapeMismatch, "reorder channel count");
                          return in;
                        },
                        [&](const auto&) -> Shape { return in; },
                    },
                    layer);
}

ConvLayer make_conv(int ksize, int in_ch, int out_ch, float bound, Rng& rng) {
  ConvLayer c;
  c.weights = Tensor::uniform({ksize, ksize, in_ch, out_ch}, -bound, bound, rng);
  c.bias = Tensor::zeros({out_ch});
  c.pad = (ksize - 1) / 2;
  return c;
}

ConvLayer identity_conv(int channels) {
  ConvLayer c;
  c.weights = Tensor::zeros({1, 1, channels, channels});
  for (int k = 0; k < channels; ++k) c.weights[static_cast<std::size_t>(k) * channels + k] = 1.0f;
  c.bias = Tensor::zeros({channels});
  c.pad = 0;
  return c;
}

Tensor conv_nobias(const Tensor& x, const Tensor& w, int pad) {
  require_map(x.shape(), "conv");
  if (x.dim(2) != w.dim(2)) fail(Errc::ShapeMismatch, "conv channel mismatch: " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  const kernels::ConvDims d{x.dim(0), x.dim(1), w.dim(2), w.dim(3), w.dim(0), pad};
  Tensor y({d.height, d.width, d.out_ch});
  kernels::conv2d_forward(x.ptr(), w.ptr(), nullptr, y.ptr(), d);
  return y;
}

Tensor conv_transpose(const Tensor& g, const Tensor& w, int pad) {
  require_map(g.shape(), "conv transpose");
  if (g.dim(2) != w.dim(3)) fail(Errc::ShapeMismatch, "conv transpose channel mismatch");
  return conv_nobias(g, flip_kernel(w), pad);
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& gy, int ksize, int pad) {
  require_map(x.shape(), "conv weight grad");
  require_map(gy.shape(), "conv weight grad");
  const kernels::ConvDims d{x.dim(0), x.dim(1), x.dim(2), gy.dim(2), ksize, pad};
  Tensor dw({ksize, ksize, d.in_ch, d.out_ch});
  kernels::conv2d_weight_grad(x.ptr(), gy.ptr(), dw.ptr(), nullptr, d);
  return dw;
}

Tensor flip_kernel(const Tensor& w) {
  if (w.rank() != 4 || w.dim(0) != w.dim(1)) fail(Errc::InvalidShape, "flip_kernel expects m x m x D x C");
  Tensor out({w.dim(0), w.dim(1), w.dim(3), w.dim(2)});
  kernels::flip_kernel(w.ptr(), out.ptr(), w.dim(0), w.dim(2), w.dim(3));
  return out;
}

Tensor upsample_avg(const Tensor& g, int k) {
  require_map(g.shape(), "avgpool gradient");
  const int H = g.dim(0) * k, W = g.dim(1) * k, C = g.dim(2);
  Tensor out({H, W, C});
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < C; ++c) out.at(h, w, c) = g.at(h / k, w / k, c) * inv;
  return out;
}

Tensor pool_avg(const Tensor& x, int k) {
  require_divisible(x.shape(), k, "avgpool");
  const int H = x.dim(0) / k, W = x.dim(1) / k, C = x.dim(2);
  Tensor out({H, W, C});
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) acc += x.at(h * k + i, w * k + j, c);
        out.at(h, w, c) = static_cast<float>(acc / (k * k));
      }
  return out;
}

std::vector<std::uint16_t> inverse_perm(const std::vector<std::uint16_t>& perm) {
  std::vector<std::uint16_t> inv(perm.size());
  for (std::size_t c = 0; c < perm.size(); ++c) inv[perm[c]] = static_cast<std::uint16_t>(c);
  return inv;
}

Tensor permute_channels(const Tensor& x, const std::vector<std::uint16_t>& perm) {
  require_map(x.shape(), "reorder");
  const int C = x.dim(2);
  if (static_cast<std::size_t>(C) != perm.size()) fail(Errc::ShapeMismatch, "reorder channel count");
  Tensor out(x.shape());
  const std::size_t pixels = x.size() / C;
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < C; ++c) out[p * C + c] = x[p * C + perm[c]];
  return out;
}

Tensor forward(const Layer& layer, const Tensor& x, LayerCache* cache, const ForwardOptions& opts) {
  const Shape out_shape = output_shape(layer, x.shape());
  if (cache) {
    *cache = LayerCache{};
    cache->valid = true;
    cache->input = x;
  }
  return std::visit(
      overloaded{
          [&](const ConvLayer& c) {
            const kernels::ConvDims d{x.dim(0), x.dim(1), c.in_ch(), c.out_ch(), c.ksize(), c.pad};
            Tensor y(out_shape);
            kernels::conv2d_forward(x.ptr(), c.weights.ptr(), c.bias.ptr(), y.ptr(), d);
            return y;
          },
          [&](const ReluLayer&) {
            Tensor y(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
            return y;
          },
          [&](const MaxPoolLayer& p) {
            Tensor y(out_shape);
            std::vector<std::uint32_t> arg(y.size());
            const int C = x.dim(2);
            for (int h = 0; h < out_shape[0]; ++h)
              for (int w = 0; w < out_shape[1]; ++w)
                for (int c = 0; c < C; ++c) {
                  std::uint32_t best = 0;
                  float bv = 0.0f;
                  bool first = true;
                  for (int i = 0; i < p.k; ++i)
                    for (int j = 0; j < p.k; ++j) {
                      const int hh = h * p.k + i, ww = w * p.k + j;
                      const float v = x.at(hh, ww, c);
                      if (first || v > bv) {
                        bv = v;
                        best = static_cast<std::uint32_t>((hh * x.dim(1) + ww) * C + c);
                        first = false;
                      }
                    }
                  y.at(h, w, c) = bv;
                  arg[(static_cast<std::size_t>(h) * out_shape[1] + w) * C + c] = best;
                }
            if (cache) cache->argmax = std::move(arg);
            return y;
          },
          [&](const AvgPoolLayer& p) { return pool_avg(x, p.k); },
          [&](const GlobalAvgPoolLayer&) {
            const int C = x.dim(2);
            const std::size_t pixels = x.size() / C;
            Tensor y(out_shape);
            for (int c = 0; c < C; ++c) {
              double acc = 0.0;
              for (std::size_t p = 0; p < pixels; ++p) acc += x[p * C + c];
              y[c] = static_cast<float>(acc / static_cast<double>(pixels));
            }
            return y;
          },
          [&](const DropoutLayer& d) {
            if (!opts.training || d.rate == 0.0f) return x;
            if (!opts.dropout_rng) fail(Errc::InvalidParams, "training dropout needs an rng");
            Tensor mask(x.shape());
            const float keep = 1.0f - d.rate;
            for (float& m : mask.data()) m = opts.dropout_rng->uniform01f() < keep ? 1.0f / keep : 0.0f;
            if (cache) cache->dropout_mask = mask;
            return zip_map(x, mask, ZipOp::Mul);
          },
          [&](const ReorderLayer& r) { return permute_channels(x, r.perm); },
          [&](const RescaleLayer& r) { return scale(x, r.beta); },
      },
      layer);
}

VjpResult vjp(const Layer& layer, const Tensor& grad_out, const LayerCache* cache_ptr, bool want_params) {
  const LayerCache& cache = require_cache(cache_ptr, "vjp needs the forward cache");
  const Shape expect = output_shape(layer, cache.input.shape());
  if (grad_out.shape() != expect)
    fail(Errc::ShapeMismatch, "vjp gradient " + shape_str(grad_out.shape()) + " vs output " + shape_str(expect));
  VjpResult r;
  std::visit(overloaded{
                 [&](const ConvLayer& c) {
                   r.grad_in = conv_transpose(grad_out, c.weights, c.pad);
                   if (want_params) {
                     const kernels::ConvDims d{grad_out.dim(0), grad_out.dim(1), c.in_ch(), c.out_ch(), c.ksize(), c.pad};
                     r.grad_weights = Tensor(c.weights.shape());
                     r.grad_bias = Tensor(c.bias.shape());
                     kernels::conv2d_weight_grad(cache.input.ptr(), grad_out.ptr(), r.grad_weights.ptr(),
                                                 r.grad_bias.ptr(), d);
                   }
                 },
                 [&](const ReluLayer&) { r.grad_in = mask_positive(grad_out, cache.input); },
                 [&](const MaxPoolLayer&) { r.grad_in = scatter_argmax(grad_out, cache); },
                 [&](const AvgPoolLayer& p) { r.grad_in = upsample_avg(grad_out, p.k); },
                 [&](const GlobalAvgPoolLayer&) { r.grad_in = broadcast_gap(grad_out, cache.input.shape()); },
                 [&](const DropoutLayer&) {
                   r.grad_in = cache.dropout_mask.empty() ? grad_out : zip_map(grad_out, cache.dropout_mask, ZipOp::Mul);
                 },
                 [&](const ReorderLayer& ro) { r.grad_in = permute_channels(grad_out, inverse_perm(ro.perm)); },
                 [&](const RescaleLayer& rs) { r.grad_in = scale(grad_out, rs.beta); },
             },
             layer);
  return r;
}

Tensor pseudo_vjp(const Layer& layer, const Tensor& G, const PseudoStep& step) {
  const Shape expect = output_shape(layer, step.in_shape);
  if (G.shape() != expect)
    fail(Errc::ShapeMismatch, "pseudo_vjp gradient " + shape_str(G.shape()) + " vs output " + shape_str(expect));
  return std::visit(
      overloaded{
          [&](const ConvLayer& c) { return conv_transpose(G, c.weights, c.pad); },
          [&](const ReluLayer&) -> Tensor {
            switch (step.relu_mode) {
              case PseudoMode::First: return G;
              case PseudoMode::Second:
                if (!step.xrand) fail(Errc::MissingXRand, "second-mode dummy ReLU without x_rand");
                return mask_positive(G, *step.xrand);
              case PseudoMode::RealMask:
                return mask_positive(G, require_cache(step.cache, "RealMask ReLU needs the forward cache").input);
            }
            return G;
          },
          [&](const MaxPoolLayer& p) -> Tensor {
            if (step.substitute_pooling) return upsample_avg(G, p.k);
            return scatter_argmax(G, require_cache(step.cache, "max-pool routing needs the forward cache"));
          },
          [&](const AvgPoolLayer& p) { return upsample_avg(G, p.k); },
          [&](const GlobalAvgPoolLayer&) { return broadcast_gap(G, step.in_shape); },
          [&](const DropoutLayer&) -> Tensor {
            if (step.skip_dropout || !step.cache || step.cache->dropout_mask.empty()) return G;
            return zip_map(G, step.cache->dropout_mask, ZipOp::Mul);
          },
          [&](const ReorderLayer& ro) { return permute_channels(G, inverse_perm(ro.perm)); },
          [&](const RescaleLayer& rs) { return scale(G, rs.beta); },
      },
      layer);
}

}  // namespace tpnt
