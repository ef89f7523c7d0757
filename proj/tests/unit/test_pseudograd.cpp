#include <set>

#include "support.hpp"
#include "tpnt/net.hpp"
#include "tpnt/pseudograd.hpp"

using namespace tpnt;
using tpnt::testing::max_abs_diff;
using tpnt::testing::random_tensor;

namespace {

NetModule task_module(std::initializer_list<Layer> layers) {
  NetModule g{"g", ModuleKind::Task, layers, true};
  return g;
}

ConvLayer conv(int m, int d, int c, std::uint64_t seed, float bias = 0.0f) {
  Rng rng(seed);
  ConvLayer l = make_conv(m, d, c, 0.6f, rng);
  for (float& b : l.bias.data()) b = bias == 0.0f ? 0.0f : rng.uniform(-bias, bias);
  return l;
}

// Head with a single 1x1-conv adapter over M channels and a fixed task module.
struct LinearAdapterHead {
  NetModule h;
  NetModule g;
  Path path() const { return concat(module_path(h), module_path(g)); }
};

LinearAdapterHead linear_head(int M, std::uint64_t seed) {
  Rng rng(seed);
  AdapterSpec spec;
  spec.channels = M;
  spec.kernel = AdapterKernel::Conv1x1;
  spec.reorder_seed = seed;
  spec.beta = 0.8f;
  LinearAdapterHead r{build_adapter("h", spec, rng), make_classifier_head("g", M, 6, rng)};
  return r;
}

ConvLayer& adapter_conv(NetModule& h) {
  for (auto& l : h.layers)
    if (auto* c = std::get_if<ConvLayer>(&l)) return *c;
  throw std::logic_error("adapter without conv");
}

}  // namespace

// ---- sample_gy -------------------------------------------------------------------

TEST(SampleGy, ScalarOne) {
  const PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  EXPECT_EQ(sample_gy(cfg, 3, {1}), Tensor::constant({1}, 1.0f));
}

TEST(SampleGy, RandomMapOnScalarOutputIsSxS) {
  PseudoGradConfig cfg = PseudoGradConfig::classification_transplant();
  cfg.seed = 4;
  const Tensor g = sample_gy(cfg, 9, {1});
  EXPECT_EQ(g.shape(), (Shape{7, 7, 1}));
  for (float v : g.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(SampleGy, RandomMapOnMapOutputKeepsShape) {
  PseudoGradConfig cfg = PseudoGradConfig::segmentation_transplant();
  EXPECT_EQ(sample_gy(cfg, 1, {14, 14, 2}).shape(), (Shape{14, 14, 2}));
}

TEST(SampleGy, KeyedBySeedAndImage) {
  PseudoGradConfig cfg = PseudoGradConfig::classification_transplant();
  cfg.seed = 8;
  EXPECT_TRUE(bit_equal(sample_gy(cfg, 5, {1}), sample_gy(cfg, 5, {1})));
  EXPECT_FALSE(sample_gy(cfg, 5, {1}) == sample_gy(cfg, 6, {1}));
  PseudoGradConfig other = cfg;
  other.seed = 9;
  EXPECT_FALSE(sample_gy(cfg, 5, {1}) == sample_gy(other, 5, {1}));
}

TEST(SampleGy, ScalarOneOnMapOutputIsAConfigError) {
  EXPECT_ERRC(sample_gy(PseudoGradConfig::classification_insert(), 0, {4, 4, 2}), Errc::InvalidConfig);
}

TEST(PseudoConfig, Validate) {
  PseudoGradConfig c = PseudoGradConfig::classification_insert();
  c.validate();
  c.pos_fraction = 1.0;
  EXPECT_ERRC(c.validate(), Errc::InvalidConfig);
  c.pos_fraction = 0.2;
  c.gy = GySpec::RandomMap;
  c.map_size = 0;
  EXPECT_ERRC(c.validate(), Errc::InvalidConfig);
}

// ---- sample_xrand ----------------------------------------------------------------

TEST(SampleXRand, FractionAndReplication) {
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const Tensor x = sample_xrand(cfg, 1, {5, 4, 3});
  int positives = 0;
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 4; ++w) {
      positives += x.at(h, w, 0) > 0.0f ? 1 : 0;
      EXPECT_EQ(x.at(h, w, 0), x.at(h, w, 1));
      EXPECT_EQ(x.at(h, w, 1), x.at(h, w, 2));
      EXPECT_EQ(std::abs(x.at(h, w, 0)), 1.0f);
    }
  EXPECT_EQ(positives, 4);
}

TEST(SampleXRand, DistinctAcrossImages) {
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  cfg.seed = 3;
  std::set<std::vector<float>> seen;
  for (std::uint64_t id = 0; id < 1000; ++id) {
    const Tensor x = sample_xrand(cfg, id, {7, 7, 1});
    seen.insert(std::vector<float>(x.data().begin(), x.data().end()));
  }
  EXPECT_EQ(seen.size(), 1000u);
}

TEST(SampleXRand, SlotsDiffer) {
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  EXPECT_FALSE(sample_xrand(cfg, 1, {7, 7, 1}, 0) == sample_xrand(cfg, 1, {7, 7, 1}, 1));
}

TEST(SampleXRand, DisabledRaises) {
  EXPECT_ERRC(sample_xrand(PseudoGradConfig::segmentation_transplant(), 1, {4, 4, 1}), Errc::MissingXRand);
}

TEST(PseudoBackward, SecondModeWithoutXRandRaises) {
  const NetModule g = task_module({conv(3, 2, 2, 1), ReluLayer{}, conv(1, 2, 1, 2), GlobalAvgPoolLayer{}});
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  cfg.xrand = false;
  EXPECT_ERRC(pseudo_backward(module_path(g), Tensor::constant({1}, 1.0f), cfg, 0, {4, 4, 2}), Errc::MissingXRand);
}

// ---- pseudo_backward -------------------------------------------------------------

TEST(PseudoBackward, EmptyPathIsIdentity) {
  const Tensor g = random_tensor({3, 3, 2}, 1);
  const BackwardResult r = pseudo_backward({}, g, PseudoGradConfig::segmentation_transplant(), 0, {3, 3, 2});
  EXPECT_TRUE(bit_equal(r.d, g));
}

TEST(PseudoBackward, IdentityAdapterMatchesTeacher) {
  Rng rng(2);
  const NetModule g = make_classifier_head("g", 4, 4, rng);
  NetModule h{"h", ModuleKind::Adapter, {identity_conv(4), ReluLayer{}}, false};
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const Tensor gy = sample_gy(cfg, 7, {1});
  const Tensor ds = pseudo_backward(concat(module_path(h), module_path(g)), gy, cfg, 7, {8, 8, 4}).d;
  const Tensor dt = pseudo_backward(module_path(g), gy, cfg, 7, {8, 8, 4}).d;
  EXPECT_TRUE(bit_equal(ds, dt));
}

TEST(PseudoBackward, TwoLayerPathMatchesManualComposition) {
  const ConvLayer c = conv(3, 3, 2, 17, 0.3f);
  const NetModule g = task_module({c, ReluLayer{}});
  PseudoGradConfig cfg = PseudoGradConfig::segmentation_transplant();
  cfg.xrand = true;
  cfg.task_relu = ReluPolicy::Second;
  cfg.seed = 17;
  const Shape x_shape{6, 5, 3};
  const Tensor gy = sample_gy(cfg, 4, {6, 5, 2});
  const Path p = module_path(g);
  const Tensor xr = sample_xrand(cfg, 4, {6, 5, 2}, Rng::key({static_cast<std::uint64_t>(ModuleKind::Task), 0}));
  // f'_conv(f'_dummy(G)) written out by hand.
  Tensor masked(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) masked[i] = xr[i] > 0.0f ? gy[i] : 0.0f;
  const Tensor manual = conv_transpose(masked, c.weights, c.pad);
  EXPECT_TRUE(bit_equal(pseudo_backward(p, gy, cfg, 4, x_shape).d, manual));
}

TEST(PseudoBackward, EnlargedMapEntersBelowGlobalPooling) {
  Rng rng(5);
  const NetModule g = make_classifier_head("g", 4, 4, rng);
  PseudoGradConfig cfg = PseudoGradConfig::classification_transplant();
  // 14x14 input, the head pools once to 7x7.
  const Tensor gy = sample_gy(cfg, 1, {1});
  EXPECT_EQ(pseudo_backward(module_path(g), gy, cfg, 1, {14, 14, 4}).d.shape(), (Shape{14, 14, 4}));
  EXPECT_ERRC(pseudo_backward(module_path(g), gy, cfg, 1, {10, 10, 4}), Errc::ShapeMismatch);
}

TEST(PseudoBackward, AgnosticToForwardInputs) {
  LinearAdapterHead lh = linear_head(4, 3);
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const Path p = lh.path();
  const Tensor gy = Tensor::constant({1}, 1.0f);
  const Tensor ref = pseudo_backward(p, gy, cfg, 2, {8, 8, 4}).d;
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::vector<LayerCache> caches;
    run_forward(p, random_tensor({8, 8, 4}, s, 0.0f, 2.0f), &caches);
    EXPECT_TRUE(bit_equal(pseudo_backward(p, gy, cfg, 2, {8, 8, 4}, &caches).d, ref));
  }
}

TEST(PseudoBackward, TapeReplayIsBitIdentical) {
  for (const PseudoGradConfig& base : {PseudoGradConfig::classification_insert(), PseudoGradConfig::classification_transplant()}) {
    LinearAdapterHead lh = linear_head(4, 6);
    PseudoGradConfig cfg = base;
    cfg.seed = 6;
    const Tensor gy = sample_gy(cfg, 3, {1});
    const BackwardResult r = pseudo_backward(lh.path(), gy, cfg, 3, {14, 14, 4});
    EXPECT_TRUE(bit_equal(r.tape.replay(), r.d));
  }
}

TEST(PseudoBackward, LinearInAdapterKernel) {
  LinearAdapterHead lh = linear_head(4, 7);
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const Tensor gy = Tensor::constant({1}, 1.0f);
  const Tensor w1 = random_tensor({1, 1, 4, 4}, 70), w2 = random_tensor({1, 1, 4, 4}, 71);
  auto d_for = [&](const Tensor& w) {
    adapter_conv(lh.h).weights = w;
    return pseudo_backward(lh.path(), gy, cfg, 1, {8, 8, 4}).d;
  };
  const Tensor sum_w = zip_map(scale(w1, 2.0f), scale(w2, -0.5f), ZipOp::Add);
  const Tensor lhs = d_for(sum_w);
  const Tensor rhs = zip_map(scale(d_for(w1), 2.0f), scale(d_for(w2), -0.5f), ZipOp::Add);
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5 * std::max(1.0, frobenius_norm(lhs)));
}

TEST(PseudoBackward, ReorderThenInverseIsIdentity) {
  Rng rng(8);
  const NetModule g = make_classifier_head("g", 5, 4, rng);
  NetModule plain{"h", ModuleKind::Adapter, {identity_conv(5), ReluLayer{}}, false};
  NetModule reordered{"h", ModuleKind::Adapter, {}, false};
  const auto perm = random_permutation(5, 3);
  ReorderLayer fwd{perm}, back{inverse_perm(perm)};
  reordered.layers = {fwd, back, identity_conv(5), ReluLayer{}};
  const PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const Tensor gy = Tensor::constant({1}, 1.0f);
  EXPECT_TRUE(bit_equal(pseudo_backward(concat(module_path(reordered), module_path(g)), gy, cfg, 0, {6, 6, 5}).d,
                        pseudo_backward(concat(module_path(plain), module_path(g)), gy, cfg, 0, {6, 6, 5}).d));
}

// ---- real_backward ---------------------------------------------------------------

TEST(RealBackward, LinearPathEqualsPseudo) {
  const NetModule g = task_module({conv(3, 2, 3, 1, 0.2f), RescaleLayer{1.5f}, conv(1, 3, 2, 2, 0.2f), AvgPoolLayer{2}});
  const Path p = module_path(g);
  const Tensor x = random_tensor({6, 6, 2}, 3);
  std::vector<LayerCache> caches;
  const Tensor y = run_forward(p, x, &caches);
  const Tensor gy = random_tensor(y.shape(), 4);
  EXPECT_TRUE(bit_equal(real_backward(p, gy, caches, x.shape()),
                        pseudo_backward(p, gy, PseudoGradConfig::segmentation_transplant(), 0, x.shape()).d));
}

TEST(RealBackward, MatchesFiniteDifferences) {
  const NetModule g = task_module({conv(3, 2, 3, 19, 0.3f), ReluLayer{}, MaxPoolLayer{2}, conv(1, 3, 2, 20, 0.3f),
                                   ReluLayer{}, conv(1, 2, 1, 21, 0.3f)});
  const Path p = module_path(g);
  Tensor x = random_tensor({6, 6, 2}, 19);
  std::vector<LayerCache> caches;
  const Tensor y = run_forward(p, x, &caches);
  const Tensor gy = random_tensor(y.shape(), 22);
  const Tensor d = real_backward(p, gy, caches, x.shape());
  // Double-precision-free FD is noisy per entry; compare a directional derivative.
  const Tensor dir = random_tensor(x.shape(), 23);
  const float eps = 1e-3f;
  const double fp = dot(gy, run_forward(p, zip_map(x, scale(dir, eps), ZipOp::Add)));
  const double fm = dot(gy, run_forward(p, zip_map(x, scale(dir, -eps), ZipOp::Add)));
  const double fd = (fp - fm) / (2.0 * eps);
  EXPECT_NEAR(dot(d, dir), fd, 1e-4 * std::abs(fd) + 1e-5);
}

TEST(RealBackward, FullyBlockedReluGivesZero) {
  ConvLayer c = conv(3, 2, 3, 1);
  c.bias.fill(-100.0f);
  const NetModule g = task_module({c, ReluLayer{}, conv(1, 3, 1, 2)});
  const Path p = module_path(g);
  const Tensor x = random_tensor({5, 5, 2}, 3, 0.0f, 1.0f);
  std::vector<LayerCache> caches;
  const Tensor y = run_forward(p, x, &caches);
  const Tensor d = real_backward(p, Tensor::constant(y.shape(), 1.0f), caches, x.shape());
  EXPECT_EQ(frobenius_norm(d), 0.0);
}

TEST(RealBackward, MissingCaches) {
  const NetModule g = task_module({conv(3, 2, 3, 1), ReluLayer{}});
  EXPECT_ERRC(real_backward(module_path(g), Tensor::zeros({4, 4, 3}), {}, {4, 4, 2}), Errc::CacheRequired);
  std::vector<LayerCache> stale(2);
  EXPECT_ERRC(real_backward(module_path(g), Tensor::zeros({4, 4, 3}), stale, {4, 4, 2}), Errc::CacheRequired);
}

// ---- distill_grad ----------------------------------------------------------------

TEST(DistillGrad, ZeroResidualGivesZeroGradient) {
  LinearAdapterHead lh = linear_head(4, 9);
  const PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  const BackwardResult r = pseudo_backward(lh.path(), Tensor::constant({1}, 1.0f), cfg, 1, {8, 8, 4});
  const double alpha = 2.0;
  const Tensor d_t = scale(r.d, static_cast<float>(alpha));
  const ModuleGrads g = distill_grad(r.tape, r.d, d_t, alpha, 1.0, lh.h.layers.size());
  for (const auto& lg : g)
    if (!lg.weights.empty()) EXPECT_EQ(frobenius_norm(lg.weights), 0.0);
  EXPECT_EQ(distill_loss(r.d, d_t, alpha, 1.0), 0.0);
}

TEST(DistillGrad, NonPositiveAlpha) {
  LinearAdapterHead lh = linear_head(4, 9);
  const BackwardResult r =
      pseudo_backward(lh.path(), Tensor::constant({1}, 1.0f), PseudoGradConfig::classification_insert(), 1, {8, 8, 4});
  EXPECT_ERRC(distill_grad(r.tape, r.d, r.d, 0.0, 1.0, lh.h.layers.size()), Errc::InvalidScale);
  EXPECT_ERRC(distill_grad(r.tape, r.d, r.d, -1.0, 1.0, lh.h.layers.size()), Errc::InvalidScale);
}

TEST(DistillGrad, MatchesFiniteDifferences1x1Adapter) {
  LinearAdapterHead lh = linear_head(4, 23);
  PseudoGradConfig cfg = PseudoGradConfig::classification_insert();
  cfg.seed = 23;
  const Tensor gy = Tensor::constant({1}, 1.0f);
  const Shape xs{8, 8, 4};
  const Tensor d_t = random_tensor(xs, 24, -0.05f, 0.05f);
  const double alpha = 1.3, lambda = 2.0;
  const BackwardResult r = pseudo_backward(lh.path(), gy, cfg, 5, xs);
  const ModuleGrads g = distill_grad(r.tape, r.d, d_t, alpha, lambda, lh.h.layers.size());
  std::size_t ci = 0;
  while (!std::holds_alternative<ConvLayer>(lh.h.layers[ci])) ++ci;
  ConvLayer& c = adapter_conv(lh.h);
  const double eps = 1e-3;
  for (std::size_t k = 0; k < c.weights.size(); ++k) {
    const float w0 = c.weights[k];
    c.weights[k] = static_cast<float>(w0 + eps);
    const double wp = c.weights[k];
    const double lp = distill_loss(pseudo_backward(lh.path(), gy, cfg, 5, xs).d, d_t, alpha, lambda);
    c.weights[k] = static_cast<float>(w0 - eps);
    const double wm = c.weights[k];
    const double lm = distill_loss(pseudo_backward(lh.path(), gy, cfg, 5, xs).d, d_t, alpha, lambda);
    c.weights[k] = w0;
    const double fd = (lp - lm) / (wp - wm);
    EXPECT_NEAR(g[ci].weights[k], fd, 1e-4 * std::abs(fd) + 1e-7) << k;
  }
}

TEST(DistillGrad, LinearInLambda) {
  LinearAdapterHead lh = linear_head(4, 11);
  const BackwardResult r =
      pseudo_backward(lh.path(), Tensor::constant({1}, 1.0f), PseudoGradConfig::classification_insert(), 1, {8, 8, 4});
  const Tensor d_t = random_tensor({8, 8, 4}, 12, -0.1f, 0.1f);
  const ModuleGrads a = distill_grad(r.tape, r.d, d_t, 1.0, 1.5, lh.h.layers.size());
  const ModuleGrads b = distill_grad(r.tape, r.d, d_t, 1.0, 3.0, lh.h.layers.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].weights.empty()) continue;
    for (std::size_t k = 0; k < a[i].weights.size(); ++k) EXPECT_FLOAT_EQ(b[i].weights[k], 2.0f * a[i].weights[k]);
  }
}

TEST(DistillGrad, ThreeConvAdapterMatchesFiniteDifferences) {
  Rng rng(41);
  AdapterSpec spec;
  spec.channels = 3;
  spec.convs = 3;
  spec.reorder_seed = 4;
  NetModule h = build_adapter("h", spec, rng);
  const NetModule g = make_classifier_head("g", 3, 4, rng);
  PseudoGradConfig cfg = PseudoGradConfig::classification_transplant();
  cfg.seed = 41;
  const Shape xs{14, 14, 3};
  const Tensor gy = sample_gy(cfg, 2, {1});
  const Tensor d_t = random_tensor(xs, 42, -0.01f, 0.01f);
  auto path = [&] { return concat(module_path(h), module_path(g)); };
  const BackwardResult r = pseudo_backward(path(), gy, cfg, 2, xs);
  const ModuleGrads grads = distill_grad(r.tape, r.d, d_t, 1.0, 1.0, h.layers.size());
  int checked = 0, ok = 0;
  for (std::size_t li = 0; li < h.layers.size(); ++li) {
    auto* c = std::get_if<ConvLayer>(&h.layers[li]);
    if (!c) continue;
    for (std::size_t k = 0; k < c->weights.size(); k += 7) {
      const float w0 = c->weights[k];
      c->weights[k] = w0 + 1e-2f;
      const double wp = c->weights[k];
      const double lp = distill_loss(pseudo_backward(path(), gy, cfg, 2, xs).d, d_t, 1.0, 1.0);
      c->weights[k] = w0 - 1e-2f;
      const double wm = c->weights[k];
      const double lm = distill_loss(pseudo_backward(path(), gy, cfg, 2, xs).d, d_t, 1.0, 1.0);
      c->weights[k] = w0;
      const double fd = (lp - lm) / (wp - wm);
      ++checked;
      // The loss is a polynomial of degree 6 in the kernels, so the step leaves a small bias.
      if (std::abs(fd - grads[li].weights[k]) <= 1e-2 * std::abs(fd) + 1e-6) ++ok;
    }
  }
  EXPECT_GE(ok, checked * 95 / 100) << ok << "/" << checked;
}

TEST(DistillGrad, LeavesTaskModuleUntouched) {
  LinearAdapterHead lh = linear_head(4, 13);
  const std::uint64_t before = module_hash(lh.g);
  const BackwardResult r =
      pseudo_backward(lh.path(), Tensor::constant({1}, 1.0f), PseudoGradConfig::classification_insert(), 1, {8, 8, 4});
  const ModuleGrads g = distill_grad(r.tape, r.d, random_tensor({8, 8, 4}, 1), 1.0, 1.0, lh.h.layers.size());
  EXPECT_EQ(g.size(), lh.h.layers.size());
  EXPECT_EQ(module_hash(lh.g), before);
  for (const auto& lg : g) EXPECT_TRUE(lg.bias.empty());
}
