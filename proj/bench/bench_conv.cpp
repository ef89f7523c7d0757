// Serial reference vs OpenMP conv kernels on category- and task-module shapes.

#include <benchmark/benchmark.h>

#include "tpnt/kernels.hpp"
#include "tpnt/tensor.hpp"

using namespace tpnt;

namespace {

struct Buffers {
  kernels::ConvDims dims;
  Tensor x, w, b, y, gy, dw, db;

  Buffers(int hw, int d, int c, int m) : dims{hw, hw, d, c, m, (m - 1) / 2} {
    Rng rng(1);
    x = Tensor::uniform({hw, hw, d}, -1.0f, 1.0f, rng);
    w = Tensor::uniform({m, m, d, c}, -1.0f, 1.0f, rng);
    b = Tensor::uniform({c}, -1.0f, 1.0f, rng);
    gy = Tensor::uniform({hw, hw, c}, -1.0f, 1.0f, rng);
    y = Tensor({hw, hw, c});
    dw = Tensor({m, m, d, c});
    db = Tensor({c});
  }
};

void set_counters(benchmark::State& state, const kernels::ConvDims& d) {
  const double flops = 2.0 * d.height * d.width * d.in_ch * d.out_ch * d.ksize * d.ksize;
  state.counters["flops"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ForwardSerial(benchmark::State& state) {
  Buffers buf(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), static_cast<int>(state.range(2)),
              static_cast<int>(state.range(3)));
  for (auto _ : state) {
    kernels::serial::conv2d_forward(buf.x.ptr(), buf.w.ptr(), buf.b.ptr(), buf.y.ptr(), buf.dims);
    benchmark::DoNotOptimize(buf.y.ptr());
  }
  set_counters(state, buf.dims);
}

void BM_ForwardOmp(benchmark::State& state) {
  Buffers buf(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), static_cast<int>(state.range(2)),
              static_cast<int>(state.range(3)));
  for (auto _ : state) {
    kernels::conv2d_forward(buf.x.ptr(), buf.w.ptr(), buf.b.ptr(), buf.y.ptr(), buf.dims);
    benchmark::DoNotOptimize(buf.y.ptr());
  }
  set_counters(state, buf.dims);
  state.counters["threads"] = kernels::max_threads();
}

void BM_WeightGradSerial(benchmark::State& state) {
  Buffers buf(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), static_cast<int>(state.range(2)),
              static_cast<int>(state.range(3)));
  for (auto _ : state) {
    kernels::serial::conv2d_weight_grad(buf.x.ptr(), buf.gy.ptr(), buf.dw.ptr(), buf.db.ptr(), buf.dims);
    benchmark::DoNotOptimize(buf.dw.ptr());
  }
  set_counters(state, buf.dims);
}

void BM_WeightGradOmp(benchmark::State& state) {
  Buffers buf(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), static_cast<int>(state.range(2)),
              static_cast<int>(state.range(3)));
  for (auto _ : state) {
    kernels::conv2d_weight_grad(buf.x.ptr(), buf.gy.ptr(), buf.dw.ptr(), buf.db.ptr(), buf.dims);
    benchmark::DoNotOptimize(buf.dw.ptr());
  }
  set_counters(state, buf.dims);
  state.counters["threads"] = kernels::max_threads();
}

// {H=W, D, C, m}
void shapes(benchmark::internal::Benchmark* b) {
  b->Args({28, 1, 8, 3});
  b->Args({28, 8, 8, 3});
  b->Args({14, 8, 8, 3});
  b->Args({14, 8, 8, 1});
  b->Args({56, 16, 16, 3});
}

}  // namespace

BENCHMARK(BM_ForwardSerial)->Apply(shapes);
BENCHMARK(BM_ForwardOmp)->Apply(shapes);
BENCHMARK(BM_WeightGradSerial)->Apply(shapes);
BENCHMARK(BM_WeightGradOmp)->Apply(shapes);

BENCHMARK_MAIN();
