#pragma once

#include <cstdint>
#include <vector>

#include "tpnt/eval.hpp"
#include "tpnt/train.hpp"

namespace tpnt {

// Desk-scale analogs of the paper's experiments on synthetic categories.

struct BenchSettings {
  int channels = 8;  // M, category module output channels
  int hidden = 8;    // task module width
  int teacher_images = 1000;
  int pool_images = 100;  // labeled pool the adapter may draw N samples from
  int eval_images = 400;
  int base_epochs = 20;
  PretrainConfig pretrain;
  TrainConfig train;
  std::uint64_t seed = 1;
};

// Preset category used by the benchmarks: noise 0.2, negatives drawn from two
// other families.
SynthCategory bench_category(ShapeFamily family);

struct Teacher {
  NetModule f;
  NetModule g;
  PretrainReport report;
};

// Network pretrained on the union of several categories, the shared starting
// point of every teacher.
Teacher base_network(const std::vector<SynthCategory>& cats, TaskKind task, const BenchSettings& s);

// Fine-tunes a copy of `base` on one category.
Teacher train_teacher(const SynthCategory& cat, TaskKind task, const Teacher& base, const BenchSettings& s);

// Adapter inserted between f and g of one teacher (the student is the teacher
// itself with a reorder layer in front of the adapter).
struct InsertBench {
  Teacher teacher;
  TaskData pool;
  TaskData eval;
};

InsertBench make_insert_bench(const SynthCategory& cat, const BenchSettings& s);

// Category module of `cat` transplanted onto the task module of `reference`.
struct TransplantBench {
  TaskKind task = TaskKind::Classification;
  Teacher reference;  // student task module donor
  Teacher source;     // teacher supplying f and g_T
  TaskData pool;
  TaskData eval;
  double beta = 1.0;
};

TransplantBench make_transplant_bench(const SynthCategory& reference, const SynthCategory& cat, TaskKind task,
                                      const BenchSettings& s);

struct RunResult {
  TransplantNet net;
  TrainReport report;
  double metric = 0.0;
};

// Student net holding f, g and a fresh adapter for the pair ("cat", "task").
TransplantNet insert_student(const InsertBench& b, const AdapterSpec& spec, std::uint64_t seed);
TransplantNet transplant_student(const TransplantBench& b, const AdapterSpec& spec, std::uint64_t seed);

RunResult run_insert(const InsertBench& b, Method m, int n, const AdapterSpec& spec, const BenchSettings& s);
RunResult run_transplant(const TransplantBench& b, Method m, int n, const AdapterSpec& spec, const BenchSettings& s);

}  // namespace tpnt
