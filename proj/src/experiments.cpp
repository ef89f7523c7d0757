#include "tpnt/experiments.hpp"

#include "tpnt/error.hpp"

namespace tpnt {

namespace {

constexpr std::uint64_t kBaseTag = 0x62617365ULL;
constexpr std::uint64_t kTeacherTag = 0x74656163ULL;
constexpr std::uint64_t kPoolTag = 0x706f6f6cULL;
constexpr std::uint64_t kEvalTag = 0x6576616cULL;
constexpr std::uint64_t kAdapterTag = 0x61646170ULL;

std::uint64_t fam(const SynthCategory& c) { return static_cast<std::uint64_t>(c.family); }

NetModule head_for(TaskKind task, const std::string& id, const BenchSettings& s, Rng& rng) {
  return task == TaskKind::Classification ? make_classifier_head(id, s.channels, s.hidden, rng)
                                          : make_segmenter_head(id, s.channels, s.hidden, rng);
}

NetModule frozen(NetModule m) {
  m.frozen = true;
  return m;
}

}  // namespace

SynthCategory bench_category(ShapeFamily family) {
  SynthCategory c = preset_category(family);
  c.noise = 0.2f;
  for (ShapeFamily d : {ShapeFamily::Ring, ShapeFamily::Blob, ShapeFamily::Ellipse}) {
    if (d != family && c.distractors.size() < 2) c.distractors.push_back(d);
  }
  return c;
}

Teacher base_network(const std::vector<SynthCategory>& cats, TaskKind task, const BenchSettings& s) {
  if (cats.empty()) fail(Errc::InvalidParams, "base network needs at least one category");
  std::vector<Sample> data;
  const int per = std::max(2, (s.teacher_images / static_cast<int>(cats.size())) & ~1);
  for (const auto& c : cats) {
    auto d = generate_dataset(c, per, Rng::key({s.seed, kBaseTag, fam(c)}));
    data.insert(data.end(), d.begin(), d.end());
  }
  Rng rng(s.seed, Rng::key({kBaseTag, static_cast<std::uint64_t>(task)}));
  Teacher t;
  t.f = make_category_module("base", 1, s.channels, rng);
  t.g = head_for(task, "base-head", s, rng);
  PretrainConfig pc = s.pretrain;
  pc.task = task;
  pc.epochs = s.base_epochs;
  pc.seed = Rng::key({s.seed, kBaseTag, static_cast<std::uint64_t>(task)});
  t.report = pretrain_teacher(t.f, t.g, data, pc);
  return t;
}

Teacher train_teacher(const SynthCategory& cat, TaskKind task, const Teacher& base, const BenchSettings& s) {
  Teacher t = base;
  t.f.id = cat.id;
  t.f.frozen = false;
  t.g.id = std::string(task_kind_name(task));
  t.g.frozen = false;
  const auto data = generate_dataset(cat, s.teacher_images, Rng::key({s.seed, kTeacherTag, fam(cat)}));
  PretrainConfig pc = s.pretrain;
  pc.task = task;
  pc.seed = Rng::key({s.seed, kTeacherTag, fam(cat), static_cast<std::uint64_t>(task)});
  t.report = pretrain_teacher(t.f, t.g, data, pc);
  t.f.frozen = true;
  t.g.frozen = true;
  return t;
}

InsertBench make_insert_bench(const SynthCategory& cat, const BenchSettings& s) {
  InsertBench b;
  const Teacher base = base_network({cat}, TaskKind::Classification, s);
  b.teacher = train_teacher(cat, TaskKind::Classification, base, s);
  b.pool = make_task_data(b.teacher.f, generate_dataset(cat, s.pool_images, Rng::key({s.seed, kPoolTag, fam(cat)})));
  b.eval = make_task_data(b.teacher.f, generate_dataset(cat, s.eval_images, Rng::key({s.seed, kEvalTag, fam(cat)})));
  return b;
}

TransplantBench make_transplant_bench(const SynthCategory& reference, const SynthCategory& cat, TaskKind task,
                                      const BenchSettings& s) {
  TransplantBench b;
  b.task = task;
  const Teacher base = base_network({reference, cat}, task, s);
  b.reference = train_teacher(reference, task, base, s);
  b.source = train_teacher(cat, task, base, s);
  const auto pool = generate_dataset(cat, s.pool_images, Rng::key({s.seed, kPoolTag, fam(cat)}));
  b.pool = make_task_data(b.source.f, pool);
  b.eval = make_task_data(b.source.f, generate_dataset(cat, s.eval_images, Rng::key({s.seed, kEvalTag, fam(cat)})));
  const auto ref_images = generate_dataset(reference, s.pool_images, Rng::key({s.seed, kPoolTag, fam(reference)}));
  std::vector<Tensor> it, is;
  for (const auto& x : pool) it.push_back(x.image);
  for (const auto& x : ref_images) is.push_back(x.image);
  b.beta = estimate_beta(b.source.f, b.reference.f, it, is);
  return b;
}

TransplantNet insert_student(const InsertBench& b, const AdapterSpec& spec, std::uint64_t seed) {
  TransplantNet net;
  NetModule f = frozen(b.teacher.f);
  f.id = "cat";
  NetModule g = frozen(b.teacher.g);
  g.id = "task";
  net.add_category(std::move(f));
  net.add_task(std::move(g));
  Rng rng(seed, kAdapterTag);
  net.connect("cat", "task", build_adapter(adapter_id("cat", "task"), spec, rng));
  return net;
}

TransplantNet transplant_student(const TransplantBench& b, const AdapterSpec& spec, std::uint64_t seed) {
  TransplantNet net;
  NetModule f = frozen(b.source.f);
  f.id = "cat";
  NetModule g = frozen(b.reference.g);
  g.id = "task";
  net.add_category(std::move(f));
  net.add_task(std::move(g));
  AdapterSpec sp = spec;
  if (!sp.beta) sp.beta = static_cast<float>(b.beta);
  Rng rng(seed, kAdapterTag);
  net.connect("cat", "task", build_adapter(adapter_id("cat", "task"), sp, rng));
  return net;
}

RunResult run_insert(const InsertBench& b, Method m, int n, const AdapterSpec& spec, const BenchSettings& s) {
  RunResult r;
  r.net = insert_student(b, spec, s.seed);
  TrainConfig cfg = s.train;
  cfg.method = m;
  cfg.samples = n;
  cfg.task = TaskKind::Classification;
  r.report = train_adapter(r.net, "cat", "task", b.teacher.g, b.pool, &b.eval, cfg);
  r.metric = r.report.final_metric;
  return r;
}

RunResult run_transplant(const TransplantBench& b, Method m, int n, const AdapterSpec& spec, const BenchSettings& s) {
  RunResult r;
  r.net = transplant_student(b, spec, s.seed);
  TrainConfig cfg = s.train;
  cfg.method = m;
  cfg.samples = n;
  cfg.task = b.task;
  r.report = train_adapter(r.net, "cat", "task", b.source.g, b.pool, &b.eval, cfg);
  r.metric = r.report.final_metric;
  return r;
}

}  // namespace tpnt
