#include "tpnt/transplant.hpp"

#include "tpnt/error.hpp"
#include "tpnt/serialize.hpp"

namespace tpnt {

namespace {

int category_out_channels(const NetModule& f) { return module_out_channels(f, module_in_channels(f)); }

// The teacher task module seen from x: the wired adapter followed by g.
NetModule teacher_head(const TransplantNet& net, const std::string& category, const std::string& task) {
  NetModule head = net.task(task);
  const NetModule& a = net.adapter(category, task);
  head.layers.insert(head.layers.begin(), a.layers.begin(), a.layers.end());
  head.frozen = true;
  return head;
}

std::vector<Tensor> images_of(const std::vector<Sample>& samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

// First category other than `exclude` already wired to `task`.
const NetModule* reference_category(const TransplantNet& net, const std::string& task, const std::string& exclude) {
  for (const auto& [key, a] : net.adapters())
    if (key.second == task && key.first != exclude) return &net.category(key.first);
  return nullptr;
}

struct PairTraining {
  std::string category;
  std::string task;
  const NetModule* teacher_task = nullptr;
  const NetModule* reference = nullptr;
  TrainConfig train;
  AdapterSpec adapter;
  std::uint64_t adapter_seed = 0;
  const std::vector<Sample>* data = nullptr;
  const std::vector<Sample>* eval = nullptr;
  const std::vector<Sample>* reference_images = nullptr;
};

// Shared tail of transplant_category and connect_existing: `net` already holds
// both endpoints; `before` is the state whose modules must survive untouched.
OpResult train_pair(TransplantNet net, const TransplantNet& before, const PairTraining& p, const EvalImages& prior) {
  OpResult r;
  OpReport& rep = r.report;
  rep.category = p.category;
  rep.task = p.task;
  rep.prior_before = evaluate_pairs(before, prior);
  rep.hash_before = preexisting_hash(before, before);

  const NetModule& f = net.category(p.category);
  const NetModule& g = net.task(p.task);
  const TaskKind kind = task_kind_of(g);
  if (task_kind_of(*p.teacher_task) != kind) fail(Errc::ShapeMismatch, "teacher and student solve different tasks");
  const int f_out = category_out_channels(f);
  const int g_in = module_in_channels(g);

  AdapterSpec spec = p.adapter;
  spec.channels = f_out;
  spec.out_channels = g_in;
  if (!spec.beta) {
    rep.beta = 1.0;
    if (p.reference) {
      const auto& is = p.reference_images && !p.reference_images->empty() ? *p.reference_images : *p.data;
      rep.beta = estimate_beta(f, *p.reference, images_of(*p.data), images_of(is));
    }
    spec.beta = static_cast<float>(rep.beta);
  } else {
    rep.beta = *spec.beta;
  }
  Rng rng(p.adapter_seed, Rng::key({0x61646170ULL, static_cast<std::uint64_t>(f_out), static_cast<std::uint64_t>(g_in)}));
  net.connect(p.category, p.task, build_adapter(adapter_id(p.category, p.task), spec, rng));
  net.validate();

  const TaskData train = make_task_data(f, *p.data);
  const TaskData eval = make_task_data(f, *p.eval);
  TrainConfig cfg = p.train;
  cfg.task = kind;
  rep.train = train_adapter(net, p.category, p.task, *p.teacher_task, train, eval.size() ? &eval : nullptr, cfg);
  rep.metric_before = rep.train.initial_metric;
  rep.metric_after = rep.train.final_metric;

  for (const PairMetric& m : evaluate_pairs(net, prior))
    if (before.connected(m.category, m.task)) rep.prior_after.push_back(m);
  rep.hash_after = preexisting_hash(net, before);
  r.net = std::move(net);
  return r;
}

}  // namespace

TaskKind task_kind_of(const NetModule& task) {
  if (!task.layers.empty() && std::holds_alternative<GlobalAvgPoolLayer>(task.layers.back()))
    return TaskKind::Classification;
  return TaskKind::Segmentation;
}

std::vector<PairMetric> evaluate_pairs(const TransplantNet& net, const EvalImages& images) {
  std::vector<PairMetric> out;
  for (const auto& [key, a] : net.adapters()) {
    const auto it = images.find(key.first);
    if (it == images.end() || it->second.empty()) continue;
    const TaskData data = make_task_data(net.category(key.first), it->second);
    const TaskKind kind = task_kind_of(net.task(key.second));
    out.push_back({key.first, key.second, evaluate_head(net.head_path(key.first, key.second), data, kind)});
  }
  return out;
}

std::uint64_t preexisting_hash(const TransplantNet& net, const TransplantNet& before) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (const auto& [id, m] : before.categories()) mix(net.has_category(id) ? module_hash(net.category(id)) : 0);
  for (const auto& [id, m] : before.tasks()) mix(net.has_task(id) ? module_hash(net.task(id)) : 0);
  for (const auto& [key, m] : before.adapters())
    mix(net.connected(key.first, key.second) ? module_hash(net.adapter(key.first, key.second)) : 0);
  return h;
}

OpResult transplant_category(const TransplantNet& student, const TransplantNet& teacher, const TransplantJob& job,
                             const EvalImages& prior) {
  const std::string teacher_task = job.teacher_task.empty() ? job.task : job.teacher_task;
  if (!teacher.has_category(job.category)) fail(Errc::NotConnected, "teacher has no category module " + job.category);
  if (!teacher.connected(job.category, teacher_task))
    fail(Errc::NotConnected, "teacher does not wire " + job.category + " to " + teacher_task);
  if (!student.has_task(job.task)) fail(Errc::NotConnected, "student has no task module " + job.task);
  if (student.connected(job.category, job.task)) fail(Errc::AlreadyConnected, job.category + " -> " + job.task);

  TransplantNet net = student;
  NetModule f = teacher.category(job.category);
  f.frozen = true;
  if (net.has_category(job.category)) {
    if (module_hash(net.category(job.category)) != module_hash(f) || !(net.category(job.category) == f))
      fail(Errc::AlreadyExists, "student holds a different category module " + job.category);
  } else {
    net.add_category(f);
  }

  const NetModule g_t = teacher_head(teacher, job.category, teacher_task);
  PairTraining p;
  p.category = job.category;
  p.task = job.task;
  p.teacher_task = &g_t;
  p.reference = reference_category(student, job.task, job.category);
  p.train = job.train;
  p.adapter = job.adapter;
  p.adapter_seed = job.adapter_seed;
  p.data = &job.data;
  p.eval = &job.eval;
  p.reference_images = &job.reference_images;
  return train_pair(std::move(net), student, p, prior);
}

OpReport transplant_files(const std::filesystem::path& teacher, const std::filesystem::path& student,
                          const std::filesystem::path& output, const TransplantJob& job, const EvalImages& prior) {
  const auto same = [](const std::filesystem::path& a, const std::filesystem::path& b) {
    return std::filesystem::weakly_canonical(a) == std::filesystem::weakly_canonical(b);
  };
  if (same(output, student) || same(output, teacher))
    fail(Errc::InvalidParams, "output must not overwrite an input net: " + output.string());
  const TransplantNet t = load_net(teacher);
  const TransplantNet s = load_net(student);
  OpResult r = transplant_category(s, t, job, prior);
  save_net(r.net, output);
  return r.report;
}

AddTaskResult add_task_module(const TransplantNet& net, const AddTaskJob& job) {
  if (job.task.empty()) fail(Errc::InvalidParams, "task id is empty");
  if (net.has_task(job.task)) fail(Errc::AlreadyExists, "task module " + job.task + " already present");
  AddTaskResult r;
  r.net = net;
  if (job.source == TaskSource::FreshTrain) {
    if (job.data.empty()) fail(Errc::InsufficientData, "fresh task module needs labeled data");
    std::vector<const NetModule*> cats;
    std::vector<std::vector<Sample>> data;
    for (const auto& [id, samples] : job.data) {
      if (!net.has_category(id)) fail(Errc::NotConnected, "no category module " + id);
      cats.push_back(&net.category(id));
      data.push_back(samples);
    }
    NetModule g = job.module;
    g.id = job.task;
    g.kind = ModuleKind::Task;
    g.frozen = false;
    PretrainConfig cfg = job.pretrain;
    cfg.task = task_kind_of(g);
    r.pretrain = pretrain_task_module(cats, data, g, cfg);
    g.frozen = true;
    r.net.add_task(std::move(g));
    for (const auto& [id, samples] : job.data) r.net.connect(id, job.task, direct_adapter(adapter_id(id, job.task)));
  } else {
    if (!job.teacher) fail(Errc::InvalidParams, "carried task module needs a teacher net");
    const TransplantNet& t = *job.teacher;
    if (!t.connected(job.teacher_category, job.teacher_task))
      fail(Errc::NotConnected, "teacher does not wire " + job.teacher_category + " to " + job.teacher_task);
    NetModule g = teacher_head(t, job.teacher_category, job.teacher_task);
    g.id = job.task;
    NetModule f = t.category(job.teacher_category);
    f.frozen = true;
    if (r.net.has_category(f.id)) {
      if (!(r.net.category(f.id) == f)) fail(Errc::AlreadyExists, "net holds a different category module " + f.id);
    } else {
      r.net.add_category(f);
    }
    r.net.add_task(std::move(g));
    r.net.connect(f.id, job.task, direct_adapter(adapter_id(f.id, job.task)));
  }
  r.net.validate();
  return r;
}

OpResult connect_existing(const TransplantNet& net, const ConnectJob& job, const EvalImages& prior) {
  if (!net.has_category(job.category)) fail(Errc::NotConnected, "no category module " + job.category);
  if (!net.has_task(job.task)) fail(Errc::NotConnected, "no task module " + job.task);
  if (net.connected(job.category, job.task)) fail(Errc::AlreadyConnected, job.category + " -> " + job.task);
  std::string teacher_task = job.teacher_task;
  if (teacher_task.empty()) {
    for (const auto& [key, a] : net.adapters())
      if (key.first == job.category) {
        teacher_task = key.second;
        break;
      }
  }
  if (teacher_task.empty() || !net.connected(job.category, teacher_task))
    fail(Errc::NotConnected, "category " + job.category + " has no teacher task module");
  const NetModule g_t = teacher_head(net, job.category, teacher_task);

  PairTraining p;
  p.category = job.category;
  p.task = job.task;
  p.teacher_task = &g_t;
  p.reference = reference_category(net, job.task, job.category);
  p.train = job.train;
  p.adapter = job.adapter;
  p.adapter_seed = job.adapter_seed;
  p.data = &job.data;
  p.eval = &job.eval;
  return train_pair(net, net, p, prior);
}

}  // namespace tpnt
