#include <fstream>
#include <iterator>

#include <unistd.h>

#include "support.hpp"
#include "tpnt/serialize.hpp"
#include "tpnt/synth.hpp"
#include "tpnt/transplant.hpp"

using namespace tpnt;
using namespace tpnt::testing;

namespace {

constexpr int kM = 4;

TrainConfig quick(Method m = Method::BackDistill, int n = 4) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.samples = n;
  cfg.batch = 4;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.probe = 4;
  cfg.distill_pool = 4;
  cfg.seed = 3;
  cfg.pseudo = PseudoGradConfig::classification_transplant();
  return cfg;
}

const ShapeFamily kFamilies[] = {ShapeFamily::Ellipse, ShapeFamily::Bars, ShapeFamily::Blob};

std::vector<Sample> samples(int cat, int n, std::uint64_t seed) {
  return generate_dataset(preset_category(kFamilies[cat]), n, seed);
}

// A teacher net wiring one category module to one classifier head.
TransplantNet teacher(const std::string& cat, const std::string& task, std::uint64_t seed) {
  Rng rng(seed);
  TransplantNet t;
  NetModule f = make_category_module(cat, 1, kM, rng);
  f.frozen = true;
  NetModule g = make_classifier_head(task, kM, kM, rng);
  g.frozen = true;
  t.add_category(f);
  t.add_task(g);
  t.connect(cat, task, direct_adapter(adapter_id(cat, task)));
  return t;
}

TransplantJob job_for(const std::string& cat, const std::string& task, const std::string& teacher_task, int idx) {
  TransplantJob job;
  job.category = cat;
  job.task = task;
  job.teacher_task = teacher_task;
  job.train = quick();
  job.adapter.kernel = AdapterKernel::Conv1x1;
  job.adapter.reorder_seed = 7;
  job.adapter_seed = 11;
  job.data = samples(idx, 8, 100 + static_cast<std::uint64_t>(idx));
  job.eval = samples(idx, 8, 200 + static_cast<std::uint64_t>(idx));
  return job;
}

EvalImages eval_images(int count) {
  EvalImages im;
  const char* ids[] = {"A", "B", "C"};
  for (int i = 0; i < count; ++i) im[ids[i]] = samples(i, 6, 300 + static_cast<std::uint64_t>(i));
  return im;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---- transplant_category -----------------------------------------------------------

TEST(Transplant, IdentityAdapterOnSameArchitectureHasNoDistillLoss) {
  const TransplantNet t = teacher("A", "cls", 1);
  TransplantNet s = t;
  s.disconnect("A", "cls");
  AdapterSpec spec;
  spec.channels = kM;
  spec.kernel = AdapterKernel::Conv1x1;
  spec.beta = 1.0f;
  Rng rng(2);
  NetModule h = build_adapter(adapter_id("A", "cls"), spec, rng);
  for (auto& l : h.layers)
    if (auto* c = std::get_if<ConvLayer>(&l)) {
      c->weights.fill(0.0f);
      c->bias.fill(0.0f);
      for (int k = 0; k < kM; ++k) c->weights[static_cast<std::size_t>(k * kM + k)] = 1.0f;
    }
  s.connect("A", "cls", h);
  const TaskData data = make_task_data(t.category("A"), samples(0, 8, 5));
  AdapterTrainer tr(s, "A", "cls", t.task("cls"), data, quick());
  EXPECT_NEAR(tr.refresh_alpha(), 1.0, 1e-6);
  const auto r = tr.compute(tr.batch_for_step(0, 0));
  EXPECT_LT(r.distill, 1e-10);
}

TEST(Transplant, ForgettingGuard) {
  const TransplantNet student = teacher("A", "cls", 1);
  const TransplantNet tb = teacher("B", "clsB", 2);
  const OpResult r = transplant_category(student, tb, job_for("B", "cls", "clsB", 1), eval_images(1));
  EXPECT_TRUE(r.report.untouched());
  EXPECT_EQ(module_hash(r.net.adapter("A", "cls")), module_hash(student.adapter("A", "cls")));
  EXPECT_EQ(module_hash(r.net.task("cls")), module_hash(student.task("cls")));
  EXPECT_EQ(module_hash(r.net.category("A")), module_hash(student.category("A")));
  // f is copied, not referenced.
  EXPECT_EQ(r.net.category("B"), tb.category("B"));
  EXPECT_TRUE(r.net.connected("B", "cls"));
  ASSERT_EQ(r.report.prior_before.size(), 1u);
  EXPECT_EQ(r.report.prior_before, r.report.prior_after);
}

TEST(Transplant, InputsUntouched) {
  const TransplantNet student = teacher("A", "cls", 1);
  const TransplantNet tb = teacher("B", "clsB", 2);
  const std::uint64_t hs = net_hash(student), ht = net_hash(tb);
  transplant_category(student, tb, job_for("B", "cls", "clsB", 1));
  EXPECT_EQ(net_hash(student), hs);
  EXPECT_EQ(net_hash(tb), ht);
}

TEST(Transplant, ThreeCategoryGrowthSequence) {
  TransplantNet net = teacher("A", "cls", 1);
  const EvalImages images = eval_images(3);
  const char* cats[] = {"B", "C"};
  for (int step = 0; step < 2; ++step) {
    const TransplantNet t = teacher(cats[step], "t", 10 + static_cast<std::uint64_t>(step));
    const auto before = evaluate_pairs(net, images);
    OpResult r = transplant_category(net, t, job_for(cats[step], "cls", "t", step + 1), images);
    EXPECT_TRUE(r.report.untouched()) << step;
    // Re-evaluate every pair independently of the report.
    const auto after = evaluate_pairs(r.net, images);
    ASSERT_EQ(after.size(), before.size() + 1);
    std::size_t matched = 0;
    for (const auto& m : after) {
      if (m.category == cats[step]) {
        EXPECT_DOUBLE_EQ(m.value, evaluate_pairs(r.net, {{m.category, images.at(m.category)}}).front().value);
        continue;
      }
      for (const auto& b : before)
        if (b.category == m.category && b.task == m.task) {
          EXPECT_EQ(b.value, m.value);
          ++matched;
        }
    }
    EXPECT_EQ(matched, before.size());
    net = std::move(r.net);
  }
  EXPECT_EQ(net.adapters().size(), 3u);
}

TEST(Transplant, PreconditionErrors) {
  const TransplantNet student = teacher("A", "cls", 1);
  const TransplantNet tb = teacher("B", "clsB", 2);
  EXPECT_ERRC(transplant_category(student, tb, job_for("Z", "cls", "clsB", 1)), Errc::NotConnected);
  EXPECT_ERRC(transplant_category(student, tb, job_for("B", "nope", "clsB", 1)), Errc::NotConnected);
  EXPECT_ERRC(transplant_category(student, teacher("A", "cls", 1), job_for("A", "cls", "cls", 0)),
              Errc::AlreadyConnected);
  // Same id, different parameters.
  TransplantNet s2 = student;
  Rng rng(4);
  s2.add_task(make_classifier_head("other", kM, kM, rng));
  EXPECT_ERRC(transplant_category(s2, teacher("A", "t", 9), job_for("A", "other", "t", 0)), Errc::AlreadyExists);
}

TEST(Transplant, ClassifierTeacherForSegmenterIsShapeMismatch) {
  TransplantNet student;
  Rng rng(5);
  NetModule f = make_category_module("A", 1, kM, rng);
  f.frozen = true;
  NetModule seg = make_segmenter_head("seg", kM, kM, rng);
  seg.frozen = true;
  student.add_category(f);
  student.add_task(seg);
  student.connect("A", "seg", direct_adapter(adapter_id("A", "seg")));
  EXPECT_ERRC(transplant_category(student, teacher("B", "clsB", 2), job_for("B", "seg", "clsB", 1)),
              Errc::ShapeMismatch);
}

TEST(Transplant, AdapterBridgesChannelMismatch) {
  TransplantNet student;
  Rng rng(6);
  NetModule f = make_category_module("A", 1, kM, rng);
  f.frozen = true;
  NetModule g = make_classifier_head("cls", 6, kM, rng);
  g.frozen = true;
  student.add_category(f);
  student.add_task(g);
  const OpResult r = transplant_category(student, teacher("B", "clsB", 2), job_for("B", "cls", "clsB", 1));
  EXPECT_NO_THROW(r.net.validate());
  EXPECT_EQ(module_out_channels(r.net.adapter("B", "cls"), kM), 6);
}

TEST(Transplant, FilesNeverOverwriteInputs) {
  const auto dir = std::filesystem::temp_directory_path() / ("tpnt_tx_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const auto sp = dir / "student.tpnt", tp = dir / "teacher.tpnt", out = dir / "out.tpnt";
  save_net(teacher("A", "cls", 1), sp);
  save_net(teacher("B", "clsB", 2), tp);
  const std::string s0 = slurp(sp), t0 = slurp(tp);
  const TransplantJob job = job_for("B", "cls", "clsB", 1);
  EXPECT_ERRC(transplant_files(tp, sp, sp, job), Errc::InvalidParams);
  EXPECT_ERRC(transplant_files(tp, sp, dir / "." / "teacher.tpnt", job), Errc::InvalidParams);
  const OpReport rep = transplant_files(tp, sp, out, job);
  EXPECT_TRUE(rep.untouched());
  EXPECT_EQ(slurp(sp), s0);
  EXPECT_EQ(slurp(tp), t0);
  EXPECT_TRUE(load_net(out).connected("B", "cls"));
  std::filesystem::remove_all(dir);
}

// ---- add_task_module ---------------------------------------------------------------

TEST(AddTask, FreshEqualsHeadPretraining) {
  const TransplantNet net = teacher("A", "cls", 1);
  Rng rng(8);
  const NetModule g0 = make_classifier_head("g2", kM, kM, rng);
  const auto data = samples(0, 16, 9);
  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;

  AddTaskJob job;
  job.task = "g2";
  job.module = g0;
  job.data["A"] = data;
  job.pretrain = cfg;
  const AddTaskResult r = add_task_module(net, job);

  NetModule f = net.category("A");
  NetModule g = g0;
  const PretrainReport ref = pretrain_teacher(f, g, data, cfg);
  EXPECT_EQ(r.pretrain.train_accuracy, ref.train_accuracy);
  EXPECT_EQ(r.pretrain.epoch_loss, ref.epoch_loss);
  for (std::size_t i = 0; i < g.layers.size(); ++i) EXPECT_EQ(r.net.task("g2").layers[i], g.layers[i]) << i;
  EXPECT_TRUE(r.net.connected("A", "g2"));
  EXPECT_TRUE(r.net.adapter("A", "g2").layers.empty());
  EXPECT_EQ(preexisting_hash(r.net, net), preexisting_hash(net, net));
}

TEST(AddTask, CarriedConnectsExactlyOneCategory) {
  TransplantNet net = teacher("A", "cls", 1);
  net = transplant_category(net, teacher("B", "clsB", 2), job_for("B", "cls", "clsB", 1)).net;
  const TransplantNet tc = teacher("C", "clsC", 3);
  AddTaskJob job;
  job.source = TaskSource::CarriedFromTeacher;
  job.task = "clsC";
  job.teacher = &tc;
  job.teacher_category = "C";
  job.teacher_task = "clsC";
  const AddTaskResult r = add_task_module(net, job);
  int wired = 0;
  for (const auto& [key, a] : r.net.adapters()) wired += key.second == "clsC";
  EXPECT_EQ(wired, 1);
  EXPECT_TRUE(r.net.connected("C", "clsC"));
  EXPECT_EQ(r.net.category("C"), tc.category("C"));
  EXPECT_EQ(preexisting_hash(r.net, net), preexisting_hash(net, net));
}

TEST(AddTask, DuplicateIdAndRollback) {
  const TransplantNet net = teacher("A", "cls", 1);
  AddTaskJob job;
  job.task = "cls";
  job.module = net.task("cls");
  job.data["A"] = samples(0, 4, 1);
  EXPECT_ERRC(add_task_module(net, job), Errc::AlreadyExists);

  Rng rng(8);
  job.task = "g2";
  job.module = make_classifier_head("g2", kM, kM, rng);
  job.pretrain.epochs = 1;
  TransplantNet grown = add_task_module(net, job).net;
  grown.remove_task("g2");
  EXPECT_EQ(grown, net);
  EXPECT_EQ(net_hash(grown), net_hash(net));
}

TEST(AddTask, FreshNeedsDataOnKnownCategories) {
  const TransplantNet net = teacher("A", "cls", 1);
  Rng rng(8);
  AddTaskJob job;
  job.task = "g2";
  job.module = make_classifier_head("g2", kM, kM, rng);
  EXPECT_ERRC(add_task_module(net, job), Errc::InsufficientData);
  job.data["Q"] = samples(0, 4, 1);
  EXPECT_ERRC(add_task_module(net, job), Errc::NotConnected);
}

// ---- connect_existing --------------------------------------------------------------

namespace {

TransplantNet two_by_one() {
  TransplantNet net = teacher("A", "cls", 1);
  net = transplant_category(net, teacher("B", "clsB", 2), job_for("B", "cls", "clsB", 1)).net;
  const TransplantNet tc = teacher("C", "t2", 3);
  AddTaskJob job;
  job.source = TaskSource::CarriedFromTeacher;
  job.task = "t2";
  job.teacher = &tc;
  job.teacher_category = "C";
  job.teacher_task = "t2";
  return add_task_module(net, job).net;
}

ConnectJob connect_job(const std::string& cat, const std::string& task, int idx) {
  ConnectJob job;
  job.category = cat;
  job.task = task;
  job.train = quick();
  job.adapter.kernel = AdapterKernel::Conv1x1;
  job.adapter_seed = 4;
  job.data = samples(idx, 8, 400 + static_cast<std::uint64_t>(idx));
  job.eval = samples(idx, 8, 500 + static_cast<std::uint64_t>(idx));
  return job;
}

}  // namespace

TEST(Connect, ComposePathAppearsAfterConnect) {
  const TransplantNet net = two_by_one();
  EXPECT_ERRC(net.compose_path("A", "t2"), Errc::NotConnected);
  const OpResult r = connect_existing(net, connect_job("A", "t2", 0), eval_images(3));
  EXPECT_NO_THROW(r.net.compose_path("A", "t2"));
  EXPECT_TRUE(r.report.untouched());
  for (const auto& [key, a] : net.adapters()) EXPECT_EQ(module_hash(r.net.adapter(key.first, key.second)), module_hash(a));
  EXPECT_ERRC(connect_existing(r.net, connect_job("A", "t2", 0)), Errc::AlreadyConnected);
}

TEST(Connect, MissingEndpoints) {
  const TransplantNet net = two_by_one();
  EXPECT_ERRC(connect_existing(net, connect_job("Z", "t2", 0)), Errc::NotConnected);
  EXPECT_ERRC(connect_existing(net, connect_job("A", "zz", 0)), Errc::NotConnected);
}

TEST(Connect, TwoByTwoGridFromTheThreeSteps) {
  // Categories A, C; tasks cls, t2. Steps: teacher, carried task module, connections.
  TransplantNet net = teacher("A", "cls", 1);
  const TransplantNet tc = teacher("C", "t2", 3);
  AddTaskJob add;
  add.source = TaskSource::CarriedFromTeacher;
  add.task = "t2";
  add.teacher = &tc;
  add.teacher_category = "C";
  add.teacher_task = "t2";
  net = add_task_module(net, add).net;
  ASSERT_EQ(net.adapters().size(), 2u);
  net = connect_existing(net, connect_job("A", "t2", 0)).net;
  net = connect_existing(net, connect_job("C", "cls", 2)).net;
  for (const char* c : {"A", "C"})
    for (const char* t : {"cls", "t2"}) EXPECT_NO_THROW(net.compose_path(c, t)) << c << t;
  EXPECT_EQ(net.adapters().size(), 4u);
  EXPECT_NO_THROW(net.validate());
}

// Registry consistency: compose_path succeeds for exactly the wired pairs.
TEST(Connect, ComposePathMatchesWiring) {
  const TransplantNet net = two_by_one();
  for (const auto& [c, fm] : net.categories())
    for (const auto& [t, gm] : net.tasks()) {
      if (net.connected(c, t))
        EXPECT_NO_THROW(net.compose_path(c, t));
      else
        EXPECT_ERRC(net.compose_path(c, t), Errc::NotConnected);
    }
}
