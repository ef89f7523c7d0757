// tpnt: command-line driver for pretraining, transplanting and evaluating
// modular networks on synthetic or PGM image data.

#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tpnt/config.hpp"
#include "tpnt/error.hpp"
#include "tpnt/eval.hpp"
#include "tpnt/experiments.hpp"
#include "tpnt/serialize.hpp"
#include "tpnt/transplant.hpp"

namespace fs = std::filesystem;
using namespace tpnt;

namespace {

constexpr std::uint64_t kCliPoolTag = 0x636c6970ULL;
constexpr std::uint64_t kCliEvalTag = 0x636c6965ULL;
constexpr std::uint64_t kCliTrainTag = 0x636c6974ULL;

constexpr int kExitWeakTeacher = 2;

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

SynthCategory category_for(const RunConfig& c, const std::string& family) {
  SynthCategory cat = bench_category(parse_family(family));
  cat.noise = static_cast<float>(c.data.noise);
  if (!c.data.distractors.empty()) {
    cat.distractors.clear();
    for (const auto& d : c.data.distractors) cat.distractors.push_back(parse_family(d));
  }
  return cat;
}

BenchSettings bench_settings(const RunConfig& c) {
  BenchSettings s;
  s.channels = c.teacher.channels;
  s.hidden = c.teacher.hidden;
  s.teacher_images = c.data.teacher_images;
  s.pool_images = c.data.pool_images;
  s.eval_images = c.eval.images;
  s.base_epochs = c.teacher.base_epochs;
  s.pretrain.task = c.teacher.task;
  s.pretrain.epochs = c.teacher.epochs;
  s.pretrain.lr = c.teacher.lr;
  s.pretrain.momentum = c.teacher.momentum;
  s.pretrain.batch = c.teacher.batch;
  s.pretrain.gate = c.teacher.gate;
  s.train = c.train;
  s.seed = c.data.seed;
  return s;
}

std::uint64_t family_key(const std::string& family) { return static_cast<std::uint64_t>(parse_family(family)); }

// Images for `family`: the PGM directory when configured, otherwise a seeded
// synthetic draw.
std::vector<Sample> images_for(const RunConfig& c, const std::string& family, int count, std::uint64_t tag) {
  if (!c.data.dir.empty()) return load_image_dir(c.data.dir);
  return generate_dataset(category_for(c, family), count, Rng::key({c.data.seed, tag, family_key(family)}));
}

std::string pair_category(const RunConfig& c) { return c.student.category.empty() ? c.data.family : c.student.category; }
std::string pair_task(const RunConfig& c) {
  return c.student.task.empty() ? std::string(task_kind_name(c.teacher.task)) : c.student.task;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << text;
}

RunConfig load(const Options& o) {
  ConfigSources src;
  src.overrides = o.sets;
  src.seed = o.seed;
  if (const char* env = std::getenv("TPNT_SEED")) src.env_seed = std::string(env);
  RunConfig c = o.config.empty() ? parse_config("", src) : load_config(o.config, src);
  if (c.threads > 0) omp_set_num_threads(c.threads);
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "config.ini", resolved_config(c));
  return c;
}

int cmd_gen_data(const Options& o) {
  const RunConfig c = load(o);
  const SynthCategory cat = category_for(c, c.data.family);
  export_dataset(fs::path(o.out) / "train",
                 generate_dataset(cat, c.data.teacher_images, Rng::key({c.data.seed, kCliTrainTag, family_key(c.data.family)})));
  export_dataset(fs::path(o.out) / "eval",
                 generate_dataset(cat, c.eval.images, Rng::key({c.data.seed, kCliEvalTag, family_key(c.data.family)})));
  std::printf("wrote %d training and %d evaluation images for %s to %s\n", c.data.teacher_images, c.eval.images,
              c.data.family.c_str(), o.out.c_str());
  return 0;
}

int cmd_pretrain(const Options& o) {
  const RunConfig c = load(o);
  const BenchSettings s = bench_settings(c);
  Teacher t;
  if (c.data.dir.empty()) {
    std::vector<SynthCategory> cats{category_for(c, c.data.family)};
    if (c.data.reference != c.data.family) cats.push_back(category_for(c, c.data.reference));
    std::sort(cats.begin(), cats.end(), [](const auto& a, const auto& b) { return a.family < b.family; });
    const Teacher base = base_network(cats, c.teacher.task, s);
    t = train_teacher(category_for(c, c.data.family), c.teacher.task, base, s);
  } else {
    const auto data = load_image_dir(c.data.dir);
    Rng rng(c.data.seed, kCliTrainTag);
    t.f = make_category_module(c.data.family, 1, s.channels, rng);
    t.g = c.teacher.task == TaskKind::Classification ? make_classifier_head("head", s.channels, s.hidden, rng)
                                                    : make_segmenter_head("head", s.channels, s.hidden, rng);
    PretrainConfig pc = s.pretrain;
    pc.seed = c.data.seed;
    t.report = pretrain_teacher(t.f, t.g, data, pc);
    t.f.frozen = t.g.frozen = true;
  }
  TransplantNet net;
  t.f.id = c.data.family;
  t.g.id = std::string(task_kind_name(c.teacher.task));
  net.add_category(t.f);
  net.add_task(t.g);
  net.connect(t.f.id, t.g.id, direct_adapter(adapter_id(t.f.id, t.g.id)));
  save_net(net, fs::path(o.out) / "teacher.tpnt");
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < t.report.epoch_loss.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e, t.report.epoch_loss[e]);
    csv += buf;
  }
  write_text(fs::path(o.out) / "pretrain.csv", csv);
  std::printf("teacher %s/%s train accuracy %.4f\n", t.f.id.c_str(), t.g.id.c_str(), t.report.train_accuracy);
  if (!t.report.gate_passed) {
    std::fprintf(stderr, "WeakTeacher: train accuracy %.4f below gate %.2f\n", t.report.train_accuracy, c.teacher.gate);
    return kExitWeakTeacher;
  }
  return 0;
}

EvalImages prior_images(const RunConfig& c, const TransplantNet& net) {
  EvalImages out;
  if (!c.data.dir.empty()) return out;
  for (const auto& [id, m] : net.categories()) {
    try {
      out[id] = images_for(c, id, c.eval.images, kCliEvalTag);
    } catch (const Error&) {
      // Not a synthetic family id; the pair is left out of the report.
    }
  }
  return out;
}

int cmd_transplant(const Options& o) {
  const RunConfig c = load(o);
  if (c.teacher.path.empty() || c.student.path.empty())
    fail(Errc::ConfigError, "transplant needs teacher.path and student.path");
  const TransplantNet teacher = load_net(c.teacher.path);
  const TransplantNet student = load_net(c.student.path);
  TransplantJob job;
  job.category = pair_category(c);
  job.task = pair_task(c);
  job.teacher_task = std::string(task_kind_name(c.teacher.task));
  job.train = c.train;
  job.adapter = c.adapter_spec();
  job.adapter_seed = c.data.seed;
  job.data = images_for(c, job.category, c.data.pool_images, kCliPoolTag);
  job.eval = images_for(c, job.category, c.eval.images, kCliEvalTag);
  const fs::path output = fs::path(o.out) / "transplanted.tpnt";
  if (fs::exists(output) && fs::equivalent(output, c.student.path))
    fail(Errc::InvalidParams, "output would overwrite the student net");
  const OpResult r = transplant_category(student, teacher, job, prior_images(c, student));
  save_net(r.net, output);
  r.report.train.write_csv((fs::path(o.out) / "train.csv").string());
  std::string pairs = "category,task,before,after\n";
  for (std::size_t i = 0; i < r.report.prior_before.size(); ++i) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g\n", r.report.prior_before[i].category.c_str(),
                  r.report.prior_before[i].task.c_str(), r.report.prior_before[i].value, r.report.prior_after[i].value);
    pairs += buf;
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g\n", job.category.c_str(), job.task.c_str(), r.report.metric_before,
                r.report.metric_after);
  pairs += buf;
  write_text(fs::path(o.out) / "pairs.csv", pairs);
  std::printf("%s -> %s: %s %.4f -> %.4f (beta %.4g), pre-existing modules %s\n", job.category.c_str(),
              job.task.c_str(), c.teacher.task == TaskKind::Classification ? "error" : "pixel accuracy",
              r.report.metric_before, r.report.metric_after, r.report.beta,
              r.report.untouched() ? "unchanged" : "CHANGED");
  return 0;
}

const TransplantNet load_model(const RunConfig& c) {
  const std::string& p = c.student.path.empty() ? c.teacher.path : c.student.path;
  if (p.empty()) fail(Errc::ConfigError, "no model: set student.path or teacher.path");
  return load_net(p);
}

int cmd_evaluate(const Options& o) {
  const RunConfig c = load(o);
  const TransplantNet net = load_model(c);
  EvalImages images;
  for (const auto& [key, a] : net.adapters()) {
    if (!c.student.category.empty() && key.first != c.student.category) continue;
    if (!c.student.task.empty() && key.second != c.student.task) continue;
    if (!images.count(key.first)) images[key.first] = images_for(c, key.first, c.eval.images, kCliEvalTag);
  }
  std::string csv = "category,task,metric,value,images\n";
  for (const auto& m : evaluate_pairs(net, images)) {
    if (!c.student.task.empty() && m.task != c.student.task) continue;
    const bool cls = task_kind_of(net.task(m.task)) == TaskKind::Classification;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.9g,%zu\n", m.category.c_str(), m.task.c_str(),
                  cls ? "error_rate" : "pixel_accuracy", m.value, images[m.category].size());
    csv += buf;
    std::printf("%s -> %s %s %.4f\n", m.category.c_str(), m.task.c_str(), cls ? "error" : "pixel accuracy", m.value);
  }
  write_text(fs::path(o.out) / "eval.csv", csv);
  return 0;
}

int cmd_export_features(const Options& o) {
  const RunConfig c = load(o);
  const TransplantNet net = load_model(c);
  const std::string cat = pair_category(c), task = pair_task(c);
  const TaskData data = make_task_data(net.category(cat), images_for(c, cat, c.eval.images, kCliEvalTag));
  const FeatureStats st = feature_stats(net.head_path(cat, task), data.x);
  write_pc_csv((fs::path(o.out) / "features_pc.csv").string(), st);
  write_layer_csv((fs::path(o.out) / "features_layers.csv").string(), st);
  std::printf("pc variances %.6g %.6g over %zu images\n", st.plane.var1, st.plane.var2, data.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transplant category modules between networks by back-distillation"};
  app.require_subcommand(1);
  Options opt;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opt.config, "INI config file");
    sub->add_option("--set", opt.sets, "override, section.key=value");
    sub->add_option("--seed", opt.seed, "seed, overrides data.seed");
    sub->add_option("-o,--out", opt.out, "run directory")->capture_default_str();
  };
  int (*run)(const Options&) = nullptr;
  const auto add = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    sub->callback([&run, fn] { run = fn; });
  };
  add("gen-data", "write a synthetic dataset as PGM files", cmd_gen_data);
  add("pretrain", "train a teacher network", cmd_pretrain);
  add("transplant", "transplant a teacher category module into a student", cmd_transplant);
  add("evaluate", "score the wired pairs of a model", cmd_evaluate);
  add("export-features", "write final-feature PCs and ReLU statistics", cmd_export_features);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return run(opt);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return e.code() == Errc::WeakTeacher ? kExitWeakTeacher : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
