#include "tpnt/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include "tpnt/error.hpp"
#include "tpnt/eval.hpp"

namespace tpnt {

namespace {

constexpr std::uint64_t kLabeledTag = 0x6c61626cULL;
constexpr std::uint64_t kDistillTag = 0x64697374ULL;
constexpr std::uint64_t kPretrainTag = 0x70726574ULL;

// Runs fn(i) for i in [0, n) across threads; the first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr err;
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed, stream);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::BackDistill: return "back-distill";
    case Method::DirectLearn: return "direct-learn";
    case Method::OutputDistill: return "output-distill";
    case Method::JacobianDistill: return "jacobian-distill";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::BackDistill, Method::DirectLearn, Method::OutputDistill, Method::JacobianDistill})
    if (method_name(m) == name) return m;
  fail(Errc::InvalidConfig, "unknown method '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskKind t) {
  return t == TaskKind::Classification ? "classification" : "segmentation";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "classification") return TaskKind::Classification;
  if (name == "segmentation") return TaskKind::Segmentation;
  fail(Errc::InvalidConfig, "unknown task kind '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (samples < 0) fail(Errc::InvalidConfig, "sample budget must be >= 0");
  if (samples == 0 && method != Method::BackDistill)
    fail(Errc::InvalidConfig, std::string(method_name(method)) + " needs labeled samples");
  if (batch < 1 || epochs < 0 || steps_per_epoch < 1) fail(Errc::InvalidConfig, "batch/epochs/steps out of range");
  if (probe < 1 || distill_pool < 1) fail(Errc::InvalidConfig, "probe and distill pool must be >= 1");
  if (clip_norm < 0.0) fail(Errc::InvalidConfig, "clip norm must be >= 0");
  if (!(lr > 0.0) || momentum < 0.0 || momentum >= 1.0) fail(Errc::InvalidConfig, "bad lr or momentum");
  if (lambda_scale && !(*lambda_scale > 0.0)) fail(Errc::InvalidConfig, "lambda scale must be > 0");
  pseudo.validate();
}

TaskData TaskData::head(std::size_t n) const {
  TaskData d;
  n = std::min(n, size());
  d.x.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n));
  if (!labels.empty()) d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  if (!masks.empty()) d.masks.assign(masks.begin(), masks.begin() + static_cast<std::ptrdiff_t>(n));
  d.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  d.x_shape = x_shape;
  return d;
}

TaskData make_task_data(const NetModule& category, const std::vector<Sample>& samples) {
  TaskData d;
  const Path path = module_path(category);
  d.x.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { d.x[i] = run_forward(path, samples[i].image); });
  bool masks = !samples.empty();
  for (const auto& s : samples) {
    d.labels.push_back(s.label);
    d.ids.push_back(s.id);
    masks = masks && !s.mask.empty();
  }
  if (!samples.empty()) d.x_shape = d.x.front().shape();
  if (masks) {
    const int k = samples.front().image.dim(0) / d.x_shape[0];
    for (const auto& s : samples) d.masks.push_back(downsample_mask(s.mask, k));
  }
  return d;
}

// ---- Scale statistics ---------------------------------------------------------------

double mean_norm(const std::vector<Tensor>& ts) {
  if (ts.empty()) fail(Errc::DegenerateStats, "mean norm of an empty set");
  double acc = 0.0;
  for (const auto& t : ts) acc += frobenius_norm(t);
  return acc / static_cast<double>(ts.size());
}

double estimate_beta(const std::vector<Tensor>& student_features, const std::vector<Tensor>& teacher_features) {
  if (student_features.empty() || teacher_features.empty()) fail(Errc::InsufficientData, "beta needs images");
  const double num = mean_norm(student_features);
  const double den = mean_norm(teacher_features);
  if (!(den > 0.0)) fail(Errc::DegenerateStats, "teacher features have zero norm");
  if (!(num > 0.0)) fail(Errc::DegenerateStats, "student features have zero norm");
  return num / den;
}

double estimate_beta(const NetModule& f, const NetModule& f_s, const std::vector<Tensor>& images_t,
                     const std::vector<Tensor>& images_s) {
  const Path pt = module_path(f);
  const Path ps = module_path(f_s);
  std::vector<Tensor> ft, fs;
  for (const auto& im : images_t) ft.push_back(run_forward(pt, im));
  for (const auto& im : images_s) fs.push_back(run_forward(ps, im));
  return estimate_beta(fs, ft);
}

double estimate_alpha(const std::vector<Tensor>& d_t, const std::vector<Tensor>& d_s) {
  if (d_t.empty() || d_s.empty()) fail(Errc::DegenerateStats, "alpha needs samples");
  const double den = mean_norm(d_s);
  if (!(den > 0.0)) fail(Errc::DegenerateStats, "student pseudo-gradients vanish");
  const double num = mean_norm(d_t);
  if (!(num > 0.0)) fail(Errc::DegenerateStats, "teacher pseudo-gradients vanish");
  return num / den;
}

double lambda_rule(TaskKind task, double e_t, std::optional<double> scale) {
  if (!(e_t > 0.0) || !std::isfinite(e_t)) fail(Errc::DegenerateStats, "E_T must be > 0");
  const double c = scale ? *scale : (task == TaskKind::Classification ? 10.0 : 1.0);
  return c / e_t;
}

// ---- Losses ------------------------------------------------------------------------------

LossValue logistic_loss(const Tensor& y, int label) {
  if (y.size() != 1) fail(Errc::ShapeMismatch, "logistic loss needs a scalar output");
  const double z = y[0];
  const double p = sigmoid(z);
  LossValue r;
  // log(1 + e^-z) for label 1, log(1 + e^z) for label 0, computed stably.
  const double s = label == 1 ? -z : z;
  r.value = s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  r.grad = Tensor::constant({1}, static_cast<float>(p - (label == 1 ? 1.0 : 0.0)));
  return r;
}

LossValue pixel_cross_entropy(const Tensor& y, const Tensor& target) {
  if (y.shape() != target.shape()) fail(Errc::ShapeMismatch, "label shape " + shape_str(target.shape()) +
                                                                 " vs output " + shape_str(y.shape()));
  const int C = y.dim(y.rank() - 1);
  const std::size_t pixels = y.size() / C;
  LossValue r;
  r.grad = Tensor(y.shape());
  double total = 0.0;
  std::vector<double> p(static_cast<std::size_t>(C));
  for (std::size_t q = 0; q < pixels; ++q) {
    const float* yp = y.ptr() + q * C;
    const float* tp = target.ptr() + q * C;
    double mx = yp[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(yp[c]));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(yp[c] - mx);
    const double lz = std::log(z) + mx;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(yp[c] - lz);
      total -= tp[c] * (yp[c] - lz);
      r.grad[q * C + c] = static_cast<float>((p[c] - tp[c]) / static_cast<double>(pixels));
    }
  }
  r.value = total / static_cast<double>(pixels);
  return r;
}

LossValue output_distill_loss(const Tensor& y_s, const Tensor& y_t) {
  require_same_shape(y_s, y_t, "output distillation");
  if (y_s.size() == 1) {
    const double t = sigmoid(y_t[0]);
    const double z = y_s[0];
    LossValue r;
    const double lp = z > 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
    const double lq = z > 0 ? -z - std::log1p(std::exp(-z)) : -std::log1p(std::exp(z));
    r.value = -(t * lp + (1.0 - t) * lq);
    r.grad = Tensor::constant({1}, static_cast<float>(sigmoid(z) - t));
    return r;
  }
  const int C = y_t.dim(y_t.rank() - 1);
  Tensor soft(y_t.shape());
  for (std::size_t q = 0; q < y_t.size() / C; ++q) {
    double mx = y_t[q * C];
    for (int c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(y_t[q * C + c]));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(y_t[q * C + c] - mx);
    for (int c = 0; c < C; ++c) soft[q * C + c] = static_cast<float>(std::exp(y_t[q * C + c] - mx) / z);
  }
  return pixel_cross_entropy(y_s, soft);
}

LossValue task_loss(TaskKind task, const Tensor& y, int label, const Tensor* mask) {
  if (task == TaskKind::Classification) return logistic_loss(y, label);
  if (!mask) fail(Errc::ShapeMismatch, "segmentation loss needs a mask");
  return pixel_cross_entropy(y, *mask);
}

LossParts back_distill_loss(TaskKind task, const Tensor* y_s, int label, const Tensor* mask, const Tensor& d_s,
                            const Tensor& d_t, double alpha, double lambda, bool has_labels) {
  LossParts p;
  p.distill = distill_loss(d_s, d_t, alpha, lambda);
  if (has_labels) {
    if (!y_s) fail(Errc::ShapeMismatch, "labeled loss needs an output");
    p.task = task_loss(task, *y_s, label, mask).value;
  }
  p.total = p.task + p.distill;
  return p;
}

// ---- Evaluation helpers ------------------------------------------------------------------

std::vector<Tensor> head_outputs(const Path& head, const TaskData& data) {
  std::vector<Tensor> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = run_forward(head, data.x[i]); });
  return out;
}

double evaluate_head(const Path& head, const TaskData& data, TaskKind task) {
  if (data.size() == 0) fail(Errc::EmptyEval, "no evaluation data");
  const auto ys = head_outputs(head, data);
  if (task == TaskKind::Classification) {
    std::vector<float> logits;
    for (const auto& y : ys) logits.push_back(y[0]);
    return error_rate_logits(logits, data.labels);
  }
  return pixel_accuracy(ys, data.masks);
}

// ---- AdapterTrainer ------------------------------------------------------------------------

AdapterTrainer::AdapterTrainer(TransplantNet& net, std::string category, std::string task,
                               const NetModule& teacher_task, const TaskData& train, const TrainConfig& cfg)
    : net_(net),
      category_(std::move(category)),
      task_(std::move(task)),
      teacher_task_(teacher_task),
      train_(train),
      cfg_(cfg),
      opt_(net.adapter(category_, task_), static_cast<float>(cfg.momentum)) {
  cfg_.validate();
  if (static_cast<std::size_t>(cfg_.samples) > train_.size())
    fail(Errc::InsufficientData, "N = " + std::to_string(cfg_.samples) + " but only " + std::to_string(train_.size()) +
                                     " samples available");
  if (train_.x_shape.empty()) fail(Errc::InsufficientData, "training data carries no feature shape");
  student_head_ = net_.head_path(category_, task_);
  teacher_path_ = module_path(teacher_task_);
  x_shape_ = train_.x_shape;
  const Shape ys = out_shape();
  Tensor probe_x(x_shape_);
  if (run_forward(teacher_path_, probe_x).shape() != ys)
    fail(Errc::ShapeMismatch, "teacher and student task modules disagree on output shape");

  teacher_pseudo_.resize(static_cast<std::size_t>(cfg_.distill_pool));
  if (cfg_.method == Method::BackDistill) {
    double acc = 0.0;
    const int n = std::min(cfg_.probe, cfg_.distill_pool);
    for (int i = 0; i < n; ++i) acc += mean_abs(teacher_pseudo(static_cast<std::uint64_t>(i)));
    e_t_ = acc / n;
    lambda_ = lambda_rule(cfg_.task, e_t_, cfg_.lambda_scale);
  }
  const std::size_t n_lab = static_cast<std::size_t>(cfg_.samples);
  if (cfg_.method == Method::OutputDistill) {
    teacher_out_.resize(n_lab);
    parallel_for(n_lab, [&](std::size_t i) { teacher_out_[i] = run_forward(teacher_path_, train_.x[i]); });
  }
  if (cfg_.method == Method::JacobianDistill) {
    teacher_real_.resize(n_lab);
    parallel_for(n_lab, [&](std::size_t i) {
      std::vector<LayerCache> caches;
      run_forward(teacher_path_, train_.x[i], &caches);
      const Tensor g = sample_gy(cfg_.pseudo, train_.ids[i], ys);
      teacher_real_[i] = real_backward(teacher_path_, g, caches, x_shape_);
    });
    double acc = 0.0;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.probe), n_lab);
    for (std::size_t i = 0; i < n; ++i) acc += mean_abs(teacher_real_[i]);
    e_t_ = acc / static_cast<double>(n);
    lambda_ = lambda_rule(cfg_.task, e_t_, cfg_.lambda_scale);
  }
}

NetModule& AdapterTrainer::adapter() { return net_.mutable_adapter(category_, task_); }

Shape AdapterTrainer::out_shape() const {
  Shape s = x_shape_;
  for (const auto& pl : student_head_) s = output_shape(*pl.layer, s);
  return s;
}

const Tensor& AdapterTrainer::teacher_pseudo(std::uint64_t id) {
  Tensor& slot = teacher_pseudo_.at(id);
  if (slot.empty()) {
    const Tensor g = sample_gy(cfg_.pseudo, id, out_shape());
    slot = pseudo_backward(teacher_path_, g, cfg_.pseudo, id, x_shape_).d;
  }
  return slot;
}

double AdapterTrainer::refresh_alpha() {
  if (cfg_.method != Method::BackDistill) {
    alpha_ = 1.0;
    return alpha_;
  }
  const int n = std::min(cfg_.probe, cfg_.distill_pool);
  std::vector<Tensor> dt, ds(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) dt.push_back(teacher_pseudo(static_cast<std::uint64_t>(i)));
  const Shape ys = out_shape();
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const Tensor g = sample_gy(cfg_.pseudo, i, ys);
    ds[i] = pseudo_backward(student_head_, g, cfg_.pseudo, i, x_shape_).d;
  });
  alpha_ = estimate_alpha(dt, ds);
  return alpha_;
}

AdapterTrainer::Batch AdapterTrainer::batch_for_step(int epoch, int step) const {
  Batch b;
  const auto ep = static_cast<std::uint64_t>(epoch);
  const std::size_t n = static_cast<std::size_t>(cfg_.samples);
  if (n > 0) {
    const auto order = shuffled(n, cfg_.seed, Rng::key({kLabeledTag, ep}));
    const std::size_t bl = std::min<std::size_t>(n, static_cast<std::size_t>(cfg_.batch));
    for (std::size_t j = 0; j < bl; ++j) b.labeled.push_back(order[(static_cast<std::size_t>(step) * bl + j) % n]);
  }
  if (cfg_.method == Method::BackDistill) {
    const std::size_t pool = static_cast<std::size_t>(cfg_.distill_pool);
    const auto order = shuffled(pool, cfg_.seed, Rng::key({kDistillTag, ep}));
    const std::size_t bd = static_cast<std::size_t>(cfg_.batch);
    for (std::size_t j = 0; j < bd; ++j)
      b.distill_ids.push_back(order[(static_cast<std::size_t>(step) * bd + j) % pool]);
  }
  return b;
}

AdapterTrainer::StepResult AdapterTrainer::compute(const Batch& batch) {
  const NetModule& ad = net_.adapter(category_, task_);
  const std::size_t nlayers = ad.layers.size();
  const Shape ys = out_shape();
  struct Part {
    ModuleGrads grads;
    ModuleGrads distill_grads;
    double task = 0.0;
    double distill = 0.0;
  };

  const std::size_t nl = batch.labeled.size();
  std::vector<Part> lab(nl);
  const double inv_l = nl ? 1.0 / static_cast<double>(nl) : 0.0;
  parallel_for(nl, [&](std::size_t j) {
    const std::size_t i = batch.labeled[j];
    std::vector<LayerCache> caches;
    const Tensor y = run_forward(student_head_, train_.x[i], &caches);
    const Tensor* mask = train_.masks.empty() ? nullptr : &train_.masks[i];
    LossValue lv = task_loss(cfg_.task, y, train_.labels.empty() ? 0 : train_.labels[i], mask);
    lab[j].task = lv.value;
    Tensor gy = std::move(lv.grad);
    if (cfg_.method == Method::OutputDistill) {
      LossValue od = output_distill_loss(y, teacher_out_[i]);
      lab[j].distill = od.value;
      gy = zip_map(gy, od.grad, ZipOp::Add);
    }
    lab[j].grads = backprop(student_head_, caches, gy, ModuleKind::Adapter, nlayers).grads;
    if (cfg_.method == Method::JacobianDistill) {
      const Tensor g = sample_gy(cfg_.pseudo, train_.ids[i], ys);
      const BackwardResult r = real_backward_taped(student_head_, g, caches, x_shape_);
      lab[j].distill = distill_loss(r.d, teacher_real_[i], 1.0, lambda_);
      lab[j].distill_grads = distill_grad(r.tape, r.d, teacher_real_[i], 1.0, lambda_, nlayers);
      accumulate(lab[j].grads, lab[j].distill_grads);
    }
  });

  const std::size_t nd = batch.distill_ids.size();
  for (std::uint64_t id : batch.distill_ids) teacher_pseudo(id);
  std::vector<Part> dis(nd);
  parallel_for(nd, [&](std::size_t j) {
    const std::uint64_t id = batch.distill_ids[j];
    const Tensor g = sample_gy(cfg_.pseudo, id, ys);
    const BackwardResult r = pseudo_backward(student_head_, g, cfg_.pseudo, id, x_shape_);
    const Tensor& dt = teacher_pseudo_[id];
    dis[j].distill = distill_loss(r.d, dt, alpha_, lambda_);
    dis[j].grads = distill_grad(r.tape, r.d, dt, alpha_, lambda_, nlayers);
  });

  StepResult out;
  out.grads = zero_grads(ad);
  out.distill_grads = zero_grads(ad);
  for (const Part& p : lab) {
    accumulate(out.grads, p.grads, static_cast<float>(inv_l));
    if (!p.distill_grads.empty()) accumulate(out.distill_grads, p.distill_grads, static_cast<float>(inv_l));
    out.task += p.task * inv_l;
    out.distill += p.distill * inv_l;
  }
  const double inv_d = nd ? 1.0 / static_cast<double>(nd) : 0.0;
  for (const Part& p : dis) {
    accumulate(out.grads, p.grads, static_cast<float>(inv_d));
    accumulate(out.distill_grads, p.grads, static_cast<float>(inv_d));
    out.distill += p.distill * inv_d;
  }
  return out;
}

double AdapterTrainer::loss(const Batch& batch) {
  const StepResult r = compute(batch);
  return r.task + r.distill;
}

void AdapterTrainer::apply(const ModuleGrads& grads, double lr) {
  const double norm = grads_norm(grads);
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
    ModuleGrads clipped = grads;
    scale_grads(clipped, static_cast<float>(cfg_.clip_norm / norm));
    opt_.step(net_.mutable_adapter(category_, task_), clipped, static_cast<float>(lr));
    return;
  }
  opt_.step(net_.mutable_adapter(category_, task_), grads, static_cast<float>(lr));
}

// ---- Training loop -------------------------------------------------------------------------

std::string TrainReport::csv() const {
  std::string out = "epoch,task_loss,distill_loss,alpha,eval_metric\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.task_loss, r.distill_loss, r.alpha,
                  r.eval_metric);
    out += buf;
  }
  return out;
}

void TrainReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::IoError, "cannot write " + path);
  out << csv();
}

TrainReport train_adapter(TransplantNet& net, const std::string& category, const std::string& task,
                          const NetModule& teacher_task, const TaskData& train, const TaskData* eval,
                          const TrainConfig& cfg) {
  AdapterTrainer trainer(net, category, task, teacher_task, train, cfg);
  TrainReport rep;
  rep.lambda = trainer.lambda();
  rep.e_t = trainer.e_t();
  const auto metric = [&] { return eval ? evaluate_head(trainer.student_head(), *eval, cfg.task) : 0.0; };
  rep.initial_metric = metric();
  rep.final_metric = rep.initial_metric;
  const int decay_at = (2 * cfg.epochs + 2) / 3;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochRow row;
    row.epoch = e;
    row.alpha = e == 0 || cfg.alpha_every_epoch ? trainer.refresh_alpha() : trainer.alpha();
    const double lr = e >= decay_at ? cfg.lr * 0.1 : cfg.lr;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const auto r = trainer.compute(trainer.batch_for_step(e, s));
      trainer.apply(r.grads, lr);
      row.task_loss += r.task / cfg.steps_per_epoch;
      row.distill_loss += r.distill / cfg.steps_per_epoch;
    }
    row.eval_metric = metric();
    rep.final_metric = row.eval_metric;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---- Pretraining ----------------------------------------------------------------------------

namespace {

struct PretrainItem {
  NetModule* f;
  const Sample* s;
};

PretrainReport pretrain_items(std::vector<NetModule*> fs, NetModule& g, const std::vector<PretrainItem>& items,
                              const PretrainConfig& cfg) {
  if (items.empty()) fail(Errc::InsufficientData, "pretraining needs labeled data");
  if (cfg.task == TaskKind::Segmentation)
    for (const auto& it : items)
      if (it.s->mask.empty()) fail(Errc::InsufficientData, "segmentation pretraining needs masks");
  PretrainReport rep;
  std::vector<SgdMomentum> opt_f;
  for (NetModule* f : fs) opt_f.emplace_back(*f, static_cast<float>(cfg.momentum));
  SgdMomentum opt_g(g, static_cast<float>(cfg.momentum));
  const std::size_t n = items.size();
  const std::size_t bs = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(cfg.batch, 1)));
  const std::size_t steps = (n + bs - 1) / bs;
  const int decay_at = (2 * cfg.epochs + 2) / 3;
  const auto f_index = [&](const NetModule* f) {
    return static_cast<std::size_t>(std::find(fs.begin(), fs.end(), f) - fs.begin());
  };

  const auto target_mask = [&](const Sample& s, const Shape& out) {
    return downsample_mask(s.mask, s.image.dim(0) / out[0]);
  };

  for (int e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled(n, cfg.seed, Rng::key({kPretrainTag, static_cast<std::uint64_t>(e)}));
    const double lr = e >= decay_at ? cfg.lr * 0.1 : cfg.lr;
    double epoch_loss = 0.0;
    for (std::size_t st = 0; st < steps; ++st) {
      const std::size_t b0 = st * bs;
      const std::size_t b1 = std::min(n, b0 + bs);
      const Path pg = module_path(g);
      struct Part {
        std::size_t fi = 0;
        ModuleGrads gf, gg;
        double loss = 0.0;
      };
      std::vector<Part> parts(b1 - b0);
      parallel_for(parts.size(), [&](std::size_t j) {
        const PretrainItem& it = items[order[b0 + j]];
        const Path pf = module_path(*it.f);
        std::vector<LayerCache> cf, cg;
        const Tensor x = run_forward(pf, it.s->image, &cf);
        const Tensor y = run_forward(pg, x, &cg);
        Tensor mask;
        if (cfg.task == TaskKind::Segmentation) mask = target_mask(*it.s, y.shape());
        const LossValue lv = task_loss(cfg.task, y, it.s->label, mask.empty() ? nullptr : &mask);
        parts[j].loss = lv.value;
        parts[j].fi = f_index(it.f);
        PathBackprop bg = backprop(pg, cg, lv.grad, ModuleKind::Task, g.layers.size(), !it.f->frozen);
        parts[j].gg = std::move(bg.grads);
        if (!it.f->frozen) parts[j].gf = backprop(pf, cf, bg.grad_in, ModuleKind::Category, it.f->layers.size()).grads;
      });
      std::vector<ModuleGrads> gf;
      for (NetModule* f : fs) gf.push_back(zero_grads(*f));
      ModuleGrads gg = zero_grads(g);
      const float inv = 1.0f / static_cast<float>(parts.size());
      for (const auto& p : parts) {
        if (!p.gf.empty()) accumulate(gf[p.fi], p.gf, inv);
        accumulate(gg, p.gg, inv);
        epoch_loss += p.loss / static_cast<double>(n);
      }
      for (std::size_t k = 0; k < fs.size(); ++k)
        if (!fs[k]->frozen) opt_f[k].step(*fs[k], gf[k], static_cast<float>(lr));
      opt_g.step(g, gg, static_cast<float>(lr));
    }
    rep.epoch_loss.push_back(epoch_loss);
  }

  const Path pg = module_path(g);
  std::vector<Tensor> ys(n);
  parallel_for(n, [&](std::size_t i) { ys[i] = run_forward(pg, run_forward(module_path(*items[i].f), items[i].s->image)); });
  if (cfg.task == TaskKind::Classification) {
    std::vector<float> logits;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      logits.push_back(ys[i][0]);
      labels.push_back(items[i].s->label);
    }
    rep.train_accuracy = 1.0 - error_rate_logits(logits, labels);
  } else {
    std::vector<Tensor> truth;
    for (std::size_t i = 0; i < n; ++i) truth.push_back(target_mask(*items[i].s, ys[i].shape()));
    rep.train_accuracy = pixel_accuracy(ys, truth);
  }
  rep.gate_passed = rep.train_accuracy >= cfg.gate;
  return rep;
}

}  // namespace

PretrainReport pretrain_teacher(NetModule& f, NetModule& g, const std::vector<Sample>& data, const PretrainConfig& cfg) {
  std::vector<PretrainItem> items;
  for (const auto& s : data) items.push_back({&f, &s});
  return pretrain_items({&f}, g, items, cfg);
}

PretrainReport pretrain_task_module(const std::vector<const NetModule*>& categories,
                                    const std::vector<std::vector<Sample>>& data, NetModule& g,
                                    const PretrainConfig& cfg) {
  if (categories.size() != data.size()) fail(Errc::InvalidParams, "one dataset per category module expected");
  std::vector<NetModule> fs;
  fs.reserve(categories.size());
  for (const NetModule* c : categories) {
    fs.push_back(*c);
    fs.back().frozen = true;
  }
  std::vector<NetModule*> ptrs;
  std::vector<PretrainItem> items;
  for (std::size_t k = 0; k < fs.size(); ++k) ptrs.push_back(&fs[k]);
  for (std::size_t k = 0; k < fs.size(); ++k)
    for (const auto& s : data[k]) items.push_back({&fs[k], &s});
  return pretrain_items(ptrs, g, items, cfg);
}

}  // namespace tpnt
