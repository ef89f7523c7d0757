#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tpnt/net.hpp"
#include "tpnt/pseudograd.hpp"
#include "tpnt/synth.hpp"

namespace tpnt {

enum class Method { BackDistill, DirectLearn, OutputDistill, JacobianDistill };
enum class TaskKind { Classification, Segmentation };

std::string_view method_name(Method m);
Method parse_method(std::string_view name);
std::string_view task_kind_name(TaskKind t);
TaskKind parse_task_kind(std::string_view name);

struct TrainConfig {
  Method method = Method::BackDistill;
  TaskKind task = TaskKind::Classification;
  int samples = 0;  // N labeled samples
  double lr = 1e-2;
  double momentum = 0.9;
  double clip_norm = 1.0;  // global gradient-norm clip, 0 disables
  int batch = 16;
  int epochs = 30;
  int steps_per_epoch = 16;
  int probe = 32;          // images used to refresh alpha
  bool alpha_every_epoch = false;  // false: alpha is estimated once before training
  int distill_pool = 128;  // pseudo-gradient draws cycled by back-distill
  std::optional<double> lambda_scale;  // default 10 (classification) or 1 (segmentation)
  std::uint64_t seed = 0;
  PseudoGradConfig pseudo;

  void validate() const;
};

// Category-module outputs with their targets.
struct TaskData {
  std::vector<Tensor> x;
  std::vector<int> labels;
  std::vector<Tensor> masks;  // one-hot at task output resolution
  std::vector<std::uint64_t> ids;
  Shape x_shape;

  std::size_t size() const { return x.size(); }
  TaskData head(std::size_t n) const;
};

// Runs f on every image; masks are downsampled to the feature resolution.
TaskData make_task_data(const NetModule& category, const std::vector<Sample>& samples);

// ---- Scale statistics ----------------------------------------------------------

struct ScaleStats {
  double alpha = 1.0;
  double beta = 1.0;
  double e_t = 1.0;
};

double mean_norm(const std::vector<Tensor>& ts);
// beta = E_{I_S} ||f_S(I)||_F / E_{I_T} ||f(I)||_F
double estimate_beta(const std::vector<Tensor>& student_features, const std::vector<Tensor>& teacher_features);
double estimate_beta(const NetModule& f, const NetModule& f_s, const std::vector<Tensor>& images_t,
                     const std::vector<Tensor>& images_s);
// alpha = E ||D'_T|| / E ||D'_S||
double estimate_alpha(const std::vector<Tensor>& d_t, const std::vector<Tensor>& d_s);
double lambda_rule(TaskKind task, double e_t, std::optional<double> scale = std::nullopt);

// ---- Losses ----------------------------------------------------------------------

struct LossValue {
  double value = 0.0;
  Tensor grad;  // d value / d y
};

// Logistic cross-entropy on a scalar logit.
LossValue logistic_loss(const Tensor& y, int label);
// Mean per-pixel softmax cross-entropy against soft or one-hot targets.
LossValue pixel_cross_entropy(const Tensor& y, const Tensor& target);
// Output distillation: CE between the student and the teacher's soft outputs.
LossValue output_distill_loss(const Tensor& y_s, const Tensor& y_t);
LossValue task_loss(TaskKind task, const Tensor& y, int label, const Tensor* mask);

struct LossParts {
  double task = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

LossParts back_distill_loss(TaskKind task, const Tensor* y_s, int label, const Tensor* mask, const Tensor& d_s,
                            const Tensor& d_t, double alpha, double lambda, bool has_labels);

// ---- Training ----------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double task_loss = 0.0;
  double distill_loss = 0.0;
  double alpha = 1.0;
  double eval_metric = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  double lambda = 0.0;
  double e_t = 0.0;
  double initial_metric = 0.0;
  double final_metric = 0.0;

  std::string csv() const;
  void write_csv(const std::string& path) const;
};

// Metric of a head path on data: error rate for classification, pixel accuracy
// for segmentation.
double evaluate_head(const Path& head, const TaskData& data, TaskKind task);
std::vector<Tensor> head_outputs(const Path& head, const TaskData& data);

// Everything one optimisation step needs, with the teacher-side quantities
// cached so repeated steps are cheap.
class AdapterTrainer {
 public:
  AdapterTrainer(TransplantNet& net, std::string category, std::string task, const NetModule& teacher_task,
                 const TaskData& train, const TrainConfig& cfg);

  // Refreshes alpha from the probe set; returns it.
  double refresh_alpha();
  void set_alpha(double a) { alpha_ = a; }
  double alpha() const { return alpha_; }
  double lambda() const { return lambda_; }
  double e_t() const { return e_t_; }

  struct Batch {
    std::vector<std::size_t> labeled;        // indices into train data
    std::vector<std::uint64_t> distill_ids;  // back-distill draws
  };
  struct StepResult {
    ModuleGrads grads;
    ModuleGrads distill_grads;  // distillation term alone (back-distill and jacobian-distill)
    double task = 0.0;
    double distill = 0.0;
  };
  // Gradient of the method's loss at the current adapter parameters.
  StepResult compute(const Batch& batch);
  // Loss only, for finite-difference checks.
  double loss(const Batch& batch);

  Batch batch_for_step(int epoch, int step) const;
  void apply(const ModuleGrads& grads, double lr);

  const Path& student_head() const { return student_head_; }
  NetModule& adapter();

 private:
  const Tensor& teacher_pseudo(std::uint64_t id);
  const Tensor& teacher_real(std::size_t i);
  Shape out_shape() const;

  TransplantNet& net_;
  std::string category_, task_;
  const NetModule& teacher_task_;
  const TaskData& train_;
  TrainConfig cfg_;
  Path student_head_;
  Path teacher_path_;
  Shape x_shape_;
  double alpha_ = 1.0;
  double lambda_ = 1.0;
  double e_t_ = 1.0;
  std::vector<Tensor> teacher_pseudo_;   // by distill id
  std::vector<Tensor> teacher_real_;     // by train index
  std::vector<Tensor> teacher_out_;      // by train index
  SgdMomentum opt_;
};

TrainReport train_adapter(TransplantNet& net, const std::string& category, const std::string& task,
                          const NetModule& teacher_task, const TaskData& train, const TaskData* eval,
                          const TrainConfig& cfg);

// ---- Teacher pretraining --------------------------------------------------------

struct PretrainConfig {
  TaskKind task = TaskKind::Classification;
  int epochs = 40;
  int batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double gate = 0.95;
};

struct PretrainReport {
  double train_accuracy = 0.0;
  bool gate_passed = false;
  std::vector<double> epoch_loss;
};

// Trains f and g jointly on labeled images. A report below the gate means the
// caller should surface WeakTeacher.
// A frozen f is left untouched and only g is trained.
PretrainReport pretrain_teacher(NetModule& f, NetModule& g, const std::vector<Sample>& data, const PretrainConfig& cfg);

// Supervised training of g alone on the union of data[k] seen through the
// frozen categories[k].
PretrainReport pretrain_task_module(const std::vector<const NetModule*>& categories,
                                    const std::vector<std::vector<Sample>>& data, NetModule& g,
                                    const PretrainConfig& cfg);

}  // namespace tpnt
