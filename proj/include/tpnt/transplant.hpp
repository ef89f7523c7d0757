#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tpnt/net.hpp"
#include "tpnt/train.hpp"

namespace tpnt {

// Classification heads end in global average pooling.
TaskKind task_kind_of(const NetModule& task);

// Images used to score wired pairs, keyed by category id.
using EvalImages = std::map<std::string, std::vector<Sample>>;

struct PairMetric {
  std::string category;
  std::string task;
  double value = 0.0;

  friend bool operator==(const PairMetric&, const PairMetric&) = default;
};

// Metric of every wired pair whose category has images in `images`.
std::vector<PairMetric> evaluate_pairs(const TransplantNet& net, const EvalImages& images);

// Combined hash of the modules of `net` that also exist in `before`.
std::uint64_t preexisting_hash(const TransplantNet& net, const TransplantNet& before);

struct OpReport {
  std::string category;
  std::string task;
  double metric_before = 0.0;  // new pair, untrained adapter
  double metric_after = 0.0;
  double beta = 1.0;
  TrainReport train;
  std::vector<PairMetric> prior_before;  // pairs that existed before the op
  std::vector<PairMetric> prior_after;
  std::uint64_t hash_before = 0;  // pre-existing modules
  std::uint64_t hash_after = 0;

  bool untouched() const { return hash_before == hash_after && prior_before == prior_after; }
};

struct OpResult {
  TransplantNet net;
  OpReport report;
};

struct TransplantJob {
  std::string category;      // category module id in the teacher
  std::string task;          // task module id in the student
  std::string teacher_task;  // task module id in the teacher, empty means `task`
  TrainConfig train;
  AdapterSpec adapter;  // channels and out_channels are filled in from the endpoints
  std::uint64_t adapter_seed = 0;
  std::vector<Sample> data;              // labeled pool and distillation images
  std::vector<Sample> eval;              // scores the new pair
  std::vector<Sample> reference_images;  // I_S for beta, empty means `data`
};

// Copies f from the teacher into a copy of the student and trains a fresh
// adapter between it and the student's task module. Inputs are untouched.
OpResult transplant_category(const TransplantNet& student, const TransplantNet& teacher, const TransplantJob& job,
                             const EvalImages& prior = {});

// File form: reads both nets, writes the result to `output`, which must differ
// from both inputs.
OpReport transplant_files(const std::filesystem::path& teacher, const std::filesystem::path& student,
                          const std::filesystem::path& output, const TransplantJob& job, const EvalImages& prior = {});

enum class TaskSource { FreshTrain, CarriedFromTeacher };

struct AddTaskJob {
  TaskSource source = TaskSource::FreshTrain;
  std::string task;  // id in the result
  // FreshTrain: the untrained module plus labeled data per existing category.
  NetModule module;
  std::map<std::string, std::vector<Sample>> data;
  PretrainConfig pretrain;
  // CarriedFromTeacher: the teacher's f and g are imported together.
  const TransplantNet* teacher = nullptr;
  std::string teacher_category;
  std::string teacher_task;
};

struct AddTaskResult {
  TransplantNet net;
  PretrainReport pretrain;
};

// Fresh modules are wired to every category they were trained on through an
// empty adapter; carried modules arrive with their own f only.
AddTaskResult add_task_module(const TransplantNet& net, const AddTaskJob& job);

struct ConnectJob {
  std::string category;
  std::string task;
  // Teacher for the category: the task module currently wired to it, or
  // `teacher_task` if given.
  std::string teacher_task;
  TrainConfig train;
  AdapterSpec adapter;
  std::uint64_t adapter_seed = 0;
  std::vector<Sample> data;
  std::vector<Sample> eval;
};

// Trains an adapter between two modules already in `net`.
OpResult connect_existing(const TransplantNet& net, const ConnectJob& job, const EvalImages& prior = {});

}  // namespace tpnt
