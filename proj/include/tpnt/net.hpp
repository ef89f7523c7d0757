#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tpnt/layers.hpp"

namespace tpnt {

enum class ModuleKind : std::uint8_t { Category = 0, Task = 1, Adapter = 2 };

std::string_view module_kind_name(ModuleKind kind);

struct NetModule {
  std::string id;
  ModuleKind kind = ModuleKind::Category;
  std::vector<Layer> layers;
  bool frozen = false;

  friend bool operator==(const NetModule& a, const NetModule& b);
};

// Output channel count of a module given its input channel count.
int module_in_channels(const NetModule& module);
int module_out_channels(const NetModule& module, int in_channels);
Shape module_output_shape(const NetModule& module, const Shape& in);

// One layer of a composed path, with enough provenance to key per-layer
// randomness and to route parameter gradients back to its module.
struct PathLayer {
  const Layer* layer = nullptr;
  ModuleKind module = ModuleKind::Category;
  int index = 0;      // position within its module
  int relu_slot = -1;  // ReLU ordinal within its module, counted from the input side
};

using Path = std::vector<PathLayer>;

Path module_path(const NetModule& module);
Path concat(const Path& a, const Path& b);

// Category modules, task modules and the adapters wiring them. A teacher net
// is the same structure with an empty (identity) adapter per pair.
class TransplantNet {
 public:
  using PairKey = std::pair<std::string, std::string>;

  void add_category(NetModule module);
  void add_task(NetModule module);
  // Adds the adapter for (category, task); throws AlreadyConnected if present.
  void connect(const std::string& category, const std::string& task, NetModule adapter);
  void disconnect(const std::string& category, const std::string& task);
  void remove_task(const std::string& task);
  void remove_category(const std::string& category);

  bool has_category(const std::string& id) const { return categories_.count(id) != 0; }
  bool has_task(const std::string& id) const { return tasks_.count(id) != 0; }
  bool connected(const std::string& category, const std::string& task) const;

  const NetModule& category(const std::string& id) const;
  const NetModule& task(const std::string& id) const;
  const NetModule& adapter(const std::string& category, const std::string& task) const;
  NetModule& mutable_adapter(const std::string& category, const std::string& task);
  NetModule& mutable_category(const std::string& id);
  NetModule& mutable_task(const std::string& id);

  const std::map<std::string, NetModule>& categories() const { return categories_; }
  const std::map<std::string, NetModule>& tasks() const { return tasks_; }
  const std::map<PairKey, NetModule>& adapters() const { return adapters_; }

  // f -> h -> g. Throws NotConnected if no adapter exists for the pair.
  Path compose_path(const std::string& category, const std::string& task) const;
  // h -> g, the part that sits above the category module output x.
  Path head_path(const std::string& category, const std::string& task) const;

  // Channel compatibility of every adapter with its endpoints.
  void validate() const;

  friend bool operator==(const TransplantNet& a, const TransplantNet& b);

 private:
  std::map<std::string, NetModule> categories_;
  std::map<std::string, NetModule> tasks_;
  std::map<PairKey, NetModule> adapters_;
};

std::string adapter_id(const std::string& category, const std::string& task);

// ---- Presets -------------------------------------------------------------

// conv3x3 -> relu -> conv3x3 -> relu -> maxpool2
NetModule make_category_module(const std::string& id, int in_ch, int channels, Rng& rng);
// conv3x3 -> relu -> maxpool2 -> conv1x1 -> relu -> conv1x1(->1) -> global avg pool
NetModule make_classifier_head(const std::string& id, int in_ch, int hidden, Rng& rng);
// conv3x3 -> relu -> conv3x3 -> relu -> conv1x1(->2)
NetModule make_segmenter_head(const std::string& id, int in_ch, int hidden, Rng& rng);

enum class AdapterKernel { Conv3x3, Conv1x1 };

struct AdapterSpec {
  int channels = 8;
  std::optional<int> out_channels;  // last conv output, defaults to channels
  int convs = 1;
  AdapterKernel kernel = AdapterKernel::Conv3x3;
  std::optional<std::uint64_t> reorder_seed;
  std::optional<float> beta;
  float init_gain = 1.0f;  // kernel bound is init_gain / sqrt(m*m*M)
};

// [Reorder, Rescale, (Conv, ReLU) x n] with kernels uniform(+-1/sqrt(m*m*M)).
NetModule build_adapter(const std::string& id, const AdapterSpec& spec, Rng& rng);
// Zero-layer adapter: the category output feeds the task module directly.
NetModule direct_adapter(const std::string& id);

std::vector<std::uint16_t> random_permutation(int n, std::uint64_t seed);

// ---- Execution -------------------------------------------------------------

Tensor run_forward(const Path& path, const Tensor& x, std::vector<LayerCache>* caches = nullptr,
                   const ForwardOptions& opts = {});

struct LayerGrads {
  Tensor weights;
  Tensor bias;
};
using ModuleGrads = std::vector<LayerGrads>;

ModuleGrads zero_grads(const NetModule& module);
void accumulate(ModuleGrads& into, const ModuleGrads& from, float scale_by = 1.0f);
void scale_grads(ModuleGrads& grads, float s);
double grads_norm(const ModuleGrads& grads);

// True backprop from grad_out at the path output; parameter gradients are
// collected only for layers of module kind `trainable`.
struct PathBackprop {
  Tensor grad_in;
  ModuleGrads grads;  // indexed by layer index within the trainable module
};
PathBackprop backprop(const Path& path, const std::vector<LayerCache>& caches, const Tensor& grad_out,
                      ModuleKind trainable, std::size_t trainable_layers, bool need_grad_in = false);

// SGD with momentum: v = mu * v + g; w -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(const NetModule& module, float momentum);
  void step(NetModule& module, const ModuleGrads& grads, float lr);

 private:
  float momentum_;
  ModuleGrads velocity_;
};

// 64-bit FNV-1a over every parameter byte, for bit-identity checks.
std::uint64_t module_hash(const NetModule& module);
std::uint64_t net_hash(const TransplantNet& net);

}  // namespace tpnt
