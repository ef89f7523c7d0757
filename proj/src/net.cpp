#include "tpnt/net.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "tpnt/error.hpp"

namespace tpnt {

std::string_view module_kind_name(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::Category: return "category";
    case ModuleKind::Task: return "task";
    case ModuleKind::Adapter: return "adapter";
  }
  return "unknown";
}

bool operator==(const NetModule& a, const NetModule& b) {
  return a.id == b.id && a.kind == b.kind && a.frozen == b.frozen && a.layers == b.layers;
}

int module_out_channels(const NetModule& module, int in_channels) {
  int c = in_channels;
  for (const Layer& l : module.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      if (conv->in_ch() != c)
        fail(Errc::ShapeMismatch, "module " + module.id + ": conv expects " + std::to_string(conv->in_ch()) +
                                      " channels, got " + std::to_string(c));
      c = conv->out_ch();
    } else if (const auto* r = std::get_if<ReorderLayer>(&l)) {
      if (static_cast<int>(r->perm.size()) != c) fail(Errc::ShapeMismatch, "module " + module.id + ": reorder size");
    }
  }
  return c;
}

int module_in_channels(const NetModule& module) {
  for (const Layer& l : module.layers)
    if (const auto* conv = std::get_if<ConvLayer>(&l)) return conv->in_ch();
  fail(Errc::InvalidParams, "module " + module.id + " has no conv layer");
}

Shape module_output_shape(const NetModule& module, const Shape& in) {
  Shape s = in;
  for (const Layer& l : module.layers) s = output_shape(l, s);
  return s;
}

Path module_path(const NetModule& module) {
  Path p;
  p.reserve(module.layers.size());
  int relu = 0;
  for (std::size_t i = 0; i < module.layers.size(); ++i) {
    PathLayer pl{&module.layers[i], module.kind, static_cast<int>(i), -1};
    if (std::holds_alternative<ReluLayer>(module.layers[i])) pl.relu_slot = relu++;
    p.push_back(pl);
  }
  return p;
}

Path concat(const Path& a, const Path& b) {
  Path p = a;
  p.insert(p.end(), b.begin(), b.end());
  return p;
}

std::string adapter_id(const std::string& category, const std::string& task) {
  return "adapter:" + category + "->" + task;
}

void TransplantNet::add_category(NetModule module) {
  if (module.kind != ModuleKind::Category) fail(Errc::InvalidParams, module.id + " is not a category module");
  if (has_category(module.id)) fail(Errc::AlreadyExists, "category " + module.id);
  std::string id = module.id;
  categories_.emplace(std::move(id), std::move(module));
}

void TransplantNet::add_task(NetModule module) {
  if (module.kind != ModuleKind::Task) fail(Errc::InvalidParams, module.id + " is not a task module");
  if (has_task(module.id)) fail(Errc::AlreadyExists, "task " + module.id);
  std::string id = module.id;
  tasks_.emplace(std::move(id), std::move(module));
}

void TransplantNet::connect(const std::string& cat, const std::string& task, NetModule adapter) {
  if (adapter.kind != ModuleKind::Adapter) fail(Errc::InvalidParams, adapter.id + " is not an adapter");
  const NetModule& f = category(cat);
  const NetModule& g = this->task(task);
  if (connected(cat, task)) fail(Errc::AlreadyConnected, cat + " -> " + task);
  const int x_ch = module_out_channels(f, module_in_channels(f));
  const int h_ch = module_out_channels(adapter, x_ch);
  const int g_in = module_in_channels(g);
  if (h_ch != g_in)
    fail(Errc::ShapeMismatch, "adapter " + adapter.id + " emits " + std::to_string(h_ch) + " channels, task " + task +
                                  " expects " + std::to_string(g_in));
  adapters_.emplace(PairKey{cat, task}, std::move(adapter));
}

void TransplantNet::disconnect(const std::string& cat, const std::string& task) {
  if (adapters_.erase(PairKey{cat, task}) == 0) fail(Errc::NotConnected, cat + " -> " + task);
}

void TransplantNet::remove_task(const std::string& task) {
  if (tasks_.erase(task) == 0) fail(Errc::NotConnected, "no task " + task);
  std::erase_if(adapters_, [&](const auto& kv) { return kv.first.second == task; });
}

void TransplantNet::remove_category(const std::string& cat) {
  if (categories_.erase(cat) == 0) fail(Errc::NotConnected, "no category " + cat);
  std::erase_if(adapters_, [&](const auto& kv) { return kv.first.first == cat; });
}

bool TransplantNet::connected(const std::string& cat, const std::string& task) const {
  return adapters_.count(PairKey{cat, task}) != 0;
}

const NetModule& TransplantNet::category(const std::string& id) const {
  auto it = categories_.find(id);
  if (it == categories_.end()) fail(Errc::NotConnected, "no category module " + id);
  return it->second;
}

const NetModule& TransplantNet::task(const std::string& id) const {
  auto it = tasks_.find(id);
  if (it == tasks_.end()) fail(Errc::NotConnected, "no task module " + id);
  return it->second;
}

const NetModule& TransplantNet::adapter(const std::string& cat, const std::string& task) const {
  auto it = adapters_.find(PairKey{cat, task});
  if (it == adapters_.end()) fail(Errc::NotConnected, cat + " -> " + task);
  return it->second;
}

NetModule& TransplantNet::mutable_adapter(const std::string& cat, const std::string& task) {
  auto it = adapters_.find(PairKey{cat, task});
  if (it == adapters_.end()) fail(Errc::NotConnected, cat + " -> " + task);
  return it->second;
}

NetModule& TransplantNet::mutable_category(const std::string& id) {
  auto it = categories_.find(id);
  if (it == categories_.end()) fail(Errc::NotConnected, "no category module " + id);
  return it->second;
}

NetModule& TransplantNet::mutable_task(const std::string& id) {
  auto it = tasks_.find(id);
  if (it == tasks_.end()) fail(Errc::NotConnected, "no task module " + id);
  return it->second;
}

Path TransplantNet::compose_path(const std::string& cat, const std::string& task) const {
  const NetModule& h = adapter(cat, task);
  return concat(module_path(category(cat)), concat(module_path(h), module_path(this->task(task))));
}

Path TransplantNet::head_path(const std::string& cat, const std::string& task) const {
  const NetModule& h = adapter(cat, task);
  return concat(module_path(h), module_path(this->task(task)));
}

void TransplantNet::validate() const {
  for (const auto& [key, h] : adapters_) {
    const NetModule& f = category(key.first);
    const NetModule& g = task(key.second);
    for (const Layer& l : f.layers) tpnt::validate(l);
    for (const Layer& l : h.layers) tpnt::validate(l);
    for (const Layer& l : g.layers) tpnt::validate(l);
    const int x_ch = module_out_channels(f, module_in_channels(f));
    const int h_ch = module_out_channels(h, x_ch);
    if (h_ch != module_in_channels(g))
      fail(Errc::ShapeMismatch, "adapter " + h.id + " does not match task " + g.id);
  }
}

bool operator==(const TransplantNet& a, const TransplantNet& b) {
  return a.categories_ == b.categories_ && a.tasks_ == b.tasks_ && a.adapters_ == b.adapters_;
}

namespace {

float he_bound(int ksize, int in_ch) { return std::sqrt(6.0f / static_cast<float>(ksize * ksize * in_ch)); }

}  // namespace

NetModule make_category_module(const std::string& id, int in_ch, int channels, Rng& rng) {
  NetModule m{id, ModuleKind::Category, {}, false};
  m.layers.push_back(make_conv(3, in_ch, channels, he_bound(3, in_ch), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(make_conv(3, channels, channels, he_bound(3, channels), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(MaxPoolLayer{2});
  return m;
}

NetModule make_classifier_head(const std::string& id, int in_ch, int hidden, Rng& rng) {
  NetModule m{id, ModuleKind::Task, {}, false};
  m.layers.push_back(make_conv(3, in_ch, hidden, he_bound(3, in_ch), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(MaxPoolLayer{2});
  m.layers.push_back(make_conv(1, hidden, hidden, he_bound(1, hidden), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(make_conv(1, hidden, 1, he_bound(1, hidden), rng));
  m.layers.push_back(GlobalAvgPoolLayer{});
  return m;
}

NetModule make_segmenter_head(const std::string& id, int in_ch, int hidden, Rng& rng) {
  NetModule m{id, ModuleKind::Task, {}, false};
  m.layers.push_back(make_conv(3, in_ch, hidden, he_bound(3, in_ch), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(make_conv(3, hidden, hidden, he_bound(3, hidden), rng));
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(make_conv(1, hidden, 2, he_bound(1, hidden), rng));
  return m;
}

std::vector<std::uint16_t> random_permutation(int n, std::uint64_t seed) {
  std::vector<std::uint16_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), std::uint16_t{0});
  Rng rng(seed, Rng::key({0x7265'6f72'6465'72ULL, static_cast<std::uint64_t>(n)}));
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  return perm;
}

NetModule build_adapter(const std::string& id, const AdapterSpec& spec, Rng& rng) {
  if (spec.channels < 1) fail(Errc::InvalidParams, "adapter channels must be >= 1");
  if (spec.convs != 1 && spec.convs != 3) fail(Errc::InvalidParams, "adapter conv count must be 1 or 3");
  NetModule m{id, ModuleKind::Adapter, {}, false};
  ReorderLayer reorder;
  if (spec.reorder_seed) {
    reorder.perm = random_permutation(spec.channels, *spec.reorder_seed);
  } else {
    reorder.perm.resize(static_cast<std::size_t>(spec.channels));
    std::iota(reorder.perm.begin(), reorder.perm.end(), std::uint16_t{0});
  }
  m.layers.push_back(std::move(reorder));
  m.layers.push_back(RescaleLayer{spec.beta.value_or(1.0f)});
  validate(m.layers.back());
  const int ksize = spec.kernel == AdapterKernel::Conv3x3 ? 3 : 1;
  const float bound = spec.init_gain / std::sqrt(static_cast<float>(ksize * ksize * spec.channels));
  const int out = spec.out_channels.value_or(spec.channels);
  if (out < 1) fail(Errc::InvalidParams, "adapter output channels must be >= 1");
  for (int i = 0; i < spec.convs; ++i) {
    const int c = i + 1 == spec.convs ? out : spec.channels;
    m.layers.push_back(make_conv(ksize, spec.channels, c, bound, rng));
    m.layers.push_back(ReluLayer{});
  }
  return m;
}

NetModule direct_adapter(const std::string& id) { return NetModule{id, ModuleKind::Adapter, {}, true}; }

Tensor run_forward(const Path& path, const Tensor& x, std::vector<LayerCache>* caches, const ForwardOptions& opts) {
  if (caches) caches->assign(path.size(), LayerCache{});
  Tensor cur = x;
  for (std::size_t i = 0; i < path.size(); ++i) cur = forward(*path[i].layer, cur, caches ? &(*caches)[i] : nullptr, opts);
  return cur;
}

ModuleGrads zero_grads(const NetModule& module) {
  ModuleGrads g(module.layers.size());
  for (std::size_t i = 0; i < module.layers.size(); ++i) {
    if (const auto* c = std::get_if<ConvLayer>(&module.layers[i])) {
      g[i].weights = Tensor(c->weights.shape());
      g[i].bias = Tensor(c->bias.shape());
    }
  }
  return g;
}

namespace {

void add_into(Tensor& into, const Tensor& from, float s) {
  if (from.empty()) return;
  if (into.empty()) {
    into = scale(from, s);
    return;
  }
  require_same_shape(into, from, "accumulate");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += s * from[i];
}

}  // namespace

void accumulate(ModuleGrads& into, const ModuleGrads& from, float s) {
  if (into.size() < from.size()) into.resize(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    add_into(into[i].weights, from[i].weights, s);
    add_into(into[i].bias, from[i].bias, s);
  }
}

void scale_grads(ModuleGrads& grads, float s) {
  for (auto& g : grads) {
    for (float& v : g.weights.data()) v *= s;
    for (float& v : g.bias.data()) v *= s;
  }
}

double grads_norm(const ModuleGrads& grads) {
  double acc = 0.0;
  for (const auto& g : grads) {
    for (float v : g.weights.data()) acc += static_cast<double>(v) * v;
    for (float v : g.bias.data()) acc += static_cast<double>(v) * v;
  }
  return std::sqrt(acc);
}

PathBackprop backprop(const Path& path, const std::vector<LayerCache>& caches, const Tensor& grad_out,
                      ModuleKind trainable, std::size_t trainable_layers, bool need_grad_in) {
  if (caches.size() != path.size()) fail(Errc::CacheRequired, "backprop needs one cache per layer");
  PathBackprop out;
  out.grads.resize(trainable_layers);
  // Nothing below the lowest trainable layer matters unless grad_in is wanted.
  std::size_t stop = path.size();
  for (std::size_t i = 0; i < path.size(); ++i)
    if (path[i].module == trainable) {
      stop = i;
      break;
    }
  if (need_grad_in) stop = 0;
  Tensor g = grad_out;
  for (std::size_t i = path.size(); i-- > stop;) {
    const bool want = path[i].module == trainable && std::holds_alternative<ConvLayer>(*path[i].layer);
    VjpResult r = vjp(*path[i].layer, g, &caches[i], want);
    if (want) {
      auto& slot = out.grads.at(static_cast<std::size_t>(path[i].index));
      slot.weights = std::move(r.grad_weights);
      slot.bias = std::move(r.grad_bias);
    }
    if (i == stop && !need_grad_in) break;
    g = std::move(r.grad_in);
  }
  if (need_grad_in) out.grad_in = std::move(g);
  return out;
}

SgdMomentum::SgdMomentum(const NetModule& module, float momentum) : momentum_(momentum), velocity_(zero_grads(module)) {}

void SgdMomentum::step(NetModule& module, const ModuleGrads& grads, float lr) {
  if (module.frozen) fail(Errc::FrozenModule, "refusing to update frozen module " + module.id);
  for (std::size_t i = 0; i < module.layers.size() && i < grads.size(); ++i) {
    auto* conv = std::get_if<ConvLayer>(&module.layers[i]);
    if (!conv || grads[i].weights.empty()) continue;
    auto upd = [&](Tensor& param, Tensor& vel, const Tensor& grad) {
      if (grad.empty()) return;
      require_same_shape(param, grad, "sgd step");
      for (std::size_t k = 0; k < param.size(); ++k) {
        vel[k] = momentum_ * vel[k] + grad[k];
        param[k] -= lr * vel[k];
      }
    };
    upd(conv->weights, velocity_[i].weights, grads[i].weights);
    upd(conv->bias, velocity_[i].bias, grads[i].bias);
  }
}

namespace {

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

void hash_module(std::uint64_t& h, const NetModule& m) {
  fnv(h, m.id.data(), m.id.size());
  const auto kind = static_cast<std::uint8_t>(m.kind);
  fnv(h, &kind, 1);
  fnv(h, &m.frozen, 1);
  for (const Layer& l : m.layers) {
    const auto k = static_cast<std::uint8_t>(kind_of(l));
    fnv(h, &k, 1);
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      fnv(h, c->weights.ptr(), c->weights.size() * sizeof(float));
      fnv(h, c->bias.ptr(), c->bias.size() * sizeof(float));
      fnv(h, &c->pad, sizeof(c->pad));
    } else if (const auto* r = std::get_if<ReorderLayer>(&l)) {
      fnv(h, r->perm.data(), r->perm.size() * sizeof(std::uint16_t));
    } else if (const auto* s = std::get_if<RescaleLayer>(&l)) {
      fnv(h, &s->beta, sizeof(float));
    } else if (const auto* mp = std::get_if<MaxPoolLayer>(&l)) {
      fnv(h, &mp->k, sizeof(int));
    } else if (const auto* ap = std::get_if<AvgPoolLayer>(&l)) {
      fnv(h, &ap->k, sizeof(int));
    } else if (const auto* d = std::get_if<DropoutLayer>(&l)) {
      fnv(h, &d->rate, sizeof(float));
    } else if (const auto* re = std::get_if<ReluLayer>(&l)) {
      fnv(h, &re->pseudo_mode, 1);
    }
  }
}

}  // namespace

std::uint64_t module_hash(const NetModule& module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  hash_module(h, module);
  return h;
}

std::uint64_t net_hash(const TransplantNet& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [id, m] : net.categories()) hash_module(h, m);
  for (const auto& [id, m] : net.tasks()) hash_module(h, m);
  for (const auto& [key, m] : net.adapters()) {
    fnv(h, key.first.data(), key.first.size());
    fnv(h, key.second.data(), key.second.size());
    hash_module(h, m);
  }
  return h;
}

}  // namespace tpnt
