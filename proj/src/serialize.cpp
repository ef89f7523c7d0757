#include "tpnt/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tpnt/error.hpp"

namespace tpnt {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void floats(const Tensor& t) {
    for (float v : t.data()) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) fail(Errc::CorruptModel, "truncated model file");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(Tensor& t) {
    need(t.size() * 4);
    for (float& v : t.data()) v = f32();
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_layer(Writer& w, const Layer& layer) {
  w.u8(static_cast<std::uint8_t>(kind_of(layer)));
  if (const auto* c = std::get_if<ConvLayer>(&layer)) {
    w.u16(static_cast<std::uint16_t>(c->ksize()));
    w.u16(static_cast<std::uint16_t>(c->in_ch()));
    w.u16(static_cast<std::uint16_t>(c->out_ch()));
    w.u16(static_cast<std::uint16_t>(c->pad));
    w.floats(c->weights);
    w.floats(c->bias);
  } else if (const auto* r = std::get_if<ReluLayer>(&layer)) {
    w.u8(static_cast<std::uint8_t>(r->pseudo_mode));
  } else if (const auto* mp = std::get_if<MaxPoolLayer>(&layer)) {
    w.u16(static_cast<std::uint16_t>(mp->k));
  } else if (const auto* ap = std::get_if<AvgPoolLayer>(&layer)) {
    w.u16(static_cast<std::uint16_t>(ap->k));
  } else if (const auto* d = std::get_if<DropoutLayer>(&layer)) {
    w.f32(d->rate);
  } else if (const auto* ro = std::get_if<ReorderLayer>(&layer)) {
    w.u16(static_cast<std::uint16_t>(ro->perm.size()));
    for (auto p : ro->perm) w.u16(p);
  } else if (const auto* rs = std::get_if<RescaleLayer>(&layer)) {
    w.f32(rs->beta);
  }
}

Layer read_layer(Reader& r) {
  const std::uint8_t kind = r.u8();
  switch (static_cast<LayerKind>(kind)) {
    case LayerKind::Conv: {
      const int m = r.u16(), D = r.u16(), C = r.u16(), p = r.u16();
      if (m == 0 || D == 0 || C == 0) fail(Errc::CorruptModel, "conv with zero extent");
      ConvLayer c;
      c.weights = Tensor({m, m, D, C});
      c.bias = Tensor({C});
      c.pad = p;
      r.floats(c.weights);
      r.floats(c.bias);
      return c;
    }
    case LayerKind::Relu: {
      const std::uint8_t mode = r.u8();
      if (mode > 2) fail(Errc::CorruptModel, "bad ReLU pseudo mode");
      return ReluLayer{static_cast<PseudoMode>(mode)};
    }
    case LayerKind::MaxPool: return MaxPoolLayer{r.u16()};
    case LayerKind::AvgPool: return AvgPoolLayer{r.u16()};
    case LayerKind::GlobalAvgPool: return GlobalAvgPoolLayer{};
    case LayerKind::Dropout: return DropoutLayer{r.f32()};
    case LayerKind::Reorder: {
      ReorderLayer ro;
      ro.perm.resize(r.u16());
      for (auto& p : ro.perm) p = r.u16();
      return ro;
    }
    case LayerKind::Rescale: return RescaleLayer{r.f32()};
  }
  fail(Errc::CorruptModel, "unknown layer kind " + std::to_string(kind));
}

}  // namespace

std::vector<std::uint8_t> serialize_net(const TransplantNet& net) {
  std::vector<const NetModule*> modules;
  std::map<std::string, std::uint16_t> cat_index, task_index;
  for (const auto& [id, m] : net.categories()) {
    cat_index[id] = static_cast<std::uint16_t>(modules.size());
    modules.push_back(&m);
  }
  for (const auto& [id, m] : net.tasks()) {
    task_index[id] = static_cast<std::uint16_t>(modules.size());
    modules.push_back(&m);
  }
  for (const auto& [key, m] : net.adapters()) modules.push_back(&m);

  Writer w;
  w.bytes("TPNT");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(modules.size()));
  for (const NetModule* m : modules) {
    if (m->id.size() > 0xffff) fail(Errc::InvalidParams, "module id too long");
    w.u16(static_cast<std::uint16_t>(m->id.size()));
    w.bytes(m->id);
    w.u8(static_cast<std::uint8_t>(m->kind));
    w.u8(m->frozen ? 1 : 0);
    w.u16(static_cast<std::uint16_t>(m->layers.size()));
    for (const Layer& l : m->layers) write_layer(w, l);
  }
  for (const auto& [key, m] : net.adapters()) {
    w.u16(cat_index.at(key.first));
    w.u16(task_index.at(key.second));
  }
  return w.take();
}

TransplantNet deserialize_net(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4) != "TPNT") fail(Errc::CorruptModel, "bad magic");
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) fail(Errc::CorruptModel, "unsupported model version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NetModule> modules;
  for (std::uint32_t i = 0; i < count; ++i) {
    NetModule m;
    m.id = r.str(r.u16());
    const std::uint8_t kind = r.u8();
    if (kind > 2) fail(Errc::CorruptModel, "bad module kind");
    m.kind = static_cast<ModuleKind>(kind);
    const std::uint8_t frozen = r.u8();
    if (frozen > 1) fail(Errc::CorruptModel, "bad frozen flag");
    m.frozen = frozen == 1;
    const std::uint16_t layers = r.u16();
    for (std::uint16_t l = 0; l < layers; ++l) m.layers.push_back(read_layer(r));
    modules.push_back(std::move(m));
  }
  TransplantNet net;
  std::vector<NetModule> adapters;
  for (auto& m : modules) {
    switch (m.kind) {
      case ModuleKind::Category: net.add_category(m); break;
      case ModuleKind::Task: net.add_task(m); break;
      case ModuleKind::Adapter: adapters.push_back(m); break;
    }
  }
  for (auto& a : adapters) {
    const std::uint16_t ci = r.u16(), ti = r.u16();
    if (ci >= modules.size() || ti >= modules.size() || modules[ci].kind != ModuleKind::Category ||
        modules[ti].kind != ModuleKind::Task)
      fail(Errc::CorruptModel, "bad adapter wiring");
    try {
      net.connect(modules[ci].id, modules[ti].id, std::move(a));
    } catch (const Error& e) {
      fail(Errc::CorruptModel, std::string("inconsistent adapter: ") + e.what());
    }
  }
  if (!r.done()) fail(Errc::CorruptModel, "trailing bytes");
  return net;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::IoError, "write failed for " + path.string());
}

void save_net(const TransplantNet& net, const std::filesystem::path& path) { write_file(path, serialize_net(net)); }

TransplantNet load_net(const std::filesystem::path& path) { return deserialize_net(read_file(path)); }

}  // namespace tpnt
