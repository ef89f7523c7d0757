#include "tpnt/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tpnt/error.hpp"
#include "tpnt/synth.hpp"

namespace tpnt {

namespace {

struct Located {
  std::string value;
  std::string where;  // "line 12" or "--set"
};

[[noreturn]] void bad(const std::string& where, const std::string& key, const std::string& msg) {
  fail(Errc::ConfigError, where + ": " + key + ": " + msg);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

long long to_int(const std::string& v) {
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) throw std::invalid_argument("expected an integer");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) throw std::invalid_argument("expected an unsigned integer");
  return out;
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected a number");
  return d;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true or false");
}

int to_count(const std::string& v) {
  const long long n = to_int(v);
  if (n < 0 || n > 1000000) throw std::invalid_argument("out of range");
  return static_cast<int>(n);
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Key {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define TPNT_INT(field) \
  Key { [](RunConfig& c, const std::string& v) { c.field = to_count(v); }, [](const RunConfig& c) { return std::to_string(c.field); } }
#define TPNT_DOUBLE(field) \
  Key { [](RunConfig& c, const std::string& v) { c.field = to_double(v); }, [](const RunConfig& c) { return fmt(c.field); } }
#define TPNT_BOOL(field)                                                            \
  Key {                                                                             \
    [](RunConfig& c, const std::string& v) { c.field = to_bool(v); },               \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); } \
  }
#define TPNT_STRING(field) \
  Key { [](RunConfig& c, const std::string& v) { c.field = v; }, [](const RunConfig& c) { return c.field; } }

// Section order as written by resolved_config.
const std::vector<std::string>& sections() {
  static const std::vector<std::string> s{"data", "teacher", "student", "adapter", "train", "pseudo", "eval"};
  return s;
}

const std::vector<std::pair<std::string, Key>>& schema() {
  static const std::vector<std::pair<std::string, Key>> keys{
      {"data.seed", {[](RunConfig& c, const std::string& v) { c.data.seed = to_u64(v); },
                     [](const RunConfig& c) { return std::to_string(c.data.seed); }}},
      {"data.family", {[](RunConfig& c, const std::string& v) { c.data.family = family_name(parse_family(v)); },
                       [](const RunConfig& c) { return c.data.family; }}},
      {"data.reference", {[](RunConfig& c, const std::string& v) { c.data.reference = family_name(parse_family(v)); },
                          [](const RunConfig& c) { return c.data.reference; }}},
      {"data.noise", TPNT_DOUBLE(data.noise)},
      {"data.distractors", {[](RunConfig& c, const std::string& v) {
                              c.data.distractors.clear();
                              for (const auto& f : to_list(v)) c.data.distractors.emplace_back(family_name(parse_family(f)));
                            },
                            [](const RunConfig& c) {
                              std::string s;
                              for (const auto& f : c.data.distractors) s += (s.empty() ? "" : ",") + f;
                              return s;
                            }}},
      {"data.teacher_images", TPNT_INT(data.teacher_images)},
      {"data.pool_images", TPNT_INT(data.pool_images)},
      {"data.dir", TPNT_STRING(data.dir)},
      {"teacher.task", {[](RunConfig& c, const std::string& v) { c.teacher.task = parse_task_kind(v); },
                        [](const RunConfig& c) { return std::string(task_kind_name(c.teacher.task)); }}},
      {"teacher.channels", TPNT_INT(teacher.channels)},
      {"teacher.hidden", TPNT_INT(teacher.hidden)},
      {"teacher.base_epochs", TPNT_INT(teacher.base_epochs)},
      {"teacher.epochs", TPNT_INT(teacher.epochs)},
      {"teacher.lr", TPNT_DOUBLE(teacher.lr)},
      {"teacher.momentum", TPNT_DOUBLE(teacher.momentum)},
      {"teacher.batch", TPNT_INT(teacher.batch)},
      {"teacher.gate", TPNT_DOUBLE(teacher.gate)},
      {"teacher.path", TPNT_STRING(teacher.path)},
      {"student.path", TPNT_STRING(student.path)},
      {"student.category", TPNT_STRING(student.category)},
      {"student.task", TPNT_STRING(student.task)},
      {"adapter.convs", TPNT_INT(adapter.convs)},
      {"adapter.kernel", {[](RunConfig& c, const std::string& v) {
                            if (v == "3x3") c.adapter.kernel = AdapterKernel::Conv3x3;
                            else if (v == "1x1") c.adapter.kernel = AdapterKernel::Conv1x1;
                            else throw std::invalid_argument("expected 3x3 or 1x1");
                          },
                          [](const RunConfig& c) {
                            return std::string(c.adapter.kernel == AdapterKernel::Conv3x3 ? "3x3" : "1x1");
                          }}},
      {"adapter.reorder", TPNT_BOOL(adapter.reorder)},
      {"adapter.reorder_seed", {[](RunConfig& c, const std::string& v) { c.adapter.reorder_seed = to_u64(v); },
                                [](const RunConfig& c) { return std::to_string(c.adapter.reorder_seed); }}},
      {"adapter.beta", {[](RunConfig& c, const std::string& v) {
                          if (v == "auto") c.adapter.beta.reset();
                          else c.adapter.beta = to_double(v);
                        },
                        [](const RunConfig& c) { return c.adapter.beta ? fmt(*c.adapter.beta) : std::string("auto"); }}},
      {"adapter.init_gain", TPNT_DOUBLE(adapter.init_gain)},
      {"train.method", {[](RunConfig& c, const std::string& v) { c.train.method = parse_method(v); },
                        [](const RunConfig& c) { return std::string(method_name(c.train.method)); }}},
      {"train.samples", TPNT_INT(train.samples)},
      {"train.lr", TPNT_DOUBLE(train.lr)},
      {"train.momentum", TPNT_DOUBLE(train.momentum)},
      {"train.clip_norm", TPNT_DOUBLE(train.clip_norm)},
      {"train.batch", TPNT_INT(train.batch)},
      {"train.epochs", TPNT_INT(train.epochs)},
      {"train.steps_per_epoch", TPNT_INT(train.steps_per_epoch)},
      {"train.probe", TPNT_INT(train.probe)},
      {"train.alpha_refresh", {[](RunConfig& c, const std::string& v) {
                                 if (v == "once") c.train.alpha_every_epoch = false;
                                 else if (v == "epoch") c.train.alpha_every_epoch = true;
                                 else throw std::invalid_argument("expected once or epoch");
                               },
                               [](const RunConfig& c) {
                                 return std::string(c.train.alpha_every_epoch ? "epoch" : "once");
                               }}},
      {"train.distill_pool", TPNT_INT(train.distill_pool)},
      {"train.lambda_scale", {[](RunConfig& c, const std::string& v) {
                                if (v == "auto") c.train.lambda_scale.reset();
                                else c.train.lambda_scale = to_double(v);
                              },
                              [](const RunConfig& c) {
                                return c.train.lambda_scale ? fmt(*c.train.lambda_scale) : std::string("auto");
                              }}},
      {"train.threads", TPNT_INT(threads)},
      {"pseudo.preset", {[](RunConfig& c, const std::string& v) {
                           const std::uint64_t seed = c.train.pseudo.seed;
                           c.train.pseudo = pseudo_preset(v);
                           c.train.pseudo.seed = seed;
                           c.pseudo_preset = v;
                         },
                         [](const RunConfig& c) { return c.pseudo_preset; }}},
      {"pseudo.gy", {[](RunConfig& c, const std::string& v) { c.train.pseudo.gy = parse_gy(v); },
                     [](const RunConfig& c) { return std::string(gy_name(c.train.pseudo.gy)); }}},
      {"pseudo.map_size", TPNT_INT(train.pseudo.map_size)},
      {"pseudo.task_relu", {[](RunConfig& c, const std::string& v) { c.train.pseudo.task_relu = parse_relu_policy(v); },
                            [](const RunConfig& c) { return std::string(relu_policy_name(c.train.pseudo.task_relu)); }}},
      {"pseudo.adapter_relu",
       {[](RunConfig& c, const std::string& v) { c.train.pseudo.adapter_relu = parse_relu_policy(v); },
        [](const RunConfig& c) { return std::string(relu_policy_name(c.train.pseudo.adapter_relu)); }}},
      {"pseudo.xrand", TPNT_BOOL(train.pseudo.xrand)},
      {"pseudo.pos_fraction", TPNT_DOUBLE(train.pseudo.pos_fraction)},
      {"pseudo.substitute_pooling", TPNT_BOOL(train.pseudo.substitute_pooling)},
      {"pseudo.skip_dropout", TPNT_BOOL(train.pseudo.skip_dropout)},
      {"eval.images", TPNT_INT(eval.images)},
  };
  return keys;
}

#undef TPNT_INT
#undef TPNT_DOUBLE
#undef TPNT_BOOL
#undef TPNT_STRING

const Key* find_key(const std::string& name) {
  for (const auto& [k, key] : schema())
    if (k == name) return &key;
  return nullptr;
}

void apply(RunConfig& c, const std::string& name, const Located& v) {
  const Key* key = find_key(name);
  if (!key) bad(v.where, name, "unknown key");
  try {
    key->set(c, v.value);
  } catch (const Error& e) {
    bad(v.where, name, "bad value '" + v.value + "' (" + e.what() + ")");
  } catch (const std::exception&) {
    bad(v.where, name, "bad value '" + v.value + "'");
  }
}

void check(const RunConfig& c) {
  const auto need = [](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) fail(Errc::ConfigError, key + ": " + msg);
  };
  need(c.data.noise >= 0.0 && c.data.noise <= 1.0, "data.noise", "must lie in [0, 1]");
  need(c.data.teacher_images >= 2 && c.data.teacher_images % 2 == 0, "data.teacher_images", "must be even and >= 2");
  need(c.data.pool_images >= 2 && c.data.pool_images % 2 == 0, "data.pool_images", "must be even and >= 2");
  need(c.eval.images >= 2 && c.eval.images % 2 == 0, "eval.images", "must be even and >= 2");
  need(c.teacher.channels >= 1 && c.teacher.hidden >= 1, "teacher.channels", "must be >= 1");
  need(c.teacher.lr > 0.0, "teacher.lr", "must be > 0");
  need(c.teacher.batch >= 1, "teacher.batch", "must be >= 1");
  need(c.adapter.convs == 1 || c.adapter.convs == 3, "adapter.convs", "must be 1 or 3");
  need(!c.adapter.beta || *c.adapter.beta > 0.0, "adapter.beta", "must be > 0");
  need(c.adapter.init_gain > 0.0, "adapter.init_gain", "must be > 0");
  need(!c.train.lambda_scale || *c.train.lambda_scale > 0.0, "train.lambda_scale", "must be > 0");
  try {
    c.train.validate();
  } catch (const Error& e) {
    fail(Errc::ConfigError, std::string("train: ") + e.what());
  }
}

}  // namespace

AdapterSpec RunConfig::adapter_spec() const {
  AdapterSpec s;
  s.channels = teacher.channels;
  s.convs = adapter.convs;
  s.kernel = adapter.kernel;
  if (adapter.reorder) s.reorder_seed = adapter.reorder_seed;
  if (adapter.beta) s.beta = static_cast<float>(*adapter.beta);
  s.init_gain = static_cast<float>(adapter.init_gain);
  return s;
}

std::string_view relu_policy_name(ReluPolicy p) {
  switch (p) {
    case ReluPolicy::Stored: return "stored";
    case ReluPolicy::First: return "first";
    case ReluPolicy::Second: return "second";
    case ReluPolicy::LowestSecond: return "lowest-second";
    case ReluPolicy::RealMask: return "real";
  }
  return "?";
}

ReluPolicy parse_relu_policy(std::string_view s) {
  for (ReluPolicy p : {ReluPolicy::Stored, ReluPolicy::First, ReluPolicy::Second, ReluPolicy::LowestSecond,
                       ReluPolicy::RealMask})
    if (relu_policy_name(p) == s) return p;
  fail(Errc::InvalidConfig, "unknown relu policy " + std::string(s));
}

std::string_view gy_name(GySpec g) { return g == GySpec::ScalarOne ? "scalar-one" : "random-map"; }

GySpec parse_gy(std::string_view s) {
  if (s == "scalar-one") return GySpec::ScalarOne;
  if (s == "random-map") return GySpec::RandomMap;
  fail(Errc::InvalidConfig, "unknown gy mode " + std::string(s));
}

PseudoGradConfig pseudo_preset(std::string_view name) {
  if (name == "classification-insert") return PseudoGradConfig::classification_insert();
  if (name == "classification-transplant") return PseudoGradConfig::classification_transplant();
  if (name == "segmentation-transplant") return PseudoGradConfig::segmentation_transplant();
  fail(Errc::InvalidConfig, "unknown pseudo preset " + std::string(name));
}

RunConfig parse_config(std::string_view text, const ConfigSources& sources) {
  std::map<std::string, Located> values;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = "line " + std::to_string(line_no);
    std::string line = raw;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') bad(where, line, "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (std::find(sections().begin(), sections().end(), section) == sections().end())
        bad(where, section, "unknown section");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) bad(where, line, "expected key = value");
    if (section.empty()) bad(where, line, "key outside any section");
    const std::string name = section + "." + trim(line.substr(0, eq));
    if (!find_key(name)) bad(where, name, "unknown key");
    values[name] = {trim(line.substr(eq + 1)), where};
  }
  for (const auto& o : sources.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) bad("--set", o, "expected section.key=value");
    const std::string name = trim(o.substr(0, eq));
    if (!find_key(name)) bad("--set", name, "unknown key");
    values[name] = {trim(o.substr(eq + 1)), "--set"};
  }
  if (!values.count("data.seed") && sources.env_seed) values["data.seed"] = {*sources.env_seed, "TPNT_SEED"};
  if (sources.seed) values["data.seed"] = {std::to_string(*sources.seed), "--seed"};

  RunConfig c;
  c.train.pseudo = pseudo_preset(c.pseudo_preset);
  // The preset sets every pseudo field, so it goes first and explicit keys win.
  if (const auto it = values.find("pseudo.preset"); it != values.end()) apply(c, it->first, it->second);
  for (const auto& [name, v] : values)
    if (name != "pseudo.preset") apply(c, name, v);
  c.train.seed = c.data.seed;
  c.train.pseudo.seed = c.data.seed;
  c.train.task = c.teacher.task;
  check(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const ConfigSources& sources) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), sources);
}

std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& sec : sections()) {
    out += "[" + sec + "]\n";
    for (const auto& [name, key] : schema()) {
      if (name.compare(0, sec.size() + 1, sec + ".") != 0) continue;
      out += name.substr(sec.size() + 1) + " = " + key.get(cfg) + "\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace tpnt
