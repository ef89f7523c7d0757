#include "tpnt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tpnt/error.hpp"

namespace tpnt {

namespace {

constexpr float kPi = std::numbers::pi_v<float>;
constexpr int kSuper = 4;

float symmetry_period(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Ellipse:
    case ShapeFamily::Ring:
    case ShapeFamily::Bars: return kPi;
    case ShapeFamily::Cross: return kPi / 2.0f;
    case ShapeFamily::Blob: return 2.0f * kPi / 3.0f;
  }
  return 2.0f * kPi;
}

// (u, v) in shape-local units, outer radius 1.
bool inside(ShapeFamily f, float u, float v, float aspect) {
  switch (f) {
    case ShapeFamily::Ellipse: {
      const float b = aspect;
      return u * u + (v * v) / (b * b) <= 1.0f;
    }
    case ShapeFamily::Cross: {
      const float w = 0.3f * aspect;
      return (std::fabs(u) <= 1.0f && std::fabs(v) <= w) || (std::fabs(v) <= 1.0f && std::fabs(u) <= w);
    }
    case ShapeFamily::Ring: {
      const float b = aspect;
      const float r = u * u + (v * v) / (b * b);
      return r <= 1.0f && r >= 0.36f;
    }
    case ShapeFamily::Bars: {
      const float av = std::fabs(v);
      return std::fabs(u) <= 1.0f && av >= 0.2f * aspect && av <= 0.6f;
    }
    case ShapeFamily::Blob: {
      const float r = std::sqrt(u * u + v * v);
      const float t = std::atan2(v, u);
      return r <= 0.65f + 0.35f * aspect * std::cos(3.0f * t);
    }
  }
  return false;
}

void check(const Range& r, float v, const char* what) {
  if (!r.contains(v)) fail(Errc::InvalidParams, std::string(what) + " outside the category range");
}

}  // namespace

std::string_view family_name(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Ellipse: return "ellipse";
    case ShapeFamily::Cross: return "cross";
    case ShapeFamily::Ring: return "ring";
    case ShapeFamily::Bars: return "bars";
    case ShapeFamily::Blob: return "blob";
  }
  return "?";
}

ShapeFamily parse_family(std::string_view name) {
  for (ShapeFamily f : {ShapeFamily::Ellipse, ShapeFamily::Cross, ShapeFamily::Ring, ShapeFamily::Bars, ShapeFamily::Blob})
    if (family_name(f) == name) return f;
  fail(Errc::InvalidParams, "unknown shape family '" + std::string(name) + "'");
}

SynthCategory preset_category(ShapeFamily family) {
  SynthCategory c;
  c.id = std::string(family_name(family));
  c.family = family;
  return c;
}

RenderParams sample_params(const SynthCategory& cat, Rng& rng) {
  RenderParams p;
  p.cx = rng.uniform(cat.offset.lo, cat.offset.hi);
  p.cy = rng.uniform(cat.offset.lo, cat.offset.hi);
  p.scale = rng.uniform(cat.scale.lo, cat.scale.hi);
  p.aspect = rng.uniform(cat.aspect.lo, cat.aspect.hi);
  p.rotation = rng.uniform(cat.rotation.lo, cat.rotation.hi);
  p.intensity = rng.uniform(cat.intensity.lo, cat.intensity.hi);
  p.noise_seed = rng.next_u64();
  return p;
}

Sample render_sample(const SynthCategory& cat, const RenderParams& p, int canvas, float noise) {
  check(cat.offset, p.cx, "cx");
  check(cat.offset, p.cy, "cy");
  check(cat.scale, p.scale, "scale");
  check(cat.aspect, p.aspect, "aspect");
  check(cat.intensity, p.intensity, "intensity");
  if (canvas < 4) fail(Errc::InvalidParams, "canvas too small");
  if (noise < 0.0f) noise = cat.noise;

  const float period = symmetry_period(cat.family);
  float rot = std::fmod(p.rotation, period);
  if (rot < 0.0f) rot += period;
  if (period - rot < 1e-5f) rot = 0.0f;
  const float cs = std::cos(rot);
  const float sn = std::sin(rot);
  const float half = 0.5f * static_cast<float>(canvas);
  const float radius = p.scale * half;
  const float cx = half + p.cx * half;
  const float cy = half + p.cy * half;

  Sample s;
  s.label = 1;
  s.image = Tensor({canvas, canvas, 1});
  s.mask = Tensor({canvas, canvas, 2});
  Rng rng(p.noise_seed, 0x6e6f6973ULL);
  for (int h = 0; h < canvas; ++h) {
    for (int w = 0; w < canvas; ++w) {
      int hits = 0;
      for (int a = 0; a < kSuper; ++a) {
        for (int b = 0; b < kSuper; ++b) {
          const float py = static_cast<float>(h) + (static_cast<float>(a) + 0.5f) / kSuper - cy;
          const float px = static_cast<float>(w) + (static_cast<float>(b) + 0.5f) / kSuper - cx;
          const float u = (cs * px + sn * py) / radius;
          const float v = (-sn * px + cs * py) / radius;
          hits += inside(cat.family, u, v, p.aspect) ? 1 : 0;
        }
      }
      const float cov = static_cast<float>(hits) / (kSuper * kSuper);
      const float bg = noise > 0.0f ? noise * rng.uniform01f() : 0.0f;
      s.image.at(h, w, 0) = std::clamp(cov * p.intensity + (1.0f - cov) * bg, 0.0f, 1.0f);
      const bool fg = cov > 0.5f;
      s.mask.at(h, w, 0) = fg ? 0.0f : 1.0f;
      s.mask.at(h, w, 1) = fg ? 1.0f : 0.0f;
    }
  }
  return s;
}

namespace {

void add_clutter(Sample& s, Rng& rng, int canvas) {
  // Thin strokes: long enough to excite edge filters, too thin to form an object.
  const int strokes = 2 + static_cast<int>(rng.below(3));
  for (int k = 0; k < strokes; ++k) {
    const float x0 = rng.uniform(0.0f, static_cast<float>(canvas));
    const float y0 = rng.uniform(0.0f, static_cast<float>(canvas));
    const float ang = rng.uniform(0.0f, 2.0f * kPi);
    const float len = rng.uniform(0.25f, 0.6f) * static_cast<float>(canvas);
    const float val = rng.uniform(0.5f, 1.0f);
    const int steps = static_cast<int>(len * 2.0f);
    for (int t = 0; t <= steps; ++t) {
      const float f = static_cast<float>(t) / static_cast<float>(steps);
      const int x = static_cast<int>(x0 + f * len * std::cos(ang));
      const int y = static_cast<int>(y0 + f * len * std::sin(ang));
      if (x >= 0 && x < canvas && y >= 0 && y < canvas) s.image.at(y, x, 0) = std::max(s.image.at(y, x, 0), val);
    }
  }
  // A few small dots.
  const int dots = 1 + static_cast<int>(rng.below(4));
  for (int k = 0; k < dots; ++k) {
    const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas - 1)));
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas - 1)));
    const float val = rng.uniform(0.5f, 1.0f);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) s.image.at(y + a, x + b, 0) = std::max(s.image.at(y + a, x + b, 0), val);
  }
}

}  // namespace

Sample render_clutter(std::uint64_t seed, float noise, int canvas) {
  Rng rng(seed, 0x636c7574ULL);
  Sample s;
  s.label = 0;
  s.image = Tensor({canvas, canvas, 1});
  s.mask = Tensor({canvas, canvas, 2});
  for (int i = 0; i < canvas * canvas; ++i) {
    s.image[static_cast<std::size_t>(i)] = noise > 0.0f ? noise * rng.uniform01f() : 0.0f;
    s.mask[static_cast<std::size_t>(i) * 2] = 1.0f;
  }
  add_clutter(s, rng, canvas);
  return s;
}

Sample render_negative(const SynthCategory& cat, std::uint64_t seed, int canvas) {
  if (cat.distractors.empty()) return render_clutter(seed, cat.noise, canvas);
  Rng rng(seed, 0x64697374ULL);
  SynthCategory other = cat;
  other.family = cat.distractors[rng.below(cat.distractors.size())];
  Sample s = render_sample(other, sample_params(other, rng), canvas);
  s.label = 0;
  for (std::size_t p = 0; p < s.mask.size() / 2; ++p) {
    s.mask[p * 2] = 1.0f;
    s.mask[p * 2 + 1] = 0.0f;
  }
  add_clutter(s, rng, canvas);
  return s;
}

std::vector<Sample> generate_dataset(const SynthCategory& cat, int count, std::uint64_t seed, int canvas) {
  if (count < 2 || count % 2 != 0) fail(Errc::InvalidParams, "dataset count must be even and >= 2");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  const std::uint64_t fam = static_cast<std::uint64_t>(cat.family);
  for (int i = 0; i < count / 2; ++i) {
    Rng rng(seed, Rng::key({0x706f73ULL, fam, static_cast<std::uint64_t>(i)}));
    Sample pos = render_sample(cat, sample_params(cat, rng), canvas);
    if (!cat.distractors.empty()) add_clutter(pos, rng, canvas);
    pos.id = static_cast<std::uint64_t>(2 * i);
    out.push_back(std::move(pos));
    Sample neg = render_negative(cat, Rng::key({seed, 0x6e6567ULL, fam, static_cast<std::uint64_t>(i)}), canvas);
    neg.id = static_cast<std::uint64_t>(2 * i + 1);
    out.push_back(std::move(neg));
  }
  return out;
}

Tensor downsample_mask(const Tensor& mask, int k) {
  const int H = mask.dim(0) / k;
  const int W = mask.dim(1) / k;
  Tensor out({H, W, 2});
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      int fg = 0;
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) fg += mask.at(h * k + a, w * k + b, 1) > 0.5f ? 1 : 0;
      const bool on = 2 * fg > k * k;
      out.at(h, w, 0) = on ? 0.0f : 1.0f;
      out.at(h, w, 1) = on ? 1.0f : 0.0f;
    }
  }
  return out;
}

// ---- PGM ---------------------------------------------------------------------

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

int parse_int(const std::string& tok, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(Errc::ParseError, path.string() + ": bad PGM header token '" + tok + "'");
  }
}

}  // namespace

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  if (next_token(in) != "P5") fail(Errc::ParseError, path.string() + ": not a binary PGM");
  const int w = parse_int(next_token(in), path);
  const int h = parse_int(next_token(in), path);
  const int maxval = parse_int(next_token(in), path);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) fail(Errc::ParseError, path.string() + ": unsupported PGM header");
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) fail(Errc::ParseError, path.string() + ": truncated PGM");
  Tensor t({h, w, 1});
  for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<float>(buf[i]) / static_cast<float>(maxval);
  return t;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 1) fail(Errc::ShapeMismatch, "PGM needs H x W x 1");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (float v : image.data()) {
    const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
    out.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  if (!out) fail(Errc::IoError, "short write to " + path.string());
}

void export_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) fail(Errc::IoError, "cannot write manifest in " + dir.string());
  manifest << "file,label,mask_file\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu", i);
    const std::string img = std::string(name) + ".pgm";
    write_pgm(dir / img, s.image);
    std::string mask_file;
    if (!s.mask.empty()) {
      mask_file = std::string(name) + "_mask.pgm";
      Tensor fg({s.mask.dim(0), s.mask.dim(1), 1});
      for (std::size_t p = 0; p < fg.size(); ++p) fg[p] = s.mask[p * 2 + 1];
      write_pgm(dir / mask_file, fg);
    }
    manifest << img << ',' << s.label << ',' << mask_file << '\n';
  }
}

namespace {

Tensor mask_from_pgm(const std::filesystem::path& path) {
  const Tensor fg = read_pgm(path);
  Tensor m({fg.dim(0), fg.dim(1), 2});
  for (std::size_t p = 0; p < fg.size(); ++p) {
    const bool on = fg[p] > 0.5f;
    m[p * 2] = on ? 0.0f : 1.0f;
    m[p * 2 + 1] = on ? 1.0f : 0.0f;
  }
  return m;
}

}  // namespace

std::vector<Sample> load_image_dir(const std::filesystem::path& dir, int default_label) {
  if (!std::filesystem::is_directory(dir)) fail(Errc::IoError, dir.string() + " is not a directory");
  std::vector<Sample> out;
  const auto manifest = dir / "manifest.csv";
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::getline(in, line);
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string file, label, mask;
      std::getline(ss, file, ',');
      std::getline(ss, label, ',');
      std::getline(ss, mask, ',');
      Sample s;
      s.image = read_pgm(dir / file);
      if (label != "0" && label != "1") fail(Errc::ParseError, manifest.string() + ":" + std::to_string(lineno) + ": bad label");
      s.label = label == "1" ? 1 : 0;
      if (!mask.empty()) s.mask = mask_from_pgm(dir / mask);
      s.id = out.size();
      out.push_back(std::move(s));
    }
    return out;
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto& p = e.path();
    if (p.extension() == ".pgm" && p.stem().string().ends_with("_mask") == false) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    Sample s;
    s.image = read_pgm(p);
    s.label = default_label;
    const auto mp = p.parent_path() / (p.stem().string() + "_mask.pgm");
    if (std::filesystem::exists(mp)) s.mask = mask_from_pgm(mp);
    s.id = out.size();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tpnt
