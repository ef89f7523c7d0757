#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tpnt/tensor.hpp"

namespace tpnt {

enum class ShapeFamily { Ellipse, Cross, Ring, Bars, Blob };

std::string_view family_name(ShapeFamily family);
ShapeFamily parse_family(std::string_view name);

struct Range {
  float lo = 0.0f;
  float hi = 1.0f;

  bool contains(float v) const { return v >= lo && v <= hi; }
};

struct SynthCategory {
  std::string id;
  ShapeFamily family = ShapeFamily::Ellipse;
  Range scale{0.45f, 0.7f};   // outer radius as a fraction of the half canvas
  Range aspect{0.6f, 1.0f};   // minor / major axis
  Range rotation{0.0f, 6.2831853f};
  Range intensity{0.7f, 1.0f};
  Range offset{-0.2f, 0.2f};  // centre offset as a fraction of the half canvas
  float noise = 0.1f;         // background noise amplitude
  // Families drawn into negatives next to the clutter; empty means clutter only.
  std::vector<ShapeFamily> distractors;
};

// Preset categories used by the desk-scale experiments.
SynthCategory preset_category(ShapeFamily family);

struct RenderParams {
  float cx = 0.0f;
  float cy = 0.0f;
  float scale = 0.5f;
  float aspect = 1.0f;
  float rotation = 0.0f;
  float intensity = 1.0f;
  std::uint64_t noise_seed = 0;
};

struct Sample {
  Tensor image;  // H x W x 1 in [0, 1]
  int label = 0;
  Tensor mask;   // H x W x 2 one-hot, channel 0 background, 1 foreground; empty if unknown
  std::uint64_t id = 0;
};

constexpr int kCanvas = 28;

// Anti-aliased rendering with 4 x 4 supersampling. The mask thresholds the
// noiseless coverage at 0.5.
Sample render_sample(const SynthCategory& cat, const RenderParams& params, int canvas = kCanvas, float noise = -1.0f);

RenderParams sample_params(const SynthCategory& cat, Rng& rng);

// count/2 positives from the family, count/2 clutter negatives, interleaved
// positive first. Negatives carry a distractor shape when the category lists any.
std::vector<Sample> generate_dataset(const SynthCategory& cat, int count, std::uint64_t seed, int canvas = kCanvas);

// Random strokes and dots with no object, all-background mask.
Sample render_clutter(std::uint64_t seed, float noise, int canvas = kCanvas);
Sample render_negative(const SynthCategory& cat, std::uint64_t seed, int canvas = kCanvas);

// Mask downsampled by majority vote over k x k blocks.
Tensor downsample_mask(const Tensor& mask, int k);

// ---- PGM I/O -----------------------------------------------------------------

Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Writes image and mask PGMs plus manifest.csv (file,label,mask_file).
void export_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

// Reads manifest.csv if present; otherwise every *.pgm is an image with label
// from `default_label` and masks from sibling "<stem>_mask.pgm" files.
std::vector<Sample> load_image_dir(const std::filesystem::path& dir, int default_label = 1);

}  // namespace tpnt
