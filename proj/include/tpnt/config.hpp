#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tpnt/net.hpp"
#include "tpnt/pseudograd.hpp"
#include "tpnt/train.hpp"

namespace tpnt {

struct RunConfig {
  struct Data {
    std::uint64_t seed = 1;
    std::string family = "ellipse";
    std::string reference = "cross";  // category the student task module was trained on
    double noise = 0.2;
    std::vector<std::string> distractors;  // empty: two families other than `family`
    int teacher_images = 1000;
    int pool_images = 100;
    std::string dir;  // PGM directory replacing synthetic images when set
  } data;
  struct Teacher {
    TaskKind task = TaskKind::Classification;
    int channels = 8;
    int hidden = 8;
    int base_epochs = 20;
    int epochs = 40;
    double lr = 0.01;
    double momentum = 0.9;
    int batch = 16;
    double gate = 0.95;
    std::string path;
  } teacher;
  struct Student {
    std::string path;
    std::string category;  // empty: data.family
    std::string task;      // empty: teacher.task name
  } student;
  struct Adapter {
    int convs = 1;
    AdapterKernel kernel = AdapterKernel::Conv3x3;
    bool reorder = true;
    std::uint64_t reorder_seed = 99;
    std::optional<double> beta;  // unset: estimated
    double init_gain = 1.0;
  } adapter;
  TrainConfig train;
  int threads = 0;  // 0 leaves the OpenMP default
  std::string pseudo_preset = "classification-insert";
  struct Eval {
    int images = 400;
  } eval;

  AdapterSpec adapter_spec() const;
};

std::string_view relu_policy_name(ReluPolicy p);
ReluPolicy parse_relu_policy(std::string_view s);
std::string_view gy_name(GySpec g);
GySpec parse_gy(std::string_view s);
PseudoGradConfig pseudo_preset(std::string_view name);

struct ConfigSources {
  std::vector<std::string> overrides;  // "section.key=value", applied after the file
  std::optional<std::uint64_t> seed;   // --seed, highest priority
  std::optional<std::string> env_seed;  // TPNT_SEED, lowest priority
};

// INI text with [section] headers and `key = value` lines; '#' and ';' start
// comments. Unknown keys and bad values raise ConfigError with the line.
RunConfig parse_config(std::string_view text, const ConfigSources& sources = {});
RunConfig load_config(const std::filesystem::path& path, const ConfigSources& sources = {});

// Every key with its effective value; parsing the result gives the same config.
std::string resolved_config(const RunConfig& cfg);

}  // namespace tpnt
