#pragma once

#include <string>
#include <vector>

#include "tpnt/net.hpp"

namespace tpnt {

// Fraction misclassified at threshold 0.5 on probabilities.
double error_rate(const std::vector<float>& predictions, const std::vector<int>& labels);
// Same with threshold 0 on logits.
double error_rate_logits(const std::vector<float>& logits, const std::vector<int>& labels);

// Correct pixels over all pixels, pooled across the set. Masks are H x W x C
// scores or one-hot maps; the argmax channel is the label.
double pixel_accuracy(const std::vector<Tensor>& predicted, const std::vector<Tensor>& truth);

struct PrincipalPlane {
  std::vector<double> mean;
  std::vector<double> pc1, pc2;
  double var1 = 0.0, var2 = 0.0;
  std::vector<std::pair<double, double>> projections;
};

// Two leading principal components of the rows of `features` by power
// iteration with deflation (200 iterations, 1e-8 tolerance).
PrincipalPlane principal_plane(const std::vector<std::vector<double>>& features);

struct LayerStat {
  std::string layer;
  double positive_fraction = 0.0;
  double mean_magnitude = 0.0;
};

struct FeatureStats {
  PrincipalPlane plane;
  std::vector<LayerStat> layers;  // pre-ReLU tensors inside the task module
};

// Final task feature is the input of the last task-module conv.
FeatureStats feature_stats(const Path& head, const std::vector<Tensor>& inputs);

void write_pc_csv(const std::string& path, const FeatureStats& stats);
void write_layer_csv(const std::string& path, const FeatureStats& stats);

}  // namespace tpnt
