#include "tpnt/eval.hpp"

#include <cmath>
#include <fstream>

#include "tpnt/error.hpp"

namespace tpnt {

namespace {

double thresholded_error(const std::vector<float>& predictions, const std::vector<int>& labels, float thr) {
  if (predictions.empty()) fail(Errc::EmptyEval, "no predictions");
  if (predictions.size() != labels.size()) fail(Errc::ShapeMismatch, "predictions and labels differ in length");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i] > thr ? 1 : 0;
    wrong += p != labels[i] ? 1 : 0;
  }
  return static_cast<double>(wrong) / static_cast<double>(predictions.size());
}

}  // namespace

double error_rate(const std::vector<float>& predictions, const std::vector<int>& labels) {
  return thresholded_error(predictions, labels, 0.5f);
}

double error_rate_logits(const std::vector<float>& logits, const std::vector<int>& labels) {
  return thresholded_error(logits, labels, 0.0f);
}

double pixel_accuracy(const std::vector<Tensor>& predicted, const std::vector<Tensor>& truth) {
  if (predicted.empty()) fail(Errc::EmptyEval, "no masks");
  if (predicted.size() != truth.size()) fail(Errc::ShapeMismatch, "mask counts differ");
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    require_same_shape(predicted[i], truth[i], "pixel_accuracy");
    const int C = predicted[i].dim(2);
    const std::size_t pixels = predicted[i].size() / C;
    for (std::size_t p = 0; p < pixels; ++p) {
      int bp = 0, bt = 0;
      for (int c = 1; c < C; ++c) {
        if (predicted[i][p * C + c] > predicted[i][p * C + bp]) bp = c;
        if (truth[i][p * C + c] > truth[i][p * C + bt]) bt = c;
      }
      correct += bp == bt ? 1 : 0;
    }
    total += pixels;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

using Vec = std::vector<double>;

double vdot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Leading eigenpair of a symmetric PSD matrix.
std::pair<Vec, double> power_iteration(const std::vector<Vec>& cov) {
  const std::size_t d = cov.size();
  Vec v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
  double n = std::sqrt(vdot(v, v));
  for (double& x : v) x /= n;
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    Vec w(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) w[i] = vdot(cov[i], v);
    const double norm = std::sqrt(vdot(w, w));
    if (norm == 0.0) return {v, 0.0};
    for (double& x : w) x /= norm;
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::fabs(w[i] - v[i]));
    v = std::move(w);
    lambda = norm;
    if (diff < 1e-8) break;
  }
  Vec cv(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) cv[i] = vdot(cov[i], v);
  lambda = vdot(v, cv);
  return {v, lambda};
}

}  // namespace

PrincipalPlane principal_plane(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) fail(Errc::EmptyEval, "principal plane needs >= 2 rows");
  const std::size_t n = features.size();
  const std::size_t d = features.front().size();
  PrincipalPlane out;
  out.mean.assign(d, 0.0);
  for (const auto& r : features) {
    if (r.size() != d) fail(Errc::ShapeMismatch, "ragged feature rows");
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += r[j];
  }
  for (double& m : out.mean) m /= static_cast<double>(n);
  std::vector<Vec> cov(d, Vec(d, 0.0));
  for (const auto& r : features) {
    for (std::size_t a = 0; a < d; ++a) {
      const double ca = r[a] - out.mean[a];
      for (std::size_t b = 0; b < d; ++b) cov[a][b] += ca * (r[b] - out.mean[b]);
    }
  }
  for (auto& row : cov)
    for (double& x : row) x /= static_cast<double>(n - 1);

  auto [v1, l1] = power_iteration(cov);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) cov[a][b] -= l1 * v1[a] * v1[b];
  auto [v2, l2] = d > 1 ? power_iteration(cov) : std::pair<Vec, double>{Vec(d, 0.0), 0.0};
  out.pc1 = v1;
  out.pc2 = v2;
  out.var1 = std::max(l1, 0.0);
  out.var2 = std::max(l2, 0.0);
  for (const auto& r : features) {
    Vec c(d);
    for (std::size_t j = 0; j < d; ++j) c[j] = r[j] - out.mean[j];
    out.projections.emplace_back(vdot(c, v1), vdot(c, v2));
  }
  return out;
}

FeatureStats feature_stats(const Path& head, const std::vector<Tensor>& inputs) {
  if (inputs.size() < 2) fail(Errc::EmptyEval, "feature_stats needs >= 2 images");
  std::size_t last_conv = head.size();
  for (std::size_t i = 0; i < head.size(); ++i)
    if (head[i].module == ModuleKind::Task && kind_of(*head[i].layer) == LayerKind::Conv) last_conv = i;
  if (last_conv == head.size()) fail(Errc::InvalidParams, "task module has no conv layer");

  FeatureStats st;
  std::vector<std::vector<double>> feats;
  std::vector<double> pos, mag, count;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < head.size(); ++i) {
    if (head[i].module == ModuleKind::Task && kind_of(*head[i].layer) == LayerKind::Relu)
      names.push_back("task.relu" + std::to_string(head[i].relu_slot));
  }
  pos.assign(names.size(), 0.0);
  mag.assign(names.size(), 0.0);
  count.assign(names.size(), 0.0);

  for (const Tensor& x : inputs) {
    Tensor t = x;
    std::size_t r = 0;
    for (std::size_t i = 0; i < head.size(); ++i) {
      if (i == last_conv) {
        // Final feature: spatial mean per channel.
        const int C = t.dim(t.rank() - 1);
        const std::size_t pixels = t.size() / C;
        std::vector<double> f(static_cast<std::size_t>(C), 0.0);
        for (std::size_t p = 0; p < pixels; ++p)
          for (int c = 0; c < C; ++c) f[c] += t[p * C + c];
        for (double& v : f) v /= static_cast<double>(pixels);
        feats.push_back(std::move(f));
      }
      if (head[i].module == ModuleKind::Task && kind_of(*head[i].layer) == LayerKind::Relu) {
        for (float v : t.data()) {
          pos[r] += v > 0.0f ? 1.0 : 0.0;
          mag[r] += std::fabs(v);
        }
        count[r] += static_cast<double>(t.size());
        ++r;
      }
      t = forward(*head[i].layer, t);
    }
  }
  st.plane = principal_plane(feats);
  for (std::size_t r = 0; r < names.size(); ++r) st.layers.push_back({names[r], pos[r] / count[r], mag[r] / count[r]});
  return st;
}

void write_pc_csv(const std::string& path, const FeatureStats& stats) {
  std::ofstream out(path);
  if (!out) fail(Errc::IoError, "cannot write " + path);
  out << "image_id,pc1,pc2\n";
  char buf[96];
  for (std::size_t i = 0; i < stats.plane.projections.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, stats.plane.projections[i].first, stats.plane.projections[i].second);
    out << buf;
  }
}

void write_layer_csv(const std::string& path, const FeatureStats& stats) {
  std::ofstream out(path);
  if (!out) fail(Errc::IoError, "cannot write " + path);
  out << "layer,positive_fraction,mean_magnitude\n";
  char buf[128];
  for (const auto& l : stats.layers) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g\n", l.layer.c_str(), l.positive_fraction, l.mean_magnitude);
    out << buf;
  }
}

}  // namespace tpnt
