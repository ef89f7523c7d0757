#include <Eigen/Dense>

#include <algorithm>
#include <random>

#include "support.hpp"
#include "tpnt/eval.hpp"

using namespace tpnt;

namespace {

Tensor onehot(std::initializer_list<int> labels, int h, int w) {
  Tensor t({h, w, 2});
  std::size_t p = 0;
  for (int l : labels) t[p++ * 2 + static_cast<std::size_t>(l)] = 1.0f;
  return t;
}

std::vector<std::vector<double>> random_rows(int n, int d, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  std::vector<double> scale(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) scale[static_cast<std::size_t>(j)] = 3.0 / (1.0 + j);
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& r : rows)
    for (int j = 0; j < d; ++j) r[static_cast<std::size_t>(j)] = scale[static_cast<std::size_t>(j)] * nd(gen) + 0.5 * j;
  return rows;
}

}  // namespace

TEST(ErrorRate, Examples) {
  EXPECT_DOUBLE_EQ(error_rate({1, 0, 1}, {1, 1, 1}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(error_rate({1, 0, 1, 0}, {1, 0, 1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(error_rate({0.7f, 0.7f, 0.7f, 0.7f}, {1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(error_rate_logits({-2.0f, 3.0f}, {0, 0}), 0.5);
}

TEST(ErrorRate, EmptyAndMismatched) {
  EXPECT_ERRC(error_rate({}, {}), Errc::EmptyEval);
  EXPECT_ERRC(error_rate({1.0f}, {1, 0}), Errc::ShapeMismatch);
}

TEST(ErrorRate, ComplementsAccuracy) {
  std::mt19937 gen(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> p(101);
  std::vector<int> l(101);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(gen);
    l[i] = u(gen) > 0.5f ? 1 : 0;
  }
  int correct = 0;
  for (std::size_t i = 0; i < p.size(); ++i) correct += (p[i] > 0.5f ? 1 : 0) == l[i];
  EXPECT_DOUBLE_EQ(error_rate(p, l) + static_cast<double>(correct) / 101.0, 1.0);
}

TEST(PixelAccuracy, Examples) {
  const Tensor a = onehot({0, 1, 1, 0}, 2, 2);
  const Tensor b = onehot({1, 0, 0, 1}, 2, 2);
  const Tensor checker = onehot({0, 1, 0, 1}, 2, 2);
  EXPECT_DOUBLE_EQ(pixel_accuracy({a}, {a}), 1.0);
  EXPECT_DOUBLE_EQ(pixel_accuracy({a}, {b}), 0.0);
  EXPECT_DOUBLE_EQ(pixel_accuracy({checker}, {a}), 0.5);
}

TEST(PixelAccuracy, ScoresUseArgmax) {
  const Tensor scores({1, 2, 2}, {0.3f, -1.0f, -0.2f, 4.0f});
  EXPECT_DOUBLE_EQ(pixel_accuracy({scores}, {onehot({0, 1}, 1, 2)}), 1.0);
}

TEST(PixelAccuracy, Errors) {
  EXPECT_ERRC(pixel_accuracy({}, {}), Errc::EmptyEval);
  EXPECT_ERRC(pixel_accuracy({onehot({0, 1}, 1, 2)}, {onehot({0, 1, 1, 0}, 2, 2)}), Errc::ShapeMismatch);
}

TEST(PixelAccuracy, PooledAndPermutationInvariant) {
  std::vector<Tensor> pred, truth;
  for (std::uint64_t i = 0; i < 6; ++i) {
    pred.push_back(tpnt::testing::random_tensor({3 + static_cast<int>(i), 4, 2}, i));
    truth.push_back(tpnt::testing::random_tensor({3 + static_cast<int>(i), 4, 2}, 100 + i));
  }
  const double a = pixel_accuracy(pred, truth);
  std::vector<std::size_t> idx{3, 0, 5, 1, 4, 2};
  std::vector<Tensor> p2, t2;
  for (auto i : idx) {
    p2.push_back(pred[i]);
    t2.push_back(truth[i]);
  }
  EXPECT_DOUBLE_EQ(pixel_accuracy(p2, t2), a);
}

TEST(PrincipalPlane, IdenticalRowsHaveZeroVariance) {
  const std::vector<std::vector<double>> rows(5, {1.0, 2.0, 3.0});
  const PrincipalPlane p = principal_plane(rows);
  EXPECT_EQ(p.var1, 0.0);
  EXPECT_EQ(p.var2, 0.0);
  for (const auto& [a, b] : p.projections) {
    EXPECT_EQ(a, 0.0);
    EXPECT_EQ(b, 0.0);
  }
}

TEST(PrincipalPlane, AxisAlignedRecoversAxes) {
  std::vector<std::vector<double>> rows;
  for (int i = -3; i <= 3; ++i) {
    rows.push_back({2.0 * i, 0.0});
    rows.push_back({0.0, 0.5 * i});
  }
  const PrincipalPlane p = principal_plane(rows);
  EXPECT_NEAR(std::abs(p.pc1[0]), 1.0, 1e-9);
  EXPECT_NEAR(p.pc1[1], 0.0, 1e-9);
  EXPECT_NEAR(std::abs(p.pc2[1]), 1.0, 1e-6);
  EXPECT_GT(p.var1, p.var2);
}

TEST(PrincipalPlane, MatchesDenseEigensolver) {
  const auto rows = random_rows(50, 16, 11);
  const PrincipalPlane p = principal_plane(rows);
  Eigen::MatrixXd X(50, 16);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 16; ++j) X(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd cov = (C.transpose() * C) / 49.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double l1 = es.eigenvalues()(15), l2 = es.eigenvalues()(14);
  EXPECT_NEAR(p.var1, l1, 1e-4 * l1);
  EXPECT_NEAR(p.var2, l2, 1e-4 * l2);
  double align = 0.0;
  for (int j = 0; j < 16; ++j) align += p.pc1[static_cast<std::size_t>(j)] * es.eigenvectors()(j, 15);
  EXPECT_NEAR(std::abs(align), 1.0, 1e-6);
}

TEST(PrincipalPlane, InvariantToMeanShift) {
  auto rows = random_rows(30, 5, 12);
  const PrincipalPlane a = principal_plane(rows);
  for (auto& r : rows)
    for (double& v : r) v += 7.5;
  const PrincipalPlane b = principal_plane(rows);
  for (std::size_t i = 0; i < a.projections.size(); ++i) {
    EXPECT_NEAR(a.projections[i].first, b.projections[i].first, 1e-9);
    EXPECT_NEAR(a.projections[i].second, b.projections[i].second, 1e-9);
  }
}

TEST(PrincipalPlane, NeedsTwoRows) {
  EXPECT_ERRC(principal_plane({{1.0, 2.0}}), Errc::EmptyEval);
  EXPECT_ERRC(principal_plane({{1.0, 2.0}, {1.0}}), Errc::ShapeMismatch);
}

TEST(FeatureStats, LayersAndPlane) {
  Rng rng(3);
  const NetModule g = make_classifier_head("g", 2, 4, rng);
  std::vector<Tensor> xs;
  for (std::uint64_t i = 0; i < 6; ++i) xs.push_back(tpnt::testing::random_tensor({4, 4, 2}, i, 0.0f, 1.0f));
  const FeatureStats st = feature_stats(module_path(g), xs);
  ASSERT_EQ(st.layers.size(), 2u);
  EXPECT_EQ(st.layers[0].layer, "task.relu0");
  for (const auto& l : st.layers) {
    EXPECT_GE(l.positive_fraction, 0.0);
    EXPECT_LE(l.positive_fraction, 1.0);
  }
  EXPECT_EQ(st.plane.projections.size(), 6u);
  EXPECT_EQ(st.plane.pc1.size(), 4u);  // input of the last conv has `hidden` channels
  EXPECT_ERRC(feature_stats(module_path(g), {xs[0]}), Errc::EmptyEval);
}
