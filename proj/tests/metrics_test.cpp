#include "feddeo/metrics.hpp"
#include "pretrained.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace feddeo;

namespace {

Gaussian<double> normal2(double mx, double my, double sx, double sy) {
  Gaussian<double> g;
  g.mean = Eigen::Vector2d(mx, my);
  g.covariance = Eigen::Vector2d(sx * sx, sy * sy).asDiagonal();
  return g;
}

Matrix draw(const Gaussian<double>& g, int n, Rng& rng) {
  const Eigen::MatrixXd L = g.cholesky().matrixL();
  Matrix z = gaussian_matrix(n, g.dim(), rng);
  return (z * L.transpose()).rowwise() + g.mean.transpose();
}

}  // namespace

TEST(Evaluate, UnweightedAverageOfClientAccuracies) {
  std::vector<ClientDataset> clients(2);
  clients[0].test.append(Matrix::Zero(4, 2), 1, 0);
  clients[1].client_id = 1;
  clients[1].test.append(Matrix::Zero(1, 2), 1, 0);
  clients[1].test.append(Matrix::Zero(1, 2), 0, 0);
  const Predictor ones = [](const Matrix& x) { return std::vector<int>(static_cast<std::size_t>(x.rows()), 1); };
  const ResultsTable t = evaluate_predictor(ones, clients, "ones");
  EXPECT_EQ(t.client_accuracy, (std::vector<double>{1.0, 0.5}));
  EXPECT_DOUBLE_EQ(t.average, 0.75);
  clients[1].test = {};
  EXPECT_THROW(evaluate_predictor(ones, clients, "ones"), std::invalid_argument);
}

TEST(KL, ClosedFormOfUnitShift) {
  EXPECT_NEAR(estimate_kl(normal2(0, 0, 1, 1), normal2(1, 0, 1, 1)).value, 0.5, 1e-12);
  EXPECT_NEAR(estimate_kl(normal2(0, 0, 1, 1), normal2(0, 0, 1, 1)).value, 0.0, 1e-12);
  const double s = 2.0;
  EXPECT_NEAR(estimate_kl(normal2(0, 0, 1, 1), normal2(0, 0, s, s)).value, 2 * (0.5 / (s * s) - 0.5 + std::log(s)),
              1e-12);
}

TEST(KL, KnnTracksClosedForm) {
  Rng rng(41);
  const Gaussian<double> p = normal2(0, 0, 1, 1);
  for (const Gaussian<double>& q : {normal2(0, 0, 1, 1), normal2(1, 0, 1, 1), normal2(0.5, -0.5, 1.3, 0.8)}) {
    const KLEstimate est = estimate_kl(draw(p, 2000, rng), draw(q, 2000, rng), 5);
    EXPECT_NEAR(est.value, kl_divergence(p, q), 0.1);
    EXPECT_EQ(est.kind, KLEstimatorKind::Knn);
    EXPECT_FALSE(est.jittered);
  }
}

TEST(KL, KnnIsInvariantUnderSimilarityTransforms) {
  Rng rng(42);
  const Matrix p = gaussian_matrix(300, 2, rng);
  const Matrix q = gaussian_matrix(250, 2, rng, 1.5);
  const double a = 0.7;
  Eigen::Matrix2d A;
  A << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  A *= 3.0;
  const Eigen::RowVector2d b(4.0, -1.0);
  const Matrix tp = (p * A.transpose()).rowwise() + b;
  const Matrix tq = (q * A.transpose()).rowwise() + b;
  EXPECT_NEAR(estimate_kl(p, q).value, estimate_kl(tp, tq).value, 1e-9);
}

TEST(KL, DuplicatesAreJittered) {
  Rng rng(43);
  Matrix p = gaussian_matrix(50, 2, rng);
  p.row(1) = p.row(0);
  p.row(2) = p.row(0);
  p.row(3) = p.row(0);
  p.row(4) = p.row(0);
  p.row(5) = p.row(0);
  const KLEstimate est = estimate_kl(p, gaussian_matrix(50, 2, rng), 5, 1);
  EXPECT_TRUE(est.jittered);
  EXPECT_TRUE(std::isfinite(est.value));
}

TEST(KL, BadInputsThrow) {
  EXPECT_THROW(estimate_kl(Matrix::Zero(10, 2), Matrix::Zero(10, 3)), ShapeError);
  EXPECT_THROW(estimate_kl(Matrix::Zero(3, 2), Matrix::Zero(10, 2), 5), std::invalid_argument);
  EXPECT_THROW(estimate_kl(Matrix::Zero(10, 2), Matrix::Zero(10, 2), 0), std::invalid_argument);
}

TEST(Spearman, RanksWithTies) {
  const std::vector<double> up{1, 2, 3, 4}, down{9, 7, 5, 1}, tied{1, 2, 2, 3}, flat{5, 5, 5, 5};
  EXPECT_DOUBLE_EQ(spearman(up, up), 1.0);
  EXPECT_DOUBLE_EQ(spearman(up, down), -1.0);
  EXPECT_NEAR(spearman(tied, up), 4.5 / std::sqrt(22.5), 1e-12);
  EXPECT_EQ(spearman(flat, up), 0.0);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Communication, RatiosAgainstFedDeo) {
  CommLedger ledger;
  ledger.record("feddeo", 100, 1);
  ledger.record("fedavg", 2000, 20);
  ledger.record("prompts_only", 0, 0);
  ledger.record("feddeo", 60, 1);
  const std::vector<CommComparison> rows = communication_report(ledger);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].parameters, 160u);
  EXPECT_EQ(rows[0].uploaded_bytes, 640u);
  EXPECT_DOUBLE_EQ(rows[1].ratio_to_reference, 12.5);
  EXPECT_EQ(rows[2].ratio_to_reference, 0.0);
}

TEST(Communication, ReferenceSettingNumbers) {
  EXPECT_NEAR(ReferenceUploads::kFedAvgRoundM * ReferenceUploads::kFedAvgRounds, ReferenceUploads::kFedAvgM, 1e-9);
  EXPECT_NEAR(ReferenceUploads::kFedAvgM / ReferenceUploads::kFedDeoM, 66.0, 0.1);
  EXPECT_LT(ReferenceUploads::kFedDeoM, ReferenceUploads::kFedDiscM);
}

TEST(Evaluate, ConstantAndRandomPredictors) {
  std::vector<ClientDataset> clients(3);
  Rng rng(11);
  for (int n = 0; n < 3; ++n) {
    clients[n].client_id = n;
    for (int c = 0; c < 10; ++c) clients[n].test.append(gaussian_matrix(100, 2, rng), c, 0);
  }
  LabeledSamples only_three;
  only_three.append(Matrix::Zero(7, 2), 3, 0);
  std::vector<ClientDataset> one{ClientDataset{.test = only_three}};
  const Predictor threes = [](const Matrix& x) { return std::vector<int>(static_cast<std::size_t>(x.rows()), 3); };
  EXPECT_DOUBLE_EQ(evaluate_predictor(threes, one, "threes").average, 1.0);

  Rng guess(12);
  const Predictor random = [&](const Matrix& x) {
    std::uniform_int_distribution<int> pick(0, 9);
    std::vector<int> out;
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(pick(guess));
    return out;
  };
  const ResultsTable t = evaluate_predictor(random, clients, "random");
  // 3 sigma of a binomial mean over 3000 draws at p = 0.1
  EXPECT_NEAR(t.average, 0.1, 3 * std::sqrt(0.1 * 0.9 / 3000));
  double mean = 0;
  for (double a : t.client_accuracy) mean += a / 3;
  EXPECT_DOUBLE_EQ(t.average, mean);
}

TEST(KL, DisjointHalvesOfOneSampleAgree) {
  Rng rng(13);
  const Matrix x = draw(normal2(0.5, -1, 1.0, 0.5), 4000, rng);
  EXPECT_NEAR(estimate_kl(x.topRows(2000), x.bottomRows(2000)).value, 0.0, 0.1);
}

TEST(KL, ClosedFormIsAsymmetric) {
  Gaussian<double> p, q;
  p.mean = q.mean = Eigen::VectorXd::Zero(1);
  p.covariance = Eigen::MatrixXd::Constant(1, 1, 1.0);
  q.covariance = Eigen::MatrixXd::Constant(1, 1, 4.0);
  EXPECT_NEAR(estimate_kl(p, q).value, std::log(2.0) + 1.0 / 8 - 0.5, 1e-12);
  EXPECT_NEAR(estimate_kl(q, p).value, -std::log(2.0) + 2.0 - 0.5, 1e-12);
  q.mean[0] = std::sqrt(5.0);
  EXPECT_NEAR(estimate_kl(p, q).value, 0.9431, 1e-4);
}

TEST(Communication, DefaultFeatureSkewUploadArithmetic) {
  CommLedger ledger;
  ledger.record("feddeo", 6u * 10u * 16u, 1);
  ledger.record("prompts_only", 0, 1);
  const std::vector<CommComparison> report = communication_report(ledger);
  EXPECT_EQ(report.at(0).parameters, 960u);
  EXPECT_EQ(report.at(0).uploaded_bytes, 3840u);
}

TEST(KLCurve, DescriptionTrainingMovesSamplesTowardTheClient) {
  const fixtures::Pretrained& p = fixtures::cheap_pretrained();
  const std::vector<int> epochs{0, 10};
  KLSweepOptions options;
  options.generation.R = 200;
  const std::vector<KLCurvePoint> curve = kl_vs_training(p.model, p.sched, p.clients[2], epochs, options, 5);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_EQ(curve[0].epochs, 0);
  EXPECT_LT(curve[1].kl.value, curve[0].kl.value);
  for (const KLCurvePoint& pt : curve) EXPECT_GE(pt.kl.value, -0.1);
}
