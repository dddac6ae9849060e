#pragma once

#include "feddeo/client.hpp"
#include "feddeo/datagen.hpp"
#include "feddeo/gaussian.hpp"
#include "feddeo/ledger.hpp"
#include "feddeo/server.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace feddeo {

/// Per-client test accuracy of one method plus the unweighted average.
struct ResultsTable {
  std::string method;
  std::vector<double> client_accuracy;
  double average = 0.0;
  std::string config_digest;
  std::uint64_t seed = 0;
};

using Predictor = std::function<std::vector<int>(const Matrix&)>;

ResultsTable evaluate_predictor(const Predictor& predict, std::span<const ClientDataset> clients,
                                const std::string& method);
ResultsTable evaluate_classifier(const Classifier& clf, std::span<const ClientDataset> clients,
                                 const std::string& method);

enum class KLEstimatorKind { Knn, Grid, ClosedForm };

struct KLEstimate {
  double value = 0.0;  // nats
  KLEstimatorKind kind = KLEstimatorKind::Knn;
  Eigen::Index p_samples = 0;
  Eigen::Index q_samples = 0;
  int k = 0;
  bool jittered = false;
};

/// k-nearest-neighbour estimate of KL(p || q) from samples (rows):
///   (d / n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))
/// with rho_k the k-th neighbour distance within p (excluding the point)
/// and nu_k the k-th neighbour distance into q. Zero distances from
/// duplicated points are broken by a 1e-9 jitter, reported in `jittered`.
KLEstimate estimate_kl(const Matrix& p, const Matrix& q, int k = 5, std::uint64_t jitter_seed = 0);

/// Closed-form KL(p || q) for normals.
KLEstimate estimate_kl(const Gaussian<double>& p, const Gaussian<double>& q);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct KLCurvePoint {
  int epochs = 0;
  KLEstimate kl;
};

struct KLSweepOptions {
  DescriptionTrainingOptions training{};
  GenerationOptions generation{};
  int k = 5;
};

/// For each S: trains a fresh copy of the client's descriptions for S
/// epochs, generates R samples per category and estimates
/// KL(client test || synthetic). S = 0 uses the untrained copies of f_c.
std::vector<KLCurvePoint> kl_vs_training(const NoisePredictor& model, const VarianceSchedule& sched,
                                         const ClientDataset& client, std::span<const int> epochs,
                                         const KLSweepOptions& options, std::uint64_t seed);

/// Row of the communication comparison, relative to a reference method.
struct CommComparison {
  std::string method;
  std::uint64_t parameters = 0;
  std::uint64_t uploaded_bytes = 0;
  int rounds = 0;
  double ratio_to_reference = 0.0;
};

std::vector<CommComparison> communication_report(const CommLedger& ledger, const std::string& reference = "feddeo");

/// Uploaded parameters (millions) of the image-scale reference setting.
struct ReferenceUploads {
  static constexpr double kFedAvgRoundM = 11.69;
  static constexpr int kFedAvgRounds = 20;
  static constexpr double kFedAvgM = 233.8;
  static constexpr double kCeilingM = 270.95;
  static constexpr double kFedCadoM = 11.69;
  static constexpr double kFedDiscM = 4.23;
  static constexpr double kFedDeoM = 3.54;
};

}  // namespace feddeo
