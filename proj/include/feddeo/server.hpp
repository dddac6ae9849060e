#pragma once

#include "feddeo/client.hpp"
#include "feddeo/datagen.hpp"
#include "feddeo/diffusion.hpp"
#include "feddeo/ledger.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace feddeo {

/// Server-generated labeled samples with (client, replicate) provenance.
/// Prompts-only samples carry client_id -1.
struct SyntheticDataset {
  Matrix x;
  std::vector<int> labels;
  std::vector<int> clients;
  std::vector<int> replicates;  // 1-based
  std::string config_digest;

  Eigen::Index size() const { return x.rows(); }
  /// Rows whose provenance is `client`.
  LabeledSamples for_client(int client) const;
  std::string digest() const;
};

struct GenerationOptions {
  int R = 30;
  /// Averaged branches; (1, 1) gives the plain sum.
  ComposeWeights weights{.class_weight = 0.5, .description_weight = 0.5};
};

/// For every uploaded (n, c) runs R guided trajectories with conditions f_c
/// and d_{n,c}. Takes no client data, only payloads. Each (n, c) uses its
/// own random stream, so results do not depend on ordering.
SyntheticDataset generate_synthetic(const NoisePredictor& model, std::span<const UploadPayload> payloads,
                                    const VarianceSchedule& sched, const GenerationOptions& options,
                                    std::uint64_t seed);

/// Baseline generation from f_c alone for each listed category (R each).
SyntheticDataset generate_prompts_only(const NoisePredictor& model, std::span<const int> categories,
                                       const VarianceSchedule& sched, int R, std::uint64_t seed);

struct ClassifierConfig {
  int hidden = 64;
  int max_epochs = 1000;
  int batch_size = 64;
  AdamConfig adam{};
  /// Stop once the loss improved by less than this over `patience` epochs.
  double convergence_tolerance = 1e-4;
  int patience = 10;
};

/// MLP dim -> hidden -> hidden -> classes with SiLU activations.
class Classifier {
 public:
  Classifier(int dim, int num_classes, int hidden, std::uint64_t seed);

  int dim() const { return dim_; }
  int num_classes() const { return num_classes_; }
  int hidden() const { return hidden_; }

  Var forward(Graph& g, const Matrix& x) const;
  Matrix logits(const Matrix& x) const;
  /// argmax of the logits; ties go to the lowest category index.
  std::vector<int> predict(const Matrix& x) const;

  std::vector<const Tensor*> parameters() const;
  std::vector<Tensor*> mutable_parameters();
  std::uint64_t parameter_count() const;

 private:
  int dim_;
  int num_classes_;
  int hidden_;
  std::vector<Tensor> params_;  // w0 b0 w1 b1 w2 b2
};

struct ClassifierTraining {
  Classifier classifier;
  TrainTrace trace;
};

/// Minimizes softmax cross-entropy on (x, labels) in place, shuffled
/// minibatches, until converged or max_epochs. Returns the epoch losses.
TrainTrace fit_classifier(Classifier& clf, const Matrix& x, std::span<const int> labels,
                          const ClassifierConfig& config, std::uint64_t seed, int max_epochs);

/// Aggregated model trained on synthetic pairs (x_hat, c).
ClassifierTraining train_aggregated(const SyntheticDataset& data, int num_classes, const ClassifierConfig& config,
                                    std::uint64_t seed);

/// Prompts Only: generation from class embeddings, then aggregated training.
/// Records zero uploaded bytes in `ledger`.
ClassifierTraining train_prompts_only(const NoisePredictor& model, std::span<const int> categories, int R,
                                      const VarianceSchedule& sched, std::uint64_t seed,
                                      const ClassifierConfig& config, CommLedger* ledger = nullptr,
                                      SyntheticDataset* generated = nullptr);

/// Ceiling: the union of all client training data uploaded and pooled.
ClassifierTraining train_centralized(std::span<const ClientDataset> clients, int num_classes,
                                     const ClassifierConfig& config, std::uint64_t seed,
                                     CommLedger* ledger = nullptr);

/// Classifier trained on a single client's data.
ClassifierTraining train_local(const ClientDataset& client, int num_classes, const ClassifierConfig& config,
                               std::uint64_t seed);

struct FedAvgOptions {
  int rounds = 20;
  int local_epochs = 1;
  /// Every client shuffles with the same stream (round-dependent only).
  bool shared_client_streams = false;
};

/// FedAvg with weights |D_n| / sum |D|; each round every client uploads its
/// full parameter vector.
ClassifierTraining train_fedavg(std::span<const ClientDataset> clients, int num_classes,
                                const FedAvgOptions& options, const ClassifierConfig& config, std::uint64_t seed,
                                CommLedger* ledger = nullptr);

}  // namespace feddeo
