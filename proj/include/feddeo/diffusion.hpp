#pragma once

#include "feddeo/numerics.hpp"
#include "feddeo/random.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace feddeo {

/// Per-timestep noise coefficients. Timesteps are 1-based: beta(t) and
/// sigma(t) for t in [1, T], alpha_bar(t) for t in [0, T] with
/// alpha_bar(0) == 1.
class VarianceSchedule {
 public:
  /// Builds a schedule from cumulative products alpha_bar[0..T]; the first
  /// entry must be 1 and the sequence strictly decreasing.
  static VarianceSchedule from_alpha_bar(Vector alpha_bar, double eta);

  int T() const { return static_cast<int>(beta_.size()); }
  double eta() const { return eta_; }
  double beta(int t) const { return beta_[index(t, 1)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t, 0)]; }
  double sigma(int t) const { return sigma_[index(t, 1)]; }

  const Vector& betas() const { return beta_; }
  const Vector& alpha_bars() const { return alpha_bar_; }
  const Vector& sigmas() const { return sigma_; }

 private:
  VarianceSchedule() = default;
  Eigen::Index index(int t, int lo) const;

  Vector beta_;       // T entries
  Vector alpha_bar_;  // T + 1 entries
  Vector sigma_;      // T entries
  double eta_ = 0.0;
};

/// Linear beta from beta_min to beta_max; sigma scaled by eta (eta = 0 gives
/// deterministic DDIM).
VarianceSchedule make_schedule(int T, double beta_min, double beta_max, double eta);

namespace detail {
void check_timestep(const char* op, int t, const VarianceSchedule& sched);
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename X, typename E>
Matrix forward_noise(const Eigen::MatrixBase<X>& x0, const Eigen::MatrixBase<E>& eps, int t,
                     const VarianceSchedule& sched) {
  detail::check_timestep("forward_noise", t, sched);
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
    throw ShapeError("forward_noise", "x0 " + dims_string(x0.rows(), x0.cols()) + " vs eps " +
                                          dims_string(eps.rows(), eps.cols()));
  const double a = sched.alpha_bar(t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

/// One reverse step from x_t to x_{t-1} given a noise estimate. `noise` is
/// only read when sigma(t) > 0.
template <typename X, typename E, typename N>
Matrix ddim_step(const Eigen::MatrixBase<X>& x_t, const Eigen::MatrixBase<E>& eps_hat, int t,
                 const VarianceSchedule& sched, const Eigen::MatrixBase<N>& noise) {
  detail::check_timestep("ddim_step", t, sched);
  if (x_t.rows() != eps_hat.rows() || x_t.cols() != eps_hat.cols())
    throw ShapeError("ddim_step", "x_t " + dims_string(x_t.rows(), x_t.cols()) + " vs eps_hat " +
                                      dims_string(eps_hat.rows(), eps_hat.cols()));
  const double a_t = sched.alpha_bar(t);
  const double a_prev = sched.alpha_bar(t - 1);
  const double s = sched.sigma(t);
  double dir = 1.0 - a_prev - s * s;
  if (dir < -1e-12)
    throw std::domain_error("ddim_step: 1 - alpha_bar[t-1] - sigma[t]^2 < 0 at t=" + std::to_string(t));
  dir = std::max(dir, 0.0);
  Matrix x0_hat = (x_t - std::sqrt(1.0 - a_t) * eps_hat) / std::sqrt(a_t);
  Matrix out = std::sqrt(a_prev) * x0_hat + std::sqrt(dir) * eps_hat;
  if (s > 0.0) {
    if (noise.rows() != x_t.rows() || noise.cols() != x_t.cols())
      throw ShapeError("ddim_step", "noise " + dims_string(noise.rows(), noise.cols()) + " vs x_t " +
                                        dims_string(x_t.rows(), x_t.cols()));
    out += s * noise;
  }
  return out;
}

/// Sinusoidal features of integer timesteps, one row per entry of `t`.
Matrix time_embedding(std::span<const int> t, int dim);

enum class ConditionKind { ClassEmbedding, Description, Zero };

struct ConditionVector {
  RowVector values;
  ConditionKind kind = ConditionKind::Zero;

  static ConditionVector zero(int dim) { return {RowVector::Zero(dim), ConditionKind::Zero}; }
};

struct NoisePredictorConfig {
  int data_dim = 2;
  int num_classes = 10;
  int hidden = 128;
  int hidden_layers = 3;
  int time_dim = 32;
  int cond_dim = 16;
  double embedding_scale = 1.0;
};

/// Conditional denoiser eps(x_t, t | cond): an MLP over
/// [x_t, time features, condition] with SiLU activations, plus the table of
/// per-class condition vectors f_c.
class NoisePredictor {
 public:
  NoisePredictor(NoisePredictorConfig config, std::uint64_t seed);

  const NoisePredictorConfig& config() const { return config_; }

  /// Graph forward; `cond` is batch x cond_dim.
  Var forward(Graph& g, const Matrix& x_t, std::span<const int> t, Var cond) const;
  /// Plain Eigen forward, numerically identical to forward().
  Matrix infer(const Matrix& x_t, std::span<const int> t, const Matrix& cond) const;

  ConditionVector class_condition(int category) const;
  const Tensor& class_embeddings() const { return class_embeddings_; }

  /// Every parameter in canonical order (layers, then class table).
  std::vector<const Tensor*> parameters() const;
  /// Mutable access for training or loading; throws once frozen.
  std::vector<Tensor*> mutable_parameters();
  void zero_output_layer();

  /// Rounds parameters to f32, marks the model read-only and records its
  /// digest. Distribution to clients happens only after this.
  void freeze();
  /// Freezes and insists the parameters hash to `expected`.
  void freeze_expecting(const std::string& expected);
  bool frozen() const { return frozen_; }
  const std::string& frozen_digest() const { return frozen_digest_; }
  /// SHA-256 over names, dims and f32 values of every parameter.
  std::string digest() const;
  /// Throws IntegrityError if the parameters changed since freeze().
  void verify_integrity() const;

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
  };

  NoisePredictorConfig config_;
  std::vector<Layer> layers_;
  Tensor class_embeddings_;
  bool frozen_ = false;
  std::string frozen_digest_;
};

/// Single-condition prediction for a batch sharing one timestep.
Matrix predict_noise(const NoisePredictor& model, const Matrix& x_t, int t, const ConditionVector& cond);

/// Pretraining corpus: each sample carries its class and, optionally, a style
/// caption index (-1 when captioned by the class name alone).
struct CaptionedSamples {
  Matrix x;
  std::vector<int> labels;
  std::vector<int> styles;
};

struct PretrainOptions {
  int epochs = 0;
  int batch_size = 128;
  AdamConfig adam{};
  /// Cosine decay of the learning rate down to this fraction at the end.
  double final_lr_fraction = 1.0;
};

struct TrainTrace {
  std::vector<double> epoch_loss;
};

/// Denoising pretraining: per sample draws eps ~ N(0, I) and t ~ U{1..T} and
/// minimizes MSE(eps, eps(x_t, t | f_c [+ style])). Class embeddings are
/// co-trained; `style_table` (styles x cond_dim) is required when any sample
/// has a style caption and stays fixed.
TrainTrace pretrain_dm(NoisePredictor& model, const VarianceSchedule& sched,
                       const CaptionedSamples& data, const PretrainOptions& options,
                       std::uint64_t seed, Tensor* style_table = nullptr);

struct GuidanceTerm {
  ConditionVector condition;
  double weight = 1.0;
};

/// Weighted sum of per-condition noise predictions.
Matrix compose_noise(const NoisePredictor& model, const Matrix& x_t, int t,
                     std::span<const GuidanceTerm> terms);

struct ComposeWeights {
  double class_weight = 1.0;
  double description_weight = 1.0;
};

/// w_d * eps(x_t, t | d) + w_f * eps(x_t, t | f_c).
Matrix compose_noise(const NoisePredictor& model, const Matrix& x_t, int t,
                     const ConditionVector& class_cond, const ConditionVector& description,
                     ComposeWeights weights = {});

/// Draws R trajectories from x_T ~ N(0, I) down to x_0 with composed
/// guidance. Returns R x data_dim. The model must be frozen.
Matrix sample(const NoisePredictor& model, std::span<const GuidanceTerm> terms, int R,
              const VarianceSchedule& sched, std::uint64_t seed);

Matrix sample(const NoisePredictor& model, const ConditionVector& class_cond,
              const ConditionVector& description, int R, const VarianceSchedule& sched,
              std::uint64_t seed, ComposeWeights weights = {});

}  // namespace feddeo
