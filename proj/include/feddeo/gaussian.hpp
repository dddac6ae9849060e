#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace feddeo {

/// Multivariate normal with dense covariance.
template <typename Scalar>
struct Gaussian {
  using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  VectorT mean;
  MatrixT covariance;

  Eigen::Index dim() const { return mean.size(); }

  /// Cholesky factor of the covariance; throws when not positive-definite.
  Eigen::LLT<MatrixT> cholesky() const {
    Eigen::LLT<MatrixT> llt(covariance);
    if (llt.info() != Eigen::Success) throw std::domain_error("gaussian: covariance is not positive-definite");
    return llt;
  }

  template <typename Derived>
  Scalar log_density(const Eigen::MatrixBase<Derived>& x) const {
    const auto llt = cholesky();
    const VectorT diff = x - mean;
    const VectorT z = llt.matrixL().solve(diff);
    const Scalar log_det = 2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return Scalar(-0.5) * (z.squaredNorm() + log_det + Scalar(dim()) * std::log(2 * std::numbers::pi_v<Scalar>));
  }

  /// Pushes the distribution through x -> A x + b.
  template <typename DA, typename DB>
  Gaussian transformed(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& b) const {
    return {A * mean + b, A * covariance * A.transpose()};
  }
};

/// KL(p || q) in nats between two normals of equal dimension.
template <typename Scalar>
Scalar kl_divergence(const Gaussian<Scalar>& p, const Gaussian<Scalar>& q) {
  if (p.dim() != q.dim()) throw std::invalid_argument("kl_divergence: dimension mismatch");
  using MatrixT = typename Gaussian<Scalar>::MatrixT;
  using VectorT = typename Gaussian<Scalar>::VectorT;
  const auto lq = q.cholesky();
  const auto lp = p.cholesky();
  const MatrixT q_inv_p = lq.solve(p.covariance);
  const VectorT diff = q.mean - p.mean;
  const Scalar maha = diff.dot(lq.solve(diff));
  const Scalar log_det_q = 2 * lq.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const Scalar log_det_p = 2 * lp.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return Scalar(0.5) * (q_inv_p.trace() + maha - Scalar(p.dim()) + log_det_q - log_det_p);
}

}  // namespace feddeo
