#pragma once

// Distances between SPD matrices and operator error measures.

#include "fls/q_param.hpp"
#include "fls/synthetic_fisher.hpp"

namespace fls {

struct MetricSample {
  std::string name;
  double value = 0.0;
  Index step = 0;
  Index minibatches = 0;
};

/// Affine-invariant distance |log(A^{-1/2} B A^{-1/2})|_F.
inline double riemannian_distance(const Matrix& a, const Matrix& b) {
  require(a.rows() == a.cols() && b.rows() == b.cols() && a.rows() == b.rows(),
          "riemannian_distance: shape mismatch");
  Eigen::SelfAdjointEigenSolver<Matrix> ea(symmetrized(a));
  if (ea.info() != Eigen::Success || ea.eigenvalues().minCoeff() <= 0.0)
    throw std::domain_error("riemannian_distance: first argument is not SPD");
  const Matrix isqrt = ea.eigenvectors() * ea.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                       ea.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> ec(symmetrized(isqrt * b * isqrt), Eigen::EigenvaluesOnly);
  if (ec.info() != Eigen::Success || ec.eigenvalues().minCoeff() <= 0.0)
    throw std::domain_error("riemannian_distance: second argument is not SPD");
  return std::sqrt(ec.eigenvalues().array().log().square().sum());
}

/// Relative error of Q as an operator under probes u ~ N(0, Sigma_u), where
/// `u_factor` satisfies Sigma_u = u_factor u_factor^T:
///   E|Q u - F_gamma^{-1} u|^2 / E|F_gamma^{-1} u|^2  (Monte Carlo).
template <class Q>
double normalized_action_error(const Q& q, const SpectralFisher& f, const Matrix& u_factor, Index samples = 4096,
                               std::uint64_t seed = 0) {
  require_dim(q.dim(), f.dim(), "normalized_action_error");
  require_dim(u_factor.rows(), f.dim(), "normalized_action_error");
  require(samples >= 1, "normalized_action_error: need at least one sample");
  Rng rng = make_rng(seed, 0x5a3e);
  Matrix z(u_factor.cols(), samples);
  for (Index s = 0; s < samples; ++s) z.col(s) = standard_normal(u_factor.cols(), rng);
  const Matrix us = u_factor * z;
  const Matrix& basis = f.basis();
  const Matrix ref = basis * (f.target_inverse_eigenvalues().asDiagonal() * (basis.transpose() * us));
  double num = 0.0;
  for (Index s = 0; s < samples; ++s) num += (q.qv(Vector(us.col(s))) - ref.col(s)).squaredNorm();
  const double den = ref.squaredNorm();
  if (!(den > 0.0)) throw std::domain_error("normalized_action_error: zero reference norm");
  return num / den;
}

/// Closed form of the quantity above:
///   tr(E Sigma_u E) / tr(M Sigma_u M), E = Q - M, M = F_gamma^{-1}.
inline double normalized_action_error_exact(const Matrix& q, const Matrix& target_inverse, const Matrix& sigma_u) {
  const Matrix e = q - target_inverse;
  return (e * sigma_u * e.transpose()).trace() / (target_inverse * sigma_u * target_inverse).trace();
}

/// Distance between Q and the exact masked inverse, both restricted to the
/// surviving coordinates.
inline double masked_riemannian_distance(const Matrix& q_dense, const Matrix& damped_fisher, const Mask& mask) {
  require_dim(q_dense.rows(), mask.size(), "masked_riemannian_distance");
  const auto alive = mask.alive_indices();
  require(!alive.empty(), "masked_riemannian_distance: no surviving coordinates");
  const Matrix exact = spd_inverse(submatrix(damped_fisher, alive));
  return riemannian_distance(submatrix(q_dense, alive), exact);
}

template <InverseFisherParam Q>
double masked_riemannian_distance(const Q& q, const SpectralFisher& f, const Mask& mask) {
  return masked_riemannian_distance(q.dense(), f.damped(), mask);
}

}  // namespace fls
