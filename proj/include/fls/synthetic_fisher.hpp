#pragma once

// Ground-truth Fisher matrices with controlled spectra, the linear-Gaussian
// toy task, and exact / masked / minibatch Fisher-vector products.

#include "fls/core.hpp"

#include <algorithm>
#include <sstream>
#include <string>
#include <variant>

namespace fls {

/// Eigenvalue rules. Eigenvalues are indexed from i = 1 and sorted
/// non-increasing.
struct PowerSpectrum {
  double exponent = 2.0;  // xi_i = i^{-exponent}
};
struct ExpSpectrum {
  double scale = 30.0;  // xi_i = exp(-(i - 1) / scale), so xi_1 = 1
};
struct ListSpectrum {
  std::vector<double> values;
};
using Spectrum = std::variant<PowerSpectrum, ExpSpectrum, ListSpectrum>;

/// Parses "power:2", "exp:30" or "list:[1, 0.5, 0.25]".
inline Spectrum parse_spectrum(const std::string& text) {
  const auto colon = text.find(':');
  require(colon != std::string::npos, "spectrum: expected '<kind>:<arg>', got '" + text + "'");
  const std::string kind = text.substr(0, colon);
  std::string arg = text.substr(colon + 1);
  if (kind == "power") return PowerSpectrum{std::stod(arg)};
  if (kind == "exp") {
    const double c = std::stod(arg);
    require(c > 0.0, "spectrum: exp scale must be positive");
    return ExpSpectrum{c};
  }
  if (kind == "list") {
    std::replace(arg.begin(), arg.end(), '[', ' ');
    std::replace(arg.begin(), arg.end(), ']', ' ');
    std::replace(arg.begin(), arg.end(), ',', ' ');
    std::istringstream in(arg);
    ListSpectrum out;
    double x;
    while (in >> x) out.values.push_back(x);
    require(!out.values.empty(), "spectrum: empty list");
    return out;
  }
  throw std::invalid_argument("spectrum: unknown kind '" + kind + "'");
}

inline std::string to_string(const Spectrum& s) {
  std::ostringstream out;
  out.precision(17);
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PowerSpectrum>) {
          out << "power:" << v.exponent;
        } else if constexpr (std::is_same_v<T, ExpSpectrum>) {
          out << "exp:" << v.scale;
        } else {
          out << "list:[";
          for (std::size_t i = 0; i < v.values.size(); ++i) out << (i ? "," : "") << v.values[i];
          out << "]";
        }
      },
      s);
  return out.str();
}

inline Vector spectrum_values(const Spectrum& s, Index n) {
  require(n >= 1, "spectrum: n must be >= 1");
  Vector xi(n);
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PowerSpectrum>) {
          for (Index i = 0; i < n; ++i) xi[i] = std::pow(double(i + 1), -v.exponent);
        } else if constexpr (std::is_same_v<T, ExpSpectrum>) {
          for (Index i = 0; i < n; ++i) xi[i] = std::exp(-double(i) / v.scale);
        } else {
          require(static_cast<Index>(v.values.size()) == n, "spectrum: list length does not match n");
          for (Index i = 0; i < n; ++i) {
            if (!(v.values[static_cast<std::size_t>(i)] >= 0.0))
              throw std::invalid_argument("spectrum: negative eigenvalue makes the Fisher non-SPD");
            xi[i] = v.values[static_cast<std::size_t>(i)];
          }
          std::sort(xi.data(), xi.data() + n, std::greater<>());
        }
      },
      s);
  return xi;
}

/// Haar-distributed orthonormal matrix: Householder QR of a seeded Gaussian
/// matrix with the signs of R's diagonal folded into Q.
inline Matrix random_orthonormal(Index n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x0b5e);
  const Matrix a = standard_normal(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

/// F = U diag(xi) U^T with damping gamma; F_gamma = F + gamma I.
class SpectralFisher {
public:
  SpectralFisher(Matrix basis, Vector eigenvalues, double gamma)
      : basis_(std::move(basis)), xi_(std::move(eigenvalues)), gamma_(gamma) {
    require(basis_.rows() == basis_.cols() && basis_.rows() == xi_.size(), "SpectralFisher: shape mismatch");
    require(gamma_ >= 0.0, "SpectralFisher: damping must be non-negative");
    for (Index i = 0; i < xi_.size(); ++i) {
      if (!(xi_[i] >= 0.0)) throw std::invalid_argument("SpectralFisher: negative eigenvalue");
      if (i > 0 && xi_[i] > xi_[i - 1]) throw std::invalid_argument("SpectralFisher: eigenvalues must be non-increasing");
    }
  }

  Index dim() const { return xi_.size(); }
  const Matrix& basis() const { return basis_; }
  const Vector& eigenvalues() const { return xi_; }
  double damping() const { return gamma_; }

  /// Eigenvalues of F_gamma^{-1}, i.e. 1 / (xi_i + gamma).
  Vector target_inverse_eigenvalues() const { return (xi_.array() + gamma_).inverse().matrix(); }

  Matrix dense() const { return symmetrized(basis_ * xi_.asDiagonal() * basis_.transpose()); }
  Matrix damped() const {
    Matrix f = dense();
    f.diagonal().array() += gamma_;
    return f;
  }
  Matrix damped_inverse() const {
    return symmetrized(basis_ * target_inverse_eigenvalues().asDiagonal() * basis_.transpose());
  }
  /// S with S S^T = F; x = S z has covariance F.
  Matrix sqrt_factor() const { return basis_ * xi_.cwiseSqrt().asDiagonal(); }

private:
  Matrix basis_;
  Vector xi_;
  double gamma_;
};

inline SpectralFisher make_spectral_fisher(Index n, const Spectrum& spectrum, double gamma, std::uint64_t seed) {
  require(n >= 1, "make_spectral_fisher: n must be >= 1");
  require(gamma >= 0.0, "make_spectral_fisher: damping must be non-negative");
  Vector xi = spectrum_values(spectrum, n);
  return SpectralFisher(random_orthonormal(n, seed), std::move(xi), gamma);
}

/// (U Xi U^T + gamma I) v, without forming F.
inline Vector fisher_vector_product(const SpectralFisher& f, const Vector& v) {
  require_dim(v.size(), f.dim(), "fisher_vector_product");
  const Vector c = f.basis().transpose() * v;
  return f.basis() * (f.eigenvalues().cwiseProduct(c)) + f.damping() * v;
}

/// Damped Fisher of the masked model: M F M v + gamma v, M = diag(mask).
inline Vector fisher_vector_product(const SpectralFisher& f, const Vector& v, const Mask& mask) {
  require_dim(mask.size(), f.dim(), "fisher_vector_product");
  const Vector c = f.basis().transpose() * apply_mask(v, mask);
  const Vector fv = f.basis() * (f.eigenvalues().cwiseProduct(c));
  return apply_mask(fv, mask) + f.damping() * v;
}

/// Linear model y = w^T x + sigma * noise with x ~ N(0, Sigma_x). Under
/// model-sampled residuals the Fisher is exactly Sigma_x.
struct LinearTask {
  Vector weights;          // w*, entries ~ N(0, 1/n)
  SpectralFisher input_cov;  // Sigma_x, carries the damping gamma
  double noise = 0.0;
  Index batch_size = 100;
  std::uint64_t seed = 0;

  Index dim() const { return weights.size(); }
  const SpectralFisher& fisher() const { return input_cov; }
  double damping() const { return input_cov.damping(); }
};

inline LinearTask make_linear_task(Index n, const Spectrum& spectrum, double gamma, double noise, Index batch_size,
                                   std::uint64_t seed) {
  require(batch_size >= 1, "make_linear_task: batch size must be positive");
  require(noise >= 0.0, "make_linear_task: noise must be non-negative");
  Rng rng = make_rng(seed, 0x3e16);
  Vector w = standard_normal(n, rng) / std::sqrt(double(n));
  return LinearTask{std::move(w), make_spectral_fisher(n, spectrum, gamma, seed), noise, batch_size, seed};
}

/// Per-example score gradients, one per row.
struct GradientBatch {
  Matrix g;  // m x n
  double gamma = 0.0;

  Index size() const { return g.rows(); }
  Index dim() const { return g.cols(); }
};

/// Inputs x_j ~ N(0, Sigma_x) as rows of an m x n matrix.
inline Matrix sample_inputs(const LinearTask& task, Index m, Rng& rng) {
  const Matrix z = standard_normal(m, task.dim(), rng);
  return z * task.input_cov.sqrt_factor().transpose();
}

/// Rows g_j = x_j * eps_j with eps_j ~ N(0, 1), so E[(1/m) G^T G] = Sigma_x.
inline GradientBatch sample_gradient_batch(const LinearTask& task, Rng& rng) {
  require(task.batch_size >= 1, "sample_gradient_batch: batch size must be positive");
  Matrix x = sample_inputs(task, task.batch_size, rng);
  const Vector eps = standard_normal(task.batch_size, rng);
  x = eps.asDiagonal() * x;
  return GradientBatch{std::move(x), task.damping()};
}

inline GradientBatch sample_gradient_batch(const LinearTask& task, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x9bad);
  return sample_gradient_batch(task, rng);
}

/// (1/m) G^T (G v) + gamma v.
inline Vector empirical_fvp(const GradientBatch& batch, const Vector& v) {
  require_dim(v.size(), batch.dim(), "empirical_fvp");
  const Vector gv = batch.g * v;
  return (batch.g.transpose() * gv) / double(batch.size()) + batch.gamma * v;
}

/// Same product for the masked model: gradients of pruned weights are zero.
inline Vector empirical_fvp(const GradientBatch& batch, const Vector& v, const Mask& mask) {
  require_dim(mask.size(), batch.dim(), "empirical_fvp");
  const Vector gv = batch.g * apply_mask(v, mask);
  return apply_mask((batch.g.transpose() * gv) / double(batch.size()), mask) + batch.gamma * v;
}

/// (F_gamma restricted to the alive set)^{-1}, embedded back into n x n with
/// zeros on pruned rows and columns.
inline Matrix exact_masked_inverse(const Matrix& damped_fisher, const Mask& mask) {
  require_dim(mask.size(), damped_fisher.rows(), "exact_masked_inverse");
  const auto alive = mask.alive_indices();
  require(!alive.empty(), "exact_masked_inverse: no surviving coordinates");
  const Matrix inv = spd_inverse(submatrix(damped_fisher, alive));
  const Index n = damped_fisher.rows();
  Matrix out = Matrix::Zero(n, n);
  for (std::size_t i = 0; i < alive.size(); ++i)
    for (std::size_t j = 0; j < alive.size(); ++j) out(alive[i], alive[j]) = inv(Index(i), Index(j));
  return out;
}

inline Matrix exact_masked_inverse(const SpectralFisher& f, const Mask& mask) {
  return exact_masked_inverse(f.damped(), mask);
}

/// Gradient of the squared-error loss 1/(2m) sum (x_j^T w - y_j)^2 on a fresh
/// data minibatch, with pruned coordinates zeroed.
inline Vector sample_loss_gradient(const LinearTask& task, const Vector& w, const Mask& mask, Rng& rng) {
  const Matrix x = sample_inputs(task, task.batch_size, rng);
  Vector y = x * task.weights;
  if (task.noise > 0.0) y += task.noise * standard_normal(task.batch_size, rng);
  const Vector resid = x * w - y;
  return apply_mask(x.transpose() * resid / double(task.batch_size), mask);
}

/// Held-out evaluation data: 10 n examples drawn from the task distribution.
struct TestSet {
  Matrix x;
  Vector y;
};

inline TestSet make_test_set(const LinearTask& task) {
  Rng rng = make_rng(task.seed, 0x7e57);
  TestSet t;
  t.x = sample_inputs(task, 10 * task.dim(), rng);
  t.y = t.x * task.weights;
  if (task.noise > 0.0) t.y += task.noise * standard_normal(t.x.rows(), rng);
  return t;
}

inline double test_mse(const TestSet& t, const Vector& w) { return (t.x * w - t.y).squaredNorm() / double(t.x.rows()); }

}  // namespace fls
