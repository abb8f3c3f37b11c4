#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fls {

// Dense storage is row-major so that vec(V) of an n_o x n_i block is a no-copy
// reshape of the flat weight vector.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

/// Thrown when an iterative estimate blows up (see the divergence guard in the
/// auxiliary estimator).
class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_dim(Index got, Index want, const char* where) {
  if (got != want) {
    throw std::invalid_argument(std::string(where) + ": dimension mismatch (got " +
                                std::to_string(got) + ", expected " + std::to_string(want) + ")");
  }
}

/// SplitMix64 finalizer. Used to derive independent child streams from a
/// (seed, stream) pair so that every sampling op is a pure function of its seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) { return Rng(mix_seed(seed, stream)); }

inline Vector standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Vector basis_vector(Index n, Index i) {
  Vector e = Vector::Zero(n);
  e[i] = 1.0;
  return e;
}

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Binary prune mask; true = alive.
class Mask {
public:
  Mask() = default;
  explicit Mask(Index n, bool alive = true) : alive_(static_cast<std::size_t>(n), alive) {}

  Index size() const { return static_cast<Index>(alive_.size()); }
  bool alive(Index i) const { return alive_[static_cast<std::size_t>(i)]; }
  void prune(Index i) { alive_[static_cast<std::size_t>(i)] = false; }
  void set(Index i, bool a) { alive_[static_cast<std::size_t>(i)] = a; }

  Index alive_count() const {
    Index c = 0;
    for (bool a : alive_) c += a ? 1 : 0;
    return c;
  }
  Index zero_count() const { return size() - alive_count(); }
  double sparsity() const { return size() == 0 ? 0.0 : double(zero_count()) / double(size()); }

  std::vector<Index> alive_indices() const {
    std::vector<Index> out;
    for (Index i = 0; i < size(); ++i)
      if (alive(i)) out.push_back(i);
    return out;
  }

  /// 1.0 on alive coordinates, 0.0 elsewhere.
  Vector as_vector() const {
    Vector v(size());
    for (Index i = 0; i < size(); ++i) v[i] = alive(i) ? 1.0 : 0.0;
    return v;
  }

  bool all_alive() const { return alive_count() == size(); }

  friend bool operator==(const Mask&, const Mask&) = default;

private:
  std::vector<bool> alive_;
};

inline Vector apply_mask(const Vector& v, const Mask& mask) {
  require_dim(v.size(), mask.size(), "apply_mask");
  Vector out = v;
  for (Index i = 0; i < v.size(); ++i)
    if (!mask.alive(i)) out[i] = 0.0;
  return out;
}

inline Matrix submatrix(const Matrix& a, const std::vector<Index>& idx) {
  const Index k = static_cast<Index>(idx.size());
  Matrix out(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) out(i, j) = a(idx[i], idx[j]);
  return out;
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
inline Matrix spd_inverse(const Matrix& a) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw std::domain_error("spd_inverse: matrix is not positive definite");
  Matrix inv = llt.solve(Matrix::Identity(a.rows(), a.cols()));
  return symmetrized(inv);
}

}  // namespace fls
