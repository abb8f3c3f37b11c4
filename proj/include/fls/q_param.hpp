#pragma once

// Structured positive-definite parameterizations Q(lambda) of the inverse
// damped Fisher. Every type exposes the same surface:
//
//   dim(), num_params(), params(), set_params(lambda)
//   qv(v)        Q v
//   diag()       diag(Q)
//   dense()      materialized Q (small n only; tests and oracles)
//   vjp(u, r)    d(r^T Q(lambda) u) / d lambda, as a flat vector
//
// Strict positivity (Cholesky diagonals, the diagonal scaling D) goes through
// softplus so that lambda itself is unconstrained.

#include "fls/core.hpp"

#include <concepts>
#include <sstream>
#include <string>
#include <variant>

namespace fls {

namespace softplus {

inline double map(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double derivative(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double inverse(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus::inverse: argument must be positive");
  return y + std::log(-std::expm1(-y));
}

}  // namespace softplus

inline constexpr Index kMaxDenseDim = 2048;

inline void check_dense_size(Index n) {
  if (n > kMaxDenseDim) throw std::length_error("dense(Q) is only available for n <= 2048");
}

template <class Q>
concept InverseFisherParam = requires(const Q& q, Q& mq, const Vector& v) {
  { q.dim() } -> std::convertible_to<Index>;
  { q.num_params() } -> std::convertible_to<Index>;
  { q.params() } -> std::convertible_to<const Vector&>;
  { q.qv(v) } -> std::convertible_to<Vector>;
  { q.diag() } -> std::convertible_to<Vector>;
  { q.dense() } -> std::convertible_to<Matrix>;
  { q.vjp(v, v) } -> std::convertible_to<Vector>;
  mq.set_params(v);
};

/// Q = L L^T with L lower triangular. Parameters are L's lower triangle in
/// row-major order; diagonal entries are stored as softplus pre-images.
class QFull {
public:
  explicit QFull(Index n = 1) : QFull(n, 1.0) {}

  QFull(Index n, double alpha) : n_(n) {
    require(n >= 1, "QFull: n must be >= 1");
    require(alpha > 0.0, "QFull: alpha must be positive");
    lambda_ = Vector::Zero(n * (n + 1) / 2);
    const double d = softplus::inverse(std::sqrt(alpha));
    for (Index i = 0; i < n; ++i) lambda_[offset(i, i)] = d;
    rebuild();
  }

  /// Exact representation of an SPD matrix through its Cholesky factor.
  static QFull from_dense(const Matrix& q) {
    require(q.rows() == q.cols(), "QFull::from_dense: matrix must be square");
    Eigen::LLT<Matrix> llt(symmetrized(q));
    if (llt.info() != Eigen::Success) throw std::domain_error("QFull::from_dense: matrix is not SPD");
    return from_factor(llt.matrixL());
  }

  static QFull from_factor(const Matrix& l) {
    QFull out(l.rows());
    for (Index i = 0; i < l.rows(); ++i) {
      for (Index j = 0; j < i; ++j) out.lambda_[offset(i, j)] = l(i, j);
      out.lambda_[offset(i, i)] = softplus::inverse(l(i, i));
    }
    out.rebuild();
    return out;
  }

  Index dim() const { return n_; }
  Index num_params() const { return lambda_.size(); }
  const Vector& params() const { return lambda_; }
  void set_params(const Vector& lambda) {
    require_dim(lambda.size(), num_params(), "QFull::set_params");
    lambda_ = lambda;
    rebuild();
  }

  const Matrix& factor() const { return l_; }

  Vector qv(const Vector& v) const {
    require_dim(v.size(), n_, "QFull::qv");
    const Vector t = l_.triangularView<Eigen::Lower>().transpose() * v;
    return l_.triangularView<Eigen::Lower>() * t;
  }

  Vector diag() const { return l_.rowwise().squaredNorm(); }

  Matrix dense() const {
    check_dense_size(n_);
    return l_ * l_.transpose();
  }

  /// Q applied to every column of `v`.
  Matrix qv_batch(const Matrix& v) const {
    require_dim(v.rows(), n_, "QFull::qv_batch");
    const Matrix t = l_.triangularView<Eigen::Lower>().transpose() * v;
    return l_.triangularView<Eigen::Lower>() * t;
  }

  /// Sum over columns k of vjp(u_k, r_k).
  Vector vjp_batch(const Matrix& u, const Matrix& r) const {
    require(u.rows() == n_ && r.rows() == n_ && u.cols() == r.cols(), "QFull::vjp_batch: shape mismatch");
    const Matrix a = l_.triangularView<Eigen::Lower>().transpose() * u;
    const Matrix b = l_.triangularView<Eigen::Lower>().transpose() * r;
    const Matrix g = r * a.transpose() + u * b.transpose();
    Vector out(num_params());
    for (Index i = 0; i < n_; ++i) {
      const Index row = i * (i + 1) / 2;
      for (Index j = 0; j < i; ++j) out[row + j] = g(i, j);
      out[row + i] = g(i, i) * softplus::derivative(lambda_[row + i]);
    }
    return out;
  }

  // r^T L L^T u: d/dL = r (L^T u)^T + u (L^T r)^T, restricted to the lower triangle.
  Vector vjp(const Vector& u, const Vector& r) const {
    require_dim(u.size(), n_, "QFull::vjp");
    require_dim(r.size(), n_, "QFull::vjp");
    const Vector a = l_.triangularView<Eigen::Lower>().transpose() * u;
    const Vector b = l_.triangularView<Eigen::Lower>().transpose() * r;
    Vector g(num_params());
    for (Index i = 0; i < n_; ++i) {
      const Index row = i * (i + 1) / 2;
      for (Index j = 0; j < i; ++j) g[row + j] = r[i] * a[j] + u[i] * b[j];
      g[row + i] = (r[i] * a[i] + u[i] * b[i]) * softplus::derivative(lambda_[row + i]);
    }
    return g;
  }

private:
  static Index offset(Index i, Index j) { return i * (i + 1) / 2 + j; }

  void rebuild() {
    l_ = Matrix::Zero(n_, n_);
    for (Index i = 0; i < n_; ++i) {
      for (Index j = 0; j < i; ++j) l_(i, j) = lambda_[offset(i, j)];
      l_(i, i) = softplus::map(lambda_[offset(i, i)]);
    }
  }

  Index n_;
  Vector lambda_;
  Matrix l_;
};

/// Q = diag(softplus(d)^2).
class QDiagonal {
public:
  explicit QDiagonal(Index n = 1, double alpha = 1.0) {
    require(n >= 1, "QDiagonal: n must be >= 1");
    require(alpha > 0.0, "QDiagonal: alpha must be positive");
    lambda_ = Vector::Constant(n, softplus::inverse(std::sqrt(alpha)));
    rebuild();
  }

  static QDiagonal from_values(const Vector& q) {
    QDiagonal out(q.size());
    for (Index i = 0; i < q.size(); ++i) out.lambda_[i] = softplus::inverse(std::sqrt(q[i]));
    out.rebuild();
    return out;
  }

  Index dim() const { return lambda_.size(); }
  Index num_params() const { return lambda_.size(); }
  const Vector& params() const { return lambda_; }
  void set_params(const Vector& lambda) {
    require_dim(lambda.size(), num_params(), "QDiagonal::set_params");
    lambda_ = lambda;
    rebuild();
  }

  Vector qv(const Vector& v) const {
    require_dim(v.size(), dim(), "QDiagonal::qv");
    return values_.cwiseProduct(v);
  }
  Vector diag() const { return values_; }
  Matrix dense() const {
    check_dense_size(dim());
    return values_.asDiagonal();
  }
  Vector vjp(const Vector& u, const Vector& r) const {
    require_dim(u.size(), dim(), "QDiagonal::vjp");
    require_dim(r.size(), dim(), "QDiagonal::vjp");
    Vector g(dim());
    for (Index i = 0; i < dim(); ++i) {
      const double s = softplus::map(lambda_[i]);
      g[i] = u[i] * r[i] * 2.0 * s * softplus::derivative(lambda_[i]);
    }
    return g;
  }

private:
  void rebuild() {
    values_.resize(lambda_.size());
    for (Index i = 0; i < lambda_.size(); ++i) {
      const double s = softplus::map(lambda_[i]);
      values_[i] = s * s;
    }
  }

  Vector lambda_;
  Vector values_;
};

/// Block-diagonal Q with one Cholesky-parameterized block per consecutive run
/// of b coordinates (the trailing block may be shorter).
class QBlockDiagonal {
public:
  explicit QBlockDiagonal(Index n = 1, Index block = 1, double alpha = 1.0) : n_(n), block_(block) {
    require(n >= 1 && block >= 1, "QBlockDiagonal: n and block size must be >= 1");
    for (Index start = 0; start < n; start += block) blocks_.emplace_back(std::min(block, n - start), alpha);
    gather();
  }

  /// Exact representation of a block-diagonal SPD matrix (off-block entries ignored).
  static QBlockDiagonal from_dense(const Matrix& q, Index block) {
    QBlockDiagonal out(q.rows(), block);
    Index start = 0;
    for (auto& b : out.blocks_) {
      b = QFull::from_dense(q.block(start, start, b.dim(), b.dim()));
      start += b.dim();
    }
    out.gather();
    return out;
  }

  Index dim() const { return n_; }
  Index block_size() const { return block_; }
  Index num_blocks() const { return static_cast<Index>(blocks_.size()); }
  Index num_params() const { return lambda_.size(); }
  const Vector& params() const { return lambda_; }
  void set_params(const Vector& lambda) {
    require_dim(lambda.size(), num_params(), "QBlockDiagonal::set_params");
    Index p = 0;
    for (auto& b : blocks_) {
      b.set_params(lambda.segment(p, b.num_params()));
      p += b.num_params();
    }
    lambda_ = lambda;
  }

  Vector qv(const Vector& v) const {
    require_dim(v.size(), n_, "QBlockDiagonal::qv");
    Vector out(n_);
    Index start = 0;
    for (const auto& b : blocks_) {
      out.segment(start, b.dim()) = b.qv(v.segment(start, b.dim()));
      start += b.dim();
    }
    return out;
  }

  Vector diag() const {
    Vector out(n_);
    Index start = 0;
    for (const auto& b : blocks_) {
      out.segment(start, b.dim()) = b.diag();
      start += b.dim();
    }
    return out;
  }

  Matrix dense() const {
    check_dense_size(n_);
    Matrix out = Matrix::Zero(n_, n_);
    Index start = 0;
    for (const auto& b : blocks_) {
      out.block(start, start, b.dim(), b.dim()) = b.dense();
      start += b.dim();
    }
    return out;
  }

  Vector vjp(const Vector& u, const Vector& r) const {
    require_dim(u.size(), n_, "QBlockDiagonal::vjp");
    require_dim(r.size(), n_, "QBlockDiagonal::vjp");
    Vector g(num_params());
    Index start = 0, p = 0;
    for (const auto& b : blocks_) {
      g.segment(p, b.num_params()) = b.vjp(u.segment(start, b.dim()), r.segment(start, b.dim()));
      start += b.dim();
      p += b.num_params();
    }
    return g;
  }

private:
  void gather() {
    Index total = 0;
    for (const auto& b : blocks_) total += b.num_params();
    lambda_.resize(total);
    Index p = 0;
    for (const auto& b : blocks_) {
      lambda_.segment(p, b.num_params()) = b.params();
      p += b.num_params();
    }
  }

  Index n_;
  Index block_;
  std::vector<QFull> blocks_;
  Vector lambda_;
};

/// Dense layer: weights form an n_out x (n_in [+1 bias]) matrix.
struct DenseLayer {
  Index n_out = 1;
  Index n_in = 1;
  bool bias = false;
  Index rows() const { return n_out; }
  Index cols() const { return n_in + (bias ? 1 : 0); }
};

/// Convolution: input channels and kernel positions share the right factor.
struct ConvLayer {
  Index n_out = 1;
  Index n_in = 1;
  Index kernel = 1;
  Index rows() const { return n_out; }
  Index cols() const { return n_in * kernel; }
};

/// Q = D (L L^T kron R R^T) D, with vec() taken row-wise over the
/// rows() x cols() weight matrix. Parameters: L (row-major), R (row-major),
/// then the softplus pre-images of diag(D) laid out as the matrix D-bar.
template <class Layout>
class KroneckerQ {
public:
  KroneckerQ() : KroneckerQ(Layout{}, 1.0) {}

  explicit KroneckerQ(Layout layout, double alpha = 1.0) : layout_(layout) {
    require(rows() >= 1 && cols() >= 1, "KroneckerQ: empty layer");
    require(alpha > 0.0, "KroneckerQ: alpha must be positive");
    lambda_ = Vector::Zero(num_params());
    Eigen::Map<Matrix>(lambda_.data(), rows(), rows()).setIdentity();
    Eigen::Map<Matrix>(lambda_.data() + rows() * rows(), cols(), cols()).setIdentity();
    lambda_.tail(dim()).setConstant(softplus::inverse(std::sqrt(alpha)));
    rebuild();
  }

  const Layout& layout() const { return layout_; }
  Index rows() const { return layout_.rows(); }
  Index cols() const { return layout_.cols(); }
  Index dim() const { return rows() * cols(); }
  Index num_params() const { return rows() * rows() + cols() * cols() + dim(); }
  const Vector& params() const { return lambda_; }
  void set_params(const Vector& lambda) {
    require_dim(lambda.size(), num_params(), "KroneckerQ::set_params");
    lambda_ = lambda;
    rebuild();
  }

  const Matrix& left() const { return l_; }
  const Matrix& right() const { return r_; }
  /// diag(D) reshaped to rows() x cols().
  const Matrix& scaling() const { return dbar_; }

  Vector qv(const Vector& v) const {
    require_dim(v.size(), dim(), "KroneckerQ::qv");
    const Matrix w = as_matrix(v).cwiseProduct(dbar_);
    const Matrix out = (a_ * w * b_).cwiseProduct(dbar_);
    return flatten(out);
  }

  Vector diag() const {
    const Vector da = l_.rowwise().squaredNorm();
    const Vector db = r_.rowwise().squaredNorm();
    const Matrix out = (da * db.transpose()).cwiseProduct(dbar_.cwiseAbs2());
    return flatten(out);
  }

  Matrix dense() const {
    check_dense_size(dim());
    Matrix k(dim(), dim());
    for (Index i = 0; i < rows(); ++i)
      for (Index j = 0; j < rows(); ++j) k.block(i * cols(), j * cols(), cols(), cols()) = a_(i, j) * b_;
    const Vector d = flatten(dbar_);
    return d.asDiagonal() * k * d.asDiagonal();
  }

  Vector vjp(const Vector& u, const Vector& r) const {
    require_dim(u.size(), dim(), "KroneckerQ::vjp");
    require_dim(r.size(), dim(), "KroneckerQ::vjp");
    const Matrix vu = as_matrix(u);
    const Matrix vr = as_matrix(r);
    const Matrix mu = vu.cwiseProduct(dbar_);
    const Matrix mr = vr.cwiseProduct(dbar_);
    // f = <mr, A mu B>
    const Matrix ga = mr * b_ * mu.transpose();
    const Matrix gb = mu.transpose() * a_ * mr;
    const Matrix gl = (ga + ga.transpose()) * l_;
    const Matrix gr = (gb + gb.transpose()) * r_;
    Matrix gd = (a_ * mr * b_).cwiseProduct(vu) + (a_ * mu * b_).cwiseProduct(vr);
    const double* raw = lambda_.data() + rows() * rows() + cols() * cols();
    for (Index i = 0; i < rows(); ++i)
      for (Index j = 0; j < cols(); ++j) gd(i, j) *= softplus::derivative(raw[i * cols() + j]);

    Vector g(num_params());
    Eigen::Map<Matrix>(g.data(), rows(), rows()) = gl;
    Eigen::Map<Matrix>(g.data() + rows() * rows(), cols(), cols()) = gr;
    Eigen::Map<Matrix>(g.data() + rows() * rows() + cols() * cols(), rows(), cols()) = gd;
    return g;
  }

private:
  Matrix as_matrix(const Vector& v) const { return Eigen::Map<const Matrix>(v.data(), rows(), cols()); }
  static Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

  void rebuild() {
    l_ = Eigen::Map<const Matrix>(lambda_.data(), rows(), rows());
    r_ = Eigen::Map<const Matrix>(lambda_.data() + rows() * rows(), cols(), cols());
    dbar_.resize(rows(), cols());
    const double* raw = lambda_.data() + rows() * rows() + cols() * cols();
    for (Index i = 0; i < dim(); ++i) dbar_.data()[i] = softplus::map(raw[i]);
    a_ = l_ * l_.transpose();
    b_ = r_ * r_.transpose();
  }

  Layout layout_;
  Vector lambda_;
  Matrix l_, r_, dbar_, a_, b_;
};

using QKroneckerDense = KroneckerQ<DenseLayer>;
using QKroneckerConv = KroneckerQ<ConvLayer>;

static_assert(InverseFisherParam<QFull>);
static_assert(InverseFisherParam<QDiagonal>);
static_assert(InverseFisherParam<QBlockDiagonal>);
static_assert(InverseFisherParam<QKroneckerDense>);
static_assert(InverseFisherParam<QKroneckerConv>);

// Operation-style free functions.

template <InverseFisherParam Q>
Vector qv(const Q& q, const Vector& v) {
  return q.qv(v);
}

template <InverseFisherParam Q>
Vector q_diag(const Q& q) {
  return q.diag();
}

template <InverseFisherParam Q>
Vector flat_params(const Q& q) {
  return q.params();
}

template <InverseFisherParam Q>
void set_flat_params(Q& q, const Vector& lambda) {
  q.set_params(lambda);
}

template <InverseFisherParam Q>
Vector qv_vjp(const Q& q, const Vector& u, const Vector& r) {
  return q.vjp(u, r);
}

// Runtime selection.

using AnyQ = std::variant<QFull, QDiagonal, QBlockDiagonal, QKroneckerDense, QKroneckerConv>;

enum class QKind { Full, Diagonal, Block, KroneckerDense, KroneckerConv };

struct QSpec {
  QKind kind = QKind::Full;
  Index n = 1;  // total dimension
  Index block = 1;
  Index n_out = 1, n_in = 1, kernel = 1;
  bool bias = false;
};

/// "full" | "diagonal" | "block:<b>" | "kron:<n_out>x<n_in>" |
/// "kron-bias:<n_out>x<n_in>" | "kron-conv:<n_out>x<n_in>x<K>".
inline QSpec parse_q_spec(const std::string& text, Index n) {
  QSpec s;
  s.n = n;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto dims = [&](int count) {
    std::vector<Index> out;
    std::stringstream in(arg);
    std::string tok;
    while (std::getline(in, tok, 'x')) out.push_back(std::stol(tok));
    require(static_cast<int>(out.size()) == count, "q spec: malformed dimensions in '" + text + "'");
    return out;
  };
  if (kind == "full") {
    s.kind = QKind::Full;
  } else if (kind == "diagonal") {
    s.kind = QKind::Diagonal;
  } else if (kind == "block") {
    s.kind = QKind::Block;
    s.block = std::stol(arg);
  } else if (kind == "kron" || kind == "kron-bias") {
    s.kind = QKind::KroneckerDense;
    const auto d = dims(2);
    s.n_out = d[0];
    s.n_in = d[1];
    s.bias = kind == "kron-bias";
    require(s.n_out * (s.n_in + (s.bias ? 1 : 0)) == n, "q spec: Kronecker shape does not match n");
  } else if (kind == "kron-conv") {
    s.kind = QKind::KroneckerConv;
    const auto d = dims(3);
    s.n_out = d[0];
    s.n_in = d[1];
    s.kernel = d[2];
    require(s.n_out * s.n_in * s.kernel == n, "q spec: Kronecker shape does not match n");
  } else {
    throw std::invalid_argument("q spec: unknown kind '" + kind + "'");
  }
  return s;
}

inline std::string to_string(const QSpec& s) {
  switch (s.kind) {
    case QKind::Full: return "full";
    case QKind::Diagonal: return "diagonal";
    case QKind::Block: return "block:" + std::to_string(s.block);
    case QKind::KroneckerDense:
      return std::string(s.bias ? "kron-bias:" : "kron:") + std::to_string(s.n_out) + "x" + std::to_string(s.n_in);
    case QKind::KroneckerConv:
      return "kron-conv:" + std::to_string(s.n_out) + "x" + std::to_string(s.n_in) + "x" + std::to_string(s.kernel);
  }
  return "?";
}

/// Q with dense(Q) = alpha I. The Kronecker forms use L = I, R = I,
/// D = sqrt(alpha) I.
inline AnyQ init_scaled_identity(const QSpec& s, double alpha) {
  require(alpha > 0.0, "init_scaled_identity: alpha must be positive");
  switch (s.kind) {
    case QKind::Full: return QFull(s.n, alpha);
    case QKind::Diagonal: return QDiagonal(s.n, alpha);
    case QKind::Block: return QBlockDiagonal(s.n, s.block, alpha);
    case QKind::KroneckerDense: return QKroneckerDense(DenseLayer{s.n_out, s.n_in, s.bias}, alpha);
    case QKind::KroneckerConv: return QKroneckerConv(ConvLayer{s.n_out, s.n_in, s.kernel}, alpha);
  }
  throw std::invalid_argument("init_scaled_identity: unknown kind");
}

}  // namespace fls
