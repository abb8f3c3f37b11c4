#include "fls/harness/snapshot.hpp"
#include "fls/q_param.hpp"

#include <gtest/gtest.h>

using namespace fls;

namespace {

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

Vector random_params(Index k, Rng& rng, double scale = 0.5) { return scale * standard_normal(k, rng); }

template <class Q>
Q randomized(Q q, Rng& rng) {
  q.set_params(q.params() + random_params(q.num_params(), rng, 0.3));
  return q;
}

// Dense image built column by column through qv.
template <class Q>
Matrix dense_by_qv(const Q& q) {
  Matrix out(q.dim(), q.dim());
  for (Index i = 0; i < q.dim(); ++i) out.col(i) = q.qv(basis_vector(q.dim(), i));
  return out;
}

// Oracle for D (L L^T (x) R R^T) D with row-major vec.
template <class Q>
Matrix kronecker_oracle(const Q& q) {
  const Matrix a = q.left() * q.left().transpose();
  const Matrix b = q.right() * q.right().transpose();
  const Matrix& dbar = q.scaling();
  const Vector d = Eigen::Map<const Vector>(dbar.data(), dbar.size());
  return d.asDiagonal() * kron(a, b) * d.asDiagonal();
}

template <class Q>
void check_fd_vjp(const Q& q0, Rng& rng, double tol) {
  Q q = q0;
  const Vector u = standard_normal(q.dim(), rng), r = standard_normal(q.dim(), rng);
  const Vector g = q.vjp(u, r);
  const Vector lambda = q.params();
  Vector fd(lambda.size());
  const double h = 1e-5;
  for (Index k = 0; k < lambda.size(); ++k) {
    Vector lp = lambda, lm = lambda;
    lp[k] += h;
    lm[k] -= h;
    q.set_params(lp);
    const double fp = r.dot(q.qv(u));
    q.set_params(lm);
    const double fm = r.dot(q.qv(u));
    fd[k] = (fp - fm) / (2 * h);
  }
  q.set_params(lambda);
  EXPECT_LT((g - fd).norm() / std::max(fd.norm(), 1e-12), tol);
}

template <class Q>
void check_invariants(const Q& q, Rng& rng) {
  const Index n = q.dim();
  for (int k = 0; k < 5; ++k) {
    const Vector u = standard_normal(n, rng), v = standard_normal(n, rng);
    EXPECT_NEAR(u.dot(q.qv(v)), v.dot(q.qv(u)), 1e-10 * (1 + std::abs(u.dot(q.qv(v)))));
    EXPECT_GT(v.dot(q.qv(v)), 0.0);
  }
  const Vector d = q.diag();
  for (Index i = 0; i < n; ++i) EXPECT_NEAR(d[i], q.qv(basis_vector(n, i))[i], 1e-10);
  EXPECT_LT((dense_by_qv(q) - q.dense()).cwiseAbs().maxCoeff(), 1e-10);
  // lossless round trip
  Q copy = q;
  copy.set_params(q.params());
  const Vector v = standard_normal(n, rng);
  EXPECT_EQ(copy.qv(v), q.qv(v));
}

}  // namespace

TEST(Softplus, MapAndInverse) {
  for (double x : {-30.0, -2.0, 0.0, 0.5, 3.0, 40.0}) {
    EXPECT_GT(softplus::map(x), 0.0);
    EXPECT_NEAR(softplus::inverse(softplus::map(x)), x, 1e-9 * std::max(1.0, std::abs(x)));
    const double h = 1e-6;
    EXPECT_NEAR(softplus::derivative(x), (softplus::map(x + h) - softplus::map(x - h)) / (2 * h), 1e-8);
  }
  EXPECT_THROW(softplus::inverse(0.0), std::invalid_argument);
}

TEST(QFull, DenseIsFactorProductAndSpd) {
  Rng rng = make_rng(1);
  const QFull q = randomized(QFull(7, 2.0), rng);
  EXPECT_LT((q.dense() - q.factor() * q.factor().transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(q.factor().diagonal().minCoeff(), 0.0);
  check_invariants(q, rng);
}

TEST(QFull, DiagOfTwoIdentityFactor) {
  const QFull q = QFull::from_factor(2.0 * Matrix::Identity(3, 3));
  EXPECT_LT((q.diag() - Vector::Constant(3, 4.0)).norm(), 1e-12);
}

TEST(QFull, FromDenseRoundTrip) {
  Rng rng = make_rng(2);
  const Matrix a = standard_normal(6, 6, rng);
  const Matrix spd = a * a.transpose() + Matrix::Identity(6, 6);
  EXPECT_LT((QFull::from_dense(spd).dense() - spd).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(QFull::from_dense(-spd), std::domain_error);
}

TEST(QFull, BatchedOpsMatchSingle) {
  Rng rng = make_rng(3);
  const QFull q = randomized(QFull(9, 1.5), rng);
  const Matrix u = standard_normal(9, 4, rng), r = standard_normal(9, 4, rng);
  const Matrix qu = q.qv_batch(u);
  Vector sum = Vector::Zero(q.num_params());
  for (Index k = 0; k < 4; ++k) {
    EXPECT_LT((qu.col(k) - q.qv(u.col(k))).norm(), 1e-12);
    sum += q.vjp(u.col(k), r.col(k));
  }
  EXPECT_LT((q.vjp_batch(u, r) - sum).norm(), 1e-10);
}

TEST(QDiagonal, MappedValuesAndInvariants) {
  const Vector vals = (Vector(4) << 0.5, 2.0, 3.0, 10.0).finished();
  const QDiagonal q = QDiagonal::from_values(vals);
  EXPECT_LT((q.diag() - vals).norm(), 1e-10);
  Rng rng = make_rng(4);
  const QDiagonal r = randomized(QDiagonal(30, 3.0), rng);
  EXPECT_GT(r.diag().minCoeff(), 0.0);
  check_invariants(r, rng);
  EXPECT_EQ(QDiagonal(100).num_params(), 100);
}

TEST(QDiagonal, VjpAtIdentityIsProportionalToUr) {
  const QDiagonal q(5, 1.0);
  const Vector u = (Vector(5) << 1, -2, 0.5, 3, 0).finished();
  const Vector r = (Vector(5) << 2, 1, -1, 0.5, 4).finished();
  const Vector g = q.vjp(u, r);
  const Vector ur = u.cwiseProduct(r);
  const double c = g[0] / ur[0];
  for (Index i = 0; i < 5; ++i) EXPECT_NEAR(g[i], c * ur[i], 1e-12);
  EXPECT_GT(c, 0.0);
}

TEST(QBlockDiagonal, StructureAndInvariants) {
  Rng rng = make_rng(5);
  const QBlockDiagonal q = randomized(QBlockDiagonal(11, 4, 2.0), rng);
  EXPECT_EQ(q.num_blocks(), 3);  // 4 + 4 + 3
  const Matrix d = q.dense();
  for (Index i = 0; i < 11; ++i)
    for (Index j = 0; j < 11; ++j)
      if (i / 4 != j / 4) EXPECT_EQ(d(i, j), 0.0);
  for (Index b = 0; b < 3; ++b) {
    const Index st = b * 4, len = std::min<Index>(4, 11 - st);
    Eigen::SelfAdjointEigenSolver<Matrix> es(d.block(st, st, len, len));
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  }
  check_invariants(q, rng);
}

TEST(Expressiveness, DiagonalInsideBlockInsideFull) {
  Rng rng = make_rng(6);
  const Vector vals = (standard_normal(8, rng).array().abs() + 0.1).matrix();
  const Matrix diag = QDiagonal::from_values(vals).dense();
  EXPECT_LT((QBlockDiagonal::from_dense(diag, 4).dense() - diag).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix blk = randomized(QBlockDiagonal(8, 4, 1.0), rng).dense();
  EXPECT_LT((QBlockDiagonal::from_dense(blk, 4).dense() - blk).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((QFull::from_dense(blk).dense() - blk).cwiseAbs().maxCoeff(), 1e-10);
  // a dense matrix with off-block coupling is not representable by blocks
  const Matrix full = blk + Matrix::Constant(8, 8, 0.01);
  EXPECT_GT((QBlockDiagonal::from_dense(full, 4).dense() - full).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(QKronecker, IdentityFactorsGiveIdentity) {
  const QKroneckerDense q(DenseLayer{3, 4, false}, 1.0);
  Rng rng = make_rng(7);
  const Vector v = standard_normal(12, rng);
  EXPECT_LT((q.qv(v) - v).norm(), 1e-12);
}

TEST(QKronecker, MatchesDenseOracle) {
  Rng rng = make_rng(8);
  const QKroneckerDense q = randomized(QKroneckerDense(DenseLayer{2, 2, false}, 1.0), rng);
  const Matrix oracle = kronecker_oracle(q);
  const Vector v = standard_normal(4, rng);
  EXPECT_LT((q.qv(v) - oracle * v).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((q.diag() - oracle.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
  check_invariants(q, rng);
}

TEST(QKronecker, ScalingDByCScalesByCSquared) {
  Rng rng = make_rng(9);
  QKroneckerDense q = randomized(QKroneckerDense(DenseLayer{3, 2, false}, 1.0), rng);
  const Vector v = standard_normal(6, rng);
  const Vector before = q.qv(v);
  // the last dim() parameters are softplus pre-images of D
  Vector lambda = q.params();
  const Index off = lambda.size() - q.dim();
  const double c = 1.7;
  for (Index k = 0; k < q.dim(); ++k) lambda[off + k] = softplus::inverse(c * softplus::map(lambda[off + k]));
  q.set_params(lambda);
  EXPECT_LT((q.qv(v) - c * c * before).norm(), 1e-10 * before.norm());
}

TEST(QKronecker, DiagExample) {
  QKroneckerDense q(DenseLayer{2, 2, false}, 1.0);
  Vector lambda = q.params();
  lambda[2] = 1.0;  // L = [[1,0],[1,1]]
  q.set_params(lambda);
  EXPECT_LT((q.diag() - (Vector(4) << 1, 1, 2, 2).finished()).norm(), 1e-12);
}

TEST(QKronecker, InitScaledIdentity) {
  const AnyQ any = init_scaled_identity(parse_q_spec("kron:3x4", 12), 2.0);
  const auto& q = std::get<QKroneckerDense>(any);
  EXPECT_LT((q.diag() - Vector::Constant(12, 2.0)).norm(), 1e-12);
  EXPECT_LT((q.dense() - 2.0 * Matrix::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QKronecker, ParameterCount) {
  EXPECT_EQ(QKroneckerDense(DenseLayer{5, 20, false}).num_params(), 25 + 400 + 100);
  EXPECT_EQ(QKroneckerDense(DenseLayer{5, 20, true}).num_params(), 25 + 441 + 105);
  EXPECT_EQ(QKroneckerConv(ConvLayer{2, 3, 3}).num_params(), 4 + 81 + 18);
}

TEST(QKronecker, ConvAndBiasVariants) {
  Rng rng = make_rng(10);
  const QKroneckerConv c = randomized(QKroneckerConv(ConvLayer{2, 2, 3}, 1.5), rng);
  EXPECT_EQ(c.dim(), 12);
  EXPECT_LT((c.dense() - kronecker_oracle(c)).cwiseAbs().maxCoeff(), 1e-10);
  check_invariants(c, rng);
  const QKroneckerDense b = randomized(QKroneckerDense(DenseLayer{3, 2, true}, 1.5), rng);
  EXPECT_EQ(b.dim(), 9);
  EXPECT_LT((b.dense() - kronecker_oracle(b)).cwiseAbs().maxCoeff(), 1e-10);
  check_invariants(b, rng);
}

TEST(QKronecker, RandomShapesMatchDense) {
  Rng rng = make_rng(11);
  std::uniform_int_distribution<Index> dim(1, 20);
  for (int trial = 0; trial < 50; ++trial) {
    Index no = dim(rng), ni = dim(rng);
    while (no * ni > 400) ni = dim(rng);
    const QKroneckerDense q = randomized(QKroneckerDense(DenseLayer{no, ni, false}, 1.0), rng);
    const Matrix oracle = kronecker_oracle(q);
    const Vector v = standard_normal(q.dim(), rng);
    const double scale = std::max(1.0, oracle.cwiseAbs().maxCoeff());
    EXPECT_LT((q.qv(v) - oracle * v).cwiseAbs().maxCoeff(), 1e-10 * scale * v.norm());
    EXPECT_LT((q.diag() - oracle.diagonal()).cwiseAbs().maxCoeff(), 1e-10 * scale);
  }
}

TEST(QVjp, FiniteDifferencesAllFamilies) {
  Rng rng = make_rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    check_fd_vjp(randomized(QFull(5, 1.3), rng), rng, 1e-6);
    check_fd_vjp(randomized(QDiagonal(6, 0.7), rng), rng, 1e-6);
    check_fd_vjp(randomized(QBlockDiagonal(7, 3, 1.1), rng), rng, 1e-6);
    check_fd_vjp(randomized(QKroneckerDense(DenseLayer{2, 3, false}, 1.0), rng), rng, 1e-6);
    check_fd_vjp(randomized(QKroneckerDense(DenseLayer{2, 2, true}, 1.0), rng), rng, 1e-6);
    check_fd_vjp(randomized(QKroneckerConv(ConvLayer{2, 2, 2}, 1.0), rng), rng, 1e-6);
  }
}

TEST(QVjp, ZeroUGivesZero) {
  Rng rng = make_rng(13);
  const QFull q = randomized(QFull(4, 1.0), rng);
  EXPECT_EQ(q.vjp(Vector::Zero(4), standard_normal(4, rng)).norm(), 0.0);
  const QKroneckerDense k = randomized(QKroneckerDense(DenseLayer{2, 2, false}, 1.0), rng);
  EXPECT_EQ(k.vjp(Vector::Zero(4), standard_normal(4, rng)).norm(), 0.0);
}

TEST(QParam, DimensionMismatchesThrow) {
  EXPECT_THROW(QFull(3).qv(Vector::Ones(4)), std::invalid_argument);
  EXPECT_THROW(QDiagonal(3).set_params(Vector::Ones(4)), std::invalid_argument);
  EXPECT_THROW(QKroneckerDense(DenseLayer{2, 2, false}).qv(Vector::Ones(3)), std::invalid_argument);
  EXPECT_THROW(QFull(3, 0.0), std::invalid_argument);
  EXPECT_THROW(init_scaled_identity(parse_q_spec("full", 3), -1.0), std::invalid_argument);
}

TEST(QParam, InitScaledIdentityAllKinds) {
  for (const char* s : {"full", "diagonal", "block:4", "kron:3x4", "kron-conv:2x2x3", "kron-bias:3x3"}) {
    const AnyQ q = init_scaled_identity(parse_q_spec(s, 12), 1000.0);
    std::visit([&](const auto& x) {
      EXPECT_LT((x.dense() - 1000.0 * Matrix::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-9) << s;
    }, q);
  }
  const AnyQ one = init_scaled_identity(parse_q_spec("full", 4), 1.0);
  EXPECT_LT((std::get<QFull>(one).dense() - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QSpec, ParseAndPrint) {
  for (const char* s : {"full", "diagonal", "block:5", "kron:5x20", "kron-bias:4x24", "kron-conv:5x4x5"})
    EXPECT_EQ(to_string(parse_q_spec(s, 100)), s);
  EXPECT_THROW(parse_q_spec("kron:5x5", 100), std::invalid_argument);
  EXPECT_THROW(parse_q_spec("lowrank:3", 100), std::invalid_argument);
}

TEST(Snapshot, JsonRoundTripIsBitExact) {
  Rng rng = make_rng(14);
  for (const char* s : {"full", "diagonal", "block:3", "kron:2x4"}) {
    const QSpec spec = parse_q_spec(s, 8);
    AnyQ q = init_scaled_identity(spec, 3.0);
    std::visit([&](auto& x) { x.set_params(x.params() + standard_normal(x.num_params(), rng)); }, q);
    const auto [spec2, q2] = harness::parse_snapshot(harness::snapshot_json(spec, q));
    EXPECT_EQ(to_string(spec2), s);
    const Vector v = standard_normal(8, rng);
    const Vector a = std::visit([&](const auto& x) { return Vector(x.qv(v)); }, q);
    const Vector b = std::visit([&](const auto& x) { return Vector(x.qv(v)); }, q2);
    EXPECT_EQ(a, b);
  }
}
