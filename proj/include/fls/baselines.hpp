#pragma once

// Comparison estimators and curvature providers.

#include "fls/pruner.hpp"
#include "fls/spd_metrics.hpp"

#include <utility>

namespace fls {

/// |w_i| on alive coordinates, +inf on pruned ones.
inline Vector magnitude_scores(const ModelState& s) {
  Vector out(s.dim());
  for (Index i = 0; i < s.dim(); ++i) out[i] = s.mask.alive(i) ? std::abs(s.w[i]) : kPrunedScore;
  return out;
}

/// (1/m) G^T G + gamma I for one batch.
inline Matrix damped_empirical_fisher(const GradientBatch& b) {
  Matrix f = b.g.transpose() * b.g / double(b.size());
  f.diagonal().array() += b.gamma;
  return symmetrized(f);
}

/// Running average of per-batch inverses ((1/m) G^T G + gamma I)^{-1}.
class EstimateInvertAverage {
public:
  explicit EstimateInvertAverage(Index n) : avg_(Matrix::Zero(n, n)) {}

  void add(const GradientBatch& b) {
    require_dim(b.dim(), avg_.rows(), "EstimateInvertAverage::add");
    ++count_;
    avg_ += (spd_inverse(damped_empirical_fisher(b)) - avg_) / double(count_);
  }

  Index count() const { return count_; }
  const Matrix& average() const { return avg_; }

private:
  Matrix avg_;
  Index count_ = 0;
};

/// Final average over all batches; `snapshots`, if given, receives the running
/// average after each batch.
inline Matrix naive_est_inv_avg(const std::vector<GradientBatch>& batches, double gamma,
                                std::vector<Matrix>* snapshots = nullptr) {
  require(!batches.empty(), "naive_est_inv_avg: no batches");
  EstimateInvertAverage acc(batches.front().dim());
  for (const auto& b : batches) {
    require(b.gamma == gamma, "naive_est_inv_avg: batch damping differs from gamma");
    acc.add(b);
    if (snapshots) snapshots->push_back(acc.average());
  }
  return acc.average();
}

/// Per-block inverses of gamma I + (1/N) sum_j g_B g_B^T maintained by
/// Sherman-Morrison updates. N is fixed at construction (the number of
/// gradients the caller intends to feed); after exactly N updates each block is
/// the inverse of the damped per-block empirical Fisher.
class WoodburyBlockInverse {
public:
  WoodburyBlockInverse(Index n, Index block, double gamma, Index normalization)
      : n_(n), block_(block), gamma_(gamma), norm_(normalization) {
    require(n >= 1 && block >= 1, "WoodburyBlockInverse: n and block size must be >= 1");
    require(gamma > 0.0, "WoodburyBlockInverse: damping must be positive");
    require(normalization >= 1, "WoodburyBlockInverse: normalization must be >= 1");
    for (Index s = 0; s < n; s += block) {
      const Index b = std::min(block, n - s);
      blocks_.push_back(Matrix::Identity(b, b) / gamma);
    }
  }

  Index dim() const { return n_; }
  Index block_size() const { return block_; }
  Index num_blocks() const { return Index(blocks_.size()); }
  double damping() const { return gamma_; }
  Index normalization() const { return norm_; }
  Index consumed() const { return consumed_; }
  const Matrix& block(Index k) const { return blocks_[std::size_t(k)]; }

  void update(const Vector& g) {
    require_dim(g.size(), n_, "woodbury_update");
    work_.resize(block_);
    Index s = 0;
    for (auto& h : blocks_) {
      const Index b = h.rows();
      const auto gb = g.segment(s, b);
      auto hg = work_.head(b);
      hg.noalias() = h * gb;
      const double denom = double(norm_) + gb.dot(hg);
      if (!(denom > 0.0)) throw std::domain_error("woodbury_update: nonpositive denominator");
      hg /= std::sqrt(denom);  // a a^T is bitwise symmetric
      h.noalias() -= hg * hg.transpose();
      s += b;
    }
    ++consumed_;
  }

  Vector qv(const Vector& v) const {
    require_dim(v.size(), n_, "WoodburyBlockInverse::qv");
    Vector out(n_);
    Index s = 0;
    for (const auto& h : blocks_) {
      out.segment(s, h.rows()) = h * v.segment(s, h.rows());
      s += h.rows();
    }
    return out;
  }

  Vector diag() const {
    Vector out(n_);
    Index s = 0;
    for (const auto& h : blocks_) {
      out.segment(s, h.rows()) = h.diagonal();
      s += h.rows();
    }
    return out;
  }

  Matrix dense() const {
    Matrix out = Matrix::Zero(n_, n_);
    Index s = 0;
    for (const auto& h : blocks_) {
      out.block(s, s, h.rows(), h.cols()) = h;
      s += h.rows();
    }
    return out;
  }

private:
  Index n_, block_;
  double gamma_;
  Index norm_;
  std::vector<Matrix> blocks_;
  Index consumed_ = 0;
  Vector work_;
};

inline WoodburyBlockInverse& woodbury_update(WoodburyBlockInverse& w, const Vector& g) {
  w.update(g);
  return w;
}

/// Nearest Kronecker product A (p x p) kron B (q x q) to F in Frobenius norm,
/// via the leading singular triple of the rearranged matrix. The scale is
/// split so that |A|_F = |B|_F, with the sign chosen so that tr(A) >= 0.
inline std::pair<Matrix, Matrix> nearest_kronecker(const Matrix& f, Index p, Index q) {
  require(f.rows() == p * q && f.cols() == p * q, "nearest_kronecker: shape mismatch");
  Matrix r(p * p, q * q);
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j < p; ++j) {
      const Matrix blk = f.block(i * q, j * q, q, q);
      r.row(i * p + j) = Eigen::Map<const Vector>(blk.data(), q * q).transpose();
    }
  // Leading singular pair through the smaller Gram matrix.
  Vector a_vec, b_vec;
  if (r.rows() <= r.cols()) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(r * r.transpose());
    const Index top = r.rows() - 1;
    const double sigma = std::sqrt(std::max(es.eigenvalues()[top], 0.0));
    a_vec = es.eigenvectors().col(top);
    b_vec = sigma > 0.0 ? Vector(r.transpose() * a_vec / sigma) : Vector::Zero(r.cols());
    a_vec *= std::sqrt(sigma);
    b_vec *= std::sqrt(sigma);
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> es(r.transpose() * r);
    const Index top = r.cols() - 1;
    const double sigma = std::sqrt(std::max(es.eigenvalues()[top], 0.0));
    b_vec = es.eigenvectors().col(top);
    a_vec = sigma > 0.0 ? Vector(r * b_vec / sigma) : Vector::Zero(r.rows());
    a_vec *= std::sqrt(sigma);
    b_vec *= std::sqrt(sigma);
  }
  Matrix a = Eigen::Map<const Matrix>(a_vec.data(), p, p);
  Matrix b = Eigen::Map<const Matrix>(b_vec.data(), q, q);
  if (a.trace() < 0.0) {
    a = -a;
    b = -b;
  }
  return {a, b};
}

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// Structure for approximate-then-invert estimation.
struct Structure {
  enum class Kind { Diagonal, Block, Kronecker } kind = Kind::Diagonal;
  Index block = 1;
  Index n_out = 1, n_in = 1;

  static Structure diagonal() { return {Kind::Diagonal, 1, 1, 1}; }
  static Structure blocks(Index b) { return {Kind::Block, b, 1, 1}; }
  static Structure kron(Index n_out, Index n_in) { return {Kind::Kronecker, 1, n_out, n_in}; }
};

/// Streaming structured estimate of F followed by damped inversion:
/// diagonal and block structures average the raw empirical Fisher entries;
/// the Kronecker structure averages the per-batch nearest Kronecker factors
/// separately and adds sqrt(gamma) I to each before inverting.
class ApproxThenInvert {
public:
  ApproxThenInvert(Index n, Structure s, double gamma) : n_(n), s_(s), gamma_(gamma) {
    require(gamma > 0.0, "approx_then_invert: damping must be positive");
    switch (s.kind) {
      case Structure::Kind::Diagonal: diag_ = Vector::Zero(n); break;
      case Structure::Kind::Block:
        require(s.block >= 1, "approx_then_invert: block size must be >= 1");
        for (Index st = 0; st < n; st += s.block) {
          const Index b = std::min(s.block, n - st);
          blocks_.push_back(Matrix::Zero(b, b));
        }
        break;
      case Structure::Kind::Kronecker:
        require(s.n_out * s.n_in == n, "approx_then_invert: Kronecker shape does not match n");
        a_ = Matrix::Zero(s.n_out, s.n_out);
        b_ = Matrix::Zero(s.n_in, s.n_in);
        break;
    }
  }

  Index count() const { return count_; }

  void add(const GradientBatch& batch) {
    require_dim(batch.dim(), n_, "approx_then_invert");
    ++count_;
    const double w = 1.0 / double(count_);
    const double m = double(batch.size());
    switch (s_.kind) {
      case Structure::Kind::Diagonal:
        diag_ += w * (batch.g.colwise().squaredNorm().transpose() / m - diag_);
        break;
      case Structure::Kind::Block: {
        Index st = 0;
        for (auto& blk : blocks_) {
          const Index b = blk.rows();
          const Matrix gb = batch.g.middleCols(st, b);
          blk += w * (gb.transpose() * gb / m - blk);
          st += b;
        }
        break;
      }
      case Structure::Kind::Kronecker: {
        const Matrix f = batch.g.transpose() * batch.g / m;
        auto [a, b] = nearest_kronecker(f, s_.n_out, s_.n_in);
        a_ += w * (symmetrized(a) - a_);
        b_ += w * (symmetrized(b) - b_);
        break;
      }
    }
  }

  /// Dense n x n structured inverse.
  Matrix inverse() const {
    require(count_ > 0, "approx_then_invert: no batches consumed");
    switch (s_.kind) {
      case Structure::Kind::Diagonal: return Matrix((diag_.array() + gamma_).inverse().matrix().asDiagonal());
      case Structure::Kind::Block: {
        Matrix out = Matrix::Zero(n_, n_);
        Index st = 0;
        for (const auto& blk : blocks_) {
          const Index b = blk.rows();
          out.block(st, st, b, b) = spd_inverse(blk + gamma_ * Matrix::Identity(b, b));
          st += b;
        }
        return out;
      }
      case Structure::Kind::Kronecker: {
        const double r = std::sqrt(gamma_);
        const Matrix ai = spd_inverse(a_ + r * Matrix::Identity(a_.rows(), a_.rows()));
        const Matrix bi = spd_inverse(b_ + r * Matrix::Identity(b_.rows(), b_.rows()));
        return kronecker(ai, bi);
      }
    }
    return {};
  }

private:
  Index n_;
  Structure s_;
  double gamma_;
  Index count_ = 0;
  Vector diag_;
  std::vector<Matrix> blocks_;
  Matrix a_, b_;
};

inline Matrix approx_then_invert(const std::vector<GradientBatch>& batches, Structure s, double gamma) {
  require(!batches.empty(), "approx_then_invert: no batches");
  ApproxThenInvert acc(batches.front().dim(), s, gamma);
  for (const auto& b : batches) acc.add(b);
  return acc.inverse();
}

// Curvature providers for the prune loop.

/// Pure zeroing: identity curvature, so OBS ranks by |w| and leaves alive
/// weights untouched.
class MagnitudeCurvature {
public:
  explicit MagnitudeCurvature(Index n) : op_(n) {}
  void prepare(const ModelState&) {}
  void on_pruned(const ModelState&) {}
  void fine_tune_tick(const ModelState&) {}
  double aux_metric() const { return std::numeric_limits<double>::quiet_NaN(); }
  const IdentityOperator& op() const { return op_; }

private:
  IdentityOperator op_;
};

/// Exact inverse of the masked damped Fisher, recomputed before every prune.
class ExactOracleCurvature {
public:
  explicit ExactOracleCurvature(const SpectralFisher& f) : damped_(f.damped()) {
    op_ = DenseOperator(spd_inverse(damped_));
  }
  void prepare(const ModelState& s) { op_ = DenseOperator(exact_masked_inverse(damped_, s.mask)); }
  void on_pruned(const ModelState& s) { prepare(s); }
  void fine_tune_tick(const ModelState&) {}
  double aux_metric() const { return 0.0; }
  const DenseOperator& op() const { return op_; }

private:
  Matrix damped_;
  DenseOperator op_;
};

/// Woodbury block inverse rebuilt from `gradients` fresh masked per-example
/// gradients before every prune. With block == n and a small gradient count
/// this is the global rank-m damped estimator.
class WoodburyCurvature {
public:
  WoodburyCurvature(const LinearTask& task, Index block, Index gradients, std::uint64_t seed)
      : task_(task), block_(block), grads_(gradients), rng_(make_rng(seed, 0x00b3)),
        w_(task.dim(), block, task.damping(), gradients) {
    task_.batch_size = gradients;
  }

  void prepare(const ModelState& s) {
    const GradientBatch batch = sample_gradient_batch(task_, rng_);
    const auto t0 = std::chrono::steady_clock::now();
    w_ = WoodburyBlockInverse(task_.dim(), block_, task_.damping(), grads_);
    for (Index j = 0; j < batch.size(); ++j) w_.update(apply_mask(batch.g.row(j).transpose(), s.mask));
    update_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  /// Time spent in the recursion of the last prepare(), excluding gradient sampling.
  double last_update_ms() const { return update_ms_; }
  void on_pruned(const ModelState&) {}
  void fine_tune_tick(const ModelState&) {}
  double aux_metric() const { return std::numeric_limits<double>::quiet_NaN(); }
  const WoodburyBlockInverse& op() const { return w_; }

private:
  LinearTask task_;
  Index block_, grads_;
  Rng rng_;
  WoodburyBlockInverse w_;
  double update_ms_ = 0.0;
};

static_assert(CurvatureProvider<MagnitudeCurvature>);
static_assert(CurvatureProvider<ExactOracleCurvature>);
static_assert(CurvatureProvider<WoodburyCurvature>);
static_assert(CurvatureProvider<FlsCurvature<QFull>>);

/// Prune loop driven by the exact masked inverse at every step.
inline std::vector<PruneRecord> exact_fls_oracle_prune(const LinearTask& task, const GradualConfig& cfg,
                                                       std::uint64_t seed = 0) {
  ModelState s = ModelState::dense(task.weights, &task);
  ExactOracleCurvature oracle(task.fisher());
  Rng rng = make_rng(seed, 0xf17e);
  return run_prune_loop(s, oracle, cfg, make_test_set(task), rng);
}

}  // namespace fls
