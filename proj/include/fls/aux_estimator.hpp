#pragma once

// Auxiliary-loss estimation of Q(lambda) ~ F_gamma^{-1}.
//
// For a probe u the per-sample loss is
//   A(u) = (1/|u|^2) (1/2 u^T Q F_gamma Q u - u^T Q u),
// minimized over lambda by stochastic first-order steps. The convergence
// metric drops the 1/2 so that it vanishes exactly at Q = F_gamma^{-1}.

#include "fls/q_param.hpp"
#include "fls/synthetic_fisher.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <ostream>

namespace fls {

// Fisher-vector product sources.

template <class S>
concept FvpSource = requires(S& s, const S& cs, const Vector& v, Rng& rng) {
  { cs.dim() } -> std::convertible_to<Index>;
  { cs.apply(v) } -> std::convertible_to<Vector>;
  { cs.exact(v) } -> std::convertible_to<Vector>;
  { cs.stochastic() } -> std::convertible_to<bool>;
  s.advance(rng);
};

/// Exact (optionally masked) damped Fisher products of a SpectralFisher.
class ExactFvp {
public:
  explicit ExactFvp(const SpectralFisher& f, std::optional<Mask> mask = std::nullopt)
      : f_(&f), mask_(std::move(mask)) {}

  Index dim() const { return f_->dim(); }
  bool stochastic() const { return false; }
  void advance(Rng&) {}
  Vector apply(const Vector& v) const { return exact(v); }
  Vector exact(const Vector& v) const {
    return mask_ ? fisher_vector_product(*f_, v, *mask_) : fisher_vector_product(*f_, v);
  }
  /// Column-wise products.
  Matrix apply_batch(const Matrix& v) const {
    const Matrix& u = f_->basis();
    if (!mask_) return u * (f_->eigenvalues().asDiagonal() * (u.transpose() * v)) + f_->damping() * v;
    const Vector m = mask_->as_vector();
    const Matrix fv = u * (f_->eigenvalues().asDiagonal() * (u.transpose() * (m.asDiagonal() * v)));
    return m.asDiagonal() * fv + f_->damping() * v;
  }
  void set_mask(std::optional<Mask> mask) { mask_ = std::move(mask); }

private:
  const SpectralFisher* f_;
  std::optional<Mask> mask_;
};

/// Products with the empirical Fisher of the current gradient minibatch.
/// advance() draws a fresh batch; exact() uses the task's true Fisher.
class MinibatchFvp {
public:
  explicit MinibatchFvp(const LinearTask& task, std::optional<Mask> mask = std::nullopt)
      : task_(&task), mask_(std::move(mask)) {
    batch_.g = Matrix::Zero(0, task.dim());
    batch_.gamma = task.damping();
  }

  Index dim() const { return task_->dim(); }
  bool stochastic() const { return true; }
  void advance(Rng& rng) { batch_ = sample_gradient_batch(*task_, rng); }
  const GradientBatch& batch() const { return batch_; }

  Vector apply(const Vector& v) const {
    if (batch_.size() == 0) throw std::logic_error("MinibatchFvp: advance() must be called before apply()");
    return mask_ ? empirical_fvp(batch_, v, *mask_) : empirical_fvp(batch_, v);
  }
  Matrix apply_batch(const Matrix& v) const {
    if (batch_.size() == 0) throw std::logic_error("MinibatchFvp: advance() must be called before apply()");
    const double inv_m = 1.0 / double(batch_.size());
    if (!mask_) return batch_.g.transpose() * (batch_.g * v) * inv_m + batch_.gamma * v;
    const Vector m = mask_->as_vector();
    return m.asDiagonal() * (batch_.g.transpose() * (batch_.g * (m.asDiagonal() * v))) * inv_m + batch_.gamma * v;
  }
  Vector exact(const Vector& v) const {
    return mask_ ? fisher_vector_product(task_->fisher(), v, *mask_) : fisher_vector_product(task_->fisher(), v);
  }
  void set_mask(std::optional<Mask> mask) { mask_ = std::move(mask); }

private:
  const LinearTask* task_;
  std::optional<Mask> mask_;
  GradientBatch batch_;
};

static_assert(FvpSource<ExactFvp>);
static_assert(FvpSource<MinibatchFvp>);

// Per-sample quantities. `fvp` is any callable Vector(const Vector&).

template <InverseFisherParam Q, class Fvp>
double aux_loss_sample(const Q& q, Fvp&& fvp, const Vector& u) {
  const double uu = u.squaredNorm();
  require(uu > 0.0, "aux_loss_sample: u must be nonzero");
  const Vector v = q.qv(u);
  const Vector fv = fvp(v);
  return (0.5 * v.dot(fv) - u.dot(v)) / uu;
}

/// Mean over the rows of `u_batch` of (u^T Q F Q u - u^T Q u) / |u|^2.
template <InverseFisherParam Q, class Fvp>
double convergence_metric(const Q& q, Fvp&& fvp, const Matrix& u_batch) {
  require(u_batch.rows() > 0, "convergence_metric: empty probe batch");
  double total = 0.0;
  for (Index k = 0; k < u_batch.rows(); ++k) {
    const Vector u = u_batch.row(k).transpose();
    const Vector v = q.qv(u);
    total += (v.dot(fvp(v)) - u.dot(v)) / u.squaredNorm();
  }
  return total / double(u_batch.rows());
}

/// Mean of aux_loss_sample over the rows of `u_batch`. Unlike the
/// convergence metric this ranks families: its minimum over all SPD Q is
/// attained at Q = F_gamma^{-1}.
template <InverseFisherParam Q, class Fvp>
double held_out_aux_loss(const Q& q, Fvp&& fvp, const Matrix& u_batch) {
  require(u_batch.rows() > 0, "held_out_aux_loss: empty probe batch");
  double total = 0.0;
  for (Index k = 0; k < u_batch.rows(); ++k) total += aux_loss_sample(q, fvp, Vector(u_batch.row(k).transpose()));
  return total / double(u_batch.rows());
}

enum class Preconditioner { Identity, CurrentQ };

/// Gradient of aux_loss_sample w.r.t. lambda. With P = Q(t) the residual is
/// mapped through one extra qv before the vector-Jacobian product.
template <InverseFisherParam Q, class Fvp>
Vector aux_gradient(const Q& q, Fvp&& fvp, const Vector& u, Preconditioner mode = Preconditioner::Identity) {
  const double uu = u.squaredNorm();
  require(uu > 0.0, "aux_gradient: u must be nonzero");
  const Vector v = q.qv(u);
  Vector r = fvp(v) - u;
  if (mode == Preconditioner::CurrentQ) r = q.qv(r);
  return q.vjp(u, r) / uu;
}

/// Wraps a parameterization and counts qv calls.
template <InverseFisherParam Q>
class QvCounter {
public:
  explicit QvCounter(Q q) : q_(std::move(q)) {}
  Index dim() const { return q_.dim(); }
  Index num_params() const { return q_.num_params(); }
  const Vector& params() const { return q_.params(); }
  void set_params(const Vector& l) { q_.set_params(l); }
  Vector qv(const Vector& v) const {
    ++calls_;
    return q_.qv(v);
  }
  Vector diag() const { return q_.diag(); }
  Matrix dense() const { return q_.dense(); }
  Vector vjp(const Vector& u, const Vector& r) const { return q_.vjp(u, r); }
  Index calls() const { return calls_; }
  void reset() { calls_ = 0; }
  const Q& inner() const { return q_; }

private:
  Q q_;
  mutable Index calls_ = 0;
};

// Probe distribution.

class USampler {
public:
  enum class Kind { Isotropic, Gaussian, SampleSet };

  static USampler isotropic(Index n) { return USampler(Kind::Isotropic, n, Matrix()); }
  /// u = factor * z, z ~ N(0, I); covariance factor * factor^T.
  static USampler gaussian(Matrix factor) {
    const Index n = factor.rows();
    return USampler(Kind::Gaussian, n, std::move(factor));
  }
  /// Cycles deterministically through the rows of `samples`.
  static USampler sample_set(Matrix samples) {
    require(samples.rows() > 0, "USampler::sample_set: empty sample set");
    const Index n = samples.cols();
    return USampler(Kind::SampleSet, n, std::move(samples));
  }

  Kind kind() const { return kind_; }
  Index dim() const { return n_; }

  Vector draw(Rng& rng) {
    switch (kind_) {
      case Kind::Isotropic: return standard_normal(n_, rng);
      case Kind::Gaussian: return data_ * standard_normal(data_.cols(), rng);
      case Kind::SampleSet: {
        Vector u = data_.row(next_).transpose();
        next_ = (next_ + 1) % data_.rows();
        return u;
      }
    }
    return Vector();
  }

private:
  USampler(Kind kind, Index n, Matrix data) : kind_(kind), n_(n), data_(std::move(data)) {}
  Kind kind_;
  Index n_;
  Matrix data_;
  Index next_ = 0;
};

// Optimizer.

enum class StepRule { Plain, Adam };

struct AuxConfig {
  double lr = 0.0;  // required
  StepRule rule = StepRule::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Preconditioner precond = Preconditioner::Identity;
  Index samples_per_step = 1;
  Index steps = 0;
  Index record_every = 1;
  Index metric_batch = 64;
  bool metric_on_basis = false;  // monitor with u = e_1..e_n instead of random probes
  double divergence_factor = 1e6;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr > 0.0, "aux config: learning rate must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "aux config: betas must lie in [0, 1)");
    require(eps > 0.0, "aux config: eps must be positive");
    require(samples_per_step >= 1, "aux config: samples per step must be >= 1");
    require(steps >= 0, "aux config: negative step budget");
    require(record_every >= 1, "aux config: record interval must be >= 1");
    require(metric_batch >= 1 || metric_on_basis, "aux config: metric batch must be nonempty");
  }
};

/// Plain or adaptive-moment update of a flat parameter vector.
class ParamOptimizer {
public:
  ParamOptimizer(const AuxConfig& cfg, Index size)
      : rule_(cfg.rule), lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.eps),
        m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

  /// Returns the increment to add to the parameters.
  Vector step(const Vector& grad) {
    ++t_;
    if (rule_ == StepRule::Plain) return -lr_ * grad;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    return -lr_ * ((m_ / c1).array() / ((v_ / c2).array().sqrt() + eps_)).matrix();
  }

  Index steps() const { return t_; }

private:
  StepRule rule_;
  double lr_, b1_, b2_, eps_;
  Vector m_, v_;
  Index t_ = 0;
};

struct AuxTraceRow {
  Index step = 0;
  Index minibatches_consumed = 0;
  double convergence_metric = 0.0;
  double wall_ms = 0.0;
};

struct AuxTrace {
  double initial_metric = 0.0;
  std::vector<AuxTraceRow> rows;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
  double final_metric() const { return rows.empty() ? initial_metric : rows.back().convergence_metric; }

  void write_csv(std::ostream& out) const {
    out << "step,minibatches_consumed,convergence_metric,wall_ms\n";
    out.precision(17);
    for (const auto& r : rows)
      out << r.step << ',' << r.minibatches_consumed << ',' << r.convergence_metric << ',' << r.wall_ms << '\n';
  }
};

/// Fixed held-out probes for monitoring.
inline Matrix metric_probes(const AuxConfig& cfg, Index n) {
  if (cfg.metric_on_basis) return Matrix::Identity(n, n);
  Rng rng = make_rng(cfg.seed, 0x6d65);
  return standard_normal(cfg.metric_batch, n, rng);
}

/// Stateful minimizer: owns the optimizer moments and the probe stream, and
/// mutates the referenced Q in place.
template <InverseFisherParam Q>
class AuxEstimator {
public:
  AuxEstimator(Q& q, const AuxConfig& cfg, USampler sampler)
      : q_(&q), cfg_(cfg), sampler_(std::move(sampler)), opt_(cfg, q.num_params()),
        rng_(make_rng(cfg.seed, 0xa0c5)) {
    cfg_.validate();
    require_dim(sampler_.dim(), q.dim(), "AuxEstimator");
  }

  AuxEstimator(Q& q, const AuxConfig& cfg) : AuxEstimator(q, cfg, USampler::isotropic(q.dim())) {}

  const AuxConfig& config() const { return cfg_; }
  Index steps_taken() const { return opt_.steps(); }
  Index minibatches_consumed() const { return minibatches_; }
  Rng& rng() { return rng_; }

  /// One update: draw a fresh minibatch (if stochastic) and samples_per_step
  /// probes, average their gradients, apply the step rule.
  template <FvpSource S>
  void step(S& source) {
    source.advance(rng_);
    if (source.stochastic()) ++minibatches_;
    step_on_current(source);
  }

  /// Update using the source's current minibatch without advancing it.
  template <FvpSource S>
  void step_on_current(S& source) {
    Vector grad;
    if constexpr (requires(const Matrix& m) {
                    q_->qv_batch(m);
                    q_->vjp_batch(m, m);
                    source.apply_batch(m);
                  }) {
      if (cfg_.samples_per_step > 1) {
        grad = batched_gradient(source);
      }
    }
    if (grad.size() == 0) {
      const auto fvp = [&](const Vector& v) { return source.apply(v); };
      grad = Vector::Zero(q_->num_params());
      for (Index s = 0; s < cfg_.samples_per_step; ++s)
        grad += aux_gradient(*q_, fvp, sampler_.draw(rng_), cfg_.precond);
    }
    grad /= double(cfg_.samples_per_step);
    q_->set_params(q_->params() + opt_.step(grad));
  }

private:
  // Sum of per-sample gradients with all probes stacked as columns.
  template <class S>
  Vector batched_gradient(S& source) {
    Matrix u(q_->dim(), cfg_.samples_per_step);
    for (Index s = 0; s < cfg_.samples_per_step; ++s) u.col(s) = sampler_.draw(rng_);
    const Matrix v = q_->qv_batch(u);
    Matrix r = source.apply_batch(v) - u;
    if (cfg_.precond == Preconditioner::CurrentQ) r = q_->qv_batch(r);
    r = r * u.colwise().squaredNorm().cwiseInverse().asDiagonal();
    return q_->vjp_batch(u, r);
  }

  Q* q_;
  AuxConfig cfg_;
  USampler sampler_;
  ParamOptimizer opt_;
  Rng rng_;
  Index minibatches_ = 0;
};

inline bool diverged(double metric, double initial, double factor) {
  return !std::isfinite(metric) || std::abs(metric) > factor * std::max(std::abs(initial), 1e-6);
}

/// Runs the configured step budget. The trace holds one row per recorded
/// step (every record_every steps and the last step); the metric is evaluated
/// with exact products on fixed probes. Throws DivergenceError on blow-up.
template <InverseFisherParam Q, FvpSource S>
AuxTrace minimize_aux(Q& q, S& source, const AuxConfig& cfg, std::optional<USampler> sampler = std::nullopt) {
  cfg.validate();
  AuxEstimator<Q> est(q, cfg, sampler ? std::move(*sampler) : USampler::isotropic(q.dim()));
  const Matrix probes = metric_probes(cfg, q.dim());
  const auto exact = [&](const Vector& v) { return source.exact(v); };

  AuxTrace trace;
  trace.initial_metric = convergence_metric(q, exact, probes);
  double busy_ms = 0.0;
  for (Index k = 1; k <= cfg.steps; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    est.step(source);
    busy_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (k % cfg.record_every == 0 || k == cfg.steps) {
      const double m = convergence_metric(q, exact, probes);
      if (diverged(m, trace.initial_metric, cfg.divergence_factor))
        throw DivergenceError("minimize_aux: convergence metric diverged at step " + std::to_string(k));
      trace.rows.push_back({k, est.minibatches_consumed(), m, busy_ms});
    }
  }
  return trace;
}

// Gradient-flow oracles.

/// beta_i(t) = beta_i* + (alpha - beta_i*) exp(-t / tau_i),
/// beta_i* = 1/(xi_i + gamma), tau_i = beta_i* / p_i.
inline Vector gradient_flow_closed_form(const Vector& xi, double gamma, double alpha, const Vector& p, double t) {
  require_dim(p.size(), xi.size(), "gradient_flow_closed_form");
  Vector beta(xi.size());
  for (Index i = 0; i < xi.size(); ++i) {
    require(xi[i] >= 0.0 && p[i] > 0.0, "gradient_flow_closed_form: invalid eigenvalue or preconditioner");
    const double target = 1.0 / (xi[i] + gamma);
    const double tau = target / p[i];
    beta[i] = target + (alpha - target) * std::exp(-t / tau);
  }
  return beta;
}

/// Explicit Euler on dQ/dt = -sym(P (F_gamma Q - I)) from Q(0) = alpha I,
/// i.e. small-step gradient descent on the deterministic loss
/// 1/2 tr(Q F Q) - tr(Q) directly in Q-space. `observe(k, Q)` is called after
/// every step.
inline Matrix dense_gradient_flow(const Matrix& damped_fisher, const Matrix& precond, double alpha, double h,
                                  Index steps, const std::function<void(Index, const Matrix&)>& observe = {}) {
  const Index n = damped_fisher.rows();
  const bool plain = precond.isIdentity(0.0);
  Matrix q = alpha * Matrix::Identity(n, n);
  Matrix r(n, n), g(n, n);
  for (Index k = 1; k <= steps; ++k) {
    r.noalias() = damped_fisher * q;
    r.diagonal().array() -= 1.0;
    if (plain) {
      g = r;
    } else {
      g.noalias() = precond * r;
    }
    q -= (0.5 * h) * (g + g.transpose());
    if (observe) observe(k, q);
  }
  return q;
}

}  // namespace fls
