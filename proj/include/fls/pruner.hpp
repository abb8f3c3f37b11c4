#pragma once

// OBS scoring and compensation, mask selection, sparsity schedules and the
// gradual prune / fine-tune / refine loop.

#include "fls/aux_estimator.hpp"

#include <algorithm>
#include <numeric>

namespace fls {

/// Weights plus prune mask. Invariant: w_i == 0 wherever the mask is false.
struct ModelState {
  Vector w;
  Mask mask;
  const LinearTask* task = nullptr;

  static ModelState dense(const Vector& w, const LinearTask* task = nullptr) {
    return ModelState{w, Mask(w.size()), task};
  }
  Index dim() const { return w.size(); }
  double sparsity() const { return mask.sparsity(); }
  bool consistent() const {
    for (Index i = 0; i < w.size(); ++i)
      if (!mask.alive(i) && w[i] != 0.0) return false;
    return true;
  }
};

/// Anything usable as an inverse-curvature operator for scoring/compensation.
template <class Q>
concept SymmetricOperator = requires(const Q& q, const Vector& v) {
  { q.qv(v) } -> std::convertible_to<Vector>;
  { q.diag() } -> std::convertible_to<Vector>;
};

/// Dense symmetric matrix as an operator.
class DenseOperator {
public:
  DenseOperator() = default;
  explicit DenseOperator(Matrix m) : m_(std::move(m)) {}
  Index dim() const { return m_.rows(); }
  Vector qv(const Vector& v) const { return m_ * v; }
  Vector diag() const { return m_.diagonal(); }
  const Matrix& matrix() const { return m_; }

private:
  Matrix m_;
};

/// Identity operator: OBS with it reduces to magnitude pruning.
class IdentityOperator {
public:
  explicit IdentityOperator(Index n) : n_(n) {}
  Index dim() const { return n_; }
  Vector qv(const Vector& v) const { return v; }
  Vector diag() const { return Vector::Ones(n_); }

private:
  Index n_;
};

inline constexpr double kPrunedScore = std::numeric_limits<double>::infinity();

/// rho_i = w_i^2 / (2 q_ii) on alive coordinates, +inf on pruned ones.
inline Vector obs_scores(const ModelState& s, const Vector& qdiag) {
  require_dim(qdiag.size(), s.dim(), "obs_scores");
  Vector rho(s.dim());
  for (Index i = 0; i < s.dim(); ++i) {
    if (!s.mask.alive(i)) {
      rho[i] = kPrunedScore;
      continue;
    }
    if (!(qdiag[i] > 0.0)) throw std::domain_error("obs_scores: nonpositive diagonal on an alive coordinate");
    rho[i] = s.w[i] * s.w[i] / (2.0 * qdiag[i]);
  }
  return rho;
}

/// Applies the summed single-weight compensations
///   dw = -sum_{i in P} (w_i / q_ii) Q e_i = -Q c,
/// then zeros P and every previously pruned coordinate.
template <SymmetricOperator Q>
ModelState obs_update(const ModelState& s, const Q& q, const std::vector<Index>& prune_set) {
  ModelState out = s;
  if (prune_set.empty()) return out;
  const Vector d = q.diag();
  Vector c = Vector::Zero(s.dim());
  for (Index i : prune_set) {
    require(i >= 0 && i < s.dim(), "obs_update: index out of range");
    require(s.mask.alive(i), "obs_update: coordinate already pruned");
    if (!(d[i] > 0.0)) throw std::domain_error("obs_update: nonpositive diagonal entry");
    c[i] = s.w[i] / d[i];
  }
  out.w -= q.qv(c);
  for (Index i : prune_set) out.mask.prune(i);
  out.w = apply_mask(out.w, out.mask);
  return out;
}

/// Alive indices ordered by (score, index).
inline std::vector<Index> rank_alive(const Vector& scores, const Mask& mask) {
  std::vector<Index> idx = mask.alive_indices();
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return scores[a] < scores[b]; });
  return idx;
}

inline Index target_zero_count(double target, Index n) {
  return std::min<Index>(n, static_cast<Index>(std::ceil(target * double(n) - 1e-9)));
}

/// Indices to prune so that the mask reaches ceil(target * n) zeros.
inline std::vector<Index> unstructured_prune_set(const Vector& scores, double target, const Mask& mask) {
  require_dim(scores.size(), mask.size(), "select_unstructured");
  require(target >= 0.0 && target <= 1.0, "select_unstructured: target outside [0, 1]");
  const Index want = target_zero_count(target, mask.size());
  if (want < mask.zero_count()) throw std::invalid_argument("select_unstructured: target below current sparsity");
  auto ranked = rank_alive(scores, mask);
  ranked.resize(static_cast<std::size_t>(want - mask.zero_count()));
  std::sort(ranked.begin(), ranked.end());
  return ranked;
}

inline Mask select_unstructured(const Vector& scores, double target, const Mask& mask) {
  Mask out = mask;
  for (Index i : unstructured_prune_set(scores, target, mask)) out.prune(i);
  return out;
}

/// Indices to prune so that every consecutive block of M holds exactly N
/// zeros, keeping already-pruned coordinates pruned.
inline std::vector<Index> nm_prune_set(const Vector& scores, Index n_zero, Index m, const Mask& mask) {
  require_dim(scores.size(), mask.size(), "select_nm");
  require(m >= 1 && n_zero >= 0 && n_zero < m, "select_nm: need 0 <= N < M");
  require(scores.size() % m == 0, "select_nm: dimension not divisible by M");
  std::vector<Index> out;
  for (Index start = 0; start < scores.size(); start += m) {
    std::vector<Index> alive;
    for (Index i = start; i < start + m; ++i)
      if (mask.alive(i)) alive.push_back(i);
    const Index have = m - Index(alive.size());
    if (have > n_zero) throw std::invalid_argument("select_nm: block already sparser than N:M");
    std::stable_sort(alive.begin(), alive.end(), [&](Index a, Index b) { return scores[a] < scores[b]; });
    for (Index k = 0; k < n_zero - have; ++k) out.push_back(alive[static_cast<std::size_t>(k)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Mask select_nm(const Vector& scores, Index n_zero, Index m, const Mask& mask) {
  Mask out = mask;
  for (Index i : nm_prune_set(scores, n_zero, m, mask)) out.prune(i);
  return out;
}

inline Mask select_nm(const Vector& scores, Index n_zero, Index m) {
  return select_nm(scores, n_zero, m, Mask(scores.size()));
}

/// f_0, ..., f_T with (1 - f_t) = (1 - f_0) ((1 - f_end)/(1 - f_0))^{t/T}.
inline std::vector<double> exponential_schedule(double f0, double f_end, Index steps) {
  require(f0 >= 0.0 && f0 < f_end && f_end < 1.0, "exponential_schedule: need 0 <= f0 < f_end < 1");
  require(steps >= 1, "exponential_schedule: need at least one step");
  std::vector<double> f(static_cast<std::size_t>(steps + 1));
  const double ratio = (1.0 - f_end) / (1.0 - f0);
  for (Index t = 0; t <= steps; ++t) f[std::size_t(t)] = 1.0 - (1.0 - f0) * std::pow(ratio, double(t) / double(steps));
  f.front() = f0;
  f.back() = f_end;
  return f;
}

/// w <- w - eta Q g, pruned coordinates re-zeroed.
template <SymmetricOperator Q>
ModelState fine_tune_step(const ModelState& s, const Q& q, const Vector& g, double eta) {
  require_dim(g.size(), s.dim(), "fine_tune_step");
  ModelState out = s;
  out.w = apply_mask(s.w - eta * q.qv(g), s.mask);
  return out;
}

// Prune loop over an arbitrary curvature estimate.

/// A curvature provider supplies the inverse-curvature operator and reacts to
/// loop events:
///   prepare(s)        before scoring at each prune step
///   op()              current operator (qv + diag)
///   on_pruned(s)      after the mask changed
///   fine_tune_tick(s) once per fine-tune iteration
///   aux_metric()      convergence diagnostic (NaN when not applicable)
template <class P>
concept CurvatureProvider = requires(P& p, const ModelState& s) {
  p.prepare(s);
  p.on_pruned(s);
  p.fine_tune_tick(s);
  { p.aux_metric() } -> std::convertible_to<double>;
  { p.op() } -> SymmetricOperator;
};

struct PruneStep {
  ModelState state;
  std::vector<Index> pruned;
  double predicted_increase = 0.0;  // sum of the selected scores
};

/// Sparsity pattern: unstructured (n_zero == 0) or N:M.
struct PrunePattern {
  Index n_zero = 0;
  Index m = 0;
  bool semi_structured() const { return m > 0; }
};

template <SymmetricOperator Q>
PruneStep prune_to(const ModelState& s, const Q& q, double target, const PrunePattern& pattern = {}) {
  const Vector rho = obs_scores(s, q.diag());
  PruneStep out;
  out.pruned = pattern.semi_structured() ? nm_prune_set(rho, pattern.n_zero, pattern.m, s.mask)
                                         : unstructured_prune_set(rho, target, s.mask);
  for (Index i : out.pruned) out.predicted_increase += rho[i];
  out.state = obs_update(s, q, out.pruned);
  return out;
}

struct GradualConfig {
  Index finetune_steps = 0;  // S
  double lr = 0.1;           // eta
  Index aux_steps_per_finetune = 1;
  double f0 = 0.0;
  double f_end = 0.9;
  Index prune_steps = 1;  // T
  PrunePattern pattern;

  void validate() const {
    require(finetune_steps >= 0, "gradual config: S must be >= 0");
    require(lr > 0.0, "gradual config: learning rate must be positive");
    require(aux_steps_per_finetune >= 0, "gradual config: aux steps must be >= 0");
  }
};

struct PruneRecord {
  std::string phase;  // "prune" | "finetune"
  Index step = 0;
  double sparsity = 0.0;
  double test_mse = 0.0;
  double aux_metric = 0.0;
  double predicted_increase = 0.0;
  double wall_ms = 0.0;
};

/// FishLeg curvature: a learned Q refined online on masked minibatch Fisher
/// products.
template <InverseFisherParam Q>
class FlsCurvature {
public:
  FlsCurvature(Q& q, const LinearTask& task, const AuxConfig& cfg, Index refine_steps, Index aux_per_tick)
      : q_(&q), source_(task, Mask(task.dim())), est_(q, cfg), probes_(metric_probes(cfg, task.dim())),
        exact_(task.fisher(), Mask(task.dim())), refine_steps_(refine_steps), aux_per_tick_(aux_per_tick) {}

  void prepare(const ModelState&) { run(refine_steps_); }
  void on_pruned(const ModelState& s) {
    source_.set_mask(s.mask);
    exact_.set_mask(s.mask);
  }
  void fine_tune_tick(const ModelState&) { run(aux_per_tick_); }
  double aux_metric() const {
    return convergence_metric(*q_, [&](const Vector& v) { return exact_.apply(v); }, probes_);
  }
  const Q& op() const { return *q_; }
  Rng& rng() { return est_.rng(); }

private:
  void run(Index steps) {
    for (Index k = 0; k < steps; ++k) est_.step(source_);
  }

  Q* q_;
  MinibatchFvp source_;
  AuxEstimator<Q> est_;
  Matrix probes_;
  ExactFvp exact_;
  Index refine_steps_;
  Index aux_per_tick_;
};

/// Algorithm loop: for each schedule step score, select, compensate, then S
/// iterations of {preconditioned fine-tune step; curvature refinement}.
/// Records one "prune" row per schedule step and one "finetune" row after
/// the fine-tune phase (when S > 0).
template <CurvatureProvider P>
std::vector<PruneRecord> run_prune_loop(ModelState& state, P& provider, const GradualConfig& cfg, const TestSet& test,
                                        Rng& rng) {
  cfg.validate();
  require(state.task != nullptr, "run_prune_loop: state has no task");
  const auto schedule = exponential_schedule(cfg.f0, cfg.f_end, cfg.prune_steps);
  std::vector<PruneRecord> rows;
  for (Index t = 1; t <= cfg.prune_steps; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    provider.prepare(state);
    PruneStep ps = prune_to(state, provider.op(), schedule[std::size_t(t)], cfg.pattern);
    state = std::move(ps.state);
    provider.on_pruned(state);
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({"prune", t, state.sparsity(), test_mse(test, state.w), provider.aux_metric(), ps.predicted_increase,
                    ms});
    if (cfg.finetune_steps == 0) continue;
    const auto t1 = std::chrono::steady_clock::now();
    for (Index k = 0; k < cfg.finetune_steps; ++k) {
      const Vector g = sample_loss_gradient(*state.task, state.w, state.mask, rng);
      state = fine_tune_step(state, provider.op(), g, cfg.lr);
      provider.fine_tune_tick(state);
    }
    ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
    rows.push_back({"finetune", t, state.sparsity(), test_mse(test, state.w), provider.aux_metric(), 0.0, ms});
  }
  return rows;
}

/// One-shot sweep: prune the same model sequentially through increasing
/// target sparsities, letting the provider refresh before every prune.
/// `record(target, step, predicted_increase)` runs after each prune.
template <CurvatureProvider P, class Record>
void run_sparsity_sweep(ModelState& state, P& provider, const std::vector<double>& targets, Record&& record) {
  for (std::size_t k = 0; k < targets.size(); ++k) {
    provider.prepare(state);
    PruneStep ps = prune_to(state, provider.op(), targets[k]);
    state = std::move(ps.state);
    provider.on_pruned(state);
    record(targets[k], Index(k + 1), ps.predicted_increase);
  }
}

struct GradualResult {
  ModelState state;
  std::vector<PruneRecord> rows;
};

/// Gradual pruning of the task's dense solution with a learned Q.
template <InverseFisherParam Q>
GradualResult gradual_prune(const LinearTask& task, Q& q, const AuxConfig& aux, const GradualConfig& cfg,
                            std::uint64_t seed) {
  FlsCurvature<Q> provider(q, task, aux, 0, cfg.aux_steps_per_finetune);
  GradualResult out{ModelState::dense(task.weights, &task), {}};
  Rng rng = make_rng(seed, 0xf17e);
  out.rows = run_prune_loop(out.state, provider, cfg, make_test_set(task), rng);
  return out;
}

}  // namespace fls
