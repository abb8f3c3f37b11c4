#pragma once

// The six synthetic experiments. Each expands its config into independent
// arms (method x learning rate x seed), runs them on the worker pool and
// merges the rows in arm order, so the metric table does not depend on the
// number of jobs.

#include "fls/baselines.hpp"
#include "fls/harness/plot.hpp"
#include "fls/harness/pool.hpp"

#include <functional>

namespace fls::harness {

struct RunOptions {
  std::vector<std::uint64_t> seeds;  // empty: experiment default
  int jobs = 1;
};

struct ArmOutput {
  std::vector<MetricRow> metrics;
  std::vector<TimingRow> timing;
  Vector params;  // trained lambda, when the arm learns a Q
  bool diverged = false;
};

inline std::string lr_label(const std::string& base, double lr) { return base + "[lr=" + format_double(lr) + "]"; }

/// Base method and learning rate of an arm label produced by lr_label.
inline std::pair<std::string, double> split_lr_label(const std::string& label) {
  const auto pos = label.find("[lr=");
  if (pos == std::string::npos || label.back() != ']') return {label, std::numeric_limits<double>::quiet_NaN()};
  return {label.substr(0, pos), parse_double(label.substr(pos + 4, label.size() - pos - 5))};
}

struct ArmChoice {
  std::string label;
  double lr = 0.0;
  MeanSem score;
};

/// Among arms `base[lr=*]`, the one with the smallest mean over seeds of
/// |final metric| (or the signed final metric when `absolute` is false). Arms
/// with any diverged seed are ineligible; ties go to the smaller learning rate.
inline std::optional<ArmChoice> best_arm(const std::vector<MetricRow>& rows, const std::string& base,
                                         const std::string& metric, const std::string& phase = "",
                                         bool absolute = true) {
  std::set<std::string> labels, failed;
  for (const auto& r : rows) {
    const auto [b, lr] = split_lr_label(r.method);
    if (b != base || std::isnan(lr)) continue;
    labels.insert(r.method);
    if (r.metric == "diverged") failed.insert(r.method);
  }
  std::optional<ArmChoice> best;
  std::vector<std::pair<double, std::string>> ordered;
  for (const auto& l : labels) ordered.emplace_back(split_lr_label(l).second, l);
  std::sort(ordered.begin(), ordered.end());
  for (const auto& [lr, label] : ordered) {
    if (failed.count(label)) continue;
    std::vector<double> xs;
    for (const auto& [seed, v] : final_values(rows, label, metric, phase)) xs.push_back(absolute ? std::abs(v) : v);
    if (xs.empty()) continue;
    const auto ms = mean_sem(xs);
    if (!std::isfinite(ms.mean)) continue;
    if (!best || ms.mean < best->score.mean) best = ArmChoice{label, lr, ms};
  }
  return best;
}

inline std::string describe(const ArmChoice& c) {
  std::ostringstream out;
  out << c.label << " mean final = " << std::setprecision(6) << c.score.mean << " +- " << c.score.sem;
  return out.str();
}

// Config helpers.

inline std::vector<std::uint64_t> resolve_seeds(const Config& c, const RunOptions& opt,
                                                std::vector<std::uint64_t> fallback) {
  if (!opt.seeds.empty()) return opt.seeds;
  if (c.has("seeds")) {
    std::vector<std::uint64_t> out;
    for (double d : c.numbers("seeds", {})) {
      if (d < 0 || d != std::floor(d)) throw ConfigError("seeds must be non-negative integers");
      out.push_back(static_cast<std::uint64_t>(d));
    }
    if (out.empty()) throw ConfigError("seeds must be nonempty");
    return out;
  }
  return fallback;
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t count) {
  std::vector<std::uint64_t> s(count);
  std::iota(s.begin(), s.end(), 0);
  return s;
}

struct TaskSpec {
  Index n = 100;
  Spectrum spectrum = ExpSpectrum{10.0};
  double gamma = 0.01;
  Index batch = 100;
  double noise = 0.0;

  LinearTask make(std::uint64_t seed) const { return make_linear_task(n, spectrum, gamma, noise, batch, seed); }
};

inline TaskSpec task_spec(const Config& c, Index n, const std::string& spectrum, double gamma) {
  TaskSpec t;
  t.n = c.integer("n", n);
  t.spectrum = parse_spectrum(c.string("spectrum", spectrum));
  t.gamma = c.number("gamma", gamma);
  t.batch = c.integer("batch", 100);
  t.noise = c.number("noise", 0.0);
  require(t.n >= 1, "n must be >= 1");
  require(t.gamma > 0.0, "gamma must be positive");
  return t;
}

inline AuxConfig aux_config(const Config& c, double lr, std::uint64_t seed) {
  AuxConfig a;
  a.lr = lr;
  const std::string rule = c.string("rule", "adam");
  if (rule == "adam")
    a.rule = StepRule::Adam;
  else if (rule == "plain")
    a.rule = StepRule::Plain;
  else
    throw ConfigError("rule must be adam or plain");
  a.beta1 = c.number("beta1", 0.9);
  a.beta2 = c.number("beta2", 0.999);
  a.eps = c.number("eps", 1e-8);
  a.metric_batch = c.integer("metric_batch", 64);
  a.samples_per_step = c.integer("samples_per_step", 1);
  a.seed = seed;
  return a;
}

inline Preconditioner parse_precond(const std::string& s) {
  if (s == "identity") return Preconditioner::Identity;
  if (s == "current-q") return Preconditioner::CurrentQ;
  throw ConfigError("preconditioner must be identity or current-q, got '" + s + "'");
}

/// Learning-rate grid for `name`: key lr_grid_<name> (':' mapped to '_') if
/// present, else lr_grid.
inline std::vector<double> lr_grid_for(const Config& c, const std::string& name, std::vector<double> fallback) {
  std::string key = "lr_grid_" + name;
  for (char& ch : key)
    if (ch == ':') ch = '_';
  auto out = c.has(key) ? c.numbers(key, {}) : c.numbers("lr_grid", std::move(fallback));
  for (double lr : out)
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (out.empty()) throw ConfigError("empty learning-rate grid for " + name);
  return out;
}

inline std::set<std::string> common_keys() {
  return {"experiment", "seeds", "n", "spectrum", "gamma", "batch", "noise", "rule", "beta1", "beta2", "eps",
          "metric_batch", "samples_per_step"};
}

inline std::set<std::string> with_keys(std::set<std::string> base, std::initializer_list<const char*> extra) {
  for (const char* k : extra) base.insert(k);
  return base;
}

/// Accepts lr_grid_<anything> alongside the fixed keys.
inline void check_keys_with_grids(const Config& c, const std::set<std::string>& allowed) {
  for (const auto& k : c.keys())
    if (!allowed.count(k) && k.rfind("lr_grid_", 0) != 0) throw ConfigError("unknown config key '" + k + "'");
}

template <class Arm>
std::vector<ArmOutput> run_arms(const std::vector<Arm>& arms, int jobs,
                                const std::function<ArmOutput(const Arm&)>& body) {
  return parallel_map<ArmOutput>(arms.size(), jobs, [&](std::size_t i) { return body(arms[i]); });
}

inline void merge(ExperimentRecord& rec, std::vector<ArmOutput>& outs) {
  for (auto& o : outs) {
    rec.metrics.insert(rec.metrics.end(), o.metrics.begin(), o.metrics.end());
    rec.timing.insert(rec.timing.end(), o.timing.begin(), o.timing.end());
  }
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline void push_metric(ArmOutput& out, const std::string& method, std::uint64_t seed, const std::string& phase,
                        Index step, Index minibatches, double sparsity, const std::string& metric, double value) {
  out.metrics.push_back({method, seed, phase, step, minibatches, sparsity, metric, value});
}

// ---------------------------------------------------------------------------
// init-dynamics: scale of the initial Q, plus the closed-form flow oracle.

inline ExperimentRecord run_init_dynamics(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alphas", "lr_grid", "steps", "record_every", "snapshots",
                                                     "flow_h", "flow_time", "flow_record_every", "flow"}));
  const Index n = c.integer("n", 100);
  const Spectrum spectrum = parse_spectrum(c.string("spectrum", "power:2"));
  const double gamma = c.number("gamma", 1e-3);
  require(gamma > 0.0, "gamma must be positive");
  const auto alphas = c.numbers("alphas", {1.0, 1.0 / gamma});
  const Index steps = c.integer("steps", 5000);
  const Index record_every = c.integer("record_every", 50);
  const Index snapshots = c.integer("snapshots", 4);
  const double flow_h = c.number("flow_h", 2e-4);
  const double flow_time = c.number("flow_time", 3.0);
  const Index flow_record = c.integer("flow_record_every", 250);
  const bool with_flow = c.boolean("flow", true);

  ExperimentRecord rec{"init-dynamics", c, resolve_seeds(c, opt, {0}), {}, {}, {}};

  struct Arm {
    std::uint64_t seed;
    std::size_t alpha_index;
    double lr;  // <= 0 marks the dense-flow oracle arm
  };
  std::vector<Arm> arms;
  for (auto seed : rec.seeds)
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      for (double lr : lr_grid_for(c, "alpha" + std::to_string(a), {0.01, 0.0316, 0.1, 0.316, 1.0, 3.16}))
        arms.push_back({seed, a, lr});
      if (with_flow) arms.push_back({seed, a, 0.0});
    }

  auto body = [&](const Arm& arm) {
    ArmOutput out;
    const double alpha = alphas[arm.alpha_index];
    const std::string base = "alpha=" + format_double(alpha);
    const SpectralFisher f = make_spectral_fisher(n, spectrum, gamma, arm.seed);
    const Matrix& u = f.basis();
    const Vector target = f.target_inverse_eigenvalues();

    if (arm.lr <= 0.0) {
      const std::string method = "flow[" + base + "]";
      const Index flow_steps = static_cast<Index>(std::llround(flow_time / flow_h));
      const Vector ones = Vector::Ones(n);
      const auto t0 = std::chrono::steady_clock::now();
      dense_gradient_flow(f.damped(), Matrix::Identity(n, n), alpha, flow_h, flow_steps,
                          [&](Index k, const Matrix& q) {
                            if (k % flow_record != 0 && k != flow_steps) return;
                            const Matrix qe = u.transpose() * q * u;
                            const Vector cf = gradient_flow_closed_form(f.eigenvalues(), gamma, alpha, ones,
                                                                        double(k) * flow_h);
                            const double rel = ((qe.diagonal() - cf).array().abs() / cf.array()).maxCoeff();
                            Matrix off = qe;
                            off.diagonal().setZero();
                            const double ratio = off.cwiseAbs().maxCoeff() / qe.diagonal().cwiseAbs().maxCoeff();
                            push_metric(out, method, arm.seed, "flow", k, 0, 0.0, "flow_rel_err", rel);
                            push_metric(out, method, arm.seed, "flow", k, 0, 0.0, "flow_offdiag_ratio", ratio);
                          });
      out.timing.push_back({method, arm.seed, "flow", flow_steps, 0.0, elapsed_ms(t0)});
      return out;
    }

    const std::string method = lr_label(base, arm.lr);
    QFull q(n, alpha);
    ExactFvp src(f);
    AuxConfig cfg = aux_config(c, arm.lr, arm.seed);
    cfg.samples_per_step = n;
    cfg.metric_on_basis = true;
    AuxEstimator<QFull> est(q, cfg, USampler::sample_set(Matrix::Identity(n, n)));
    const Matrix probes = Matrix::Identity(n, n);
    const auto exact = [&](const Vector& v) { return src.exact(v); };
    auto snapshot = [&](Index k) {
      const Vector beta = (u.transpose() * q.dense() * u).diagonal();
      for (Index i = 0; i < n; ++i) {
        push_metric(out, method, arm.seed, "snapshot", i + 1, k, 0.0, "eigenvalue@" + std::to_string(k), beta[i]);
        push_metric(out, "target", arm.seed, "snapshot", i + 1, k, 0.0, "eigenvalue@" + std::to_string(k), target[i]);
      }
    };
    const Index snap_every = snapshots > 0 ? std::max<Index>(1, steps / snapshots) : 0;
    const double m0 = convergence_metric(q, exact, probes);
    push_metric(out, method, arm.seed, "aux", 0, 0, 0.0, "aux_metric", m0);
    push_metric(out, method, arm.seed, "aux", 0, 0, 0.0, "abs_aux_metric", std::abs(m0));
    if (snap_every) snapshot(0);
    const auto t0 = std::chrono::steady_clock::now();
    for (Index k = 1; k <= steps; ++k) {
      est.step(src);
      if (k % record_every == 0 || k == steps) {
        const double m = convergence_metric(q, exact, probes);
        if (diverged(m, m0, cfg.divergence_factor)) {
          push_metric(out, method, arm.seed, "aux", k, 0, 0.0, "diverged", 1.0);
          out.diverged = true;
          break;
        }
        push_metric(out, method, arm.seed, "aux", k, 0, 0.0, "aux_metric", m);
        push_metric(out, method, arm.seed, "aux", k, 0, 0.0, "abs_aux_metric", std::abs(m));
      }
      if (snap_every && k % snap_every == 0) snapshot(k);
    }
    out.timing.push_back({method, arm.seed, "aux", steps, 0.0, elapsed_ms(t0)});
    return out;
  };
  auto outs = run_arms<Arm>(arms, opt.jobs, body);
  merge(rec, outs);
  for (double alpha : alphas) {
    const auto best = best_arm(rec.metrics, "alpha=" + format_double(alpha), "aux_metric");
    rec.notes.push_back("best alpha=" + format_double(alpha) + ": " + (best ? describe(*best) : "none converged"));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// precondition: P = I versus P(t) = Q(t) on the linear task.

inline ExperimentRecord run_precondition(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alpha", "steps", "record_every", "lr_grid", "methods"}));
  const TaskSpec ts = task_spec(c, 100, "exp:10", 0.01);
  const double alpha = c.number("alpha", 1.0 / ts.gamma);
  const Index steps = c.integer("steps", 2000);
  const Index record_every = c.integer("record_every", 100);
  const auto methods = c.strings("methods", {"identity", "current-q"});
  ExperimentRecord rec{"precondition", c, resolve_seeds(c, opt, seed_range(10)), {}, {}, {}};

  struct Arm {
    std::string method;
    double lr;
    std::uint64_t seed;
  };
  std::vector<Arm> arms;
  for (const auto& m : methods) {
    parse_precond(m);
    for (double lr : lr_grid_for(c, m, {0.01, 0.03, 0.1, 0.3}))
      for (auto seed : rec.seeds) arms.push_back({m, lr, seed});
  }

  auto body = [&](const Arm& arm) {
    ArmOutput out;
    const std::string method = lr_label(arm.method, arm.lr);
    const LinearTask task = ts.make(arm.seed);
    QFull q(ts.n, alpha);
    MinibatchFvp src(task);
    AuxConfig cfg = aux_config(c, arm.lr, arm.seed);
    cfg.precond = parse_precond(arm.method);
    AuxEstimator<QFull> est(q, cfg);
    const Matrix probes = metric_probes(cfg, ts.n);
    const auto exact = [&](const Vector& v) { return src.exact(v); };
    const double m0 = convergence_metric(q, exact, probes);
    push_metric(out, method, arm.seed, "aux", 0, 0, 0.0, "aux_metric", m0);
    const auto t0 = std::chrono::steady_clock::now();
    for (Index k = 1; k <= steps; ++k) {
      est.step(src);
      if (k % record_every == 0 || k == steps) {
        const double m = convergence_metric(q, exact, probes);
        if (diverged(m, m0, cfg.divergence_factor)) {
          push_metric(out, method, arm.seed, "aux", k, k, 0.0, "diverged", 1.0);
          out.diverged = true;
          break;
        }
        push_metric(out, method, arm.seed, "aux", k, est.minibatches_consumed(), 0.0, "aux_metric", m);
      }
    }
    out.timing.push_back({method, arm.seed, "aux", steps, 0.0, elapsed_ms(t0)});
    return out;
  };
  auto outs = run_arms<Arm>(arms, opt.jobs, body);
  merge(rec, outs);
  for (const auto& m : methods) {
    const auto best = best_arm(rec.metrics, m, "aux_metric");
    rec.notes.push_back("best " + m + ": " + (best ? describe(*best) : "none converged"));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// estimation: consistency against estimate-invert-average (panel A) and
// matched-structure comparisons against approximate-then-invert (B-D).

inline AnyQ make_structured_q(const std::string& structure, Index n, double alpha) {
  return init_scaled_identity(parse_q_spec(structure, n), alpha);
}

inline Structure structure_of(const QSpec& s) {
  switch (s.kind) {
    case QKind::Diagonal: return Structure::diagonal();
    case QKind::Block: return Structure::blocks(s.block);
    case QKind::KroneckerDense: return Structure::kron(s.n_out, s.n_in + (s.bias ? 1 : 0));
    default: throw ConfigError("approx-then-invert supports diagonal, block and kron structures only");
  }
}

inline ExperimentRecord run_estimation(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alpha", "batches", "record_every", "lr_grid", "panels",
                                                     "structures", "action_samples", "action_record_every",
                                                     "precond"}));
  const TaskSpec ts = task_spec(c, 100, "exp:30", 0.01);
  const double alpha = c.number("alpha", 1.0 / ts.gamma);
  const Index batches = c.integer("batches", 2000);
  const Index record_every = c.integer("record_every", 50);
  const Index action_every = c.integer("action_record_every", 500);
  const Index action_samples = c.integer("action_samples", 4096);
  const auto panels = c.strings("panels", {"A", "B", "C", "D"});
  const auto structures = c.strings("structures", {"diagonal", "block:20", "kron:5x20"});
  const Preconditioner precond = parse_precond(c.string("precond", "identity"));
  ExperimentRecord rec{"estimation", c, resolve_seeds(c, opt, seed_range(20)), {}, {}, {}};

  struct Arm {
    std::string panel;      // "A" or the structure spec for B-D
    std::string method;     // "fishleg" | "naive" | "approx-then-invert"
    double lr;
    std::uint64_t seed;
  };
  std::vector<Arm> arms;
  for (const auto& p : panels) {
    if (p == "A") {
      for (double lr : lr_grid_for(c, "A", {0.01, 0.02, 0.05}))
        for (auto seed : rec.seeds) arms.push_back({"A", "fishleg", lr, seed});
      for (auto seed : rec.seeds) arms.push_back({"A", "naive", 0.0, seed});
    } else if (p == "B" || p == "C" || p == "D") {
      const std::string s = structures.at(std::size_t(p[0] - 'B'));
      structure_of(parse_q_spec(s, ts.n));
      for (double lr : lr_grid_for(c, p, {0.01, 0.03, 0.1}))
        for (auto seed : rec.seeds) arms.push_back({p, "fishleg", lr, seed});
      for (auto seed : rec.seeds) arms.push_back({p, "approx-then-invert", 0.0, seed});
    } else {
      throw ConfigError("unknown estimation panel '" + p + "'");
    }
  }

  auto body = [&](const Arm& arm) {
    ArmOutput out;
    const LinearTask task = ts.make(arm.seed);
    const SpectralFisher& f = task.fisher();
    const std::string method = arm.method == "fishleg" ? lr_label("fishleg", arm.lr) : arm.method;
    MinibatchFvp src(task);
    Rng batch_rng = make_rng(arm.seed, 0xba7c);
    double work_ms = 0.0;

    if (arm.panel == "A") {
      const Matrix target = f.damped_inverse();
      if (arm.method == "naive") {
        EstimateInvertAverage naive(ts.n);
        for (Index k = 1; k <= batches; ++k) {
          src.advance(batch_rng);
          const auto tw = std::chrono::steady_clock::now();
          naive.add(src.batch());
          work_ms += elapsed_ms(tw);
          if (k % record_every == 0)
            push_metric(out, method, arm.seed, "A", k, k, 0.0, "riemannian_distance",
                        riemannian_distance(target, naive.average()));
        }
      } else {
        QFull q(ts.n, alpha);
        AuxConfig cfg = aux_config(c, arm.lr, arm.seed);
        cfg.precond = precond;
        AuxEstimator<QFull> est(q, cfg);
        push_metric(out, method, arm.seed, "A", 0, 0, 0.0, "riemannian_distance",
                    riemannian_distance(target, q.dense()));
        for (Index k = 1; k <= batches; ++k) {
          src.advance(batch_rng);
          const auto tw = std::chrono::steady_clock::now();
          est.step_on_current(src);
          work_ms += elapsed_ms(tw);
          if (k % record_every == 0)
            push_metric(out, method, arm.seed, "A", k, k, 0.0, "riemannian_distance",
                        riemannian_distance(target, q.dense()));
        }
      }
      out.timing.push_back({method, arm.seed, "A", batches, 0.0, work_ms});
      return out;
    }

    const std::string structure = structures.at(std::size_t(arm.panel[0] - 'B'));
    const QSpec spec = parse_q_spec(structure, ts.n);
    const Matrix factor = f.basis() * f.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();
    const std::uint64_t action_seed = mix_seed(arm.seed, 0xac71);
    if (!(f.eigenvalues().minCoeff() > 0.0)) throw ConfigError("estimation panels B-D need a full-rank Fisher");
    if (arm.method == "approx-then-invert") {
      ApproxThenInvert ati(ts.n, structure_of(spec), ts.gamma);
      for (Index k = 1; k <= batches; ++k) {
        src.advance(batch_rng);
        const auto tw = std::chrono::steady_clock::now();
        ati.add(src.batch());
        work_ms += elapsed_ms(tw);
        if (k % action_every == 0 || k == batches)
          push_metric(out, method, arm.seed, arm.panel, k, k, 0.0, "action_error",
                      normalized_action_error(DenseOperator(ati.inverse()), f, factor, action_samples, action_seed));
      }
    } else {
      AnyQ any = make_structured_q(structure, ts.n, alpha);
      std::visit(
          [&](auto& q) {
            AuxConfig cfg = aux_config(c, arm.lr, arm.seed);
            cfg.precond = precond;
            AuxEstimator<std::decay_t<decltype(q)>> est(q, cfg, USampler::gaussian(factor));
            for (Index k = 1; k <= batches; ++k) {
              src.advance(batch_rng);
              const auto tw = std::chrono::steady_clock::now();
              est.step_on_current(src);
              work_ms += elapsed_ms(tw);
              if (k % action_every == 0 || k == batches)
                push_metric(out, method, arm.seed, arm.panel, k, k, 0.0, "action_error",
                            normalized_action_error(q, f, factor, action_samples, action_seed));
            }
          },
          any);
    }
    out.timing.push_back({method, arm.seed, arm.panel, batches, 0.0, work_ms});
    return out;
  };
  auto outs = run_arms<Arm>(arms, opt.jobs, body);
  merge(rec, outs);
  for (const auto& p : panels) {
    const std::string metric = p == "A" ? "riemannian_distance" : "action_error";
    std::vector<MetricRow> panel_rows = select_rows(rec.metrics, [&](const MetricRow& r) { return r.phase == p; });
    const auto best = best_arm(panel_rows, "fishleg", metric);
    rec.notes.push_back("panel " + p + " best fishleg: " + (best ? describe(*best) : "none converged"));
  }
  rec.notes.push_back("minibatches count one gradient minibatch per auxiliary step");
  return rec;
}

// ---------------------------------------------------------------------------
// oneshot: converge each Q family, then prune sequentially through a
// sparsity grid and compare test MSE against the baselines.

/// Trains a Q of the given family for `steps` aux steps on minibatch
/// products; records the convergence metric every `record_every` steps.
inline ArmOutput pretrain_arm(const Config& c, const TaskSpec& ts, const LinearTask& task, const std::string& family,
                              double alpha, double lr, Index steps, Index record_every, std::uint64_t seed,
                              const std::string& method) {
  ArmOutput out;
  AnyQ any = make_structured_q(family, ts.n, alpha);
  std::visit(
      [&](auto& q) {
        MinibatchFvp src(task);
        AuxConfig cfg = aux_config(c, lr, seed);
        AuxEstimator<std::decay_t<decltype(q)>> est(q, cfg);
        const Matrix probes = metric_probes(cfg, ts.n);
        const auto exact = [&](const Vector& v) { return src.exact(v); };
        const double m0 = convergence_metric(q, exact, probes);
        push_metric(out, method, seed, "pretrain", 0, 0, 0.0, "aux_metric", m0);
        push_metric(out, method, seed, "pretrain", 0, 0, 0.0, "aux_loss", held_out_aux_loss(q, exact, probes));
        const auto t0 = std::chrono::steady_clock::now();
        for (Index k = 1; k <= steps; ++k) {
          est.step(src);
          if (k % record_every == 0 || k == steps) {
            const double m = convergence_metric(q, exact, probes);
            if (diverged(m, m0, cfg.divergence_factor)) {
              push_metric(out, method, seed, "pretrain", k, k, 0.0, "diverged", 1.0);
              out.diverged = true;
              return;
            }
            push_metric(out, method, seed, "pretrain", k, k, 0.0, "aux_metric", m);
            push_metric(out, method, seed, "pretrain", k, k, 0.0, "aux_loss", held_out_aux_loss(q, exact, probes));
          }
        }
        out.timing.push_back({method, seed, "pretrain", steps, 0.0, elapsed_ms(t0)});
        out.params = q.params();
      },
      any);
  return out;
}

inline std::vector<double> default_sparsity_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

inline ExperimentRecord run_oneshot(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alpha", "pretrain_steps", "record_every", "lr_grid",
                                                     "families", "baselines", "sparsities", "refine_steps",
                                                     "mfac_rank"}));
  const TaskSpec ts = task_spec(c, 100, "exp:10", 0.01);
  const double alpha = c.number("alpha", 1.0 / ts.gamma);
  const Index pre_steps = c.integer("pretrain_steps", 2000);
  const Index record_every = c.integer("record_every", 100);
  const auto families = c.strings("families", {"full", "diagonal", "block:5", "block:10", "block:20", "block:50"});
  const auto baselines = c.strings("baselines", {"magnitude", "mfac", "exact"});
  const auto grid = c.numbers("sparsities", default_sparsity_grid());
  const Index refine = c.integer("refine_steps", 20);
  const Index mfac_rank = c.integer("mfac_rank", 10);
  for (std::size_t i = 1; i < grid.size(); ++i) require(grid[i] > grid[i - 1], "sparsities must increase");
  ExperimentRecord rec{"oneshot", c, resolve_seeds(c, opt, seed_range(10)), {}, {}, {}};

  // Phase 1: per-family learning-rate sweep.
  struct PreArm {
    std::string family;
    double lr;
    std::uint64_t seed;
  };
  std::vector<PreArm> pre;
  for (const auto& fam : families) {
    parse_q_spec(fam, ts.n);
    for (double lr : lr_grid_for(c, fam, {0.01, 0.03, 0.1}))
      for (auto seed : rec.seeds) pre.push_back({fam, lr, seed});
  }
  auto pre_outs = run_arms<PreArm>(pre, opt.jobs, [&](const PreArm& a) {
    const LinearTask task = ts.make(a.seed);
    return pretrain_arm(c, ts, task, a.family, alpha, a.lr, pre_steps, record_every, a.seed,
                        lr_label("fls-" + a.family, a.lr));
  });
  std::map<std::pair<std::string, std::uint64_t>, Vector> trained;
  std::map<std::string, double> chosen_lr;
  {
    std::vector<MetricRow> pre_rows;
    for (const auto& o : pre_outs) pre_rows.insert(pre_rows.end(), o.metrics.begin(), o.metrics.end());
    for (const auto& fam : families) {
      const auto best = best_arm(pre_rows, "fls-" + fam, "aux_loss", "pretrain", false);
      if (!best) throw std::runtime_error("oneshot: every learning rate diverged for family " + fam);
      chosen_lr[fam] = best->lr;
      rec.notes.push_back("best fls-" + fam + ": " + describe(*best));
    }
    for (std::size_t i = 0; i < pre.size(); ++i)
      if (pre[i].lr == chosen_lr[pre[i].family]) trained[{pre[i].family, pre[i].seed}] = pre_outs[i].params;
  }
  merge(rec, pre_outs);

  // Phase 2: one-shot sweeps.
  struct PruneArm {
    std::string method;
    std::uint64_t seed;
  };
  std::vector<PruneArm> arms;
  for (const auto& fam : families)
    for (auto seed : rec.seeds) arms.push_back({"fls-" + fam, seed});
  for (const auto& b : baselines) {
    if (b != "magnitude" && b != "mfac" && b != "exact") throw ConfigError("unknown oneshot baseline '" + b + "'");
    for (auto seed : rec.seeds) arms.push_back({b, seed});
  }
  auto outs = run_arms<PruneArm>(arms, opt.jobs, [&](const PruneArm& a) {
    ArmOutput out;
    const LinearTask task = ts.make(a.seed);
    const TestSet test = make_test_set(task);
    ModelState state = ModelState::dense(task.weights, &task);
    push_metric(out, a.method, a.seed, "prune", 0, 0, 0.0, "test_mse", test_mse(test, state.w));
    auto sweep = [&](auto& provider) {
      run_sparsity_sweep(state, provider, grid, [&](double target, Index k, double predicted) {
        push_metric(out, a.method, a.seed, "prune", k, 0, target, "test_mse", test_mse(test, state.w));
        push_metric(out, a.method, a.seed, "prune", k, 0, target, "predicted_increase", predicted);
        const double m = provider.aux_metric();
        if (std::isfinite(m)) push_metric(out, a.method, a.seed, "prune", k, 0, target, "aux_metric", m);
      });
    };
    const auto t0 = std::chrono::steady_clock::now();
    if (a.method == "magnitude") {
      MagnitudeCurvature p(ts.n);
      sweep(p);
    } else if (a.method == "exact") {
      ExactOracleCurvature p(task.fisher());
      sweep(p);
    } else if (a.method == "mfac") {
      WoodburyCurvature p(task, ts.n, mfac_rank, a.seed);
      sweep(p);
    } else {
      const std::string fam = a.method.substr(4);
      AnyQ any = make_structured_q(fam, ts.n, alpha);
      std::visit(
          [&](auto& q) {
            q.set_params(trained.at({fam, a.seed}));
            AuxConfig cfg = aux_config(c, chosen_lr.at(fam), mix_seed(a.seed, 0x0e5));
            FlsCurvature<std::decay_t<decltype(q)>> p(q, task, cfg, refine, 0);
            sweep(p);
          },
          any);
    }
    out.timing.push_back({a.method, a.seed, "prune", Index(grid.size()), grid.back(), elapsed_ms(t0)});
    return out;
  });
  merge(rec, outs);
  return rec;
}

// ---------------------------------------------------------------------------
// block-compare: FLS block-diagonal Q against Woodbury block inverses.

inline ExperimentRecord run_block_compare(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alpha", "block_sizes", "lr_blocks", "pretrain_steps",
                                                     "refine_steps", "woodbury_gradients", "sparsities",
                                                     "include_exact"}));
  const TaskSpec ts = task_spec(c, 500, "exp:10", 0.01);
  const double alpha = c.number("alpha", 1.0 / ts.gamma);
  const auto blocks = c.numbers("block_sizes", {5, 10, 20, 50});
  const auto lrs = c.numbers("lr_blocks", std::vector<double>(blocks.size(), 0.03));
  require(lrs.size() == blocks.size(), "lr_blocks must align with block_sizes");
  const Index pre_steps = c.integer("pretrain_steps", 1000);
  const Index refine = c.integer("refine_steps", 20);
  const Index wgrads = c.integer("woodbury_gradients", 512);
  const auto grid = c.numbers("sparsities", default_sparsity_grid());
  const bool include_exact = c.boolean("include_exact", true);
  ExperimentRecord rec{"block-compare", c, resolve_seeds(c, opt, seed_range(3)), {}, {}, {}};

  struct Arm {
    std::size_t block_index;  // == blocks.size() for the exact oracle
    std::string method;
    std::uint64_t seed;
  };
  std::vector<Arm> arms;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (const char* m : {"fls", "woodbury"})
      for (auto seed : rec.seeds) arms.push_back({b, m, seed});
  if (include_exact)
    for (auto seed : rec.seeds) arms.push_back({blocks.size(), "exact", seed});

  auto outs = run_arms<Arm>(arms, opt.jobs, [&](const Arm& a) {
    ArmOutput out;
    const LinearTask task = ts.make(a.seed);
    const TestSet test = make_test_set(task);
    const Matrix damped = task.fisher().damped();
    ModelState state = ModelState::dense(task.weights, &task);
    const Index b = a.block_index < blocks.size() ? Index(blocks[a.block_index]) : ts.n;
    const std::string method = a.method == "exact" ? "exact" : a.method + "[b=" + std::to_string(b) + "]";
    push_metric(out, method, a.seed, "prune", 0, 0, 0.0, "test_mse", test_mse(test, state.w));

    auto sweep = [&](auto& provider, auto&& dense_of) {
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        provider.prepare(state);
        double ms = elapsed_ms(t0);
        if constexpr (requires { provider.last_update_ms(); }) ms = provider.last_update_ms();
        PruneStep ps = prune_to(state, provider.op(), grid[k]);
        state = std::move(ps.state);
        provider.on_pruned(state);
        const Index step = Index(k + 1);
        push_metric(out, method, a.seed, "prune", step, 0, grid[k], "test_mse", test_mse(test, state.w));
        if (a.method != "exact") {
          // Distance of the estimate used for this prune, on the surviving set.
          push_metric(out, method, a.seed, "prune", step, 0, grid[k], "masked_riemannian_distance",
                      masked_riemannian_distance(dense_of(provider), damped, state.mask));
        }
        out.timing.push_back({method, a.seed, "prune", step, grid[k], ms});
      }
    };

    if (a.method == "exact") {
      ExactOracleCurvature p(task.fisher());
      sweep(p, [](const ExactOracleCurvature& e) { return e.op().matrix(); });
    } else if (a.method == "woodbury") {
      WoodburyCurvature p(task, b, wgrads, a.seed);
      sweep(p, [](const WoodburyCurvature& w) { return w.op().dense(); });
    } else {
      const std::string fam = "block:" + std::to_string(b);
      const double lr = lrs[a.block_index];
      QBlockDiagonal q(ts.n, b, alpha);
      {
        const auto t0 = std::chrono::steady_clock::now();
        MinibatchFvp src(task);
        AuxEstimator<QBlockDiagonal> est(q, aux_config(c, lr, a.seed));
        for (Index k = 0; k < pre_steps; ++k) est.step(src);
        out.timing.push_back({method, a.seed, "pretrain", pre_steps, 0.0, elapsed_ms(t0)});
      }
      FlsCurvature<QBlockDiagonal> p(q, task, aux_config(c, lr, mix_seed(a.seed, 0x0e5)), refine, 0);
      sweep(p, [](const FlsCurvature<QBlockDiagonal>& f) { return f.op().dense(); });
    }
    return out;
  });
  merge(rec, outs);
  rec.notes.push_back("woodbury wall_ms covers the recursion only; fls wall_ms covers the refine steps");
  return rec;
}

// ---------------------------------------------------------------------------
// gradual: the full prune / fine-tune / refine loop on an exponential schedule.

inline ExperimentRecord run_gradual(const Config& c, const RunOptions& opt) {
  check_keys_with_grids(c, with_keys(common_keys(), {"alpha", "methods", "pretrain_steps", "aux_lr", "f0", "f_end",
                                                     "prune_steps", "finetune_steps", "lr", "aux_steps_per_finetune",
                                                     "nm", "woodbury_block", "woodbury_gradients"}));
  const TaskSpec ts = task_spec(c, 100, "exp:10", 0.01);
  const double alpha = c.number("alpha", 1.0 / ts.gamma);
  const auto methods = c.strings("methods", {"fls-full", "fls-diagonal", "woodbury", "magnitude", "exact"});
  const Index pre_steps = c.integer("pretrain_steps", 2000);
  const double aux_lr = c.number("aux_lr", 0.03);
  GradualConfig g;
  g.f0 = c.number("f0", 0.0);
  g.f_end = c.number("f_end", 0.9);
  g.prune_steps = c.integer("prune_steps", 10);
  g.finetune_steps = c.integer("finetune_steps", 50);
  g.lr = c.number("lr", 0.1);
  g.aux_steps_per_finetune = c.integer("aux_steps_per_finetune", 1);
  const std::string nm = c.string("nm", "");
  if (!nm.empty()) {
    const auto colon = nm.find(':');
    if (colon == std::string::npos) throw ConfigError("nm must look like N:M");
    g.pattern.n_zero = std::stol(nm.substr(0, colon));
    g.pattern.m = std::stol(nm.substr(colon + 1));
  }
  g.validate();
  const Index wblock = c.integer("woodbury_block", 20);
  const Index wgrads = c.integer("woodbury_gradients", 512);
  ExperimentRecord rec{"gradual", c, resolve_seeds(c, opt, seed_range(3)), {}, {}, {}};

  struct Arm {
    std::string method;
    std::uint64_t seed;
  };
  std::vector<Arm> arms;
  for (const auto& m : methods) {
    if (m.rfind("fls-", 0) == 0)
      parse_q_spec(m.substr(4), ts.n);
    else if (m != "magnitude" && m != "exact" && m != "woodbury")
      throw ConfigError("unknown gradual method '" + m + "'");
    for (auto seed : rec.seeds) arms.push_back({m, seed});
  }

  auto outs = run_arms<Arm>(arms, opt.jobs, [&](const Arm& a) {
    ArmOutput out;
    const LinearTask task = ts.make(a.seed);
    const TestSet test = make_test_set(task);
    ModelState state = ModelState::dense(task.weights, &task);
    Rng rng = make_rng(a.seed, 0xf17e);
    push_metric(out, a.method, a.seed, "prune", 0, 0, 0.0, "test_mse", test_mse(test, state.w));
    auto record = [&](const std::vector<PruneRecord>& rows) {
      for (const auto& r : rows) {
        push_metric(out, a.method, a.seed, r.phase, r.step, 0, r.sparsity, "test_mse", r.test_mse);
        if (std::isfinite(r.aux_metric))
          push_metric(out, a.method, a.seed, r.phase, r.step, 0, r.sparsity, "aux_metric", r.aux_metric);
        if (r.phase == "prune")
          push_metric(out, a.method, a.seed, r.phase, r.step, 0, r.sparsity, "predicted_increase",
                      r.predicted_increase);
        out.timing.push_back({a.method, a.seed, r.phase, r.step, r.sparsity, r.wall_ms});
      }
    };
    if (a.method == "magnitude") {
      MagnitudeCurvature p(ts.n);
      record(run_prune_loop(state, p, g, test, rng));
    } else if (a.method == "exact") {
      ExactOracleCurvature p(task.fisher());
      record(run_prune_loop(state, p, g, test, rng));
    } else if (a.method == "woodbury") {
      WoodburyCurvature p(task, wblock, wgrads, a.seed);
      record(run_prune_loop(state, p, g, test, rng));
    } else {
      AnyQ any = make_structured_q(a.method.substr(4), ts.n, alpha);
      std::visit(
          [&](auto& q) {
            using QT = std::decay_t<decltype(q)>;
            {
              MinibatchFvp src(task);
              AuxEstimator<QT> est(q, aux_config(c, aux_lr, a.seed));
              for (Index k = 0; k < pre_steps; ++k) est.step(src);
            }
            FlsCurvature<QT> p(q, task, aux_config(c, aux_lr, mix_seed(a.seed, 0x0e5)), 0,
                               g.aux_steps_per_finetune);
            record(run_prune_loop(state, p, g, test, rng));
          },
          any);
    }
    return out;
  });
  merge(rec, outs);
  return rec;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& experiment_ids() {
  static const std::vector<std::string> ids = {"init-dynamics", "precondition", "estimation",
                                               "oneshot",       "block-compare", "gradual"};
  return ids;
}

inline ExperimentRecord run_experiment(const std::string& id, const Config& c, const RunOptions& opt) {
  if (c.has("experiment") && c.string("experiment", "") != id)
    throw ConfigError("config is for experiment '" + c.string("experiment", "") + "', not '" + id + "'");
  if (id == "init-dynamics") return run_init_dynamics(c, opt);
  if (id == "precondition") return run_precondition(c, opt);
  if (id == "estimation") return run_estimation(c, opt);
  if (id == "oneshot") return run_oneshot(c, opt);
  if (id == "block-compare") return run_block_compare(c, opt);
  if (id == "gradual") return run_gradual(c, opt);
  throw ConfigError("unknown experiment '" + id + "'");
}

/// Writes manifest.json, metrics.csv, timing.csv, summary.txt and plots/*.svg
/// under `dir`, each file atomically.
inline void persist(const ExperimentRecord& rec, const std::filesystem::path& dir) {
  if (rec.metrics.empty()) throw std::runtime_error("persist: experiment produced no metrics");
  const std::string csv = metrics_csv(rec.metrics);
  write_atomic(dir / "metrics.csv", csv);
  write_atomic(dir / "timing.csv", timing_csv(rec.timing));
  write_atomic(dir / "summary.txt", summary_text(rec));
  emit_plots(csv, dir / "plots");
  write_atomic(dir / "manifest.json", manifest_json(rec));
}

}  // namespace fls::harness
