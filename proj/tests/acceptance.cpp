// Acceptance checks. `acceptance <k>` runs criterion k, `acceptance` runs all.
// Each prints one PASS/FAIL line; the exit status is nonzero on any failure.

#include "fls/harness/experiments.hpp"

#include <cstdio>
#include <functional>
#include <iostream>

using namespace fls;
using namespace fls::harness;
namespace fs = std::filesystem;

namespace {

#ifndef FLS_CONFIG_DIR
#define FLS_CONFIG_DIR "configs"
#endif

// Two-sided 5% critical value of Student t with 19 degrees of freedom (20 seeds).
constexpr double kT19 = 2.093;

struct Outcome {
  bool pass = false;
  std::string detail;
};

Config load_config(const std::string& name) { return Config::load(std::string(FLS_CONFIG_DIR) + "/" + name); }

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", x);
  return buf;
}

double mean_of(const std::map<std::uint64_t, double>& per_seed, bool absolute = false) {
  std::vector<double> xs;
  for (const auto& [s, v] : per_seed) xs.push_back(absolute ? std::abs(v) : v);
  return mean_sem(xs).mean;
}

// Mean over seeds of `metric` for `method` at the given sparsity.
double mean_at_sparsity(const std::vector<MetricRow>& rows, const std::string& method, const std::string& metric,
                        double sparsity) {
  std::vector<double> xs;
  for (const auto& r : rows)
    if (r.method == method && r.metric == metric && r.sparsity == sparsity && r.phase == "prune") xs.push_back(r.value);
  if (xs.empty()) throw std::runtime_error("no rows for " + method + " " + metric + " at " + fmt(sparsity));
  return mean_sem(xs).mean;
}

// Per-seed OLS slope of value against minibatches over rows with minibatches >= from.
std::vector<double> slopes(const std::vector<MetricRow>& rows, const std::string& method, const std::string& metric,
                           Index from) {
  std::map<std::uint64_t, std::vector<std::pair<double, double>>> pts;
  for (const auto& r : rows)
    if (r.method == method && r.metric == metric && r.minibatches >= from)
      pts[r.seed].emplace_back(double(r.minibatches), r.value);
  std::vector<double> out;
  for (const auto& [s, p] : pts) {
    double mx = 0, my = 0;
    for (const auto& [x, y] : p) mx += x, my += y;
    mx /= double(p.size());
    my /= double(p.size());
    double sxy = 0, sxx = 0;
    for (const auto& [x, y] : p) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
    out.push_back(sxy / sxx);
  }
  return out;
}

double t_stat(const std::vector<double>& xs) {
  const auto ms = mean_sem(xs);
  return ms.sem > 0 ? ms.mean / ms.sem : (ms.mean == 0 ? 0.0 : std::copysign(INFINITY, ms.mean));
}

template <class Q>
Q randomized(Q q, Rng& rng, double scale = 0.3) {
  q.set_params(q.params() + scale * standard_normal(q.num_params(), rng));
  return q;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// ---------------------------------------------------------------------------

Outcome closed_form_oracle() {
  Config c = load_config("init-dynamics.cfg");
  c.set("steps", "0");
  c.set("snapshots", "0");
  c.set("flow", "true");
  const auto rec = run_init_dynamics(c, {});
  double worst = 0.0;
  std::size_t n = 0;
  for (const auto& r : rec.metrics)
    if (r.metric == "flow_rel_err") worst = std::max(worst, r.value), ++n;
  return {n > 0 && worst < 1e-3, "max relative error " + fmt(worst) + " over " + std::to_string(n) + " checkpoints"};
}

Outcome initialization_effect() {
  Config c = load_config("init-dynamics.cfg");
  c.set("flow", "false");
  c.set("snapshots", "0");
  const auto rec = run_init_dynamics(c, {});
  const auto alphas = c.numbers("alphas", {});
  const auto small = best_arm(rec.metrics, "alpha=" + format_double(alphas.front()), "aux_metric");
  const auto large = best_arm(rec.metrics, "alpha=" + format_double(alphas.back()), "aux_metric");
  if (!small || !large) return {false, "an alpha had no converging learning rate"};
  const Index steps = c.integer("steps", 5000);
  // Value of each tuned run at the small-alpha run's final step.
  auto at_step = [&](const std::string& label) {
    std::vector<double> xs;
    for (const auto& r : rec.metrics)
      if (r.method == label && r.metric == "aux_metric" && r.step == steps) xs.push_back(std::abs(r.value));
    return xs.empty() ? INFINITY : mean_sem(xs).mean;
  };
  const double m1 = at_step(small->label), mg = at_step(large->label);
  return {mg <= 0.1 * m1, large->label + " |metric| " + fmt(mg) + " vs " + small->label + " |metric| " + fmt(m1) +
                              " at step " + std::to_string(steps) + " (ratio " + fmt(mg / m1) + ", need <= 0.1)"};
}

Outcome preconditioning() {
  const Config c = load_config("precondition.cfg");
  const auto rec = run_precondition(c, {});
  const auto id = best_arm(rec.metrics, "identity", "aux_metric");
  const auto cq = best_arm(rec.metrics, "current-q", "aux_metric");
  if (!id || !cq) return {false, "a preconditioner had no converging learning rate"};
  const auto a = final_values(rec.metrics, cq->label, "aux_metric");
  const auto b = final_values(rec.metrics, id->label, "aux_metric");
  std::vector<double> diff;
  for (const auto& [s, v] : a) diff.push_back(std::abs(v) - std::abs(b.at(s)));
  const double t = t_stat(diff);
  const double ma = mean_of(a, true), mb = mean_of(b, true);
  return {ma <= mb && diff.size() >= 10, cq->label + " mean |final| " + fmt(ma) + " vs " + id->label + " " + fmt(mb) +
                                             " over " + std::to_string(diff.size()) + " seeds (paired t " + fmt(t) + ")"};
}

Outcome consistency_vs_bias() {
  Config c = load_config("estimation.cfg");
  c.set("panels", R"(["A"])");
  const auto rec = run_estimation(c, {});
  if (rec.seeds.size() != 20) return {false, "expected 20 seeds"};
  const Index batches = c.integer("batches", 2000);
  const auto fl = best_arm(rec.metrics, "fishleg", "riemannian_distance", "A");
  if (!fl) return {false, "no converging fishleg arm"};
  const double d_fl = mean_of(final_values(rec.metrics, fl->label, "riemannian_distance", "A"));
  const double d_nv = mean_of(final_values(rec.metrics, "naive", "riemannian_distance", "A"));
  const Index from = batches - batches / 4;
  const double t_nv = t_stat(slopes(rec.metrics, "naive", "riemannian_distance", from));
  const double t_fl = t_stat(slopes(rec.metrics, fl->label, "riemannian_distance", from));
  const bool ok = d_fl < 0.5 * d_nv && std::abs(t_nv) < kT19 && t_fl < -kT19;
  return {ok, fl->label + " distance " + fmt(d_fl) + " vs naive plateau " + fmt(d_nv) + " (ratio " +
                  fmt(d_fl / d_nv) + "); last-quartile slope t: naive " + fmt(t_nv) + ", fishleg " + fmt(t_fl) +
                  " (critical " + fmt(kT19) + ")"};
}

Outcome structured_estimation() {
  Config c = load_config("estimation.cfg");
  c.set("panels", R"(["B", "C", "D"])");
  const auto rec = run_estimation(c, {});
  bool ok = rec.seeds.size() == 20;
  std::string detail;
  const auto structures = c.strings("structures", {});
  for (const std::string p : {"B", "C", "D"}) {
    const auto fl = best_arm(rec.metrics, "fishleg", "action_error", p);
    if (!fl) return {false, "panel " + p + ": no converging fishleg arm"};
    const double e_fl = mean_of(final_values(rec.metrics, fl->label, "action_error", p));
    const double e_ati = mean_of(final_values(rec.metrics, "approx-then-invert", "action_error", p));
    ok = ok && e_fl <= e_ati;
    detail += (detail.empty() ? "" : "; ") + p + " " + structures.at(std::size_t(p[0] - 'B')) + ": " + fl->label +
              " " + fmt(e_fl) + " vs " + fmt(e_ati);
  }
  return {ok, detail};
}

Outcome oneshot_ordering() {
  const Config c = load_config("oneshot.cfg");
  const auto rec = run_oneshot(c, {});
  if (rec.seeds.size() < 10) return {false, "fewer than 10 seeds"};
  const auto families = c.strings("families", {});
  bool ok = true;
  std::string detail = "aux loss:";
  double full_loss = INFINITY;
  std::map<std::string, double> loss;
  for (const auto& fam : families) {
    const auto best = best_arm(rec.metrics, "fls-" + fam, "aux_loss", "pretrain", false);
    if (!best) return {false, "family " + fam + " diverged at every rate"};
    loss[fam] = best->score.mean;
    detail += " " + fam + "=" + fmt(best->score.mean);
  }
  full_loss = loss.at("full");
  for (const auto& [fam, v] : loss)
    if (fam != "full") ok = ok && full_loss < v;
  std::set<std::string> others;
  for (const auto& r : rec.metrics)
    if (r.phase == "prune" && r.method != "exact" && r.method != "fls-full") others.insert(r.method);
  for (double s : {0.5, 0.8, 0.9}) {
    const double ex = mean_at_sparsity(rec.metrics, "exact", "test_mse", s);
    const double fu = mean_at_sparsity(rec.metrics, "fls-full", "test_mse", s);
    double best_other = INFINITY;
    std::string who;
    for (const auto& m : others) {
      const double v = mean_at_sparsity(rec.metrics, m, "test_mse", s);
      if (v < best_other) best_other = v, who = m;
    }
    ok = ok && ex <= fu && fu <= best_other;
    detail += "; mse@" + fmt(s) + " exact " + fmt(ex) + " full " + fmt(fu) + " next " + who + " " + fmt(best_other);
  }
  return {ok, detail};
}

Outcome block_comparison() {
  const Config c = load_config("block-compare.cfg");
  const auto rec = run_block_compare(c, {});
  bool ok = true;
  std::size_t checked = 0;
  std::string detail;
  for (double b : c.numbers("block_sizes", {})) {
    const std::string tag = "[b=" + std::to_string(Index(b)) + "]";
    double worst_ratio = 0.0;
    for (double s : c.numbers("sparsities", default_sparsity_grid())) {
      const double f = mean_at_sparsity(rec.metrics, "fls" + tag, "masked_riemannian_distance", s);
      const double w = mean_at_sparsity(rec.metrics, "woodbury" + tag, "masked_riemannian_distance", s);
      ok = ok && f <= w;
      worst_ratio = std::max(worst_ratio, f / w);
      ++checked;
    }
    detail += (detail.empty() ? "" : "; ") + std::string("b=") + std::to_string(Index(b)) + " max fls/woodbury " +
              fmt(worst_ratio);
  }
  return {ok && checked > 0, detail + " (" + std::to_string(rec.seeds.size()) + " seeds)"};
}

Outcome algebraic_exactness() {
  Rng rng = make_rng(8);
  std::uniform_int_distribution<Index> dim(1, 20);
  double worst_kron = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Index no = dim(rng), ni = dim(rng);
    while (no * ni > 400) ni = dim(rng);
    const QKroneckerDense q = randomized(QKroneckerDense(DenseLayer{no, ni, false}, 1.0), rng);
    const Matrix dbar = q.scaling();
    const Vector d = Eigen::Map<const Vector>(dbar.data(), dbar.size());
    const Matrix oracle =
        d.asDiagonal() * kron(q.left() * q.left().transpose(), q.right() * q.right().transpose()) * d.asDiagonal();
    const Vector v = standard_normal(q.dim(), rng);
    const double scale = std::max(1.0, oracle.cwiseAbs().maxCoeff());
    worst_kron = std::max(worst_kron, (q.qv(v) - oracle * v).cwiseAbs().maxCoeff() / (scale * v.norm()));
    worst_kron = std::max(worst_kron, (q.diag() - oracle.diagonal()).cwiseAbs().maxCoeff() / scale);
  }
  double worst_wb = 0.0;
  for (Index b : {1, 2, 5, 10, 20}) {
    const Index n = 40, m = 100;
    const double gamma = 0.01;
    WoodburyBlockInverse w(n, b, gamma, m);
    Matrix acc = Matrix::Zero(n, n);
    for (Index j = 0; j < m; ++j) {
      const Vector g = standard_normal(n, rng);
      w.update(g);
      acc += g * g.transpose();
      Index s = 0;
      for (Index k = 0; k < w.num_blocks(); ++k) {
        const Index bs = w.block(k).rows();
        const Matrix want = spd_inverse(gamma * Matrix::Identity(bs, bs) + acc.block(s, s, bs, bs) / double(m));
        worst_wb = std::max(worst_wb, (w.block(k) - want).cwiseAbs().maxCoeff() / std::max(1.0, want.cwiseAbs().maxCoeff()));
        s += bs;
      }
    }
  }
  return {worst_kron < 1e-10 && worst_wb < 1e-8,
          "kronecker max rel err " + fmt(worst_kron) + " (50 shapes); woodbury max rel err " + fmt(worst_wb) +
              " over every prefix (b in 1..20)"};
}

template <class Q>
double fd_rel_error(Q q, const Matrix& damped, const Vector& u, Preconditioner mode) {
  auto fvp = [&](const Vector& v) { return Vector(damped * v); };
  const Vector g = aux_gradient(q, fvp, u, mode);
  const Vector frozen = q.qv(Vector(fvp(q.qv(u)) - u));
  auto objective = [&](const Q& x) {
    return mode == Preconditioner::Identity ? aux_loss_sample(x, fvp, u) : frozen.dot(x.qv(u)) / u.squaredNorm();
  };
  const Vector lambda = q.params();
  Vector fd(lambda.size());
  const double h = 1e-5;
  for (Index k = 0; k < lambda.size(); ++k) {
    Vector lp = lambda, lm = lambda;
    lp[k] += h;
    lm[k] -= h;
    q.set_params(lp);
    const double fp = objective(q);
    q.set_params(lm);
    fd[k] = (fp - objective(q)) / (2 * h);
  }
  return (g - fd).norm() / std::max(fd.norm(), 1e-300);
}

Outcome gradient_correctness() {
  Rng rng = make_rng(9);
  std::map<std::string, double> worst;
  for (int inst = 0; inst < 20; ++inst) {
    auto run = [&](const std::string& name, auto q) {
      const Index n = q.dim();
      const auto f = make_spectral_fisher(n, ExpSpectrum{3.0}, 0.05, std::uint64_t(100 + inst));
      const Vector u = standard_normal(n, rng);
      for (auto mode : {Preconditioner::Identity, Preconditioner::CurrentQ}) {
        const std::string key = name + (mode == Preconditioner::Identity ? "/identity" : "/current-q");
        worst[key] = std::max(worst[key], fd_rel_error(q, f.damped(), u, mode));
      }
    };
    run("full", randomized(QFull(6, 1.0), rng));
    run("diagonal", randomized(QDiagonal(8, 1.0), rng));
    run("block", randomized(QBlockDiagonal(9, 3, 1.0), rng));
    run("kron", randomized(QKroneckerDense(DenseLayer{2, 3, false}, 1.0), rng));
    run("kron-conv", randomized(QKroneckerConv(ConvLayer{2, 2, 2}, 1.0), rng));
  }
  bool ok = worst.size() == 10;
  std::string detail;
  double overall = 0.0;
  for (const auto& [k, v] : worst) ok = ok && v < 1e-5, overall = std::max(overall, v);
  for (const auto& [k, v] : worst) detail += (detail.empty() ? "" : ", ") + k + " " + fmt(v);
  return {ok, "max rel err " + fmt(overall) + " (" + detail + ")"};
}

Outcome obs_exactness() {
  Rng rng = make_rng(10);
  double worst = 0.0;
  bool zeroed = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + trial % 5;
    const Matrix a = standard_normal(n, n, rng);
    const Matrix h = symmetrized(a * a.transpose() / double(n) + 0.2 * Matrix::Identity(n, n));
    const Vector w_star = standard_normal(n, rng);
    auto loss = [&](const Vector& v) { return 0.5 * (v - w_star).dot(h * (v - w_star)); };
    const DenseOperator q(spd_inverse(h));
    const ModelState s = ModelState::dense(w_star);
    const Vector rho = obs_scores(s, q.diag());
    for (Index i = 0; i < n; ++i) {
      const ModelState after = obs_update(s, q, {i});
      zeroed = zeroed && after.w[i] == 0.0 && !after.mask.alive(i);
      worst = std::max(worst, std::abs(loss(after.w) - loss(s.w) - rho[i]));
    }
  }
  std::uniform_int_distribution<Index> mdist(2, 8), blocks(1, 16);
  bool nm_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index m = mdist(rng);
    const Index nz = std::uniform_int_distribution<Index>(0, m - 1)(rng);
    const Index n = m * blocks(rng);
    const Vector scores = standard_normal(n, rng);
    const Mask mask = select_nm(scores, nz, m);
    for (Index b = 0; b < n; b += m) {
      Index zeros = 0;
      for (Index i = b; i < b + m; ++i) zeros += mask.alive(i) ? 0 : 1;
      nm_ok = nm_ok && zeros == nz;
    }
  }
  return {worst < 1e-8 && zeroed && nm_ok, "max |increase - score| " + fmt(worst) + ", pruned exactly zero: " +
                                               (zeroed ? "yes" : "no") + "; N:M counts exact over 1000 vectors: " +
                                               (nm_ok ? "yes" : "no")};
}

Outcome unbiasedness() {
  const auto task = make_linear_task(12, ExpSpectrum{3.0}, 0.1, 0.0, 8, 11);
  Rng rng = make_rng(11);
  const QFull q = randomized(QFull(12, 1.0), rng);
  const Vector u = standard_normal(12, rng);
  std::vector<Index> subset(std::size_t(q.num_params()));
  std::iota(subset.begin(), subset.end(), 0);
  std::shuffle(subset.begin(), subset.end(), rng);
  subset.resize(50);
  bool ok = true;
  double worst_z = 0.0;
  for (auto mode : {Preconditioner::Identity, Preconditioner::CurrentQ}) {
    const Vector exact =
        aux_gradient(q, [&](const Vector& v) { return fisher_vector_product(task.fisher(), v); }, u, mode);
    const int reps = 10000;
    Vector sum = Vector::Zero(exact.size()), sumsq = Vector::Zero(exact.size());
    MinibatchFvp src(task);
    for (int k = 0; k < reps; ++k) {
      src.advance(rng);
      const Vector g = aux_gradient(q, [&](const Vector& v) { return src.apply(v); }, u, mode);
      sum += g;
      sumsq += g.cwiseAbs2();
    }
    const Vector mean = sum / reps;
    const Vector se = ((sumsq / reps - mean.cwiseAbs2()) / (reps - 1)).cwiseSqrt();
    for (Index k : subset) {
      const double z = std::abs(mean[k] - exact[k]) / std::max(se[k], 1e-300);
      worst_z = std::max(worst_z, z);
      ok = ok && z < 5.0;
    }
  }
  return {ok, "max |mean - exact| / s.e. " + fmt(worst_z) + " over 50 components, 1e4 minibatches, both modes"};
}

// Small-budget versions of the shipped configs, run twice each.
Outcome reproducibility() {
  struct Case {
    std::string id;
    std::vector<std::pair<std::string, std::string>> overrides;
  };
  const std::vector<Case> cases = {
      {"init-dynamics", {{"steps", "200"}, {"flow_time", "0.05"}, {"seeds", "[0]"}}},
      {"precondition", {{"steps", "200"}, {"seeds", "[0, 1]"}}},
      {"estimation",
       {{"batches", "100"}, {"action_record_every", "50"}, {"action_samples", "256"}, {"seeds", "[0, 1]"}}},
      {"oneshot", {{"pretrain_steps", "100"}, {"seeds", "[0, 1]"}}},
      {"block-compare", {{"pretrain_steps", "50"}, {"woodbury_gradients", "64"}, {"seeds", "[0]"}}},
      {"gradual", {{"pretrain_steps", "100"}, {"prune_steps", "3"}, {"finetune_steps", "10"}, {"seeds", "[0, 1]"}}},
  };
  const fs::path root = fs::temp_directory_path() / "fls_acceptance_repro";
  fs::remove_all(root);
  bool ok = true;
  std::string detail;
  for (const auto& cs : cases) {
    Config c = load_config(cs.id + ".cfg");
    for (const auto& [k, v] : cs.overrides) c.set(k, v);
    RunOptions serial, pooled;
    pooled.jobs = 2;
    persist(run_experiment(cs.id, c, serial), root / cs.id / "a");
    persist(run_experiment(cs.id, c, pooled), root / cs.id / "b");
    const std::string a = read_file(root / cs.id / "a" / "metrics.csv");
    const std::string b = read_file(root / cs.id / "b" / "metrics.csv");
    const bool same = a == b && !a.empty();
    ok = ok && same;
    detail += (detail.empty() ? "" : ", ") + cs.id + (same ? " identical" : " DIFFERENT") + " (" +
              content_hash(a).substr(0, 10) + ")";
  }
  fs::remove_all(root);
  return {ok, detail};
}

struct Criterion {
  const char* title;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {"closed-form dynamics oracle", 30, closed_form_oracle},
      {"initialization effect", 120, initialization_effect},
      {"preconditioning", 120, preconditioning},
      {"consistency vs bias", 300, consistency_vs_bias},
      {"structured estimation", 600, structured_estimation},
      {"one-shot ordering", 600, oneshot_ordering},
      {"block comparison", 900, block_comparison},
      {"algebraic exactness", 0, algebraic_exactness},
      {"gradient correctness", 0, gradient_correctness},
      {"OBS exactness", 0, obs_exactness},
      {"unbiasedness", 0, unbiasedness},
      {"reproducibility", 0, reproducibility},
  };
  return all;
}

bool run_one(std::size_t k) {
  const auto& c = criteria().at(k - 1);
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string timing = fmt(secs) + " s";
  if (c.budget_s > 0) {
    timing += " of " + fmt(c.budget_s) + " s";
    if (secs >= c.budget_s) {
      o.pass = false;
      timing += " OVER BUDGET";
    }
  }
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << c.title << "): " << o.detail << " ["
            << timing << "]" << std::endl;
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::size_t> which;
  for (int i = 1; i < argc; ++i) {
    const long k = std::strtol(argv[i], nullptr, 10);
    if (k < 1 || k > long(criteria().size())) {
      std::cerr << "usage: acceptance [1-" << criteria().size() << "]...\n";
      return 2;
    }
    which.push_back(std::size_t(k));
  }
  if (which.empty())
    for (std::size_t k = 1; k <= criteria().size(); ++k) which.push_back(k);
  bool all = true;
  for (auto k : which) all = run_one(k) && all;
  return all ? 0 : 1;
}
