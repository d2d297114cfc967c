#include "smpdelay/smp.hpp"

#include "detail.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace smpdelay {

using detail::Channels;
using detail::RidgeRegression;

namespace {

int node_of_time(const TimeGrid& grid, double s, const char* what) {
  if (s < -1e-12 || s > grid.horizon + 1e-12) {
    std::ostringstream os;
    os << what << ": time " << s << " outside [0, " << grid.horizon << "]";
    throw DomainError(os.str());
  }
  int k = std::clamp(static_cast<int>(std::llround(s / grid.dt)), 0, grid.steps);
  if (std::abs(s - k * grid.dt) > 1e-9 * std::max(1.0, std::abs(s))) {
    std::ostringstream os;
    os << what << ": time " << s << " does not sit on a grid node (dt = " << grid.dt << ")";
    throw AlignmentError(os.str());
  }
  return k;
}

void check_adjoint(const ProblemSpec& spec, const AdjointSolution& adj,
                   const ControlPath& control, const char* what) {
  std::string w(what);
  if (adj.spec_id != spec.id)
    throw ConsistencyError(w + ": the adjoint pair was solved for a different problem");
  if (adj.control_id != control.id)
    throw ConsistencyError(w + ": the adjoint pair was solved under a different control");
  if (adj.mollified)
    throw ConsistencyError(w + ": pass the exact-measure adjoint pair; smoothing only "
                               "rewrites the flow transport");
}

void check_bundle(const AdjointSolution& adj, const BrownianBundle& W, const char* what) {
  if (!adj.grid.same(W.grid()) || adj.seed != W.seed() || adj.n_paths != W.n_paths() ||
      adj.dim_w != W.n_noise())
    throw ConsistencyError(std::string(what) + ": adjoint noise bundle does not match");
}

// Pairs (a, b), a <= b, of the coordinate flows; row-major upper triangle.
inline int pair_index(int a, int b, int F) { return a * F - a * (a - 1) / 2 + (b - a); }

// Shared accumulation for the kernel forms: per path, the terminal Hessian
// form of the flow pair plus the left-rectangle time integral of the
// coefficient-Hessian forms contracted against the stored adjoint pair. The
// integral carries the opposite sign of the driver convention, which is what
// makes the result the positive kernel for convex costs.
struct FormJob {
  const ProblemSpec& spec;
  const AdjointSolution& adj;
  const TrajectoryBundle& base;
  const std::vector<TrajectoryBundle>& flows;
  const std::vector<Vec>& u;
  const Channels& args;   // exact coefficient arguments
  const Channels& forms;  // transport side of the flow's past slots
  int node_s = 0;
  bool cost_past = false;  // l_xy / l_yy blocks participate
};

std::vector<std::vector<double>> accumulate_forms(const FormJob& job, int workers) {
  const ProblemSpec& spec = job.spec;
  const TimeGrid& g = job.base.grid;
  const int d = spec.dim_x, m = spec.dim_w;
  const int Kb = spec.drift_channels(), Ks = spec.diff_channels();
  const int N = g.steps;
  const int M = job.base.n_paths;
  const int F = static_cast<int>(job.flows.size());
  const int n_pairs = F * (F + 1) / 2;

  const bool has_bxx = bool(spec.b_xx), has_bxy = bool(spec.b_xy), has_byy = bool(spec.b_yy);
  const bool has_sxx = bool(spec.sigma_xx), has_sxy = bool(spec.sigma_xy),
             has_syy = bool(spec.sigma_yy);
  const bool has_lxx = bool(spec.l_xx);
  const bool has_lxy = job.cost_past && bool(spec.l_xy);
  const bool has_lyy = job.cost_past && bool(spec.l_yy);
  const bool need_yb = has_bxy || has_byy;
  const bool need_ys = has_sxy || has_syy;
  const bool need_yl = has_lxy || has_lyy;

  std::vector<std::vector<double>> out(n_pairs, std::vector<double>(M, 0.0));

  std::size_t n_blocks = (static_cast<std::size_t>(M) + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    int pa = static_cast<int>(blk * kReductionBlock);
    int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    Vec x(d), ib(Kb * d), is(Ks * d), il(d);
    il.setZero();
    std::vector<Vec> y(F, Vec(d)), Yb(F, Vec(Kb * d)), Ys(F, Vec(Ks * d)), Yl(F, Vec(d));
    Tensor3 bxx, bxy, byy;
    Tensor4 sxx, sxy, syy;
    Mat lxx, lxy, lyy, hxx;
    for (int p = pa; p < pb; ++p) {
      for (int i = job.node_s; i <= N; ++i) {
        const double* xp = job.base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xp[c];
        for (int f = 0; f < F; ++f) {
          const double* yp = job.flows[f].at(p, i);
          for (int c = 0; c < d; ++c) y[f][c] = yp[c];
        }
        if (i == N) {
          spec.h_xx(x, hxx);
          for (int a = 0; a < F; ++a)
            for (int b = a; b < F; ++b)
              out[pair_index(a, b, F)][p] += y[a].dot(hxx * y[b]);
          continue;
        }
        // left-rectangle running weight: the exact dual of the backward
        // product-space step, which places its driver at the step start
        const double w = g.dt;
        detail::stack_integrals(job.args.drift, job.base, p, i, ib);
        detail::stack_integrals(job.args.diff, job.base, p, i, is);
        if (job.args.cost_used)
          detail::single_integral(job.args.cost, job.base, p, i, il);
        if (need_yb)
          for (int f = 0; f < F; ++f)
            detail::stack_integrals(job.forms.drift, job.flows[f], p, i, Yb[f]);
        if (need_ys)
          for (int f = 0; f < F; ++f)
            detail::stack_integrals(job.forms.diff, job.flows[f], p, i, Ys[f]);
        if (need_yl)
          for (int f = 0; f < F; ++f)
            detail::single_integral(job.forms.cost, job.flows[f], p, i, Yl[f]);
        double t = g.time_at(i);
        const Vec& ui = job.u[i];
        const double* ph = job.adj.p_at(p, i);
        const double* qh = job.adj.q_at(p, i);

        if (has_bxx) spec.b_xx(t, x, ib, ui, bxx);
        if (has_bxy) spec.b_xy(t, x, ib, ui, bxy);
        if (has_byy) spec.b_yy(t, x, ib, ui, byy);
        if (has_sxx) spec.sigma_xx(t, x, is, ui, sxx);
        if (has_sxy) spec.sigma_xy(t, x, is, ui, sxy);
        if (has_syy) spec.sigma_yy(t, x, is, ui, syy);
        if (has_lxx) spec.l_xx(t, x, il, ui, lxx);
        if (has_lxy) spec.l_xy(t, x, il, ui, lxy);
        if (has_lyy) spec.l_yy(t, x, il, ui, lyy);

        for (int a = 0; a < F; ++a) {
          for (int b = a; b < F; ++b) {
            double acc = 0.0;
            if (has_bxx || has_bxy || has_byy) {
              for (int j = 0; j < d; ++j) {
                double bj = 0.0;
                if (has_bxx) bj += y[a].dot(bxx[j] * y[b]);
                if (has_bxy) bj += y[a].dot(bxy[j] * Yb[b]) + y[b].dot(bxy[j] * Yb[a]);
                if (has_byy) bj += Yb[a].dot(byy[j] * Yb[b]);
                acc += ph[j] * bj;
              }
            }
            if (has_sxx || has_sxy || has_syy) {
              for (int l = 0; l < m; ++l) {
                for (int j = 0; j < d; ++j) {
                  double sj = 0.0;
                  if (has_sxx) sj += y[a].dot(sxx[l][j] * y[b]);
                  if (has_sxy) sj += y[a].dot(sxy[l][j] * Ys[b]) + y[b].dot(sxy[l][j] * Ys[a]);
                  if (has_syy) sj += Ys[a].dot(syy[l][j] * Ys[b]);
                  sj *= qh[l * d + j];
                  acc += sj;
                }
              }
            }
            if (has_lxx) acc += y[a].dot(lxx * y[b]);
            if (has_lxy) acc += y[a].dot(lxy * Yl[b]) + y[b].dot(lxy * Yl[a]);
            if (has_lyy) acc += Yl[a].dot(lyy * Yl[b]);
            out[pair_index(a, b, F)][p] += w * acc;
          }
        }
      }
    }
  }, workers);
  return out;
}

// Polynomial features of the time-s state: intercept, state components, the
// distinct lag integrals, and every degree-2 product. Same basis the adjoint
// sweeps project on.
Mat kernel_features(const ProblemSpec& spec, const TrajectoryBundle& base, int node,
                    const SimOptions& sopt) {
  auto uniq = detail::unique_channels(spec, base.grid, sopt);
  const int d = base.dim, M = base.n_paths;
  const int nb = d * (1 + static_cast<int>(uniq.size()));
  const int Ff = 1 + nb + nb * (nb + 1) / 2;
  Mat Phi(M, Ff);
  Vec f(nb), seg(d);
  for (int p = 0; p < M; ++p) {
    const double* xp = base.at(p, node);
    for (int c = 0; c < d; ++c) f[c] = xp[c];
    for (std::size_t c = 0; c < uniq.size(); ++c) {
      detail::single_integral(uniq[c], base, p, node, seg);
      f.segment(d * (1 + static_cast<int>(c)), d) = seg;
    }
    Phi(p, 0) = 1.0;
    int col = 1;
    for (int a = 0; a < nb; ++a) Phi(p, col++) = f[a];
    for (int a = 0; a < nb; ++a)
      for (int b = a; b < nb; ++b) Phi(p, col++) = f[a] * f[b];
  }
  return Phi;
}

SimOptions sim_options(const KernelOptions& opt) {
  SimOptions s;
  s.workers = opt.workers;
  s.interpolate_atoms = opt.interpolate_atoms;
  s.mollify_n = opt.mollify_n;
  return s;
}

std::string method_tag(const KernelOptions& opt) {
  if (opt.mollify_n) return "mollified-" + std::to_string(*opt.mollify_n);
  return "representation";
}

bool cost_past_forms(const ProblemSpec& spec) {
  return spec.cost_uses_past && spec.mu_cost.has_density();
}

// Common setup for the representation estimators: provenance, base state on
// the exact dynamics, coordinate flows from s, per-pair accumulation, and the
// conditional projection at interior times.
struct KernelRun {
  TrajectoryBundle base;
  std::vector<std::vector<double>> slabs;  // per pair, per path
  std::vector<MeanVar> raw;                // per pair
  std::vector<double> value;               // per pair, projected at s > 0
  int node_s = 0;
};

KernelRun run_kernel_forms(const ProblemSpec& spec, double s, const std::vector<Vec>& starts,
                           const AdjointSolution& adj, const ControlPath& control,
                           const BrownianBundle& W, const KernelOptions& opt,
                           const char* what) {
  check_adjoint(spec, adj, control, what);
  check_bundle(adj, W, what);
  if (!spec.h_xx)
    throw ConfigError(std::string(what) + " needs the terminal Hessian callback h_xx");
  const TimeGrid& g = W.grid();
  KernelRun run;
  run.node_s = node_of_time(g, s, what);

  SimOptions exact;
  exact.workers = opt.workers;
  exact.interpolate_atoms = opt.interpolate_atoms;
  SimOptions sopt = sim_options(opt);

  run.base = simulate_state(spec, g, control, W, exact);
  std::vector<TrajectoryBundle> flows;
  flows.reserve(starts.size());
  for (const Vec& h : starts)
    flows.push_back(simulate_linearized_flow(spec, run.base, control, W, run.node_s, h, sopt));

  Channels args = detail::compile_channels(spec, g, exact, false);
  Channels forms = detail::compile_channels(spec, g, sopt, true);
  std::vector<Vec> u = detail::hoist_controls(control, g.steps + 1);

  FormJob job{spec, adj, run.base, flows, u, args, forms, run.node_s, cost_past_forms(spec)};
  run.slabs = accumulate_forms(job, opt.workers);

  const int n_pairs = static_cast<int>(run.slabs.size());
  run.raw.reserve(n_pairs);
  for (const auto& slab : run.slabs) run.raw.push_back(mean_sem(slab));
  run.value.resize(n_pairs);
  for (int k = 0; k < n_pairs; ++k) run.value[k] = run.raw[k].mean;

  if (run.node_s > 0) {
    // Conditional form at an interior time: project the per-path functional
    // on the time-s features. The intercept keeps the projected mean equal to
    // the raw mean; the fit enforces the sample-size precondition and is what
    // a conditional-kernel consumer would evaluate.
    Mat Phi = kernel_features(spec, run.base, run.node_s, exact);
    RidgeRegression rr;
    rr.build(Phi, opt.ridge, opt.min_paths_per_feature, run.node_s);
    const int M = run.base.n_paths;
    Mat Y(M, n_pairs);
    for (int k = 0; k < n_pairs; ++k)
      for (int p = 0; p < M; ++p) Y(p, k) = run.slabs[k][p];
    Mat fit = rr.fit(Y);
    for (int k = 0; k < n_pairs; ++k) run.value[k] = fit.col(k).mean();
  }
  return run;
}

double fit_slope(const std::vector<double>& lx, const std::vector<double>& ly) {
  const int n = static_cast<int>(lx.size());
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) { mx += lx[i]; my += ly[i]; }
  mx /= n; my /= n;
  double sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  return sxy / sxx;
}

} // namespace

double hamiltonian(const ProblemSpec& spec, double t, const Vec& x, const PastState& past,
                   const Vec& u, const Vec& p0, const Mat& q0) {
  const int d = spec.dim_x, m = spec.dim_w;
  if (p0.size() != d) throw ShapeError("hamiltonian: p0 must have one entry per state");
  if (q0.rows() != d || q0.cols() != m)
    throw ShapeError("hamiltonian: q0 must be state x noise");
  if (!spec.b || !spec.sigma || !spec.l)
    throw ConfigError("hamiltonian needs the b, sigma, l callbacks");
  Vec bb;
  spec.b(t, x, past.drift, u, bb);
  Mat sg;
  spec.sigma(t, x, past.diff, u, sg);
  Vec zero;
  const Vec* yl = &past.cost;
  if (!past.cost.size()) {
    zero = Vec::Zero(d);
    yl = &zero;
  }
  double val = p0.dot(bb) - spec.l(t, x, *yl, u);
  for (int l = 0; l < m; ++l) val += q0.col(l).dot(sg.col(l));
  return val;
}

int SecondOrderKernel::index_near(double t) const {
  if (times.empty()) throw DomainError("kernel has no time samples");
  int best = 0;
  double dist = std::abs(times[0] - t);
  for (std::size_t i = 1; i < times.size(); ++i) {
    double di = std::abs(times[i] - t);
    if (di < dist - 1e-15) { best = static_cast<int>(i); dist = di; }
  }
  return best;
}

ScalarEstimate p00_quadratic_form(const ProblemSpec& spec, double s, const Vec& h,
                                  const AdjointSolution& adj, const ControlPath& control,
                                  const BrownianBundle& W, const KernelOptions& opt) {
  KernelRun run = run_kernel_forms(spec, s, {h}, adj, control, W, opt, "kernel form");
  return {run.value[0], run.raw[0].sem};
}

SecondOrderKernel p00_matrix(const ProblemSpec& spec, double s, const AdjointSolution& adj,
                             const ControlPath& control, const BrownianBundle& W,
                             const KernelOptions& opt) {
  const int d = spec.dim_x;
  std::vector<Vec> starts(d);
  for (int j = 0; j < d; ++j) starts[j] = Vec::Unit(d, j);
  KernelRun run = run_kernel_forms(spec, s, starts, adj, control, W, opt, "kernel matrix");

  SecondOrderKernel K;
  K.method = method_tag(opt);
  K.times.push_back(W.grid().time_at(run.node_s));
  Mat val(d, d), sem(d, d);
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      int k = pair_index(a, b, d);
      val(a, b) = val(b, a) = run.value[k];
      sem(a, b) = sem(b, a) = run.raw[k].sem;
    }
  }
  K.matrices.push_back(val);
  K.std_errors.push_back(sem);
  return K;
}

SecondOrderKernel p00_kernel(const ProblemSpec& spec, const std::vector<double>& times,
                             const AdjointSolution& adj, const ControlPath& control,
                             const BrownianBundle& W, const KernelOptions& opt) {
  if (times.empty()) throw ConfigError("kernel needs at least one sample time");
  std::vector<int> nodes;
  for (double t : times) nodes.push_back(node_of_time(W.grid(), t, "kernel"));
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());

  SecondOrderKernel K;
  for (int node : nodes) {
    SecondOrderKernel one = p00_matrix(spec, W.grid().time_at(node), adj, control, W, opt);
    K.times.push_back(one.times[0]);
    K.matrices.push_back(std::move(one.matrices[0]));
    K.std_errors.push_back(std::move(one.std_errors[0]));
    K.method = one.method;
  }
  return K;
}

std::vector<double> default_kernel_times(const TimeGrid& grid) {
  std::vector<int> nodes;
  for (double f : {0.0, 0.25, 0.5, 0.75})
    nodes.push_back(static_cast<int>(std::llround(f * grid.steps)));
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  std::vector<double> out;
  for (int k : nodes) out.push_back(grid.time_at(k));
  return out;
}

SecondOrderKernel kernel_from_backward_form(const SecondAdjointH& sol,
                                            const std::vector<double>& times) {
  if (times.empty()) throw ConfigError("kernel needs at least one sample time");
  const TimeGrid& g = sol.hg.grid;
  std::vector<int> nodes;
  for (double t : times) nodes.push_back(node_of_time(g, t, "kernel"));
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());

  SecondOrderKernel K;
  K.method = "matrix-bsde";
  const int d = sol.hg.dim, L = g.lag_steps;
  for (int node : nodes) {
    K.times.push_back(g.time_at(node));
    // The representation flow starts with the present value in the head and
    // in the theta = 0 slot, so the matching contraction folds that slot into
    // the head block. Sign flipped to the forward (positive) orientation.
    const Mat& G = sol.form[node];
    const Mat& S = sol.form_sem[node];
    Mat Kv(d, d), Ks(d, d);
    for (int a = 0; a < d; ++a) {
      const int ha = sol.hg.head(a), ta = sol.hg.tail(L, a);
      for (int b = 0; b < d; ++b) {
        const int hb = sol.hg.head(b), tb = sol.hg.tail(L, b);
        Kv(a, b) = -(G(ha, hb) + G(ha, tb) + G(ta, hb) + G(ta, tb));
        Ks(a, b) = std::sqrt(S(ha, hb) * S(ha, hb) + S(ha, tb) * S(ha, tb) +
                             S(ta, hb) * S(ta, hb) + S(ta, tb) * S(ta, tb));
      }
    }
    K.matrices.push_back(Kv);
    K.std_errors.push_back(Ks);
  }
  return K;
}

SMPReport check_variational_inequality(const ProblemSpec& spec, const ControlPath& control,
                                       const AdjointSolution& adj, const SecondOrderKernel& P00,
                                       const CheckOptions& opt) {
  check_adjoint(spec, adj, control, "inequality check");
  if (spec.controls.points.empty())
    throw ConfigError("inequality check: the control set has no points");
  const TimeGrid& g = adj.grid;
  const int N = g.steps;

  double span = opt.coverage_span < 0 ? g.horizon / 4 : opt.coverage_span;
  if (P00.times.empty())
    throw CoverageError("kernel time grid leaves all of [0, T] without a usable sample");
  for (int i = 0; i < N; ++i) {
    double t = g.time_at(i);
    double dist = std::abs(P00.times[P00.index_near(t)] - t);
    if (dist > span + 1e-12) {
      std::ostringstream os;
      os << "kernel time grid leaves part of [0, T] without a usable sample: t = " << t
         << " is " << dist << " from the nearest sample";
      throw CoverageError(os.str());
    }
  }

  std::optional<BrownianBundle> own;
  const BrownianBundle* W = opt.bundle;
  if (W) {
    check_bundle(adj, *W, "inequality check");
  } else {
    own.emplace(g, adj.n_paths, adj.dim_w, adj.seed);
    W = &*own;
  }

  SimOptions sopt;
  sopt.workers = opt.workers;
  sopt.interpolate_atoms = opt.interpolate_atoms;
  TrajectoryBundle base = simulate_state(spec, g, control, *W, sopt);
  Channels args = detail::compile_channels(spec, g, sopt, false);
  std::vector<Vec> u = detail::hoist_controls(control, N + 1);

  const auto& points = spec.controls.points;
  const int nv = static_cast<int>(points.size());
  const int d = spec.dim_x, m = spec.dim_w;
  const int Kb = spec.drift_channels(), Ks = spec.diff_channels();
  const int M = base.n_paths;

  SMPReport rep;
  rep.scenario = spec.id;
  rep.grid = g;
  rep.seed = adj.seed;
  rep.n_paths = M;
  rep.control_points = points;
  rep.tolerance = opt.abs_tol;
  rep.k_sigma = opt.k_sigma;
  rep.delta_h.resize(N, nv);
  rep.delta_h_sem.resize(N, nv);
  rep.argmin.resize(N);
  rep.worst_gap = -std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> slab(nv, std::vector<double>(M));
  std::size_t n_blocks = (static_cast<std::size_t>(M) + kReductionBlock - 1) / kReductionBlock;

  for (int i = 0; i < N; ++i) {
    double t = g.time_at(i);
    const Mat& Kt = P00.matrices[P00.index_near(t)];
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      Vec x(d);
      PastState past{Vec(Kb * d), Vec(Ks * d), Vec()};
      if (args.cost_used) past.cost.resize(d);
      Vec p0(d);
      Mat q0(d, m), su, sv;
      for (int p = pa; p < pb; ++p) {
        const double* xp = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xp[c];
        detail::stack_integrals(args.drift, base, p, i, past.drift);
        detail::stack_integrals(args.diff, base, p, i, past.diff);
        if (args.cost_used) detail::single_integral(args.cost, base, p, i, past.cost);
        const double* ph = adj.p_at(p, i);
        const double* qh = adj.q_at(p, i);
        for (int c = 0; c < d; ++c) p0[c] = -ph[c];
        for (int l = 0; l < m; ++l)
          for (int c = 0; c < d; ++c) q0(c, l) = -qh[l * d + c];
        double Hu = hamiltonian(spec, t, x, past, u[i], p0, q0);
        spec.sigma(t, x, past.diff, u[i], su);
        for (int v = 0; v < nv; ++v) {
          double Hv = hamiltonian(spec, t, x, past, points[v], p0, q0);
          spec.sigma(t, x, past.diff, points[v], sv);
          double quad = 0.0;
          for (int l = 0; l < m; ++l) {
            Vec ds = sv.col(l) - su.col(l);
            quad += ds.dot(Kt * ds);
          }
          slab[v][p] = Hu - Hv + 0.5 * quad;
        }
      }
    }, opt.workers);

    int arg = 0;
    bool tied = false;
    for (int v = 0; v < nv; ++v) {
      MeanVar mv = mean_sem(slab[v]);
      rep.delta_h(i, v) = mv.mean;
      rep.delta_h_sem(i, v) = mv.sem;
      if (v > 0) {
        if (mv.mean < rep.delta_h(i, arg)) { arg = v; tied = false; }
        else if (mv.mean == rep.delta_h(i, arg)) tied = true;
      }
      double gap = -mv.mean;
      if (gap > rep.worst_gap) {
        rep.worst_gap = gap;
        rep.gap_sem = mv.sem;
      }
      if (gap > opt.abs_tol + opt.k_sigma * mv.sem)
        rep.violations.push_back({t, points[v], gap, mv.sem});
    }
    rep.argmin[i] = arg;
    if (tied && nv > 1) rep.tie_times.push_back(t);
    rep.times.push_back(t);
  }

  double frac = opt.bad_fraction < 0 ? 2.0 / N : opt.bad_fraction;
  int allowed = static_cast<int>(std::floor(frac * N + 1e-9));
  std::vector<double> bad;
  for (const auto& v : rep.violations)
    if (bad.empty() || bad.back() != v.t) bad.push_back(v.t);
  rep.pass = static_cast<int>(bad.size()) <= allowed;
  rep.verdict = rep.pass ? "pass" : "fail";
  return rep;
}

std::string to_json(const SMPReport& rep) {
  nlohmann::ordered_json j;
  j["scenario"] = rep.scenario;
  j["grid"] = {{"horizon", rep.grid.horizon},
               {"steps", rep.grid.steps},
               {"delay", rep.grid.delay}};
  j["seed"] = rep.seed;
  j["n_paths"] = rep.n_paths;
  j["worst_gap"] = rep.worst_gap;
  j["gap_stderr"] = rep.gap_sem;
  j["tolerance"] = rep.tolerance;
  j["k_sigma"] = rep.k_sigma;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& v : rep.violations) {
    nlohmann::ordered_json one;
    one["t"] = v.t;
    auto pt = nlohmann::ordered_json::array();
    for (int c = 0; c < v.v.size(); ++c) pt.push_back(v.v[c]);
    one["v"] = pt;
    one["gap"] = v.gap;
    one["stderr"] = v.sem;
    arr.push_back(one);
  }
  j["violations"] = arr;
  j["verdict"] = rep.verdict;
  return j.dump(2);
}

std::string delta_h_csv(const SMPReport& rep) {
  std::ostringstream os;
  auto label = [](const Vec& v) {
    std::string s;
    for (int c = 0; c < v.size(); ++c) {
      if (c) s += ';';
      s += format_double(v[c]);
    }
    return s;
  };
  os << "t";
  for (const auto& v : rep.control_points) os << ",dh@" << label(v);
  for (const auto& v : rep.control_points) os << ",sem@" << label(v);
  os << "\n";
  for (std::size_t i = 0; i < rep.times.size(); ++i) {
    os << format_double(rep.times[i]);
    for (int v = 0; v < rep.delta_h.cols(); ++v)
      os << "," << format_double(rep.delta_h(static_cast<int>(i), v));
    for (int v = 0; v < rep.delta_h_sem.cols(); ++v)
      os << "," << format_double(rep.delta_h_sem(static_cast<int>(i), v));
    os << "\n";
  }
  return os.str();
}

ExpansionReport cost_expansion_check(const ProblemSpec& spec, const ControlPath& control,
                                     const std::vector<SpikeWindow>& ladder,
                                     const AdjointSolution& adj, const SecondOrderKernel& P00,
                                     const BrownianBundle& W, const ExpansionOptions& opt) {
  check_adjoint(spec, adj, control, "expansion check");
  check_bundle(adj, W, "expansion check");
  if (ladder.size() < 2)
    throw ConfigError("expansion ladder needs at least two window widths");
  for (const auto& win : ladder) {
    bool same = std::abs(win.start - ladder[0].start) <= 1e-12 &&
                win.value.size() == ladder[0].value.size();
    if (same && win.value.size())
      same = (win.value - ladder[0].value).cwiseAbs().maxCoeff() == 0.0;
    if (!same)
      throw ConfigError("expansion ladder must share one window anchor and value");
  }
  const TimeGrid& g = W.grid();
  const int N = g.steps;
  const int d = spec.dim_x, m = spec.dim_w;
  const int Kb = spec.drift_channels(), Ks = spec.diff_channels();
  const int M = W.n_paths();

  std::vector<std::size_t> order(ladder.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ladder[a].width > ladder[b].width; });

  SimOptions sopt;
  sopt.workers = opt.workers;
  sopt.interpolate_atoms = opt.interpolate_atoms;
  TrajectoryBundle base = simulate_state(spec, g, control, W, sopt);
  std::vector<double> cost_u = pathwise_cost(spec, base, control, sopt);
  Channels args = detail::compile_channels(spec, g, sopt, false);
  std::vector<Vec> u = detail::hoist_controls(control, N + 1);

  ExpansionReport rep;
  rep.kernel_term_included = opt.include_kernel_term;
  std::vector<double> log_eps, log_gap;
  int prev_masked = std::numeric_limits<int>::max();

  for (std::size_t k : order) {
    const SpikeWindow& win = ladder[k];
    std::vector<bool> mask = window_mask({win}, g);
    std::vector<int> nodes;
    for (int i = 0; i < N; ++i)
      if (mask[i]) nodes.push_back(i);
    int covered = static_cast<int>(nodes.size());
    if (covered == 0)
      throw ConfigError("expansion ladder window covers no grid step");
    if (covered >= prev_masked)
      throw ConfigError("expansion ladder widths collapse onto the same grid steps");
    prev_masked = covered;

    ControlPath ue = spike(control, {win}, g, &spec.controls);
    TrajectoryBundle bumped = simulate_state(spec, g, ue, W, sopt);
    std::vector<double> cost_e = pathwise_cost(spec, bumped, ue, sopt);

    std::vector<double> lhs(M), rhs(M), gap(M);
    std::size_t n_blocks = (static_cast<std::size_t>(M) + kReductionBlock - 1) / kReductionBlock;
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      Vec x(d), ib(Kb * d), is(Ks * d), il(d);
      il.setZero();
      Vec bu(d), bv(d);
      Mat su, sv;
      for (int p = pa; p < pb; ++p) {
        double acc = 0.0;
        for (int i : nodes) {
          double t = g.time_at(i);
          const double* xp = base.at(p, i);
          for (int c = 0; c < d; ++c) x[c] = xp[c];
          detail::stack_integrals(args.drift, base, p, i, ib);
          detail::stack_integrals(args.diff, base, p, i, is);
          if (args.cost_used) detail::single_integral(args.cost, base, p, i, il);
          const Vec& ui = u[i];
          const Vec& v = win.value;
          spec.b(t, x, ib, ui, bu);
          spec.b(t, x, ib, v, bv);
          spec.sigma(t, x, is, ui, su);
          spec.sigma(t, x, is, v, sv);
          double dl = spec.l(t, x, il, v) - spec.l(t, x, il, ui);
          const double* ph = adj.p_at(p, i);
          const double* qh = adj.q_at(p, i);
          double dyn = 0.0;
          for (int c = 0; c < d; ++c) dyn += ph[c] * (bv[c] - bu[c]);
          for (int l = 0; l < m; ++l)
            for (int c = 0; c < d; ++c) dyn += qh[l * d + c] * (sv(c, l) - su(c, l));
          if (opt.include_kernel_term) {
            const Mat& Kt = P00.matrices[P00.index_near(t)];
            for (int l = 0; l < m; ++l) {
              Vec ds = sv.col(l) - su.col(l);
              dyn += 0.5 * ds.dot(Kt * ds);
            }
          }
          acc -= detail::trapz_w(g, i) * dl + g.dt * dyn;
        }
        lhs[p] = cost_u[p] - cost_e[p];
        rhs[p] = acc;
        gap[p] = lhs[p] - rhs[p];
      }
    }, opt.workers);

    ExpansionPoint pt;
    pt.eps = covered * g.dt;
    MeanVar ml = mean_sem(lhs), mr = mean_sem(rhs), mg = mean_sem(gap);
    pt.lhs = ml.mean;
    pt.lhs_sem = ml.sem;
    pt.rhs = mr.mean;
    pt.rhs_sem = mr.sem;
    pt.gap = mg.mean;
    pt.gap_sem = mg.sem;
    pt.gap_over_eps = mg.mean / pt.eps;
    rep.points.push_back(pt);
    if (std::abs(pt.gap) > 0) {
      log_eps.push_back(std::log(pt.eps));
      log_gap.push_back(std::log(std::abs(pt.gap)));
    }
  }
  rep.slope = fit_slope(log_eps, log_gap);
  return rep;
}

ConvergenceReport p00_convergence_study(const ProblemSpec& spec, double s,
                                        const std::vector<int>& n_list,
                                        const AdjointSolution& adj, const ControlPath& control,
                                        const BrownianBundle& W, const Vec& h,
                                        const KernelOptions& opt) {
  if (n_list.empty()) throw ConfigError("convergence study needs at least one width divisor");
  for (int n : n_list)
    if (n < 1) throw ConfigError("convergence study width divisors must be positive");

  ConvergenceReport rep;
  rep.s = s;
  rep.h = h.size() ? h : Vec::Ones(spec.dim_x);

  KernelOptions exact = opt;
  exact.mollify_n.reset();
  ScalarEstimate ref = p00_quadratic_form(spec, s, rep.h, adj, control, W, exact);
  rep.exact_value = ref.value;
  rep.exact_sem = ref.sem;

  for (int n : n_list) {
    KernelOptions kn = opt;
    kn.mollify_n = n;
    ScalarEstimate est = p00_quadratic_form(spec, s, rep.h, adj, control, W, kn);
    rep.points.push_back({n, est.value, est.sem, std::abs(est.value - rep.exact_value)});
  }
  return rep;
}

} // namespace smpdelay
