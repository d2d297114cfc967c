#include "smpdelay/absde.hpp"
#include "smpdelay/util.hpp"

#include "detail.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace smpdelay {

using namespace detail;

namespace {

// Coefficient processes along the base trajectory, evaluated once and kept
// flat: index (node * M + path) * block. The driver only ever reads these, so
// the backward sweep touches no callbacks.
struct Tables {
  int d = 0, m = 0, Kb = 0, Ks = 0, N = 0, M = 0;
  int n_base = 0;  // feature regressors per path: state + unique lag integrals
  bool cost_used = false;
  std::vector<double> bx, by, sx, sy, lx, ly, feat, hx;

  std::size_t at(int node, int path) const {
    return static_cast<std::size_t>(node) * M + path;
  }
  const double* bx_at(int n, int p) const { return bx.data() + at(n, p) * d * d; }
  const double* by_at(int n, int p) const { return by.data() + at(n, p) * d * Kb * d; }
  const double* sx_at(int n, int p, int l) const {
    return sx.data() + (at(n, p) * m + l) * d * d;
  }
  const double* sy_at(int n, int p, int l) const {
    return sy.data() + (at(n, p) * m + l) * d * Ks * d;
  }
  const double* lx_at(int n, int p) const { return lx.data() + at(n, p) * d; }
  const double* ly_at(int n, int p) const { return ly.data() + at(n, p) * d; }
  const double* feat_at(int n, int p) const { return feat.data() + at(n, p) * n_base; }
  const double* hx_at(int p) const { return hx.data() + static_cast<std::size_t>(p) * d; }
};

using CMap = Eigen::Map<const Mat>;
using CVMap = Eigen::Map<const Vec>;

Tables build_tables(const ProblemSpec& spec, const TrajectoryBundle& base,
                    const ControlPath& control, const Channels& args,
                    const std::vector<CompiledMeasure>& uniq,
                    const AdjointOptions& opt) {
  const TimeGrid& grid = base.grid;
  Tables tb;
  tb.d = spec.dim_x;
  tb.m = spec.dim_w;
  tb.Kb = spec.drift_channels();
  tb.Ks = spec.diff_channels();
  tb.N = grid.steps;
  tb.M = base.n_paths;
  tb.cost_used = spec.cost_uses_past;
  tb.n_base = tb.d * (1 + static_cast<int>(uniq.size()));

  const int d = tb.d, m = tb.m, Kb = tb.Kb, Ks = tb.Ks, N = tb.N, M = tb.M;
  std::size_t per_node = std::size_t(d) * d + std::size_t(d) * Kb * d +
                         std::size_t(m) * d * d + std::size_t(m) * d * Ks * d +
                         2 * std::size_t(d) + tb.n_base;
  std::size_t bytes =
      (std::size_t(N) + 1) * M * per_node * 8 +
      std::size_t(M) * grid.adj_nodes() * (std::size_t(d) + std::size_t(d) * m) * 8;
  if (bytes > std::size_t(6e9))
    throw ConfigError("adjoint solve would need over 6 GB; reduce paths or steps");

  std::size_t nodes = std::size_t(N) + 1;
  tb.bx.assign(nodes * M * d * d, 0.0);
  tb.by.assign(nodes * M * d * Kb * d, 0.0);
  tb.sx.assign(nodes * M * m * d * d, 0.0);
  tb.sy.assign(nodes * M * m * d * Ks * d, 0.0);
  tb.lx.assign(nodes * M * d, 0.0);
  tb.ly.assign(nodes * M * d, 0.0);
  tb.feat.assign(nodes * M * tb.n_base, 0.0);
  tb.hx.assign(std::size_t(M) * d, 0.0);

  std::vector<Vec> u_nodes = hoist_controls(control, N + 1);
  std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), ib(Kb * d), is(Ks * d), yl(d), lxv(d), lyv(d), iu(d), hxv(d);
    Mat bxm(d, d), bym(d, Kb * d);
    Tensor3 sxm, sym;
    int pa = static_cast<int>(blk * kReductionBlock);
    int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    for (int p = pa; p < pb; ++p) {
      for (int i = 0; i <= N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        if (tb.cost_used) single_integral(args.cost, base, p, i, yl);
        else yl.setZero();
        const Vec& u = u_nodes[i];
        double t = grid.time_at(i);

        spec.b_x(t, x, ib, u, bxm);
        spec.b_y(t, x, ib, u, bym);
        spec.sigma_x(t, x, is, u, sxm);
        spec.sigma_y(t, x, is, u, sym);
        spec.l_x(t, x, yl, u, lxv);
        if (tb.cost_used) spec.l_y(t, x, yl, u, lyv);

        std::size_t o = tb.at(i, p);
        std::copy(bxm.data(), bxm.data() + d * d, tb.bx.data() + o * d * d);
        std::copy(bym.data(), bym.data() + d * Kb * d, tb.by.data() + o * d * Kb * d);
        for (int l = 0; l < m; ++l) {
          std::copy(sxm[l].data(), sxm[l].data() + d * d,
                    tb.sx.data() + (o * m + l) * d * d);
          std::copy(sym[l].data(), sym[l].data() + d * Ks * d,
                    tb.sy.data() + (o * m + l) * d * Ks * d);
        }
        std::copy(lxv.data(), lxv.data() + d, tb.lx.data() + o * d);
        if (tb.cost_used) std::copy(lyv.data(), lyv.data() + d, tb.ly.data() + o * d);

        double* f = tb.feat.data() + o * tb.n_base;
        for (int c = 0; c < d; ++c) f[c] = x[c];
        for (std::size_t ucn = 0; ucn < uniq.size(); ++ucn) {
          single_integral(uniq[ucn], base, p, i, iu);
          for (int c = 0; c < d; ++c) f[(1 + ucn) * d + c] = iu[c];
        }
      }
      const double* xT = base.at(p, N);
      for (int c = 0; c < d; ++c) x[c] = xT[c];
      spec.h_x(x, hxv);
      std::copy(hxv.data(), hxv.data() + d, tb.hx.data() + std::size_t(p) * d);
    }
  }, opt.workers);
  return tb;
}

// True when every driver input (coefficients, cost gradients, terminal
// gradient) is the same on all paths. Decided by comparison, so with a single
// path the sweep always degenerates to the plain recursion.
bool tables_path_independent(const Tables& tb) {
  auto same = [&](const std::vector<double>& v, std::size_t block, int nodes) {
    for (int n = 0; n < nodes; ++n) {
      const double* ref = v.data() + (std::size_t(n) * tb.M) * block;
      for (int p = 1; p < tb.M; ++p) {
        const double* q = v.data() + (std::size_t(n) * tb.M + p) * block;
        for (std::size_t c = 0; c < block; ++c)
          if (std::abs(q[c] - ref[c]) > 1e-14 * (1.0 + std::abs(ref[c]))) return false;
      }
    }
    return true;
  };
  const int d = tb.d;
  return same(tb.bx, std::size_t(d) * d, tb.N + 1) &&
         same(tb.by, std::size_t(d) * tb.Kb * d, tb.N + 1) &&
         same(tb.sx, std::size_t(tb.m) * d * d, tb.N + 1) &&
         same(tb.sy, std::size_t(tb.m) * d * tb.Ks * d, tb.N + 1) &&
         same(tb.lx, d, tb.N + 1) &&
         (!tb.cost_used || same(tb.ly, d, tb.N + 1)) &&
         same(tb.hx, d, 1);
}

void deterministic_sweep(const Tables& tb, const Channels& trans,
                         const TimeGrid& grid, AdjointSolution& sol) {
  const int d = tb.d, N = tb.N, L = grid.lag_steps, Kb = tb.Kb;
  const double dt = grid.dt;
  sol.deterministic = true;
  sol.stored_paths = 1;
  sol.p_data.assign(std::size_t(grid.adj_nodes()) * d, 0.0);
  sol.q_data.assign(std::size_t(grid.adj_nodes()) * d * tb.m, 0.0);

  auto row = [&](int node) { return sol.p_data.data() + std::size_t(node) * d; };
  std::copy(tb.hx_at(0), tb.hx_at(0) + d, row(N));

  Vec tp(d);
  for (int i = N - 1; i >= 0; --i) {
    CVMap pn(row(i + 1), d);
    CMap bxm(tb.bx_at(i, 0), d, d);
    CVMap lxv(tb.lx_at(i, 0), d);
    tp = pn + dt * (lxv + bxm.transpose() * pn);
    for (int ch = 0; ch < Kb; ++ch) {
      for_weights(trans.drift[ch], L, [&](int j, double w) {
        int g = i + (L - j);
        if (g > N) return;
        CMap byg(tb.by_at(g, 0), d, std::size_t(Kb) * d);
        CVMap pg(g == i ? row(i + 1) : row(g), d);
        tp += dt * w * (byg.middleCols(ch * d, d).transpose() * pg);
      });
    }
    if (tb.cost_used) {
      for_weights(trans.cost, L, [&](int j, double w) {
        int g = i + (L - j);
        if (g > N) return;
        CVMap lyg(tb.ly_at(g, 0), d);
        tp += dt * w * lyg;
      });
    }
    std::copy(tp.data(), tp.data() + d, row(i));
  }
  sol.p0 = CVMap(row(0), d);
  sol.p0_sem = Vec::Zero(d);
  sol.n_features = 0;
}

void lsmc_sweep(const Tables& tb, const Channels& trans, const TimeGrid& grid,
                const BrownianBundle& W, const AdjointOptions& opt,
                AdjointSolution& sol) {
  const int d = tb.d, m = tb.m, N = tb.N, L = grid.lag_steps;
  const int Kb = tb.Kb, Ks = tb.Ks, M = tb.M;
  const double dt = grid.dt;
  const int nb = tb.n_base;
  const int F = 1 + nb + nb * (nb + 1) / 2;
  const int R = d * m + d;  // q targets (l-major), then the p target

  sol.stored_paths = M;
  sol.p_data.assign(std::size_t(M) * grid.adj_nodes() * d, 0.0);
  sol.q_data.assign(std::size_t(M) * grid.adj_nodes() * d * m, 0.0);
  auto prow = [&](int path, int node) {
    return sol.p_data.data() + (std::size_t(path) * grid.adj_nodes() + node) * d;
  };
  auto qrow = [&](int path, int node) {
    return sol.q_data.data() + (std::size_t(path) * grid.adj_nodes() + node) * d * m;
  };
  for (int p = 0; p < M; ++p)
    std::copy(tb.hx_at(p), tb.hx_at(p) + d, prow(p, N));

  Mat Phi(M, F), Y(M, R);
  std::vector<int> active;
  std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;

  for (int i = N - 1; i >= 0; --i) {
    // raw features: 1, regressors, degree-2 products
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      for (int p = pa; p < pb; ++p) {
        const double* f = tb.feat_at(i, p);
        Phi(p, 0) = 1.0;
        for (int a = 0; a < nb; ++a) Phi(p, 1 + a) = f[a];
        int col = 1 + nb;
        for (int a = 0; a < nb; ++a)
          for (int b = a; b < nb; ++b) Phi(p, col++) = f[a] * f[b];
      }
    }, opt.workers);

    // standardize and drop the path-independent columns
    active.clear();
    active.push_back(0);
    for (int c = 1; c < F; ++c) {
      double mu = Phi.col(c).mean();
      double sd = std::sqrt((Phi.col(c).array() - mu).square().sum() / M);
      if (sd > 1e-10 * (1.0 + std::abs(mu))) {
        Phi.col(c) = (Phi.col(c).array() - mu) / sd;
        active.push_back(c);
      }
    }
    const int Fa = static_cast<int>(active.size());
    if (M < opt.min_paths_per_feature * Fa) {
      std::ostringstream os;
      os << "regression at step " << i << " has " << Fa << " features but only "
         << M << " paths; need at least " << opt.min_paths_per_feature * Fa;
      throw CoverageError(os.str());
    }
    Mat Phia(M, Fa);
    for (int c = 0; c < Fa; ++c) Phia.col(c) = Phi.col(active[c]);

    // regression targets
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      Vec tp(d);
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      for (int p = pa; p < pb; ++p) {
        CVMap pn(prow(p, i + 1), d);
        for (int l = 0; l < m; ++l) {
          double dw = W.inc(p, i, l);
          for (int a = 0; a < d; ++a) Y(p, l * d + a) = pn[a] * dw / dt;
        }
        CMap bxm(tb.bx_at(i, p), d, d);
        CVMap lxv(tb.lx_at(i, p), d);
        tp = pn + dt * (lxv + bxm.transpose() * pn);
        for (int l = 0; l < m; ++l) {
          CMap sxl(tb.sx_at(i, p, l), d, d);
          tp += sxl.transpose() * (pn * W.inc(p, i, l));
        }
        for (int ch = 0; ch < Kb; ++ch) {
          for_weights(trans.drift[ch], L, [&](int j, double w) {
            int g = i + (L - j);
            if (g > N) return;
            CMap byg(tb.by_at(g, p), d, std::size_t(Kb) * d);
            CVMap pg(g == i ? prow(p, i + 1) : prow(p, g), d);
            tp += dt * w * (byg.middleCols(ch * d, d).transpose() * pg);
          });
        }
        for (int l = 0; l < m; ++l) {
          for (int ch = 0; ch < Ks; ++ch) {
            for_weights(trans.diff[ch], L, [&](int j, double w) {
              int g = i + (L - j);
              if (g > N) return;
              CMap syg(tb.sy_at(g, p, l), d, std::size_t(Ks) * d);
              if (g == i) {
                // E_i[p(t_{i+1}) dW] = q(t_i) dt folds the time-zero atom
                tp += w * (syg.middleCols(ch * d, d).transpose() *
                           (pn * W.inc(p, i, l)));
              } else {
                CVMap qg(qrow(p, g) + l * d, d);
                tp += dt * w * (syg.middleCols(ch * d, d).transpose() * qg);
              }
            });
          }
        }
        if (tb.cost_used) {
          for_weights(trans.cost, L, [&](int j, double w) {
            int g = i + (L - j);
            if (g > N) return;
            CVMap lyg(tb.ly_at(g, p), d);
            tp += dt * w * lyg;
          });
        }
        for (int a = 0; a < d; ++a) Y(p, d * m + a) = tp[a];
      }
    }, opt.workers);

    Mat A = (Phia.transpose() * Phia) / double(M);
    for (int c = 1; c < Fa; ++c) A(c, c) += opt.ridge;
    Mat B = (Phia.transpose() * Y) / double(M);
    Eigen::LDLT<Mat> ldlt(A);
    if (ldlt.info() != Eigen::Success)
      throw ConditioningError("adjoint regression: factorization failed", i);
    double rc = ldlt.rcond();
    if (!(rc > 1e-15))
      throw ConditioningError("adjoint regression: normal matrix is singular", i);
    sol.worst_rcond = std::min(sol.worst_rcond, rc);
    sol.n_features = std::max(sol.n_features, Fa);

    Mat beta = ldlt.solve(B);
    Mat fit = Phia * beta;
    for (int c = 0; c < d * m; ++c) {
      double resid = std::sqrt((Y.col(c) - fit.col(c)).squaredNorm() / M);
      double denom = 1.0 + std::sqrt(fit.col(c).squaredNorm() / M);
      sol.max_q_spread = std::max(sol.max_q_spread, resid / denom);
    }
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      for (int p = pa; p < pb; ++p) {
        double* q = qrow(p, i);
        for (int c = 0; c < d * m; ++c) q[c] = fit(p, c);
        double* pr = prow(p, i);
        for (int a = 0; a < d; ++a) pr[a] = fit(p, d * m + a);
      }
    }, opt.workers);

    if (i == 0) {
      sol.p0 = Vec(d);
      sol.p0_sem = Vec(d);
      std::vector<double> col(M);
      for (int a = 0; a < d; ++a) {
        for (int p = 0; p < M; ++p) col[p] = Y(p, d * m + a);
        MeanVar mv = mean_sem(col);
        sol.p0[a] = fit(0, d * m + a);
        sol.p0_sem[a] = mv.sem;
      }
    }
  }
}

void require_adjoint_callbacks(const ProblemSpec& spec) {
  if (!spec.b_x || !spec.b_y || !spec.sigma_x || !spec.sigma_y || !spec.l_x ||
      !spec.h_x || (spec.cost_uses_past && !spec.l_y))
    throw ConfigError("adjoint solve needs b_x, b_y, sigma_x, sigma_y, l_x, h_x"
                      " (and l_y when the running cost reads the past)");
}

void check_adjoint_match(const ProblemSpec& spec, const TrajectoryBundle& base,
                         const ControlPath& control, const BrownianBundle& W,
                         const AdjointSolution& adj, const SimOptions& opt) {
  if (adj.spec_id != spec.id || !adj.grid.same(base.grid) || adj.seed != W.seed() ||
      adj.n_paths != W.n_paths())
    throw ConsistencyError("adjoint solution does not belong to this run");
  if (adj.control_id != control.id)
    throw ConsistencyError("adjoint solution was solved under a different control");
  if (adj.mollified != opt.mollify_n.has_value())
    throw ConsistencyError("adjoint and options disagree about mollification");
}

void check_variation_bundle(const ProblemSpec& spec, const TrajectoryBundle& v,
                            const TrajectoryBundle& base, const BrownianBundle& W,
                            const char* what) {
  if (!v.grid.same(base.grid) || v.n_paths != W.n_paths() || v.seed != W.seed() ||
      v.dim != spec.dim_x || v.spec_id != spec.id)
    throw ConsistencyError(std::string(what) + " does not belong to this run");
}

} // namespace

AdjointSolution solve_adjoint(const ProblemSpec& spec, const TrajectoryBundle& base,
                              const ControlPath& control, const BrownianBundle& W,
                              const AdjointOptions& opt) {
  const TimeGrid& grid = base.grid;
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  require_adjoint_callbacks(spec);
  if (!control.shared())
    throw ConfigError("adjoint solver expects an open-loop control");

  SimOptions sopt;
  sopt.workers = opt.workers;
  sopt.interpolate_atoms = opt.interpolate_atoms;
  sopt.mollify_n = opt.mollify_n;
  Channels args = compile_channels(spec, grid, sopt, false);
  Channels trans = compile_channels(spec, grid, sopt, true);
  auto uniq = unique_channels(spec, grid, sopt);
  Tables tb = build_tables(spec, base, control, args, uniq, opt);

  AdjointSolution sol;
  sol.grid = grid;
  sol.spec_id = spec.id;
  sol.control_id = control.id;
  sol.seed = W.seed();
  sol.n_paths = base.n_paths;
  sol.dim = spec.dim_x;
  sol.dim_w = spec.dim_w;
  sol.mollified = opt.mollify_n.has_value();

  if (!opt.force_regression && tables_path_independent(tb))
    deterministic_sweep(tb, trans, grid, sol);
  else
    lsmc_sweep(tb, trans, grid, W, opt, sol);
  return sol;
}

Vec node_mean_p(const AdjointSolution& sol, int node) {
  if (node < 0 || node >= sol.grid.adj_nodes())
    throw DomainError("node_mean_p: node outside the adjoint grid");
  if (sol.deterministic) return CVMap(sol.p_at(0, node), sol.dim);
  Vec out(sol.dim);
  std::vector<double> col(sol.n_paths);
  for (int a = 0; a < sol.dim; ++a) {
    for (int p = 0; p < sol.n_paths; ++p) col[p] = sol.p_at(p, node)[a];
    out[a] = mean_sem(col).mean;
  }
  return out;
}

Mat node_mean_q(const AdjointSolution& sol, int node) {
  if (node < 0 || node >= sol.grid.adj_nodes())
    throw DomainError("node_mean_q: node outside the adjoint grid");
  Mat out(sol.dim, sol.dim_w);
  if (sol.deterministic) {
    const double* q = sol.q_at(0, node);
    for (int l = 0; l < sol.dim_w; ++l)
      for (int a = 0; a < sol.dim; ++a) out(a, l) = q[l * sol.dim + a];
    return out;
  }
  std::vector<double> col(sol.n_paths);
  for (int l = 0; l < sol.dim_w; ++l)
    for (int a = 0; a < sol.dim; ++a) {
      for (int p = 0; p < sol.n_paths; ++p) col[p] = sol.q_at(p, node)[l * sol.dim + a];
      out(a, l) = mean_sem(col).mean;
    }
  return out;
}

DualityReport duality_residual_first(const ProblemSpec& spec,
                                     const TrajectoryBundle& base,
                                     const TrajectoryBundle& first_var,
                                     const ControlPath& control,
                                     const std::vector<SpikeWindow>& windows,
                                     const BrownianBundle& W,
                                     const AdjointSolution& adj,
                                     const SimOptions& opt) {
  const TimeGrid& grid = base.grid;
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  check_variation_bundle(spec, first_var, base, W, "first variation");
  check_adjoint_match(spec, base, control, W, adj, opt);

  Channels args = compile_channels(spec, grid, opt, false);
  Channels trans = compile_channels(spec, grid, opt, true);
  WindowPlan wp = plan_windows(windows, grid, spec.dim_u);
  const int d = spec.dim_x, m = spec.dim_w, N = grid.steps, M = base.n_paths;
  std::vector<Vec> u_nodes = hoist_controls(control, N + 1);

  std::vector<double> lhs_p(M), rhs_p(M);
  std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), yv(d), yl(d), Yl(d), lxv(d), lyv(d), is(spec.diff_channels() * d), hxv(d);
    Mat su(d, m), sv(d, m);
    int pa = static_cast<int>(blk * kReductionBlock);
    int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    for (int p = pa; p < pb; ++p) {
      const double* xT = base.at(p, N);
      for (int c = 0; c < d; ++c) x[c] = xT[c];
      spec.h_x(x, hxv);
      double lhs = 0.0;
      for (int c = 0; c < d; ++c) lhs += hxv[c] * first_var.value(p, N, c);

      double run = 0.0;
      for (int i = 0; i <= N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = first_var.at(p, i);
        for (int c = 0; c < d; ++c) yv[c] = yi[c];
        if (spec.cost_uses_past) single_integral(args.cost, base, p, i, yl);
        else yl.setZero();
        double t = grid.time_at(i);
        spec.l_x(t, x, yl, u_nodes[i], lxv);
        double term = lxv.dot(yv);
        if (spec.cost_uses_past) {
          single_integral(trans.cost, first_var, p, i, Yl);
          spec.l_y(t, x, yl, u_nodes[i], lyv);
          term += lyv.dot(Yl);
        }
        run += trapz_w(grid, i) * term;
      }

      double jump = 0.0;
      for (int i = 0; i < N; ++i) {
        if (!wp.mask[i]) continue;
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        stack_integrals(args.diff, base, p, i, is);
        double t = grid.time_at(i);
        spec.sigma(t, x, is, u_nodes[i], su);
        spec.sigma(t, x, is, wp.replacement[wp.window_index[i]], sv);
        const double* q = adj.q_at(p, i);
        for (int l = 0; l < m; ++l)
          for (int a = 0; a < d; ++a)
            jump += q[l * d + a] * (sv(a, l) - su(a, l));
      }
      jump *= grid.dt;

      lhs_p[p] = lhs;
      rhs_p[p] = -run + jump;
    }
  }, opt.workers);

  DualityReport rep;
  std::vector<double> diff(M), absl(M), absr(M);
  for (int p = 0; p < M; ++p) {
    diff[p] = lhs_p[p] - rhs_p[p];
    absl[p] = std::abs(lhs_p[p]);
    absr[p] = std::abs(rhs_p[p]);
  }
  rep.lhs = mean_sem(lhs_p).mean;
  rep.rhs = mean_sem(rhs_p).mean;
  MeanVar mv = mean_sem(diff);
  rep.residual = mv.mean;
  rep.sem = mv.sem;
  rep.scale = std::max(1e-12, 0.5 * (mean_sem(absl).mean + mean_sem(absr).mean));
  return rep;
}

DualityReport duality_residual_second(const ProblemSpec& spec,
                                      const TrajectoryBundle& base,
                                      const TrajectoryBundle& first_var,
                                      const TrajectoryBundle& second_var,
                                      const ControlPath& control,
                                      const std::vector<SpikeWindow>& windows,
                                      const BrownianBundle& W,
                                      const AdjointSolution& adj,
                                      const SimOptions& opt) {
  const TimeGrid& grid = base.grid;
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  check_variation_bundle(spec, first_var, base, W, "first variation");
  check_variation_bundle(spec, second_var, base, W, "second variation");
  check_adjoint_match(spec, base, control, W, adj, opt);
  if (!spec.b_xx || !spec.b_xy || !spec.b_yy || !spec.sigma_xx || !spec.sigma_xy ||
      !spec.sigma_yy)
    throw ConfigError("second-order duality needs the coefficient Hessians");

  Channels args = compile_channels(spec, grid, opt, false);
  Channels trans = compile_channels(spec, grid, opt, true);
  WindowPlan wp = plan_windows(windows, grid, spec.dim_u);
  const int d = spec.dim_x, m = spec.dim_w, N = grid.steps, M = base.n_paths;
  const int Kb = spec.drift_channels(), Ks = spec.diff_channels();
  std::vector<Vec> u_nodes = hoist_controls(control, N + 1);

  std::vector<double> lhs_p(M), rhs_p(M);
  std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), yv(d), zv(d), yl(d), Zl(d), lxv(d), lyv(d), hxv(d);
    Vec ib(Kb * d), is(Ks * d), Yb(Kb * d), Ys(Ks * d);
    Vec bu(d), bv(d);
    Tensor3 bxx, bxy, byy, sxu, syu, sxv, syv;
    Tensor4 sxx, sxy, syy;
    int pa = static_cast<int>(blk * kReductionBlock);
    int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    for (int p = pa; p < pb; ++p) {
      const double* xT = base.at(p, N);
      for (int c = 0; c < d; ++c) x[c] = xT[c];
      spec.h_x(x, hxv);
      double lhs = 0.0;
      for (int c = 0; c < d; ++c) lhs += hxv[c] * second_var.value(p, N, c);

      double run = 0.0, quad = 0.0;
      for (int i = 0; i <= N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = first_var.at(p, i);
        for (int c = 0; c < d; ++c) yv[c] = yi[c];
        const double* zi = second_var.at(p, i);
        for (int c = 0; c < d; ++c) zv[c] = zi[c];
        if (spec.cost_uses_past) single_integral(args.cost, base, p, i, yl);
        else yl.setZero();
        double t = grid.time_at(i);
        const Vec& u = u_nodes[i];

        spec.l_x(t, x, yl, u, lxv);
        double term = lxv.dot(zv);
        if (spec.cost_uses_past) {
          single_integral(trans.cost, second_var, p, i, Zl);
          spec.l_y(t, x, yl, u, lyv);
          term += lyv.dot(Zl);
        }
        run += trapz_w(grid, i) * term;

        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        stack_integrals(trans.drift, first_var, p, i, Yb);
        stack_integrals(trans.diff, first_var, p, i, Ys);
        spec.b_xx(t, x, ib, u, bxx);
        spec.b_xy(t, x, ib, u, bxy);
        spec.b_yy(t, x, ib, u, byy);
        spec.sigma_xx(t, x, is, u, sxx);
        spec.sigma_xy(t, x, is, u, sxy);
        spec.sigma_yy(t, x, is, u, syy);
        const double* pr = adj.p_at(p, i);
        const double* qr = adj.q_at(p, i);
        double qd = 0.0;
        for (int j = 0; j < d; ++j) {
          double qb = yv.dot(bxx[j] * yv) + 2.0 * yv.dot(bxy[j] * Yb) +
                      Yb.dot(byy[j] * Yb);
          qd += pr[j] * qb;
        }
        for (int l = 0; l < m; ++l)
          for (int j = 0; j < d; ++j) {
            double qs = yv.dot(sxx[l][j] * yv) + 2.0 * yv.dot(sxy[l][j] * Ys) +
                        Ys.dot(syy[l][j] * Ys);
            qd += qr[l * d + j] * qs;
          }
        quad += trapz_w(grid, i) * 0.5 * qd;
      }

      double jump = 0.0;
      for (int i = 0; i < N; ++i) {
        if (!wp.mask[i]) continue;
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = first_var.at(p, i);
        for (int c = 0; c < d; ++c) yv[c] = yi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        stack_integrals(trans.diff, first_var, p, i, Ys);
        double t = grid.time_at(i);
        const Vec& u = u_nodes[i];
        const Vec& v = wp.replacement[wp.window_index[i]];
        spec.b(t, x, ib, u, bu);
        spec.b(t, x, ib, v, bv);
        spec.sigma_x(t, x, is, u, sxu);
        spec.sigma_x(t, x, is, v, sxv);
        spec.sigma_y(t, x, is, u, syu);
        spec.sigma_y(t, x, is, v, syv);
        const double* pr = adj.p_at(p, i);
        const double* qr = adj.q_at(p, i);
        for (int a = 0; a < d; ++a) jump += pr[a] * (bv[a] - bu[a]);
        for (int l = 0; l < m; ++l) {
          Vec dl = (sxv[l] - sxu[l]) * yv + (syv[l] - syu[l]) * Ys;
          for (int a = 0; a < d; ++a) jump += qr[l * d + a] * dl[a];
        }
      }
      jump *= grid.dt;

      lhs_p[p] = lhs;
      rhs_p[p] = -run + quad + jump;
    }
  }, opt.workers);

  DualityReport rep;
  std::vector<double> diff(M), absl(M), absr(M);
  for (int p = 0; p < M; ++p) {
    diff[p] = lhs_p[p] - rhs_p[p];
    absl[p] = std::abs(lhs_p[p]);
    absr[p] = std::abs(rhs_p[p]);
  }
  rep.lhs = mean_sem(lhs_p).mean;
  rep.rhs = mean_sem(rhs_p).mean;
  MeanVar mv = mean_sem(diff);
  rep.residual = mv.mean;
  rep.sem = mv.sem;
  rep.scale = std::max(1e-12, 0.5 * (mean_sem(absl).mean + mean_sem(absr).mean));
  return rep;
}

} // namespace smpdelay
