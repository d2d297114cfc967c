#include "smpdelay/portfolio.hpp"
#include "smpdelay/util.hpp"

#include "detail.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace smpdelay {

using namespace detail;

namespace {

constexpr int kV = 1;  // wealth slot of x = (S, V)

void require_investment_shape(const ProblemSpec& spec) {
  if (spec.dim_x != 2 || spec.dim_w != 1)
    throw ConfigError("wealth adjoint expects the two-component single-noise investment model");
}

// Wealth-row coefficient tables along the base trajectory, node-major like the
// full solver's. Only the entries the pinned-price sweep touches are kept:
// local gradients d b_V / d V and d sigma_V / d V, per-channel pullback
// weights d b_V / d y[ch, V] and d sigma_V / d y[ch, V], the cost gradients in
// the wealth slot, the terminal gradient, and the regression features.
struct WealthTables {
  int Kb = 0, Ks = 0, N = 0, M = 0, n_base = 0;
  bool cost_used = false;
  std::vector<double> av, sv, byv, syv, lv, lyv, feat, hv;

  std::size_t at(int node, int path) const {
    return static_cast<std::size_t>(node) * M + path;
  }
};

WealthTables build_wealth_tables(const ProblemSpec& spec, const TrajectoryBundle& base,
                                 const ControlPath& control, const Channels& args,
                                 const std::vector<CompiledMeasure>& uniq,
                                 const AdjointOptions& opt) {
  const TimeGrid& grid = base.grid;
  const int d = spec.dim_x;
  WealthTables tb;
  tb.Kb = spec.drift_channels();
  tb.Ks = spec.diff_channels();
  tb.N = grid.steps;
  tb.M = base.n_paths;
  tb.cost_used = spec.cost_uses_past;
  tb.n_base = d * (1 + static_cast<int>(uniq.size()));

  const int Kb = tb.Kb, Ks = tb.Ks, N = tb.N, M = tb.M;
  std::size_t nodes = static_cast<std::size_t>(N) + 1;
  tb.av.assign(nodes * M, 0.0);
  tb.sv.assign(nodes * M, 0.0);
  tb.byv.assign(nodes * M * Kb, 0.0);
  tb.syv.assign(nodes * M * Ks, 0.0);
  tb.lv.assign(nodes * M, 0.0);
  tb.lyv.assign(nodes * M, 0.0);
  tb.feat.assign(nodes * M * tb.n_base, 0.0);
  tb.hv.assign(M, 0.0);

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
        tb.av[o] = bxm(kV, kV);
        tb.sv[o] = sxm[0](kV, kV);
        for (int ch = 0; ch < Kb; ++ch) tb.byv[o * Kb + ch] = bym(kV, ch * d + kV);
        for (int ch = 0; ch < Ks; ++ch) tb.syv[o * Ks + ch] = sym[0](kV, ch * d + kV);
        tb.lv[o] = lxv[kV];
        if (tb.cost_used) tb.lyv[o] = lyv[kV];

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
      tb.hv[p] = hxv[kV];
    }
  }, opt.workers);
  return tb;
}

}  // namespace

WealthAdjoint solve_wealth_adjoint(const ProblemSpec& spec, const TrajectoryBundle& base,
                                   const ControlPath& control, const BrownianBundle& W,
                                   const AdjointOptions& opt) {
  const TimeGrid& grid = base.grid;
  require_investment_shape(spec);
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  if (!spec.b_x || !spec.b_y || !spec.sigma_x || !spec.sigma_y || !spec.l_x || !spec.h_x ||
      (spec.cost_uses_past && !spec.l_y))
    throw ConfigError("wealth adjoint needs b_x, b_y, sigma_x, sigma_y, l_x, h_x"
                      " (and l_y when the running cost reads the past)");
  if (!control.shared())
    throw ConfigError("wealth adjoint expects an open-loop control");

  SimOptions sopt;
  sopt.workers = opt.workers;
  sopt.interpolate_atoms = opt.interpolate_atoms;
  sopt.mollify_n = opt.mollify_n;
  Channels args = compile_channels(spec, grid, sopt, false);
  Channels trans = compile_channels(spec, grid, sopt, true);
  auto uniq = unique_channels(spec, grid, sopt);
  WealthTables tb = build_wealth_tables(spec, base, control, args, uniq, opt);

  const int N = tb.N, M = tb.M, L = grid.lag_steps;
  const int Kb = tb.Kb, Ks = tb.Ks, nb = tb.n_base;
  const double dt = grid.dt;
  const int F = 1 + nb + nb * (nb + 1) / 2;

  WealthAdjoint sol;
  sol.grid = grid;
  sol.spec_id = spec.id;
  sol.control_id = control.id;
  sol.seed = W.seed();
  sol.n_paths = M;
  sol.p_data.assign(static_cast<std::size_t>(M) * grid.adj_nodes(), 0.0);
  sol.q_data.assign(static_cast<std::size_t>(M) * grid.adj_nodes(), 0.0);
  auto pr = [&](int path, int node) -> double& {
    return sol.p_data[static_cast<std::size_t>(path) * grid.adj_nodes() + node];
  };
  auto qr = [&](int path, int node) -> double& {
    return sol.q_data[static_cast<std::size_t>(path) * grid.adj_nodes() + node];
  };
  for (int p = 0; p < M; ++p) pr(p, N) = tb.hv[p];

  // Backward sweep in the same discretization as the full solver: the q
  // target is p(t_{i+1}) dW / dt, the p target folds the local gradients, the
  // sigma-slope time-zero atom, and the anticipated channel pullbacks, all
  // restricted to the wealth row with the price pair pinned to zero.
  Mat Phi(M, F), Y(M, 2);
  std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  for (int i = N - 1; i >= 0; --i) {
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      for (int p = pa; p < pb; ++p) {
        const double* f = tb.feat.data() + tb.at(i, p) * nb;
        Phi(p, 0) = 1.0;
        for (int a = 0; a < nb; ++a) Phi(p, 1 + a) = f[a];
        int col = 1 + nb;
        for (int a = 0; a < nb; ++a)
          for (int b = a; b < nb; ++b) Phi(p, col++) = f[a] * f[b];

        double pn = pr(p, i + 1);
        double dw = W.inc(p, i, 0);
        Y(p, 0) = pn * dw / dt;

        std::size_t o = tb.at(i, p);
        double tp = pn + dt * (tb.lv[o] + tb.av[o] * pn) + tb.sv[o] * pn * dw;
        for (int ch = 0; ch < Kb; ++ch) {
          for_weights(trans.drift[ch], L, [&](int j, double w) {
            int g = i + (L - j);
            if (g > N) return;
            double pg = (g == i) ? pn : pr(p, g);
            tp += dt * w * tb.byv[tb.at(g, p) * Kb + ch] * pg;
          });
        }
        for (int ch = 0; ch < Ks; ++ch) {
          for_weights(trans.diff[ch], L, [&](int j, double w) {
            int g = i + (L - j);
            if (g > N) return;
            double c = tb.syv[tb.at(g, p) * Ks + ch];
            // E_i[p(t_{i+1}) dW] = q(t_i) dt folds the time-zero atom
            if (g == i) tp += w * c * pn * dw;
            else tp += dt * w * c * qr(p, g);
          });
        }
        if (tb.cost_used) {
          for_weights(trans.cost, L, [&](int j, double w) {
            int g = i + (L - j);
            if (g > N) return;
            tp += dt * w * tb.lyv[tb.at(g, p)];
          });
        }
        Y(p, 1) = tp;
      }
    }, opt.workers);

    RidgeRegression rr;
    rr.build(Phi, opt.ridge, opt.min_paths_per_feature, i);
    sol.worst_rcond = std::min(sol.worst_rcond, rr.rcond);
    sol.n_features = std::max(sol.n_features, rr.Fa);
    Mat fit = rr.fit(Y);
    parallel_for_blocks(n_blocks, [&](std::size_t blk) {
      int pa = static_cast<int>(blk * kReductionBlock);
      int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
      for (int p = pa; p < pb; ++p) {
        qr(p, i) = fit(p, 0);
        pr(p, i) = fit(p, 1);
      }
    }, opt.workers);
  }
  return sol;
}

double wealth_mean_p(const WealthAdjoint& sol, int node) {
  if (node < 0 || node >= sol.grid.adj_nodes())
    throw DomainError("wealth_mean_p: node outside the adjoint grid");
  std::vector<double> col(sol.n_paths);
  for (int p = 0; p < sol.n_paths; ++p) col[p] = sol.p_at(p, node);
  return mean_sem(col).mean;
}

double wealth_mean_q(const WealthAdjoint& sol, int node) {
  if (node < 0 || node >= sol.grid.adj_nodes())
    throw DomainError("wealth_mean_q: node outside the adjoint grid");
  std::vector<double> col(sol.n_paths);
  for (int p = 0; p < sol.n_paths; ++p) col[p] = sol.q_at(p, node);
  return mean_sem(col).mean;
}

double wealth_hamiltonian(const ProblemSpec& spec, double t, const Vec& x,
                          const PastState& past, const Vec& u, double p, double q) {
  require_investment_shape(spec);
  Vec p0 = Vec::Zero(2);
  p0[kV] = p;
  Mat q0 = Mat::Zero(2, 1);
  q0(kV, 0) = q;
  return hamiltonian(spec, t, x, past, u, p0, q0);
}

ScalarEstimate wealth_kernel_form(const ProblemSpec& spec, double s,
                                  const WealthAdjoint& wadj, const ControlPath& control,
                                  const BrownianBundle& W, const KernelOptions& opt) {
  require_investment_shape(spec);
  // Lift the scalar pair into the full storage with zero price slots; the
  // representation then contracts only wealth-row Hessians by construction.
  AdjointSolution lift;
  lift.grid = wadj.grid;
  lift.spec_id = wadj.spec_id;
  lift.control_id = wadj.control_id;
  lift.seed = wadj.seed;
  lift.n_paths = wadj.n_paths;
  lift.stored_paths = wadj.n_paths;
  lift.dim = spec.dim_x;
  lift.dim_w = spec.dim_w;
  const int nodes = wadj.grid.adj_nodes(), M = wadj.n_paths;
  lift.p_data.assign(static_cast<std::size_t>(M) * nodes * 2, 0.0);
  lift.q_data.assign(static_cast<std::size_t>(M) * nodes * 2, 0.0);
  for (int p = 0; p < M; ++p) {
    for (int i = 0; i < nodes; ++i) {
      std::size_t row = static_cast<std::size_t>(p) * nodes + i;
      lift.p_data[row * 2 + kV] = wadj.p_at(p, i);
      lift.q_data[row * 2 + kV] = wadj.q_at(p, i);
    }
  }
  lift.p0 = Vec::Zero(2);
  lift.p0[kV] = wealth_mean_p(wadj, 0);
  lift.p0_sem = Vec::Zero(2);
  lift.n_features = wadj.n_features;
  lift.worst_rcond = wadj.worst_rcond;

  Vec h = Vec::Zero(2);
  h[kV] = 1.0;
  return p00_quadratic_form(spec, s, h, lift, control, W, opt);
}

PortfolioStudy run_portfolio_study(const PortfolioParams& params,
                                   const PortfolioStudyOptions& opt) {
  auto tick = std::chrono::steady_clock::now();
  TimeGrid grid = make_grid(params.horizon, opt.steps, params.delay);
  PortfolioParams used = params;
  used.resolution = grid.lag_steps;
  ProblemSpec spec = scenario_portfolio(used);
  if (spec.controls.points.empty())
    throw ConfigError("portfolio study needs a nonempty (pi, c) grid");

  PortfolioStudy st;
  st.params = used;
  st.spec_id = spec.id;
  st.grid = grid;
  st.seed = opt.seed;
  st.n_paths = opt.n_paths;

  // Antithetic pairing kills the 1/sqrt(dt) even-part noise in the q targets,
  // which otherwise survives the regression as a per-node offset when the
  // optimal cell leaves the wealth nearly deterministic.
  BrownianBundle W(grid, opt.n_paths, spec.dim_w, opt.seed, true, opt.workers);
  SimOptions sopt;
  sopt.workers = opt.workers;

  auto cell_control = [&](const Vec& u) {
    return constant_control(
        u, grid, "cell-" + format_double(u[0]) + "-" + format_double(u[1]));
  };

  // 1. constant-strategy scan, every cell on the same noise
  st.table.reserve(spec.controls.points.size());
  for (const Vec& u : spec.controls.points) {
    ControlPath ctl = cell_control(u);
    TrajectoryBundle traj = simulate_state(spec, grid, ctl, W, sopt);
    CostEstimate ce = cost(spec, traj, ctl);
    st.table.push_back({u[0], u[1], ce.value, ce.sem});
    if (st.best < 0 || ce.value < st.table[st.best].cost)
      st.best = static_cast<int>(st.table.size()) - 1;
  }

  // 2. full adjoint at the best cell; price-row magnitudes are the measured
  // status of the shortcut the scalar route takes
  ControlPath ctl = cell_control(spec.controls.points[st.best]);
  TrajectoryBundle base = simulate_state(spec, grid, ctl, W, sopt);
  AdjointOptions aopt;
  aopt.workers = opt.workers;
  AdjointSolution adj = solve_adjoint(spec, base, ctl, W, aopt);

  const int N = grid.steps;
  std::vector<double> full_p(N + 1), full_q(N + 1);
  for (int i = 0; i <= N; ++i) {
    Vec pm = node_mean_p(adj, i);
    Mat qm = node_mean_q(adj, i);
    st.price_p_max = std::max(st.price_p_max, std::abs(pm[0]));
    st.price_q_max = std::max(st.price_q_max, std::abs(qm(0, 0)));
    st.wealth_p_max = std::max(st.wealth_p_max, std::abs(pm[1]));
    st.wealth_q_max = std::max(st.wealth_q_max, std::abs(qm(1, 0)));
    full_p[i] = pm[1];
    full_q[i] = qm(1, 0);
  }

  // 3. scalar sweep against the wealth column of the full solve
  WealthAdjoint wadj = solve_wealth_adjoint(spec, base, ctl, W, aopt);
  for (int i = 0; i <= N; ++i) {
    st.adjoint_gap_p = std::max(st.adjoint_gap_p, std::abs(wealth_mean_p(wadj, i) - full_p[i]));
    st.adjoint_gap_q = std::max(st.adjoint_gap_q, std::abs(wealth_mean_q(wadj, i) - full_q[i]));
  }

  // 4. kernel samples, full matrix and wealth-direction scalar form
  std::vector<double> times =
      opt.kernel_times.empty() ? default_kernel_times(grid) : opt.kernel_times;
  KernelOptions kopt;
  kopt.workers = opt.workers;
  st.kernel = p00_kernel(spec, times, adj, ctl, W, kopt);
  for (std::size_t k = 0; k < st.kernel.times.size(); ++k) {
    ScalarEstimate wf = wealth_kernel_form(spec, st.kernel.times[k], wadj, ctl, W, kopt);
    st.wealth_form.push_back(wf.value);
    st.wealth_form_sem.push_back(wf.sem);
    double gap = std::abs(st.kernel.matrices[k](kV, kV) - wf.value);
    double ks = st.kernel.std_errors[k](kV, kV);
    double denom = std::sqrt(ks * ks + wf.sem * wf.sem);
    double sigmas = denom > 0.0 ? gap / denom : (gap > 0.0 ? HUGE_VAL : 0.0);
    st.kernel_gap_sigmas = std::max(st.kernel_gap_sigmas, sigmas);
  }

  // 5. inequality scan at the best cell
  CheckOptions copt;
  copt.workers = opt.workers;
  copt.abs_tol = opt.abs_tol;
  copt.k_sigma = opt.k_sigma;
  copt.bundle = &W;
  st.check = check_variational_inequality(spec, ctl, adj, st.kernel, copt);

  st.runtime_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
  return st;
}

std::string to_json(const PortfolioStudy& st) {
  nlohmann::ordered_json j;
  j["scenario"] = st.spec_id;
  j["grid"] = {{"horizon", st.grid.horizon},
               {"steps", st.grid.steps},
               {"delay", st.grid.delay}};
  j["seed"] = st.seed;
  j["n_paths"] = st.n_paths;
  nlohmann::ordered_json pj;
  pj["S0"] = st.params.S0;
  pj["V0"] = st.params.V0;
  pj["r0"] = st.params.r0;
  pj["r1"] = st.params.r1;
  pj["b0"] = st.params.b0;
  pj["b1"] = st.params.b1;
  pj["sig0"] = st.params.sig0;
  pj["kappa_c"] = st.params.kappa_c;
  pj["kappa_v"] = st.params.kappa_v;
  pj["pi_grid"] = st.params.pi_grid;
  pj["c_grid"] = st.params.c_grid;
  j["params"] = pj;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& cell : st.table) {
    nlohmann::ordered_json one;
    one["pi"] = cell.pi;
    one["c"] = cell.c;
    one["cost"] = cell.cost;
    one["stderr"] = cell.sem;
    rows.push_back(one);
  }
  j["table"] = rows;
  const StrategyCell& bc = st.table.at(st.best);
  j["best"] = {{"index", st.best}, {"pi", bc.pi}, {"c", bc.c},
               {"cost", bc.cost}, {"stderr", bc.sem}};
  j["price_pair"] = {{"p_max", st.price_p_max}, {"q_max", st.price_q_max}};
  j["wealth_pair"] = {{"p_max", st.wealth_p_max}, {"q_max", st.wealth_q_max}};
  j["scalar_sweep_gap"] = {{"p", st.adjoint_gap_p}, {"q", st.adjoint_gap_q}};
  nlohmann::ordered_json kj;
  kj["times"] = st.kernel.times;
  auto kvv = nlohmann::ordered_json::array();
  auto kvs = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < st.kernel.times.size(); ++k) {
    kvv.push_back(st.kernel.matrices[k](1, 1));
    kvs.push_back(st.kernel.std_errors[k](1, 1));
  }
  kj["wealth_entry"] = kvv;
  kj["wealth_entry_stderr"] = kvs;
  kj["wealth_form"] = st.wealth_form;
  kj["wealth_form_stderr"] = st.wealth_form_sem;
  kj["gap_sigmas"] = st.kernel_gap_sigmas;
  j["kernel"] = kj;
  j["check"] = {{"worst_gap", st.check.worst_gap},
                {"gap_stderr", st.check.gap_sem},
                {"tolerance", st.check.tolerance},
                {"k_sigma", st.check.k_sigma},
                {"violations", st.check.violations.size()},
                {"verdict", st.check.verdict}};
  j["runtime_sec"] = st.runtime_sec;
  return j.dump(2);
}

std::string strategy_table_csv(const PortfolioStudy& st) {
  std::ostringstream os;
  os << "pi,c,cost,stderr\n";
  for (const auto& cell : st.table)
    os << format_double(cell.pi) << "," << format_double(cell.c) << ","
       << format_double(cell.cost) << "," << format_double(cell.sem) << "\n";
  return os.str();
}

} // namespace smpdelay
