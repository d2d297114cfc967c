#include "smpdelay/sdde.hpp"

#include "detail.hpp"

#include <cmath>
#include <sstream>

namespace smpdelay {

using namespace detail;

namespace {

void check_grid_match(const ProblemSpec& spec, const TimeGrid& grid) {
  if (std::abs(grid.horizon - spec.horizon) > 1e-12 * std::max(1.0, spec.horizon) ||
      std::abs(grid.delay - spec.delay) > 1e-12 * std::max(1.0, spec.delay))
    throw ConsistencyError("grid horizon/delay does not match the problem");
}

void check_run_inputs(const ProblemSpec& spec, const TimeGrid& grid,
                      const ControlPath& control, const BrownianBundle& W) {
  validate_shapes(spec);
  check_grid_match(spec, grid);
  if (!W.grid().same(grid))
    throw ConsistencyError("noise bundle was generated on a different grid");
  if (W.n_noise() != spec.dim_w)
    throw ConsistencyError("noise bundle dimension != problem noise dimension");
  if (control.values.rows() != grid.steps + 1 || control.values.cols() != spec.dim_u)
    throw ShapeError("control table must be (steps+1) x dim_u");
  if (!control.shared() &&
      static_cast<int>(control.per_path.size()) != W.n_paths())
    throw ConsistencyError("per-path control table does not match the path count");
}

void check_base(const ProblemSpec& spec, const TrajectoryBundle& base,
                const TimeGrid& grid, const BrownianBundle& W) {
  if (!base.grid.same(grid)) throw ConsistencyError("base trajectory grid mismatch");
  if (base.n_paths != W.n_paths() || base.seed != W.seed())
    throw ConsistencyError("base trajectory was simulated with a different noise bundle");
  if (base.dim != spec.dim_x) throw ConsistencyError("base trajectory dimension mismatch");
  if (base.spec_id != spec.id)
    throw ConsistencyError("base trajectory belongs to problem " + base.spec_id +
                           ", not " + spec.id);
}

void ensure_finite(const double* x, int d, int step, const char* what) {
  for (int c = 0; c < d; ++c)
    if (!std::isfinite(x[c])) {
      std::ostringstream os;
      os << what << " diverged at step " << step << " (component " << c << ")";
      throw DivergenceError(os.str(), step);
    }
}

} // namespace

std::vector<bool> window_mask(const std::vector<SpikeWindow>& windows,
                              const TimeGrid& grid) {
  int dim_u = windows.empty() ? 1 : static_cast<int>(windows.front().value.size());
  return plan_windows(windows, grid, dim_u).mask;
}

ControlPath spike(const ControlPath& base, const std::vector<SpikeWindow>& windows,
                  const TimeGrid& grid, const ControlSet* must_contain) {
  if (base.values.rows() != grid.steps + 1)
    throw ShapeError("spike: control table does not match the grid");
  if (!base.shared())
    throw ConfigError("spike: only shared (open-loop) controls can be spiked");
  WindowPlan wp = plan_windows(windows, grid, static_cast<int>(base.values.cols()));
  if (must_contain) {
    for (const auto& v : wp.replacement) {
      bool found = false;
      for (const auto& pt : must_contain->points)
        if ((pt - v).norm() <= 1e-12) { found = true; break; }
      if (!found)
        throw ConfigError("spike: replacement value is not a point of the control set");
    }
  }
  ControlPath out = base;
  std::ostringstream id;
  id << base.id;
  for (const auto& w : windows)
    id << "+spike[" << format_double(w.start) << ',' << format_double(w.width) << ')';
  out.id = id.str();
  for (int i = 0; i < grid.steps; ++i)
    if (wp.mask[i]) out.values.row(i) = wp.replacement[wp.window_index[i]].transpose();
  return out;
}

TrajectoryBundle simulate_state(const ProblemSpec& spec, const TimeGrid& grid,
                                const ControlPath& control, const BrownianBundle& W,
                                const SimOptions& opt) {
  check_run_inputs(spec, grid, control, W);
  Channels ch = compile_channels(spec, grid, opt, false);  // dynamics stay exact

  TrajectoryBundle tb;
  tb.grid = grid;
  tb.n_paths = W.n_paths();
  tb.dim = spec.dim_x;
  tb.spec_id = spec.id;
  tb.control_id = control.id;
  tb.seed = W.seed();
  tb.tag = "state";
  tb.allocate();

  const int d = spec.dim_x, m = spec.dim_w;
  const int L = grid.lag_steps, N = grid.steps;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();

  std::vector<Vec> hist(L);
  for (int n = -L; n < 0; ++n) hist[n + L] = spec.history(grid.time_at(n));
  std::vector<Vec> u_nodes = hoist_controls(control, N);

  std::size_t n_blocks = (tb.n_paths + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), yb(kb * d), ys(ks * d), bout(d), u_local;
    Mat sout(d, m);
    int p0 = static_cast<int>(blk * kReductionBlock);
    int p1 = std::min<int>(tb.n_paths, p0 + static_cast<int>(kReductionBlock));
    for (int p = p0; p < p1; ++p) {
      for (int n = -L; n < 0; ++n) {
        double* row = tb.at(p, n);
        for (int c = 0; c < d; ++c) row[c] = hist[n + L][c];
      }
      double* row0 = tb.at(p, 0);
      for (int c = 0; c < d; ++c) row0[c] = spec.x0[c];

      for (int i = 0; i < N; ++i) {
        const double* xi = tb.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        stack_integrals(ch.drift, tb, p, i, yb);
        stack_integrals(ch.diff, tb, p, i, ys);
        if (!control.shared()) u_local = control.per_path[p].row(i).transpose();
        const Vec& u = control.shared() ? u_nodes[i] : u_local;
        double t = grid.time_at(i);
        spec.b(t, x, yb, u, bout);
        spec.sigma(t, x, ys, u, sout);
        double* xn = tb.at(p, i + 1);
        for (int c = 0; c < d; ++c) {
          double acc = xi[c] + bout[c] * grid.dt;
          for (int l = 0; l < m; ++l) acc += sout(c, l) * W.inc(p, i, l);
          xn[c] = acc;
        }
        ensure_finite(xn, d, i + 1, "state");
      }
    }
  }, opt.workers);
  return tb;
}

TrajectoryBundle simulate_first_variation(const ProblemSpec& spec,
                                          const TrajectoryBundle& base,
                                          const ControlPath& control,
                                          const std::vector<SpikeWindow>& windows,
                                          const BrownianBundle& W,
                                          const SimOptions& opt) {
  check_run_inputs(spec, base.grid, control, W);
  check_base(spec, base, base.grid, W);
  if (!spec.b_x || !spec.b_y || !spec.sigma_x || !spec.sigma_y)
    throw ConfigError("first variation needs b_x, b_y, sigma_x, sigma_y");
  if (!control.shared())
    throw ConfigError("first variation expects an open-loop control");
  const TimeGrid& grid = base.grid;
  Channels args = compile_channels(spec, grid, opt, false);      // coefficient arguments
  Channels trans = compile_channels(spec, grid, opt, true);      // variation transport
  WindowPlan wp = plan_windows(windows, grid, spec.dim_u);

  TrajectoryBundle yb;
  yb.grid = grid;
  yb.n_paths = base.n_paths;
  yb.dim = spec.dim_x;
  yb.spec_id = spec.id;
  yb.control_id = control.id;
  yb.seed = W.seed();
  yb.tag = opt.mollify_n ? "first_variation(mollified)" : "first_variation";
  yb.allocate();  // zero history included

  const int d = spec.dim_x, m = spec.dim_w;
  const int N = grid.steps;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();
  std::vector<Vec> u_nodes = hoist_controls(control, N);

  std::size_t n_blocks = (yb.n_paths + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), ib(kb * d), is(ks * d), Yb(kb * d), Ys(ks * d), y(d), dy(d);
    Mat bx(d, d), by(d, kb * d), sig_u(d, m), sig_v(d, m);
    Tensor3 sx, sy;
    int p0 = static_cast<int>(blk * kReductionBlock);
    int p1 = std::min<int>(yb.n_paths, p0 + static_cast<int>(kReductionBlock));
    for (int p = p0; p < p1; ++p) {
      for (int i = 0; i < N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = yb.at(p, i);
        for (int c = 0; c < d; ++c) y[c] = yi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        stack_integrals(trans.drift, yb, p, i, Yb);
        stack_integrals(trans.diff, yb, p, i, Ys);
        const Vec& u = u_nodes[i];
        double t = grid.time_at(i);
        spec.b_x(t, x, ib, u, bx);
        spec.b_y(t, x, ib, u, by);
        spec.sigma_x(t, x, is, u, sx);
        spec.sigma_y(t, x, is, u, sy);
        dy = bx * y + by * Yb;
        double* yn = yb.at(p, i + 1);
        for (int c = 0; c < d; ++c) yn[c] = yi[c] + dy[c] * grid.dt;
        for (int l = 0; l < m; ++l) {
          double dw = W.inc(p, i, l);
          Vec diff = sx[l] * y + sy[l] * Ys;
          for (int c = 0; c < d; ++c) yn[c] += diff[c] * dw;
        }
        if (wp.mask[i]) {
          const Vec& v = wp.replacement[wp.window_index[i]];
          spec.sigma(t, x, is, u, sig_u);
          spec.sigma(t, x, is, v, sig_v);
          for (int l = 0; l < m; ++l) {
            double dw = W.inc(p, i, l);
            for (int c = 0; c < d; ++c) yn[c] += (sig_v(c, l) - sig_u(c, l)) * dw;
          }
        }
        ensure_finite(yn, d, i + 1, "first variation");
      }
    }
  }, opt.workers);
  return yb;
}

TrajectoryBundle simulate_second_variation(const ProblemSpec& spec,
                                           const TrajectoryBundle& base,
                                           const TrajectoryBundle& first_var,
                                           const ControlPath& control,
                                           const std::vector<SpikeWindow>& windows,
                                           const BrownianBundle& W,
                                           const SimOptions& opt) {
  check_run_inputs(spec, base.grid, control, W);
  check_base(spec, base, base.grid, W);
  if (!first_var.grid.same(base.grid) || first_var.n_paths != base.n_paths ||
      first_var.seed != base.seed)
    throw ConsistencyError("second variation needs the first variation on the same run");
  if (!spec.b_x || !spec.b_y || !spec.sigma_x || !spec.sigma_y)
    throw ConfigError("second variation needs first-order coefficient derivatives");
  if (!spec.b_xx || !spec.b_xy || !spec.b_yy || !spec.sigma_xx || !spec.sigma_xy ||
      !spec.sigma_yy)
    throw ConfigError("second variation needs coefficient Hessians");
  if (!control.shared())
    throw ConfigError("second variation expects an open-loop control");
  const TimeGrid& grid = base.grid;
  Channels args = compile_channels(spec, grid, opt, false);
  Channels trans = compile_channels(spec, grid, opt, true);
  WindowPlan wp = plan_windows(windows, grid, spec.dim_u);

  TrajectoryBundle zb;
  zb.grid = grid;
  zb.n_paths = base.n_paths;
  zb.dim = spec.dim_x;
  zb.spec_id = spec.id;
  zb.control_id = control.id;
  zb.seed = W.seed();
  zb.tag = opt.mollify_n ? "second_variation(mollified)" : "second_variation";
  zb.allocate();

  const int d = spec.dim_x, m = spec.dim_w;
  const int N = grid.steps;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();
  std::vector<Vec> u_nodes = hoist_controls(control, N);

  std::size_t n_blocks = (zb.n_paths + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), ib(kb * d), is(ks * d), y(d), Yby(kb * d), Ysy(ks * d);
    Vec z(d), Zb(kb * d), Zs(ks * d), dz(d), bu(d), bv(d);
    Mat bx(d, d), by(d, kb * d), sig_u(d, m), sig_v(d, m);
    Tensor3 sx, sy, bxx, bxy, byy, sx_v, sy_v;
    Tensor4 sxx, sxy, syy;
    int p0 = static_cast<int>(blk * kReductionBlock);
    int p1 = std::min<int>(zb.n_paths, p0 + static_cast<int>(kReductionBlock));
    for (int p = p0; p < p1; ++p) {
      for (int i = 0; i < N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = first_var.at(p, i);
        for (int c = 0; c < d; ++c) y[c] = yi[c];
        const double* zi = zb.at(p, i);
        for (int c = 0; c < d; ++c) z[c] = zi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        stack_integrals(trans.drift, first_var, p, i, Yby);
        stack_integrals(trans.diff, first_var, p, i, Ysy);
        stack_integrals(trans.drift, zb, p, i, Zb);
        stack_integrals(trans.diff, zb, p, i, Zs);
        const Vec& u = u_nodes[i];
        double t = grid.time_at(i);
        spec.b_x(t, x, ib, u, bx);
        spec.b_y(t, x, ib, u, by);
        spec.sigma_x(t, x, is, u, sx);
        spec.sigma_y(t, x, is, u, sy);
        spec.b_xx(t, x, ib, u, bxx);
        spec.b_xy(t, x, ib, u, bxy);
        spec.b_yy(t, x, ib, u, byy);
        spec.sigma_xx(t, x, is, u, sxx);
        spec.sigma_xy(t, x, is, u, sxy);
        spec.sigma_yy(t, x, is, u, syy);

        dz = bx * z + by * Zb;
        for (int j = 0; j < d; ++j) {
          double quad = y.dot(bxx[j] * y) + 2.0 * y.dot(bxy[j] * Yby) +
                        Yby.dot(byy[j] * Yby);
          dz[j] += 0.5 * quad;
        }
        bool spiked = wp.mask[i];
        const Vec* v = spiked ? &wp.replacement[wp.window_index[i]] : nullptr;
        if (spiked) {
          spec.b(t, x, ib, u, bu);
          spec.b(t, x, ib, *v, bv);
          dz += bv - bu;
        }
        double* zn = zb.at(p, i + 1);
        for (int c = 0; c < d; ++c) zn[c] = zi[c] + dz[c] * grid.dt;
        if (spiked) {
          spec.sigma_x(t, x, is, *v, sx_v);
          spec.sigma_y(t, x, is, *v, sy_v);
        }
        for (int l = 0; l < m; ++l) {
          double dw = W.inc(p, i, l);
          Vec diff = sx[l] * z + sy[l] * Zs;
          for (int j = 0; j < d; ++j) {
            double quad = y.dot(sxx[l][j] * y) + 2.0 * y.dot(sxy[l][j] * Ysy) +
                          Ysy.dot(syy[l][j] * Ysy);
            diff[j] += 0.5 * quad;
          }
          if (spiked) diff += (sx_v[l] - sx[l]) * y + (sy_v[l] - sy[l]) * Ysy;
          for (int c = 0; c < d; ++c) zn[c] += diff[c] * dw;
        }
        ensure_finite(zn, d, i + 1, "second variation");
      }
    }
  }, opt.workers);
  return zb;
}

TrajectoryBundle simulate_linearized_flow(const ProblemSpec& spec,
                                          const TrajectoryBundle& base,
                                          const ControlPath& control,
                                          const BrownianBundle& W, int start_node,
                                          const Vec& h, const SimOptions& opt) {
  check_run_inputs(spec, base.grid, control, W);
  check_base(spec, base, base.grid, W);
  if (!spec.b_x || !spec.b_y || !spec.sigma_x || !spec.sigma_y)
    throw ConfigError("linearized flow needs b_x, b_y, sigma_x, sigma_y");
  if (!control.shared())
    throw ConfigError("linearized flow expects an open-loop control");
  const TimeGrid& grid = base.grid;
  if (start_node < 0 || start_node > grid.steps)
    throw ConfigError("linearized flow start node outside [0, steps]");
  if (h.size() != spec.dim_x) throw ShapeError("flow start value has wrong size");
  Channels args = compile_channels(spec, grid, opt, false);
  Channels trans = compile_channels(spec, grid, opt, true);

  TrajectoryBundle yb;
  yb.grid = grid;
  yb.n_paths = base.n_paths;
  yb.dim = spec.dim_x;
  yb.spec_id = spec.id;
  yb.control_id = control.id;
  yb.seed = W.seed();
  yb.tag = "linearized_flow";
  yb.allocate();

  const int d = spec.dim_x, m = spec.dim_w;
  const int N = grid.steps;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();
  std::vector<Vec> u_nodes = hoist_controls(control, N);

  std::size_t n_blocks = (yb.n_paths + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), ib(kb * d), is(ks * d), Yb(kb * d), Ys(ks * d), y(d), dy(d);
    Mat bx(d, d), by(d, kb * d);
    Tensor3 sx, sy;
    int p0 = static_cast<int>(blk * kReductionBlock);
    int p1 = std::min<int>(yb.n_paths, p0 + static_cast<int>(kReductionBlock));
    for (int p = p0; p < p1; ++p) {
      double* y0 = yb.at(p, start_node);
      for (int c = 0; c < d; ++c) y0[c] = h[c];
      for (int i = start_node; i < N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        const double* yi = yb.at(p, i);
        for (int c = 0; c < d; ++c) y[c] = yi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        stack_integrals(trans.drift, yb, p, i, Yb);
        stack_integrals(trans.diff, yb, p, i, Ys);
        const Vec& u = u_nodes[i];
        double t = grid.time_at(i);
        spec.b_x(t, x, ib, u, bx);
        spec.b_y(t, x, ib, u, by);
        spec.sigma_x(t, x, is, u, sx);
        spec.sigma_y(t, x, is, u, sy);
        dy = bx * y + by * Yb;
        double* yn = yb.at(p, i + 1);
        for (int c = 0; c < d; ++c) yn[c] = yi[c] + dy[c] * grid.dt;
        for (int l = 0; l < m; ++l) {
          double dw = W.inc(p, i, l);
          Vec diff = sx[l] * y + sy[l] * Ys;
          for (int c = 0; c < d; ++c) yn[c] += diff[c] * dw;
        }
        ensure_finite(yn, d, i + 1, "linearized flow");
      }
    }
  }, opt.workers);
  return yb;
}

void verify_run_inputs(const ProblemSpec& spec, const TimeGrid& grid,
                       const ControlPath& control, const BrownianBundle& W) {
  check_run_inputs(spec, grid, control, W);
}

void verify_base_match(const ProblemSpec& spec, const TrajectoryBundle& base,
                       const TimeGrid& grid, const BrownianBundle& W) {
  check_base(spec, base, grid, W);
}

std::vector<double> pathwise_cost(const ProblemSpec& spec,
                                  const TrajectoryBundle& traj,
                                  const ControlPath& control,
                                  const SimOptions& opt) {
  check_grid_match(spec, traj.grid);
  if (traj.spec_id != spec.id)
    throw ConsistencyError("cost: trajectory belongs to a different problem");
  if (control.values.rows() != traj.grid.steps + 1)
    throw ShapeError("cost: control table does not match the grid");
  const TimeGrid& grid = traj.grid;
  Channels ch = compile_channels(spec, grid, opt, false);
  const int d = spec.dim_x, N = grid.steps;
  std::vector<Vec> u_nodes = hoist_controls(control, N + 1);

  std::vector<double> out(traj.n_paths);
  std::size_t n_blocks = (traj.n_paths + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), yl(d), xT(d), u_local;
    int p0 = static_cast<int>(blk * kReductionBlock);
    int p1 = std::min<int>(traj.n_paths, p0 + static_cast<int>(kReductionBlock));
    for (int p = p0; p < p1; ++p) {
      double acc = 0.0;
      for (int i = 0; i <= N; ++i) {
        const double* xi = traj.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        if (ch.cost_used) single_integral(ch.cost, traj, p, i, yl);
        else yl.setZero();
        double w = (i == 0 || i == N) ? 0.5 * grid.dt : grid.dt;
        if (!control.shared()) u_local = control.per_path[p].row(i).transpose();
        const Vec& u = control.shared() ? u_nodes[i] : u_local;
        acc += w * spec.l(grid.time_at(i), x, yl, u);
      }
      const double* xl = traj.at(p, N);
      for (int c = 0; c < d; ++c) xT[c] = xl[c];
      acc += spec.h(xT);
      out[p] = acc;
    }
  }, opt.workers);
  return out;
}

CostEstimate cost(const ProblemSpec& spec, const TrajectoryBundle& traj,
                  const ControlPath& control, const SimOptions& opt) {
  std::vector<double> per_path = pathwise_cost(spec, traj, control, opt);
  MeanVar mv = mean_sem(per_path);
  return {mv.mean, mv.sem, static_cast<int>(per_path.size())};
}

} // namespace smpdelay
