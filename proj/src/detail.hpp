#pragma once

// Internal helpers shared by the simulators and solvers; not installed.

#include "smpdelay/sdde.hpp"

#include <sstream>

namespace smpdelay::detail {

struct Channels {
  std::vector<CompiledMeasure> drift;
  std::vector<CompiledMeasure> diff;
  CompiledMeasure cost;
  bool cost_used = false;
};

inline DelayMeasure maybe_mollify(const DelayMeasure& mu, int n, const TimeGrid& grid) {
  if (n <= 0) return mu;
  return mollify(mu, n, grid.lag_steps);
}

// mollified == false: the exact measures (coefficient arguments, dynamics).
// mollified == true: the transport side, rewritten when opt.mollify_n is set.
inline Channels compile_channels(const ProblemSpec& spec, const TimeGrid& grid,
                                 const SimOptions& opt, bool mollified) {
  Channels ch;
  int n = mollified ? opt.mollify_n.value_or(0) : 0;
  for (const auto& mu : spec.mu_drift)
    ch.drift.push_back(compile_measure(maybe_mollify(mu, n, grid), grid, opt.interpolate_atoms));
  for (const auto& mu : spec.mu_diff)
    ch.diff.push_back(compile_measure(maybe_mollify(mu, n, grid), grid, opt.interpolate_atoms));
  ch.cost_used = spec.cost_uses_past;
  if (ch.cost_used)
    ch.cost = compile_measure(maybe_mollify(spec.mu_cost, n, grid), grid, opt.interpolate_atoms);
  return ch;
}

inline void stack_integrals(const std::vector<CompiledMeasure>& cms,
                            const TrajectoryBundle& tb, int path, int node, Vec& out) {
  const int d = tb.dim;
  const int L = tb.grid.lag_steps;
  out.setZero();
  for (std::size_t c = 0; c < cms.size(); ++c) {
    double* o = out.data() + c * d;
    const CompiledMeasure& cm = cms[c];
    if (cm.dense) {
      for (int j = 0; j <= L; ++j) {
        double w = cm.w[j];
        if (w == 0.0) continue;
        const double* xs = tb.at(path, node - L + j);
        for (int a = 0; a < d; ++a) o[a] += w * xs[a];
      }
    } else {
      for (const auto& [j, w] : cm.sparse) {
        const double* xs = tb.at(path, node - L + j);
        for (int a = 0; a < d; ++a) o[a] += w * xs[a];
      }
    }
  }
}

inline void single_integral(const CompiledMeasure& cm, const TrajectoryBundle& tb,
                            int path, int node, Vec& out) {
  const int d = tb.dim;
  const int L = tb.grid.lag_steps;
  out.setZero();
  if (cm.dense) {
    for (int j = 0; j <= L; ++j) {
      double w = cm.w[j];
      if (w == 0.0) continue;
      const double* xs = tb.at(path, node - L + j);
      for (int a = 0; a < d; ++a) out[a] += w * xs[a];
    }
  } else {
    for (const auto& [j, w] : cm.sparse) {
      const double* xs = tb.at(path, node - L + j);
      for (int a = 0; a < d; ++a) out[a] += w * xs[a];
    }
  }
}

inline std::vector<Vec> hoist_controls(const ControlPath& control, int nodes) {
  std::vector<Vec> u(nodes);
  for (int i = 0; i < nodes; ++i) u[i] = control.values.row(i).transpose();
  return u;
}

struct WindowPlan {
  std::vector<bool> mask;         // per step
  std::vector<int> window_index;  // -1 outside
  std::vector<Vec> replacement;   // per window
};

inline WindowPlan plan_windows(const std::vector<SpikeWindow>& windows,
                               const TimeGrid& grid, int dim_u) {
  WindowPlan wp;
  wp.mask.assign(grid.steps, false);
  wp.window_index.assign(grid.steps, -1);
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    if (w.width <= 0.0) throw ConfigError("spike window width must be positive");
    if (w.value.size() != dim_u) throw ShapeError("spike replacement has wrong size");
    wp.replacement.push_back(w.value);
    for (int i = 0; i < grid.steps; ++i) {
      double t = grid.time_at(i);
      if (t >= w.start - 1e-12 && t < w.start + w.width - 1e-12) {
        if (wp.mask[i]) throw ConfigError("spike windows overlap");
        wp.mask[i] = true;
        wp.window_index[i] = static_cast<int>(k);
      }
    }
  }
  return wp;
}

// trapezoid quadrature weight for node i on [0, T]
inline double trapz_w(const TimeGrid& grid, int i) {
  return (i == 0 || i == grid.steps) ? 0.5 * grid.dt : grid.dt;
}

template <class F>
void for_weights(const CompiledMeasure& cm, int L, F&& f) {
  if (cm.dense) {
    for (int j = 0; j <= L; ++j)
      if (cm.w[j] != 0.0) f(j, cm.w[j]);
  } else {
    for (const auto& [j, w] : cm.sparse) f(j, w);
  }
}

// Distinct delay measures of the problem, compiled once; duplicates collapse
// so feature sets stay small when channels share a measure.
inline std::vector<CompiledMeasure> unique_channels(const ProblemSpec& spec,
                                                    const TimeGrid& grid,
                                                    const SimOptions& sopt) {
  std::vector<const DelayMeasure*> uniq;
  auto add = [&](const DelayMeasure& mu) {
    for (const auto* v : uniq)
      if (*v == mu) return;
    uniq.push_back(&mu);
  };
  for (const auto& mu : spec.mu_drift) add(mu);
  for (const auto& mu : spec.mu_diff) add(mu);
  if (spec.cost_uses_past) add(spec.mu_cost);
  std::vector<CompiledMeasure> out;
  out.reserve(uniq.size());
  for (const auto* v : uniq)
    out.push_back(compile_measure(*v, grid, sopt.interpolate_atoms));
  return out;
}

// Standardized least squares with a ridge on the non-intercept diagonal.
// Columns with negligible spread are dropped (the intercept absorbs them), so
// degenerate designs such as the time-zero node reduce to a plain mean.
struct RidgeRegression {
  Mat Phia;  // n x Fa, standardized active columns
  int Fa = 0;
  double rcond = 1.0;
  Eigen::LDLT<Mat> ldlt;

  // Phi is mutated in place (columns standardized); column 0 must be the
  // intercept. `step` only labels errors.
  void build(Mat& Phi, double ridge, int min_rows_per_feature, int step) {
    const int n = static_cast<int>(Phi.rows());
    const int F = static_cast<int>(Phi.cols());
    std::vector<int> active{0};
    for (int c = 1; c < F; ++c) {
      double mu = Phi.col(c).mean();
      double sd = std::sqrt((Phi.col(c).array() - mu).square().sum() / n);
      if (sd > 1e-10 * (1.0 + std::abs(mu))) {
        Phi.col(c) = (Phi.col(c).array() - mu) / sd;
        active.push_back(c);
      }
    }
    Fa = static_cast<int>(active.size());
    if (n < min_rows_per_feature * Fa) {
      std::ostringstream os;
      os << "regression at step " << step << " has " << Fa
         << " features but only " << n << " paths; need at least "
         << min_rows_per_feature * Fa;
      throw CoverageError(os.str());
    }
    Phia.resize(n, Fa);
    for (int c = 0; c < Fa; ++c) Phia.col(c) = Phi.col(active[c]);
    Mat A = (Phia.transpose() * Phia) / double(n);
    for (int c = 1; c < Fa; ++c) A(c, c) += ridge;
    ldlt.compute(A);
    if (ldlt.info() != Eigen::Success)
      throw ConditioningError("regression: factorization failed", step);
    rcond = ldlt.rcond();
    if (!(rcond > 1e-15))
      throw ConditioningError("regression: normal matrix is singular", step);
  }

  // Fitted values per row for a block of targets.
  Mat fit(const Mat& Y) const {
    Mat B = (Phia.transpose() * Y) / double(Phia.rows());
    return Phia * ldlt.solve(B);
  }
};

} // namespace smpdelay::detail
