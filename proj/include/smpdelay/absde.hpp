#pragma once

#include "smpdelay/sdde.hpp"

namespace smpdelay {

// First-order adjoint pair (p, q) of the delayed control problem, solved
// backward from p(T) = h_x(x(T)) with p == 0 on (T, T+delay]. The driver
// collects the usual Hamiltonian gradients plus the anticipated terms: at time
// s each lag channel pulls the conditional expectation of its coefficient
// block times p (or q) from s - theta.
//
// Numerically this is one backward sweep of least-squares Monte Carlo: at each
// step the conditional expectations are projections onto polynomial features
// of the current state and its lag integrals. q is the regression of
// p(t_{i+1}) dW / dt; the q-dependent driver terms are folded into the p
// target through the same identity, so each step costs one factorization.
// When every driver input is path-independent the sweep collapses to a plain
// deterministic recursion (q == 0) and only one row per node is stored.

struct AdjointOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  std::optional<int> mollify_n;   // anticipated weights; match the run option
  double ridge = 1e-8;            // Tikhonov weight on standardized features
  int min_paths_per_feature = 50;
  bool force_regression = false;  // skip the deterministic shortcut
};

struct AdjointSolution {
  TimeGrid grid;
  std::string spec_id, control_id;
  std::uint64_t seed = 0;
  int n_paths = 0;
  int stored_paths = 0;  // 1 when the deterministic shortcut fired
  int dim = 0, dim_w = 0;
  bool deterministic = false;
  bool mollified = false;

  // node-major per path, nodes 0..steps+lag_steps (zero past the horizon);
  // q component (l, a) lives at column l*dim + a
  std::vector<double> p_data, q_data;

  Vec p0;      // adjoint at time 0 (path-independent by construction)
  Vec p0_sem;  // Monte Carlo half-width of p0, zero on the deterministic path

  int n_features = 0;
  double worst_rcond = 1.0;   // min over steps of the normal-matrix rcond
  double max_q_spread = 0.0;  // largest per-step RMS of the q target residual

  const double* p_at(int path, int node) const {
    int row = (deterministic ? 0 : path) * grid.adj_nodes() + node;
    return p_data.data() + static_cast<std::size_t>(row) * dim;
  }
  const double* q_at(int path, int node) const {
    int row = (deterministic ? 0 : path) * grid.adj_nodes() + node;
    return q_data.data() + static_cast<std::size_t>(row) * dim * dim_w;
  }
};

AdjointSolution solve_adjoint(const ProblemSpec& spec, const TrajectoryBundle& base,
                              const ControlPath& control, const BrownianBundle& W,
                              const AdjointOptions& opt = {});

// Cross-path averages of the stored fields at one node.
Vec node_mean_p(const AdjointSolution& sol, int node);
Mat node_mean_q(const AdjointSolution& sol, int node);  // dim x dim_w

// Integration-by-parts identities tying the adjoint to the variation
// processes. Both sides are accumulated per path under common random numbers,
// so `residual` (lhs - rhs) carries a meaningful `sem`; `scale` is the average
// magnitude of the two sides for relative reporting.
//
// First order: E[h_x y(T)] against the running-cost gradients along y plus the
// q-weighted diffusion jump on the spike windows.
// Second order: E[h_x z(T)] against the gradients along z, the p/q-weighted
// coefficient Hessians along y, and the jump terms p db + q (dsigma_x y + ...).
struct DualityReport {
  double lhs = 0.0, rhs = 0.0;
  double residual = 0.0;  // mean of lhs - rhs over paths
  double sem = 0.0;
  double scale = 1.0;
};

DualityReport duality_residual_first(const ProblemSpec& spec,
                                     const TrajectoryBundle& base,
                                     const TrajectoryBundle& first_var,
                                     const ControlPath& control,
                                     const std::vector<SpikeWindow>& windows,
                                     const BrownianBundle& W,
                                     const AdjointSolution& adj,
                                     const SimOptions& opt = {});

DualityReport duality_residual_second(const ProblemSpec& spec,
                                      const TrajectoryBundle& base,
                                      const TrajectoryBundle& first_var,
                                      const TrajectoryBundle& second_var,
                                      const ControlPath& control,
                                      const std::vector<SpikeWindow>& windows,
                                      const BrownianBundle& W,
                                      const AdjointSolution& adj,
                                      const SimOptions& opt = {});

} // namespace smpdelay
