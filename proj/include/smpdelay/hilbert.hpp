#pragma once

#include "smpdelay/absde.hpp"

namespace smpdelay {

// Product-space coordinates for the delayed state: a head block holding the
// present value and a tail grid sampling the past segment at
// theta_j = -delay + j*dt, j = 0..L (theta_L = 0). A point is one flat vector,
// head block first, paired by <a,b> = head.head + trapezoid(tail.tail); the
// trapezoid weights live in `weights`, so every adjoint operation below is a
// weighted transpose.
struct HilbertGrid {
  TimeGrid grid;
  int dim = 0;         // state components per block
  int tail_nodes = 0;  // L + 1
  int D = 0;           // dim * (L + 2)
  Vec weights;         // inner-product diagonal, size D

  int head(int c) const { return c; }
  int tail(int j, int c) const { return dim * (1 + j) + c; }
  double theta(int j) const { return -grid.delay + j * grid.dt; }
};

// Requires lag_steps >= 1: with no lag nodes the tail carries no information
// and the plain state-space solvers apply.
HilbertGrid make_hilbert_grid(const TimeGrid& grid, int dim);

// Segment lift of a stored path at a grid node: head = x(t_node),
// tail_j = x(t_node + theta_j). Exact copies, no interpolation.
Vec lift(const HilbertGrid& hg, const TrajectoryBundle& tb, int path, int node);

double inner(const HilbertGrid& hg, const Vec& a, const Vec& b);

// One-step grid shift: head fixed, tail_j <- tail_{j+1} for j < L,
// tail_L <- head. A permutation with fill, so k-step composition is exact on
// the grid. shift_adjoint is the weighted transpose W^-1 S^T W.
Mat shift_matrix(const HilbertGrid& hg);
Mat shift_adjoint(const HilbertGrid& hg);

Vec shift_steps(const HilbertGrid& hg, int k, const Vec& v);
// Time form of the same map; t must be a nonnegative grid multiple.
Vec shift_semigroup(const HilbertGrid& hg, double t, const Vec& v);

struct OperatorPipelineOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  // Lag-structure smoothing (width delay/n) applied to the operator columns;
  // point masses cannot feed a density column, so any channel carrying atoms
  // requires this. Coefficient arguments always use the exact measures.
  std::optional<int> mollify_n;
  double ridge = 1e-8;
  int min_paths_per_feature = 50;
  bool force_regression = false;  // skip the deterministic shortcut
  double symmetry_tol = 1e-6;     // allowed asymmetry drift per step
};

// Coefficient operators at one grid node, in the flat coordinates above.
// Row maps (B, Sg) act on lifted points and land in the head block, their
// tail columns carrying channel weight times the y-derivative block.
// Quadratic blocks (Bxx[j], Sgxx[l][j], Lxx) are plain symmetric form
// matrices: value(a,b) = a^T block b reproduces the second derivative along
// lifted directions, channel weights included, so tail-tail entries are the
// discrete double integrals f(theta) f(theta').
struct OperatorSet {
  Mat B;                      // dim x D
  std::vector<Mat> Sg;        // per noise column, dim x D
  Vec Lx;                     // D, gradient of the running cost as a plain functional
  Tensor3 Bxx;                // per drift component, D x D
  std::vector<Tensor3> Sgxx;  // per noise column, per component, D x D
  Mat Lxx;                    // D x D
};

OperatorSet assemble_operators(const ProblemSpec& spec, const TrajectoryBundle& base,
                               const ControlPath& control, int node, int path = 0,
                               const OperatorPipelineOptions& opt = {});

// Terminal-cost blocks lifted to the product space (head block only: the
// terminal cost reads the present state).
Vec lift_terminal_gradient(const HilbertGrid& hg, const ProblemSpec& spec,
                           const TrajectoryBundle& base, int path);
Mat lift_terminal_hessian(const HilbertGrid& hg, const ProblemSpec& spec,
                          const TrajectoryBundle& base, int path);

// First adjoint on the product space, solved backward in mild form (shift,
// then react): terminal value -H_x on the head, driver B^T head + noise-row
// pullbacks - L_x. The head component reproduces the state-space adjoint with
// the opposite sign convention (descending: terminal -h_x). When any driver
// input varies across paths the conditional expectations are least-squares
// projections on polynomial features; otherwise one deterministic recursion.
struct FirstAdjointH {
  HilbertGrid hg;
  std::string spec_id, control_id;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool mollified = false;
  Mat head;           // (N+1) x dim, cross-path mean of the head block
  Mat head_sem;       // same shape, zero on the deterministic path
  Mat q_head;         // (N+1) x (dim*dim_w), mean martingale head (column l*dim+a)
  Vec p0;             // full functional at t = 0, plain coordinates, size D
  Mat tail_density0;  // (L+1) x dim: tail of p0 with the weights divided out
  double worst_rcond = 1.0;
  int n_features = 0;
};

FirstAdjointH solve_first_adjoint_h(const ProblemSpec& spec, const TrajectoryBundle& base,
                                    const ControlPath& control, const BrownianBundle& W,
                                    const OperatorPipelineOptions& opt = {});

// Second adjoint: backward recursion for the symmetric weighted-form matrix
// G(t) with <G a, b> plain = value of the form on lifted directions. Terminal
// -H_xx on the head block; each step shifts the form, adds the Lyapunov drift
// terms and the driver form built from the coefficient Hessians contracted
// with the supplied adjoint pair, then symmetrizes. On the stochastic branch
// the form is carried per path with the conditional expectation and the
// martingale blocks fitted by regression; the martingale blocks feed the
// noise-coupling drift term and are logged by norm, never stored.
struct SecondAdjointH {
  HilbertGrid hg;
  std::string spec_id, control_id;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool mollified = false;
  std::vector<Mat> form;      // per node 0..N, D x D symmetric
  std::vector<Mat> form_sem;  // per node, entrywise half-width (zero when deterministic)
  std::vector<double> q_norm; // per step, RMS Frobenius norm of the fitted martingale blocks
  double symmetry_drift = 0.0;
  double worst_rcond = 1.0;
  int n_features = 0;
};

SecondAdjointH solve_second_adjoint_h(const ProblemSpec& spec, const TrajectoryBundle& base,
                                      const ControlPath& control, const AdjointSolution& adj,
                                      const BrownianBundle& W,
                                      const OperatorPipelineOptions& opt = {});

// Head block of the form at one node: the second-order state-space kernel in
// the descending convention (negative for convex costs).
Mat extract_p00(const SecondAdjointH& sol, int node);
Mat extract_p00_sem(const SecondAdjointH& sol, int node);

} // namespace smpdelay
