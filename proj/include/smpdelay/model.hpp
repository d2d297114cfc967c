#pragma once

#include "smpdelay/common.hpp"
#include "smpdelay/measures.hpp"
#include "smpdelay/paths.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace smpdelay {

// Coefficient callbacks share one argument convention:
//   t     current time
//   x     state, size d
//   y     stacked past integrals, one d-block per delay channel of the
//         coefficient (drift channels for b, diffusion channels for sigma,
//         the single running-cost channel for l)
//   u     control, size k
// Derivative layouts:
//   b_x   d x d          b_y   d x (Kb*d)
//   b_xx[j], b_xy[j], b_yy[j]: Hessian blocks of drift component j
//   sigma d x m columns; sigma_x[i] d x d, sigma_y[i] d x (Ks*d)
//   sigma_xx[i][j] etc: Hessian blocks of sigma^{i} component j
//   l_x d, l_y d, l_xx d x d, l_xy d x d, l_yy d x d
//   h(x) scalar with h_x d, h_xx d x d (terminal cost takes no past argument)
using Fn_vec = std::function<void(double, const Vec&, const Vec&, const Vec&, Vec&)>;
using Fn_mat = std::function<void(double, const Vec&, const Vec&, const Vec&, Mat&)>;
using Fn_t3 = std::function<void(double, const Vec&, const Vec&, const Vec&, Tensor3&)>;
using Fn_t4 = std::function<void(double, const Vec&, const Vec&, const Vec&, Tensor4&)>;
using Fn_scalar = std::function<double(double, const Vec&, const Vec&, const Vec&)>;
using Fn_terminal = std::function<double(const Vec&)>;
using Fn_terminal_grad = std::function<void(const Vec&, Vec&)>;
using Fn_terminal_hess = std::function<void(const Vec&, Mat&)>;

struct ControlSet {
  int dim = 0;
  std::vector<Vec> points;  // finite, possibly non-convex
};

// Deterministic control as a grid function (row i = value at t_i). A per-path
// table is supported for completeness but nothing in the library produces one:
// candidate controls under test are open-loop.
struct ControlPath {
  std::string id;
  Mat values;  // (N+1) x k
  std::vector<Mat> per_path;

  bool shared() const { return per_path.empty(); }
  Vec at(int path, int node) const {
    const Mat& m = shared() ? values : per_path[path];
    return m.row(node).transpose();
  }
};

ControlPath constant_control(const Vec& u, const TimeGrid& grid, const std::string& id);

struct ProblemSpec {
  std::string id;
  int dim_x = 0, dim_w = 0, dim_u = 0;   // d, m, k
  double horizon = 1.0;                  // T
  double delay = 0.0;                    // d (max span of all channels)

  std::vector<DelayMeasure> mu_drift;    // Kb >= 1 channels
  std::vector<DelayMeasure> mu_diff;     // Ks >= 1 channels
  DelayMeasure mu_cost;                  // running-cost channel
  bool cost_uses_past = false;

  Vec x0;
  std::function<Vec(double)> history;    // theta in [-delay, 0)

  ControlSet controls;

  Fn_vec b; Fn_mat b_x; Fn_mat b_y;
  Fn_t3 b_xx; Fn_t3 b_xy; Fn_t3 b_yy;
  Fn_mat sigma; Fn_t3 sigma_x; Fn_t3 sigma_y;
  Fn_t4 sigma_xx; Fn_t4 sigma_xy; Fn_t4 sigma_yy;
  Fn_scalar l; Fn_vec l_x; Fn_vec l_y;
  Fn_mat l_xx; Fn_mat l_xy; Fn_mat l_yy;
  Fn_terminal h; Fn_terminal_grad h_x; Fn_terminal_hess h_xx;

  int drift_channels() const { return static_cast<int>(mu_drift.size()); }
  int diff_channels() const { return static_cast<int>(mu_diff.size()); }
};

// Structural checks: required callbacks present, measure spans within delay,
// control set matches dim_u, x0/history sizes. Throws on failure.
void validate_shapes(const ProblemSpec& spec);

struct HypothesisReport {
  bool ok = false;
  double worst_fd_residual = 0.0;   // max combined abs/rel derivative mismatch
  std::string worst_entry;
  double lipschitz_u = 0.0;         // largest observed slope in the control
  double linear_growth = 0.0;       // max |b|,|sigma| over 1+|x|+|y|+|u|
  int probes = 0;
  std::string detail;               // per-callback worst residuals, one per line
};

// Finite-difference audit of every provided derivative callback at randomly
// drawn (t, x, y, u); first derivatives are checked against the values,
// Hessian blocks against the first derivatives. fd_tol is the pass threshold
// for worst_fd_residual.
HypothesisReport validate_hypotheses(const ProblemSpec& spec, int probes = 64,
                                     std::uint64_t seed = 13,
                                     double fd_tol = 1e-4);

// --- scenario builders ---------------------------------------------------

// Scalar linear dynamics with distributed (density) delays in drift, diffusion
// and running cost; control enters both drift and diffusion linearly, costs
// are quadratic. Every derivative is exact, so this is the workhorse for
// adjoint and kernel checks.
struct LqDelayParams {
  double horizon = 1.0;
  double delay = 0.5;
  double a0 = -0.4;   // drift: a0 x + a1 <mu_b, x_t> + au u
  double a1 = 0.6;
  double au = 0.5;
  double s0 = 0.15;   // sigma: s0 + sx x + sy <mu_s, x_t> + su u
  double sx = 0.2;
  double sy = 0.1;
  double su = 0.4;
  double wx = 1.0;    // l = wx/2 x^2 + wy/2 <mu_l, x_t>^2 + wu/2 u^2
  double wy = 0.5;
  double wu = 0.1;
  double kT = 1.0;    // h = kT/2 x^2
  double x0 = 1.0;
  int resolution = 0;          // theta-grid nodes for the densities; 0 = defer
  std::vector<double> control_values = {-1.0, -0.5, 0.0, 0.5, 1.0};
};
ProblemSpec scenario_lq_delay(const LqDelayParams& p);

// Same structure with pointwise lags (atoms at -delay) in drift and diffusion.
struct PointwiseDelayParams {
  double horizon = 1.0;
  double delay = 0.25;
  double a0 = -0.3;
  double a1 = 0.8;    // coefficient of x(t - delay) in the drift
  double au = 0.6;
  double s0 = 0.2;
  double sx = 0.25;
  double s1 = 0.3;    // coefficient of x(t - delay) in sigma
  double su = 0.5;
  double wx = 1.0;
  double wu = 0.2;
  double kT = 0.5;
  double x0 = 1.0;
  std::vector<double> control_values = {-1.0, 0.0, 1.0};
};
ProblemSpec scenario_pointwise_delay(const PointwiseDelayParams& p);

// Two-dimensional investment/consumption model: x = (S, V). The price S has
// drift and interest channels driven by separate delay measures (moving
// averages of S), the wealth V allocates pi to the risky asset and consumes c;
// the control is u = (pi, c) on a finite grid. Utility of consumption is
// collected in the running cost, utility of terminal wealth in h (both are
// minimized with flipped sign).
//
// Defaults are tuned so the grid optimum is also a pointwise Hamiltonian
// minimizer: the risky excess return is negative, pinning pi* = 0 at every
// time (the second-order sig0^2 K term only widens that margin), while the
// concave consumption utility kappa_c c - kappa_q c^2 puts the continuous
// optimum c*(t) = (kappa_c + p(t))/(2 kappa_q) near the middle grid point
// for the whole horizon.
struct PortfolioParams {
  double horizon = 0.5;
  double delay = 0.25;
  double S0 = 1.0, V0 = 1.0;
  double r0 = 0.02, r1 = 0.05;   // interest: r0 + r1 (<mu_r, S_t>/S0 - 1)
  double b0 = -0.06, b1 = 0.10;  // excess drift: b0 + b1 (<mu_b, S_t>/S0 - 1)
  double sig0 = 0.30;            // price volatility (flat)
  double kappa_c = 0.48;         // consumption utility, linear coefficient
  double kappa_q = 2.0;          // consumption utility, quadratic curb
  double kappa_v = 0.35;         // terminal: h = -(V - kappa_v V^2)
  int resolution = 0;
  std::vector<double> pi_grid = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> c_grid = {0.0, 0.05, 0.1};
};
ProblemSpec scenario_portfolio(const PortfolioParams& p);

} // namespace smpdelay
