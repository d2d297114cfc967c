#pragma once

#include "smpdelay/absde.hpp"
#include "smpdelay/smp.hpp"

namespace smpdelay {

// Investment study on the two-component scenario x = (S, V). The control
// (pi, c) enters only the wealth row, the price row is control-free, and the
// wealth never feeds back into the price, so the wealth component of the
// adjoint system closes on itself. That makes two shortcuts available: the
// wealth pair can be solved as a scalar backward equation, and the kernel
// direction the inequality needs is e_V alone. Both shortcuts silently assume
// the price pair is irrelevant; the study measures that from the full solve
// instead of assuming it.

// Scalar wealth pair: one LSMC sweep in the ascending storage of
// solve_adjoint, keeping only the wealth-row couplings (local gradients,
// wealth-channel pullbacks, running-cost slot) with the price pair pinned to
// zero. Terminal value is the wealth slot of h_x; zero on (T, T+delay].
struct WealthAdjoint {
  TimeGrid grid;
  std::string spec_id, control_id;
  std::uint64_t seed = 0;
  int n_paths = 0;

  std::vector<double> p_data, q_data;  // path-major, nodes 0..steps+lag

  double p_at(int path, int node) const {
    return p_data[static_cast<std::size_t>(path) * grid.adj_nodes() + node];
  }
  double q_at(int path, int node) const {
    return q_data[static_cast<std::size_t>(path) * grid.adj_nodes() + node];
  }

  int n_features = 0;
  double worst_rcond = 1.0;
};

WealthAdjoint solve_wealth_adjoint(const ProblemSpec& spec, const TrajectoryBundle& base,
                                   const ControlPath& control, const BrownianBundle& W,
                                   const AdjointOptions& opt = {});

double wealth_mean_p(const WealthAdjoint& sol, int node);
double wealth_mean_q(const WealthAdjoint& sol, int node);

// Hamiltonian of the wealth row alone: b_V p + sigma_V q - l, the scalar the
// (pi, c) ranking acts on. Same descending convention as smp::hamiltonian:
// feed -p_hat, -q_hat. The price row is control-free, so differences of this
// value across controls equal differences of the full Hamiltonian whatever
// the price pair happens to be.
double wealth_hamiltonian(const ProblemSpec& spec, double t, const Vec& x,
                          const PastState& past, const Vec& u, double p, double q);

// Kernel quadratic form in the wealth direction driven by the scalar pair:
// the usual representation (terminal Hessian of the linearized flow plus the
// running coefficient-Hessian forms) with the price slots of the adjoint set
// to zero, so only wealth-row Hessians contribute. The study reports its gap
// to the full-matrix sample rather than asserting they agree.
ScalarEstimate wealth_kernel_form(const ProblemSpec& spec, double s,
                                  const WealthAdjoint& wadj, const ControlPath& control,
                                  const BrownianBundle& W, const KernelOptions& opt = {});

// One constant strategy of the scan: cost estimate under common noise.
struct StrategyCell {
  double pi = 0.0, c = 0.0;
  double cost = 0.0, sem = 0.0;
};

struct PortfolioStudyOptions {
  int steps = 64;
  int n_paths = 4096;
  std::uint64_t seed = 2471;
  int workers = 1;
  double abs_tol = 1e-9;  // inequality slack on top of the sigma band
  double k_sigma = 3.0;
  std::vector<double> kernel_times;  // empty = default_kernel_times
};

// End-to-end pipeline on scenario_portfolio:
//   1. cost table over the (pi, c) grid, one bundle for every cell;
//   2. full adjoint at the best cell, price-row magnitudes measured;
//   3. scalar wealth sweep, compared to the wealth column of the full solve;
//   4. kernel samples, full matrix and wealth-direction scalar form;
//   5. variational-inequality scan at the best cell.
struct PortfolioStudy {
  PortfolioParams params;  // as used (resolution filled in)
  std::string spec_id;
  TimeGrid grid;
  std::uint64_t seed = 0;
  int n_paths = 0;

  std::vector<StrategyCell> table;  // control-set order
  int best = -1;

  double price_p_max = 0.0, price_q_max = 0.0;    // max |node mean|, price row
  double wealth_p_max = 0.0, wealth_q_max = 0.0;  // same for the wealth row

  double adjoint_gap_p = 0.0, adjoint_gap_q = 0.0;  // scalar sweep vs full solve

  SecondOrderKernel kernel;          // full-matrix representation samples
  std::vector<double> wealth_form;   // scalar-pair form at kernel.times
  std::vector<double> wealth_form_sem;
  double kernel_gap_sigmas = 0.0;    // worst wealth-entry gap in combined sems

  SMPReport check;  // inequality scan at the best cell
  double runtime_sec = 0.0;
};

PortfolioStudy run_portfolio_study(const PortfolioParams& params,
                                   const PortfolioStudyOptions& opt = {});

std::string to_json(const PortfolioStudy& study);
// pi, c, cost, sem rows in control-set order.
std::string strategy_table_csv(const PortfolioStudy& study);

} // namespace smpdelay
