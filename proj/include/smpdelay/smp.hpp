#pragma once

#include "smpdelay/hilbert.hpp"

namespace smpdelay {

// Stacked past integrals for one grid node, one block of size dim per
// coefficient channel: drift channels first, then diffusion, then the cost
// channel when the running cost reads the past. Same packing the simulation
// callbacks receive.
struct PastState {
  Vec drift;  // drift_channels() * dim
  Vec diff;   // diff_channels() * dim
  Vec cost;   // dim, empty when unused
};

// Pointwise Hamiltonian b.p0 + sum_l sigma_l.q0_l - running cost, evaluated
// from the model callbacks at one (t, x, past, u). p0 is a d-vector, q0 a
// d x m matrix (column per noise). Descending-convention adjoints: feed the
// negated stored solution, -p_hat and -q_hat, to reproduce the value whose
// argmax over u the maximum principle speaks about.
double hamiltonian(const ProblemSpec& spec, double t, const Vec& x, const PastState& past,
                   const Vec& u, const Vec& p0, const Mat& q0);

struct ScalarEstimate {
  double value = 0.0;
  double sem = 0.0;
};

struct KernelOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  // Smooths the transport of the linearized flow and the past slots of the
  // quadratic forms (width delay/n). Coefficient arguments and the adjoint
  // pair stay exact; used by the convergence study.
  std::optional<int> mollify_n;
  double ridge = 1e-8;
  int min_paths_per_feature = 50;
};

// Second-order kernel samples: one symmetric dim x dim matrix per time, with
// entrywise Monte Carlo half-widths. Positive for convex costs (the weighted
// backward form carries the opposite orientation; kernel_from_backward_form
// flips it). method records the pipeline that produced the samples.
struct SecondOrderKernel {
  std::vector<double> times;
  std::vector<Mat> matrices;
  std::vector<Mat> std_errors;
  std::string method;  // "representation", "matrix-bsde", "mollified-<n>"

  int index_near(double t) const;  // nearest sample, earlier on ties
};

// Forward representation of the kernel quadratic form at one grid time:
// start the linearized flow at s with value h, accumulate the terminal
// Hessian form of the flow plus the time integral of the coefficient-Hessian
// forms contracted against the stored adjoint pair, average across paths.
// At s = 0 the estimate is a plain mean; at s > 0 the per-path functional is
// projected on the polynomial features of the time-s state (the conditional
// kernel), which needs n_paths >= min_paths_per_feature * n_features.
// The adjoint pair must be exact-measure (not mollified) and match spec,
// control, and bundle provenance.
ScalarEstimate p00_quadratic_form(const ProblemSpec& spec, double s, const Vec& h,
                                  const AdjointSolution& adj, const ControlPath& control,
                                  const BrownianBundle& W, const KernelOptions& opt = {});

// Full matrix at one time: dim coordinate flows on one bundle, every mixed
// bilinear form accumulated in the same sweep, symmetric by construction.
// For dim = 1 the single entry is the quadratic form at h = 1.
SecondOrderKernel p00_matrix(const ProblemSpec& spec, double s, const AdjointSolution& adj,
                             const ControlPath& control, const BrownianBundle& W,
                             const KernelOptions& opt = {});

// Matrix samples at several times, sorted ascending.
SecondOrderKernel p00_kernel(const ProblemSpec& spec, const std::vector<double>& times,
                             const AdjointSolution& adj, const ControlPath& control,
                             const BrownianBundle& W, const KernelOptions& opt = {});

// {0, T/4, T/2, 3T/4} snapped to grid nodes, duplicates removed.
std::vector<double> default_kernel_times(const TimeGrid& grid);

// Head block of the backward product-space form, orientation flipped to the
// positive convention, sampled at the requested times. The two pipelines
// estimate the same kernel and are cross-checked in the tests.
SecondOrderKernel kernel_from_backward_form(const SecondAdjointH& sol,
                                            const std::vector<double>& times);

struct CheckOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  double abs_tol = 1e-6;  // slack added to the Monte Carlo band
  double k_sigma = 3.0;
  // Fraction of grid times allowed to violate before the verdict flips;
  // negative means 2/steps. Discretization leaves a few boundary times noisy.
  double bad_fraction = -1.0;
  // Largest distance from a checked time to the nearest kernel sample;
  // negative means horizon/4.
  double coverage_span = -1.0;
  // Noise bundle the adjoint was solved on; when null an identical plain
  // bundle is rebuilt from the solution's seed (antithetic bundles must be
  // passed explicitly).
  const BrownianBundle* bundle = nullptr;
};

struct Violation {
  double t = 0.0;
  Vec v;
  double gap = 0.0;  // -DeltaH, positive means the inequality failed
  double sem = 0.0;
};

// Pointwise test of the maximum principle on a candidate control: for every
// grid time and every control point v,
//   DeltaH(t, v) = H(t, u(t)) - H(t, v) + 1/2 sum_l dsigma_l' K(t) dsigma_l,
// with dsigma_l = sigma_l(v) - sigma_l(u(t)) and H in the descending
// convention. At an optimizer DeltaH >= 0 for all v; a violation is
// DeltaH < -(abs_tol + k_sigma * sem). gap(t) = max_v(-DeltaH) is also the
// gap between the quadratically corrected Hamiltonian at u and its infimum
// over the control set.
struct SMPReport {
  std::string scenario;
  TimeGrid grid;
  std::uint64_t seed = 0;
  int n_paths = 0;
  std::vector<double> times;        // checked grid times, nodes 0..N-1
  std::vector<Vec> control_points;  // columns of the scan, user order
  Mat delta_h;                      // times x points, path means
  Mat delta_h_sem;
  std::vector<int> argmin;          // per time, first index attaining min DeltaH
  std::vector<double> tie_times;    // times where the argmin was not unique
  double worst_gap = 0.0;           // max over the grid of -DeltaH
  double gap_sem = 0.0;             // sem at the argmax
  double tolerance = 0.0;
  double k_sigma = 0.0;
  std::vector<Violation> violations;
  bool pass = false;
  std::string verdict;  // "pass" or "fail"
};

SMPReport check_variational_inequality(const ProblemSpec& spec, const ControlPath& control,
                                       const AdjointSolution& adj, const SecondOrderKernel& P00,
                                       const CheckOptions& opt = {});

std::string to_json(const SMPReport& report);
// One row per checked time: t, DeltaH for each control point, then the
// matching half-widths.
std::string delta_h_csv(const SMPReport& report);

struct ExpansionOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  bool include_kernel_term = true;  // drop to watch the slope degrade
};

struct ExpansionPoint {
  double eps = 0.0;  // covered time, masked steps * dt
  double lhs = 0.0;  // cost(u) - cost(spiked u), common-noise estimate
  double lhs_sem = 0.0;
  double rhs = 0.0;  // - E integral over the window of
                     //   dl + p.db + q.dsigma + 1/2 dsigma' K dsigma
  double rhs_sem = 0.0;
  double gap = 0.0;  // lhs - rhs, paired per path before averaging
  double gap_sem = 0.0;
  double gap_over_eps = 0.0;
};

struct ExpansionReport {
  std::vector<ExpansionPoint> points;  // widest window first
  double slope = 0.0;  // log-log fit of |gap| against eps; above 1 means the
                       // expansion captured every first-order term
  bool kernel_term_included = true;
};

// Spike-variation ladder: one window anchor and value, strictly shrinking
// widths. Replays the state on the common bundle per width, compares the
// pathwise cost drop against the predicted expansion, and fits the decay of
// the remainder. With control-dependent noise the kernel term is what keeps
// the remainder superlinear.
ExpansionReport cost_expansion_check(const ProblemSpec& spec, const ControlPath& control,
                                     const std::vector<SpikeWindow>& ladder,
                                     const AdjointSolution& adj, const SecondOrderKernel& P00,
                                     const BrownianBundle& W, const ExpansionOptions& opt = {});

struct ConvergencePoint {
  int n = 0;
  double value = 0.0;
  double sem = 0.0;
  double error = 0.0;  // |value - exact_value|
};

// Kernel quadratic form under lag-structure smoothing of width delay/n
// against the exact-measure representation, everything on one bundle. For
// density channels every n agrees within noise; point masses converge as n
// grows.
struct ConvergenceReport {
  double s = 0.0;
  Vec h;
  double exact_value = 0.0;
  double exact_sem = 0.0;
  std::vector<ConvergencePoint> points;
};

ConvergenceReport p00_convergence_study(const ProblemSpec& spec, double s,
                                        const std::vector<int>& n_list,
                                        const AdjointSolution& adj, const ControlPath& control,
                                        const BrownianBundle& W, const Vec& h = Vec(),
                                        const KernelOptions& opt = {});

} // namespace smpdelay
