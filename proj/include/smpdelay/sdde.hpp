#pragma once

#include "smpdelay/model.hpp"

#include <optional>

namespace smpdelay {

// Needle perturbation: on [start, start+width) the control is replaced by a
// fixed point of the control set. Windows are matched to grid nodes by their
// left endpoints (t_i in the window means step i uses the replacement).
struct SpikeWindow {
  double start = 0.0;
  double width = 0.0;
  Vec value;
};

ControlPath spike(const ControlPath& base, const std::vector<SpikeWindow>& windows,
                  const TimeGrid& grid, const ControlSet* must_contain = nullptr);

std::vector<bool> window_mask(const std::vector<SpikeWindow>& windows,
                              const TimeGrid& grid);

struct SimOptions {
  int workers = 1;
  bool interpolate_atoms = false;
  // mollification step for the variation transport terms; nullopt = exact
  std::optional<int> mollify_n;
};

// Euler-Maruyama for the delayed state on [0, T]; history fills nodes -L..-1.
TrajectoryBundle simulate_state(const ProblemSpec& spec, const TimeGrid& grid,
                                const ControlPath& control, const BrownianBundle& W,
                                const SimOptions& opt = {});

// First variation process driven by the spike: linear transport along the base
// trajectory, with the sigma-jump entering the diffusion inside the windows.
TrajectoryBundle simulate_first_variation(const ProblemSpec& spec,
                                          const TrajectoryBundle& base,
                                          const ControlPath& control,
                                          const std::vector<SpikeWindow>& windows,
                                          const BrownianBundle& W,
                                          const SimOptions& opt = {});

// Second variation: same transport plus quadratic forcing in the first
// variation and the drift/diffusion-slope jumps inside the windows.
TrajectoryBundle simulate_second_variation(const ProblemSpec& spec,
                                           const TrajectoryBundle& base,
                                           const TrajectoryBundle& first_var,
                                           const ControlPath& control,
                                           const std::vector<SpikeWindow>& windows,
                                           const BrownianBundle& W,
                                           const SimOptions& opt = {});

// Homogeneous linear flow started at value h in state component space at node
// `start_node` (zero before), transported like the first variation.
TrajectoryBundle simulate_linearized_flow(const ProblemSpec& spec,
                                          const TrajectoryBundle& base,
                                          const ControlPath& control,
                                          const BrownianBundle& W, int start_node,
                                          const Vec& h, const SimOptions& opt = {});

// Shared consistency prechecks: grid/noise/control agreement and, for solvers
// that consume a simulated trajectory, its provenance (problem id, seed, grid).
void verify_run_inputs(const ProblemSpec& spec, const TimeGrid& grid,
                       const ControlPath& control, const BrownianBundle& W);
void verify_base_match(const ProblemSpec& spec, const TrajectoryBundle& base,
                       const TimeGrid& grid, const BrownianBundle& W);

std::vector<double> pathwise_cost(const ProblemSpec& spec,
                                  const TrajectoryBundle& traj,
                                  const ControlPath& control,
                                  const SimOptions& opt = {});

struct CostEstimate {
  double value = 0.0;
  double sem = 0.0;
  int n_paths = 0;
};

CostEstimate cost(const ProblemSpec& spec, const TrajectoryBundle& traj,
                  const ControlPath& control, const SimOptions& opt = {});

} // namespace smpdelay
