#pragma once

#include "smpdelay/common.hpp"
#include "smpdelay/util.hpp"

#include <cstdint>
#include <vector>

namespace smpdelay {

// Uniform grid t_i = i*dt over [0, T], with the delay span resolved exactly by
// lag_steps nodes. Negative node indices address the history segment, indices
// beyond `steps` the adjoint overhang (T, T+d].
struct TimeGrid {
  double horizon = 1.0;  // T
  int steps = 1;         // N
  double delay = 0.0;    // d
  int lag_steps = 0;     // L = d/dt, exact
  double dt = 1.0;

  double time_at(int node) const { return dt * node; }
  int state_nodes() const { return lag_steps + steps + 1; }  // -L .. N
  int adj_nodes() const { return steps + lag_steps + 1; }    // 0 .. N+L
  bool same(const TimeGrid& o) const {
    return horizon == o.horizon && steps == o.steps && delay == o.delay;
  }
};

// Throws AlignmentError (with nearby workable step counts) when the delay is
// not an integer multiple of T/N.
TimeGrid make_grid(double horizon, int steps, double delay);

// Standard normal addressed by counter, not by stream position: two hash lanes
// of (seed, path, step, component) feed one Box-Muller draw, so any entry can
// be generated independently and the fill order is irrelevant.
double counter_normal(std::uint64_t seed, std::uint64_t path, std::uint64_t step,
                      std::uint64_t component);

// Materialized table of Brownian increments, N(0, dt) per entry. The same
// (grid, n_paths, n_noise, seed) always reproduces the same table, which is
// what makes common-random-number comparisons across controls work: reuse one
// bundle for every simulation in the comparison.
class BrownianBundle {
 public:
  BrownianBundle(const TimeGrid& grid, int n_paths, int n_noise,
                 std::uint64_t seed, bool antithetic = false, int workers = 1);

  double inc(int path, int step, int comp) const {
    return table_[(static_cast<std::size_t>(path) * grid_.steps + step) * n_noise_ + comp];
  }
  const TimeGrid& grid() const { return grid_; }
  int n_paths() const { return n_paths_; }
  int n_noise() const { return n_noise_; }
  std::uint64_t seed() const { return seed_; }
  bool antithetic() const { return antithetic_; }

 private:
  TimeGrid grid_;
  int n_paths_ = 0;
  int n_noise_ = 0;
  std::uint64_t seed_ = 0;
  bool antithetic_ = false;
  std::vector<double> table_;
};

// Path-major storage for grid samples of a d-dimensional process on nodes
// -L..N. Variation processes keep their zero history here too, so past
// integrals read uniformly from one layout.
struct TrajectoryBundle {
  TimeGrid grid;
  int n_paths = 0;
  int dim = 0;
  std::vector<double> data;
  std::string spec_id;
  std::string control_id;
  std::string tag;
  std::uint64_t seed = 0;

  void allocate() {
    data.assign(static_cast<std::size_t>(n_paths) * grid.state_nodes() * dim, 0.0);
  }
  std::size_t offset(int path, int node) const {
    return (static_cast<std::size_t>(path) * grid.state_nodes() +
            (node + grid.lag_steps)) * dim;
  }
  double* at(int path, int node) { return data.data() + offset(path, node); }
  const double* at(int path, int node) const { return data.data() + offset(path, node); }
  double value(int path, int node, int comp) const { return at(path, node)[comp]; }
};

} // namespace smpdelay
