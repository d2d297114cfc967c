#pragma once

#include "smpdelay/common.hpp"
#include "smpdelay/paths.hpp"

#include <utility>
#include <vector>

namespace smpdelay {

// Finite signed measure on [-span, 0]: point masses plus an optional density
// sampled on the uniform theta-grid theta_j = -span + j*span/grid_resolution.
struct DelayMeasure {
  double span = 0.0;
  std::vector<std::pair<double, double>> atoms;  // (theta, weight), theta in [-span, 0]
  std::vector<double> density;                   // nodal samples, size grid_resolution+1
  int grid_resolution = 0;

  bool has_density() const { return !density.empty(); }
  double dtheta() const { return span / grid_resolution; }
  double theta_at(int j) const { return -span + j * dtheta(); }
  bool operator==(const DelayMeasure& o) const {
    return span == o.span && atoms == o.atoms && density == o.density &&
           grid_resolution == o.grid_resolution;
  }
};

DelayMeasure point_mass(double theta, double weight, double span);
DelayMeasure uniform_density(double span, int resolution, double total_mass = 1.0);

double total_mass(const DelayMeasure& mu);
double total_variation(const DelayMeasure& mu);

// Measure resolved against a simulation grid: the past integral at node i is
// sum_j w[j] * x(i - L + j) (dense) or the few atom terms (sparse). Atom
// positions must land on grid nodes; `interpolate_atoms` instead splits an
// off-node atom linearly onto its two neighbours.
struct CompiledMeasure {
  int lag_steps = 0;
  bool dense = false;
  std::vector<double> w;                       // size lag_steps+1 when dense
  std::vector<std::pair<int, double>> sparse;  // (j in 0..L, weight)
  double mass = 0.0;

  template <typename F>
  double integrate(F&& value_at_offset) const {
    // value_at_offset(j) = segment value at theta_j = -(L-j)*dt
    double acc = 0.0;
    if (dense) {
      for (int j = 0; j <= lag_steps; ++j) acc += w[j] * value_at_offset(j);
    } else {
      for (const auto& [j, wt] : sparse) acc += wt * value_at_offset(j);
    }
    return acc;
  }
};

CompiledMeasure compile_measure(const DelayMeasure& mu, const TimeGrid& grid,
                                bool interpolate_atoms = false);

// Past integral of a segment given by nodal samples seg[0..L] (seg[j] at
// theta_j). Convenience form for tests and scripts; solvers use the compiled
// weights directly.
double past_integral(const DelayMeasure& mu, const std::vector<double>& segment,
                     const TimeGrid& grid, bool interpolate_atoms = false);

// Hat-kernel regularization with boundary reflection: atoms and density are
// smeared with the width-span/n triangular kernel and re-sampled as a pure
// density on the theta-grid with out_resolution+1 nodes. Cell masses are exact
// (closed-form kernel CDF), so nonnegative input mass is preserved exactly and
// total variation never grows.
DelayMeasure mollify(const DelayMeasure& mu, int n, int out_resolution);

} // namespace smpdelay
