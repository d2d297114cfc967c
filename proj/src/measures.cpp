#include "smpdelay/measures.hpp"

#include <cmath>
#include <sstream>

namespace smpdelay {

namespace {

double trap_weight(int j, int L, double dtheta) {
  return (j == 0 || j == L) ? 0.5 * dtheta : dtheta;
}

void check_measure(const DelayMeasure& mu) {
  if (mu.span < 0.0) throw ConfigError("DelayMeasure: negative span");
  if (mu.has_density()) {
    if (mu.grid_resolution < 1)
      throw ConfigError("DelayMeasure: density needs grid_resolution >= 1");
    if (static_cast<int>(mu.density.size()) != mu.grid_resolution + 1)
      throw ShapeError("DelayMeasure: density size != grid_resolution + 1");
    if (!(mu.span > 0.0)) throw ConfigError("DelayMeasure: density needs span > 0");
  }
  for (const auto& [theta, w] : mu.atoms) {
    (void)w;
    if (theta < -mu.span - 1e-12 || theta > 1e-12) {
      std::ostringstream os;
      os << "DelayMeasure: atom at " << theta << " outside [-" << mu.span << ", 0]";
      throw DomainError(os.str());
    }
  }
}

} // namespace

DelayMeasure point_mass(double theta, double weight, double span) {
  DelayMeasure mu;
  mu.span = span;
  mu.atoms.emplace_back(theta, weight);
  check_measure(mu);
  return mu;
}

DelayMeasure uniform_density(double span, int resolution, double total) {
  if (!(span > 0.0) || resolution < 1)
    throw ConfigError("uniform_density: need span > 0 and resolution >= 1");
  DelayMeasure mu;
  mu.span = span;
  mu.grid_resolution = resolution;
  mu.density.assign(resolution + 1, total / span);
  return mu;
}

double total_mass(const DelayMeasure& mu) {
  check_measure(mu);
  double m = 0.0;
  for (const auto& [theta, w] : mu.atoms) { (void)theta; m += w; }
  if (mu.has_density()) {
    int L = mu.grid_resolution;
    for (int j = 0; j <= L; ++j) m += trap_weight(j, L, mu.dtheta()) * mu.density[j];
  }
  return m;
}

double total_variation(const DelayMeasure& mu) {
  check_measure(mu);
  double tv = 0.0;
  for (const auto& [theta, w] : mu.atoms) { (void)theta; tv += std::abs(w); }
  if (mu.has_density()) {
    int L = mu.grid_resolution;
    for (int j = 0; j <= L; ++j)
      tv += trap_weight(j, L, mu.dtheta()) * std::abs(mu.density[j]);
  }
  return tv;
}

CompiledMeasure compile_measure(const DelayMeasure& mu, const TimeGrid& grid,
                                bool interpolate_atoms) {
  check_measure(mu);
  if (mu.span > grid.delay + 1e-12 * std::max(1.0, grid.delay)) {
    std::ostringstream os;
    os << "compile_measure: measure span " << mu.span
       << " exceeds the grid delay window " << grid.delay;
    throw ConsistencyError(os.str());
  }
  CompiledMeasure cm;
  cm.lag_steps = grid.lag_steps;
  const int L = grid.lag_steps;

  if (mu.has_density()) {
    // Density nodes must coincide with grid nodes: dtheta == dt.
    double ratio = mu.dtheta() / grid.dt;
    if (std::abs(ratio - 1.0) > 1e-9) {
      std::ostringstream os;
      os << "compile_measure: density sampled at dtheta = " << mu.dtheta()
         << " but the grid step is " << grid.dt
         << "; resample the density on the simulation theta-grid";
      throw AlignmentError(os.str());
    }
    cm.dense = true;
    cm.w.assign(L + 1, 0.0);
    int Lm = mu.grid_resolution;  // may be < L when span < delay
    int shift = L - Lm;           // grid offset of the measure's leftmost node
    for (int j = 0; j <= Lm; ++j)
      cm.w[shift + j] += trap_weight(j, Lm, mu.dtheta()) * mu.density[j];
  }

  for (const auto& [theta, w] : mu.atoms) {
    double pos = (theta + grid.delay) / grid.dt;  // node index in 0..L
    double nearest = std::round(pos);
    if (std::abs(pos - nearest) <= 1e-9 * std::max(1.0, static_cast<double>(L))) {
      int j = std::min(L, std::max(0, static_cast<int>(nearest)));
      if (cm.dense) cm.w[j] += w;
      else cm.sparse.emplace_back(j, w);
    } else if (interpolate_atoms) {
      int j0 = static_cast<int>(std::floor(pos));
      int j1 = j0 + 1;
      double frac = pos - j0;
      if (j0 < 0 || j1 > L) throw DomainError("compile_measure: atom outside window");
      if (cm.dense) {
        cm.w[j0] += w * (1.0 - frac);
        cm.w[j1] += w * frac;
      } else {
        cm.sparse.emplace_back(j0, w * (1.0 - frac));
        cm.sparse.emplace_back(j1, w * frac);
      }
    } else {
      std::ostringstream os;
      os << "compile_measure: atom at theta = " << theta
         << " falls between grid nodes (index " << pos
         << "); align it with the grid or enable atom interpolation";
      throw AlignmentError(os.str());
    }
  }
  cm.mass = 0.0;
  if (cm.dense) for (double x : cm.w) cm.mass += x;
  else for (const auto& [j, wt] : cm.sparse) { (void)j; cm.mass += wt; }
  return cm;
}

double past_integral(const DelayMeasure& mu, const std::vector<double>& segment,
                     const TimeGrid& grid, bool interpolate_atoms) {
  if (static_cast<int>(segment.size()) != grid.lag_steps + 1)
    throw ShapeError("past_integral: segment must have lag_steps + 1 samples");
  CompiledMeasure cm = compile_measure(mu, grid, interpolate_atoms);
  return cm.integrate([&](int j) { return segment[j]; });
}

namespace {

// CDF of the triangular kernel of half-width h centered at c, evaluated at x.
double hat_cdf(double x, double c, double h) {
  double u = x - c;
  if (u <= -h) return 0.0;
  if (u >= h) return 1.0;
  if (u <= 0.0) {
    double t = u + h;
    return 0.5 * t * t / (h * h);
  }
  double t = h - u;
  return 1.0 - 0.5 * t * t / (h * h);
}

// Kernel mass landing in [a, b] subset of [-span, 0] after reflecting the
// overflow at both endpoints back into the window.
double cell_mass(double a, double b, double c, double h, double span) {
  double m = hat_cdf(b, c, h) - hat_cdf(a, c, h);
  m += hat_cdf(-a, c, h) - hat_cdf(-b, c, h);                    // reflect at 0
  m += hat_cdf(-2.0 * span - a, c, h) - hat_cdf(-2.0 * span - b, c, h);  // at -span
  return m;
}

} // namespace

DelayMeasure mollify(const DelayMeasure& mu, int n, int out_resolution) {
  check_measure(mu);
  if (n < 1) throw ConfigError("mollify: n must be >= 1");
  if (out_resolution < 1) throw ConfigError("mollify: output resolution must be >= 1");
  if (!(mu.span > 0.0)) throw ConfigError("mollify: needs span > 0");
  const double span = mu.span;
  const double h = span / n;
  const int L = out_resolution;
  const double dth = span / L;

  // Source mass as weighted points: atoms as given, density lumped at nodes.
  std::vector<std::pair<double, double>> sources = mu.atoms;
  if (mu.has_density()) {
    int Lm = mu.grid_resolution;
    for (int j = 0; j <= Lm; ++j)
      sources.emplace_back(mu.theta_at(j),
                           trap_weight(j, Lm, mu.dtheta()) * mu.density[j]);
  }

  std::vector<double> nodal_mass(L + 1, 0.0);
  for (int j = 0; j <= L; ++j) {
    double tj = -span + j * dth;
    double a = std::max(-span, tj - 0.5 * dth);
    double b = std::min(0.0, tj + 0.5 * dth);
    for (const auto& [c, w] : sources) nodal_mass[j] += w * cell_mass(a, b, c, h, span);
  }

  DelayMeasure out;
  out.span = span;
  out.grid_resolution = L;
  out.density.resize(L + 1);
  for (int j = 0; j <= L; ++j) out.density[j] = nodal_mass[j] / trap_weight(j, L, dth);
  return out;
}

} // namespace smpdelay
