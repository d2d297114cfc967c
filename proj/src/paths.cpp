#include "smpdelay/paths.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace smpdelay {

TimeGrid make_grid(double horizon, int steps, double delay) {
  if (!(horizon > 0.0)) throw ConfigError("make_grid: horizon must be positive");
  if (steps < 1) throw ConfigError("make_grid: need at least one step");
  if (delay < 0.0) throw ConfigError("make_grid: delay must be nonnegative");
  TimeGrid g;
  g.horizon = horizon;
  g.steps = steps;
  g.delay = delay;
  g.dt = horizon / steps;
  if (delay == 0.0) {
    g.lag_steps = 0;
    return g;
  }
  double lag = delay / g.dt;
  double rounded = std::round(lag);
  if (std::abs(lag - rounded) > 1e-9 * std::max(1.0, lag) || rounded < 1.0) {
    std::ostringstream os;
    os << "make_grid: delay " << delay << " is not a multiple of dt = " << g.dt
       << " (delay/dt = " << lag << ").";
    std::vector<int> suggestions;
    auto workable = [&](int cand) {
      if (cand < 1 || cand == steps) return false;
      double l = delay * cand / horizon;
      return l >= 1.0 && std::abs(l - std::round(l)) < 1e-9;
    };
    for (int off = 1; off <= 2 * steps && suggestions.size() < 3; ++off) {
      if (workable(steps - off)) suggestions.push_back(steps - off);
      if (suggestions.size() < 3 && workable(steps + off)) suggestions.push_back(steps + off);
    }
    if (!suggestions.empty()) {
      os << " Nearby step counts that work:";
      for (int s : suggestions) os << ' ' << s;
    }
    throw AlignmentError(os.str());
  }
  g.lag_steps = static_cast<int>(rounded);
  return g;
}

double counter_normal(std::uint64_t seed, std::uint64_t path, std::uint64_t step,
                      std::uint64_t component) {
  std::uint64_t key = hash_combine(hash_combine(seed, path),
                                   hash_combine(step, component));
  std::uint64_t h1 = splitmix64(key);
  std::uint64_t h2 = splitmix64(key + 0x632BE59BD9B4E019ULL);
  // u1 in (0,1], u2 in [0,1)
  double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1p-53;
  double u2 = static_cast<double>(h2 >> 11) * 0x1p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

BrownianBundle::BrownianBundle(const TimeGrid& grid, int n_paths, int n_noise,
                               std::uint64_t seed, bool antithetic, int workers)
    : grid_(grid), n_paths_(n_paths), n_noise_(n_noise), seed_(seed),
      antithetic_(antithetic) {
  if (n_paths < 1 || n_noise < 1) throw ConfigError("BrownianBundle: empty shape");
  if (antithetic && (n_paths % 2) != 0)
    throw ConfigError("BrownianBundle: antithetic pairing needs an even path count");
  table_.resize(static_cast<std::size_t>(n_paths) * grid.steps * n_noise);
  double sdt = std::sqrt(grid.dt);
  int half = antithetic ? n_paths / 2 : n_paths;
  std::size_t per_path = static_cast<std::size_t>(grid.steps) * n_noise;
  std::size_t n_blocks = (static_cast<std::size_t>(half) + kReductionBlock - 1) / kReductionBlock;
  parallel_for_blocks(n_blocks, [&](std::size_t b) {
    std::size_t p0 = b * kReductionBlock;
    std::size_t p1 = std::min<std::size_t>(half, p0 + kReductionBlock);
    for (std::size_t p = p0; p < p1; ++p) {
      double* row = table_.data() + p * per_path;
      for (int s = 0; s < grid_.steps; ++s)
        for (int c = 0; c < n_noise_; ++c)
          row[static_cast<std::size_t>(s) * n_noise_ + c] =
              sdt * counter_normal(seed_, p, s, c);
      if (antithetic_) {
        double* mirror = table_.data() + (p + half) * per_path;
        for (std::size_t k = 0; k < per_path; ++k) mirror[k] = -row[k];
      }
    }
  }, workers);
}

} // namespace smpdelay
