#pragma once

// Small self-contained integrators used to pin expected values in tests.
// They share no code with the library on purpose: same equations, different
// discretizations, so agreement is evidence rather than tautology.

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// Forward Euler for a scalar deterministic delay equation
//   x'(t) = F(t, x(t), x(t - lag), I(t)),  I(t) = int_{-lag}^0 x(t+s) w(s) ds
// with constant history. The trapezoid weight w is uniform (density 1/lag) when
// use_average is true, otherwise I is reported as 0. Returns samples on the
// fine grid (steps+1 values on [0, T]).
inline std::vector<double> delayed_ode(
    double T, int steps, double lag, double x0, double history,
    const std::function<double(double, double, double, double)>& F,
    bool use_average) {
  double dt = T / steps;
  int L = static_cast<int>(std::round(lag / dt));
  std::vector<double> x(L + steps + 1, history);
  x[L] = x0;
  for (int i = 0; i < steps; ++i) {
    double t = i * dt;
    double lagged = x[i];  // x(t - lag)
    double avg = 0.0;
    if (use_average && L > 0) {
      for (int j = 0; j <= L; ++j) {
        double w = (j == 0 || j == L) ? 0.5 : 1.0;
        avg += w * x[i + j];
      }
      avg *= dt / lag;
    }
    x[L + i + 1] = x[L + i] + dt * F(t, x[L + i], lagged, avg);
  }
  return std::vector<double>(x.begin() + L, x.end());
}

// Classic RK4 on a coupled linear system x' = A(t) x, used for backward
// adjoint profiles of deterministic problems after time reversal.
inline std::vector<std::vector<double>> rk4_linear(
    double t0, double t1, int steps, const std::vector<double>& x0,
    const std::function<std::vector<double>(double, const std::vector<double>&)>& rhs) {
  double dt = (t1 - t0) / steps;
  std::vector<std::vector<double>> out;
  out.reserve(steps + 1);
  std::vector<double> x = x0;
  out.push_back(x);
  auto axpy = [](const std::vector<double>& a, const std::vector<double>& b, double c) {
    std::vector<double> r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + c * b[i];
    return r;
  };
  for (int i = 0; i < steps; ++i) {
    double t = t0 + i * dt;
    auto k1 = rhs(t, x);
    auto k2 = rhs(t + 0.5 * dt, axpy(x, k1, 0.5 * dt));
    auto k3 = rhs(t + 0.5 * dt, axpy(x, k2, 0.5 * dt));
    auto k4 = rhs(t + dt, axpy(x, k3, dt));
    for (std::size_t j = 0; j < x.size(); ++j)
      x[j] += dt / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
    out.push_back(x);
  }
  return out;
}

} // namespace oracle
