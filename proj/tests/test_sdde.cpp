#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "smpdelay/sdde.hpp"
#include "smpdelay/util.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace smpdelay;

namespace {

ProblemSpec deterministic_pointwise(double T, double delay, double a0, double a1) {
  PointwiseDelayParams p;
  p.horizon = T;
  p.delay = delay;
  p.a0 = a0;
  p.a1 = a1;
  p.au = 0.0;
  p.s0 = p.sx = p.s1 = p.su = 0.0;
  return scenario_pointwise_delay(p);
}

double mean_sq_terminal(const TrajectoryBundle& tb) {
  const int N = tb.grid.steps;
  std::vector<double> v(tb.n_paths);
  for (int p = 0; p < tb.n_paths; ++p) {
    double s = 0.0;
    for (int c = 0; c < tb.dim; ++c) {
      double x = tb.value(p, N, c);
      s += x * x;
    }
    v[p] = s;
  }
  return mean_sem(v).mean;
}

double mean_sq_diff_terminal(const TrajectoryBundle& a, const TrajectoryBundle& b,
                             const TrajectoryBundle* c = nullptr,
                             const TrajectoryBundle* d = nullptr) {
  const int N = a.grid.steps;
  std::vector<double> v(a.n_paths);
  for (int p = 0; p < a.n_paths; ++p) {
    double s = 0.0;
    for (int k = 0; k < a.dim; ++k) {
      double x = a.value(p, N, k) - b.value(p, N, k);
      if (c) x -= c->value(p, N, k);
      if (d) x -= d->value(p, N, k);
      s += x * x;
    }
    v[p] = s;
  }
  return mean_sem(v).mean;
}

} // namespace

TEST_CASE("pointwise lag reproduces the piecewise-polynomial solution") {
  // x' = x(t - 1), unit history: x(t) = 1 + t on [0,1], 2 + (t^2 - 1)/2 on [1,2]
  const int N = 2000;
  auto spec = deterministic_pointwise(2.0, 1.0, 0.0, 1.0);
  auto grid = make_grid(2.0, N, 1.0);
  BrownianBundle W(grid, 1, 1, 7);
  auto u = constant_control(Vec::Zero(1), grid, "rest");
  auto x = simulate_state(spec, grid, u, W);
  CHECK(x.value(0, N / 2, 0) == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(x.value(0, N, 0) == doctest::Approx(3.5).epsilon(1.5e-3));
}

TEST_CASE("distributed lag matches an independent fine integration") {
  LqDelayParams p;
  p.s0 = p.sx = p.sy = p.su = 0.0;
  p.resolution = 100;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 200, 0.5);
  BrownianBundle W(grid, 1, 1, 7);
  auto u = constant_control(Vec::Zero(1), grid, "rest");
  auto x = simulate_state(spec, grid, u, W);

  auto fine = oracle::delayed_ode(
      1.0, 3200, 0.5, p.x0, p.x0,
      [&](double, double xv, double, double avg) { return p.a0 * xv + p.a1 * avg; },
      true);
  CHECK(std::abs(x.value(0, 200, 0) - fine.back()) < 5e-3);
}

TEST_CASE("driftless dynamics stay a martingale with the right variance") {
  const int M = 8192, N = 64;

  SUBCASE("additive noise") {
    LqDelayParams p;
    p.a0 = p.a1 = p.au = 0.0;
    p.s0 = 1.0;
    p.sx = p.sy = p.su = 0.0;
    p.resolution = 32;
    auto spec = scenario_lq_delay(p);
    auto grid = make_grid(1.0, N, 0.5);
    BrownianBundle W(grid, M, 1, 11);
    auto u = constant_control(Vec::Zero(1), grid, "rest");
    auto x = simulate_state(spec, grid, u, W);
    std::vector<double> xt(M);
    for (int i = 0; i < M; ++i) xt[i] = x.value(i, N, 0);
    auto mv = mean_sem(xt);
    CHECK(std::abs(mv.mean - 1.0) < 4.0 * mv.sem);
    CHECK(mv.var == doctest::Approx(1.0).epsilon(0.05));
  }

  SUBCASE("lagged state in the volatility") {
    PointwiseDelayParams p;
    p.a0 = p.a1 = p.au = 0.0;
    p.s0 = p.sx = p.su = 0.0;
    p.s1 = 1.0;  // sigma = x(t - delay)
    auto spec = scenario_pointwise_delay(p);
    auto grid = make_grid(1.0, N, 0.25);
    BrownianBundle W(grid, M, 1, 11);
    auto u = constant_control(Vec::Zero(1), grid, "rest");
    auto x = simulate_state(spec, grid, u, W);

    // before t = delay the volatility is frozen at the history, so the
    // variance at the delay is exactly the elapsed time
    std::vector<double> xd(M), xt(M);
    for (int i = 0; i < M; ++i) {
      xd[i] = x.value(i, N / 4, 0);
      xt[i] = x.value(i, N, 0);
    }
    auto at_d = mean_sem(xd);
    auto at_T = mean_sem(xt);
    CHECK(std::abs(at_d.mean - 1.0) < 4.0 * at_d.sem);
    CHECK(at_d.var == doctest::Approx(0.25).epsilon(0.05));
    CHECK(std::abs(at_T.mean - 1.0) < 4.0 * at_T.sem);
  }
}

TEST_CASE("a spike leaves the path untouched before its window") {
  LqDelayParams p;
  p.resolution = 32;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 64, 0.5);
  const int M = 16;
  BrownianBundle W(grid, M, 1, 23);
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  SpikeWindow win{0.5, 4.0 / 64, Vec::Constant(1, 1.0)};
  auto us = spike(u0, {win}, grid, &spec.controls);

  auto base = simulate_state(spec, grid, u0, W);
  auto bumped = simulate_state(spec, grid, us, W);

  double after = 0.0;
  for (int i = 0; i < M; ++i) {
    for (int n = -grid.lag_steps; n <= 32; ++n)
      CHECK(base.value(i, n, 0) == bumped.value(i, n, 0));  // bitwise
    after = std::max(after, std::abs(base.value(i, 40, 0) - bumped.value(i, 40, 0)));
  }
  CHECK(after > 0.0);
}

TEST_CASE("variation processes scale at their advertised orders") {
  LqDelayParams p;
  p.delay = 0.25;
  p.resolution = 32;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 128, 0.25);
  const int M = 2048;
  BrownianBundle W(grid, M, 1, 31);
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  Vec v = Vec::Constant(1, 1.0);

  const double eps1 = 16.0 / 128, eps2 = 8.0 / 128;
  SpikeWindow w1{0.5, eps1, v}, w2{0.5, eps2, v};
  auto base = simulate_state(spec, grid, u0, W);

  auto run = [&](const SpikeWindow& w) {
    auto us = spike(u0, {w}, grid, &spec.controls);
    auto xs = simulate_state(spec, grid, us, W);
    auto y = simulate_first_variation(spec, base, u0, {w}, W);
    auto z = simulate_second_variation(spec, base, y, u0, {w}, W);
    return std::tuple{std::move(xs), std::move(y), std::move(z)};
  };
  auto [xs1, y1, z1] = run(w1);
  auto [xs2, y2, z2] = run(w2);

  // E|y|^2 = O(eps): halving the window halves it
  double ratio_y = mean_sq_terminal(y1) / mean_sq_terminal(y2);
  CHECK(ratio_y > 1.6);
  CHECK(ratio_y < 2.5);

  // E|x^eps - x - y|^2 = O(eps^2): quarters under halving
  double r1 = mean_sq_diff_terminal(xs1, base, &y1);
  double r2 = mean_sq_diff_terminal(xs2, base, &y2);
  double ratio_r = r1 / r2;
  CHECK(ratio_r > 2.2);
  CHECK(ratio_r < 7.0);
  CHECK(r1 < 0.5 * mean_sq_terminal(y1));

  // E|z|^2 = O(eps^2), and adding z sharpens the expansion
  double ratio_z = mean_sq_terminal(z1) / mean_sq_terminal(z2);
  CHECK(ratio_z > 2.2);
  CHECK(ratio_z < 7.0);
  double full1 = mean_sq_diff_terminal(xs1, base, &y1, &z1);
  CHECK(full1 < 0.6 * r1);
}

TEST_CASE("linearized flow is exactly homogeneous in its start value") {
  LqDelayParams p;
  p.resolution = 32;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 64, 0.5);
  const int M = 64;
  BrownianBundle W(grid, M, 1, 41);
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  auto base = simulate_state(spec, grid, u0, W);

  auto f1 = simulate_linearized_flow(spec, base, u0, W, 10, Vec::Constant(1, 0.75));
  auto f2 = simulate_linearized_flow(spec, base, u0, W, 10, Vec::Constant(1, 1.5));
  for (int i = 0; i < M; ++i)
    for (int n = 10; n <= 64; n += 6)
      CHECK(f2.value(i, n, 0) == 2.0 * f1.value(i, n, 0));  // bitwise

  auto fT = simulate_linearized_flow(spec, base, u0, W, 64, Vec::Constant(1, 3.0));
  CHECK(fT.value(0, 64, 0) == 3.0);
  CHECK(fT.value(0, 63, 0) == 0.0);
}

TEST_CASE("frozen dynamics give the closed-form cost") {
  LqDelayParams p;
  p.a0 = p.a1 = p.au = 0.0;
  p.s0 = p.sx = p.sy = p.su = 0.0;
  p.resolution = 16;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 32, 0.5);
  BrownianBundle W(grid, 4, 1, 3);

  // x == 1 throughout: l = (wx + wy)/2, J = l T + kT/2
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  auto x = simulate_state(spec, grid, u0, W);
  auto J0 = cost(spec, x, u0);
  CHECK(J0.value == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(J0.sem == 0.0);
  CHECK(J0.n_paths == 4);

  // the control feeds the running cost even with frozen dynamics
  auto uh = constant_control(Vec::Constant(1, 0.5), grid, "half");
  auto Jh = cost(spec, simulate_state(spec, grid, uh, W), uh);
  CHECK(Jh.value == doctest::Approx(1.25 + 0.5 * p.wu * 0.25).epsilon(1e-12));
}

TEST_CASE("numerical blow-up is reported with the failing step") {
  ProblemSpec s;
  s.id = "cubic";
  s.dim_x = 1; s.dim_w = 1; s.dim_u = 1;
  s.horizon = 1.0;
  s.delay = 0.0;
  s.mu_drift = {point_mass(0.0, 1.0, 0.0)};
  s.mu_diff = {point_mass(0.0, 1.0, 0.0)};
  s.mu_cost = point_mass(0.0, 1.0, 0.0);
  s.x0 = Vec::Constant(1, 2.0);
  s.controls = ControlSet{1, {Vec::Zero(1)}};
  s.b = [](double, const Vec& x, const Vec&, const Vec&, Vec& out) {
    out = Vec::Constant(1, 10.0 * x[0] * x[0] * x[0]);
  };
  s.sigma = [](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Zero(1, 1);
  };
  s.l = [](double, const Vec&, const Vec&, const Vec&) { return 0.0; };
  s.h = [](const Vec&) { return 0.0; };

  auto grid = make_grid(1.0, 10, 0.0);
  BrownianBundle W(grid, 2, 1, 5);
  auto u = constant_control(Vec::Zero(1), grid, "rest");
  try {
    simulate_state(s, grid, u, W);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step >= 1);
    CHECK(e.step <= 10);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("mismatched inputs are rejected before any path is touched") {
  LqDelayParams p;
  p.resolution = 32;
  auto spec = scenario_lq_delay(p);
  auto grid = make_grid(1.0, 64, 0.5);
  BrownianBundle W(grid, 8, 1, 9);
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  auto base = simulate_state(spec, grid, u0, W);

  SUBCASE("noise bundle from another grid") {
    auto other = make_grid(1.0, 32, 0.5);
    BrownianBundle Wo(other, 8, 1, 9);
    CHECK_THROWS_AS(simulate_state(spec, grid, u0, Wo), ConsistencyError);
  }
  SUBCASE("control table with wrong length") {
    ControlPath bad = u0;
    bad.values = Mat::Zero(10, 1);
    CHECK_THROWS_AS(simulate_state(spec, grid, bad, W), ShapeError);
  }
  SUBCASE("base trajectory from a different problem") {
    auto p2 = p;
    p2.a0 = -0.7;
    auto spec2 = scenario_lq_delay(p2);
    SpikeWindow win{0.5, 4.0 / 64, Vec::Constant(1, 1.0)};
    CHECK_THROWS_AS(simulate_first_variation(spec2, base, u0, {win}, W),
                    ConsistencyError);
  }
  SUBCASE("first variation from a different run") {
    SpikeWindow win{0.5, 4.0 / 64, Vec::Constant(1, 1.0)};
    auto y = simulate_first_variation(spec, base, u0, {win}, W);
    TrajectoryBundle y2 = y;
    y2.tag = "first_variation";
    y2.seed = 999;
    CHECK_THROWS_AS(simulate_second_variation(spec, base, y2, u0, {win}, W),
                    ConsistencyError);
  }
}

TEST_CASE("mollified transport converges to the pointwise-lag response") {
  // deterministic: sigma == 0, so the whole spike response sits in the second
  // variation, whose lag transport honors the mollification option
  PointwiseDelayParams p;
  p.s0 = p.sx = p.s1 = p.su = 0.0;
  auto spec = scenario_pointwise_delay(p);
  auto grid = make_grid(1.0, 160, 0.25);
  BrownianBundle W(grid, 1, 1, 13);
  auto u0 = constant_control(Vec::Zero(1), grid, "rest");
  SpikeWindow win{0.3, 0.1, Vec::Constant(1, 1.0)};

  auto base = simulate_state(spec, grid, u0, W);
  auto y = simulate_first_variation(spec, base, u0, {win}, W);
  CHECK(mean_sq_terminal(y) == 0.0);

  auto z_of = [&](SimOptions opt) {
    auto z = simulate_second_variation(spec, base, y, u0, {win}, W, opt);
    return z.value(0, 160, 0);
  };
  double exact = z_of({});
  SimOptions m4, m16;
  m4.mollify_n = 4;
  m16.mollify_n = 16;
  double e4 = std::abs(z_of(m4) - exact);
  double e16 = std::abs(z_of(m16) - exact);
  CHECK(exact != 0.0);
  CHECK(e16 > 0.0);
  CHECK(e16 < 0.6 * e4);
  CHECK(e4 < 0.1 * std::abs(exact));
}
