#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "smpdelay/hilbert.hpp"
#include "smpdelay/util.hpp"

#include <cmath>
#include <random>

using namespace smpdelay;

namespace {

LqDelayParams lq_no_noise() {
  LqDelayParams p;
  p.s0 = p.sx = p.sy = p.su = 0.0;
  return p;
}

ProblemSpec lq_spec(LqDelayParams p, int lag_steps) {
  p.resolution = lag_steps;
  return scenario_lq_delay(p);
}

Vec random_point(const HilbertGrid& hg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Vec v(hg.D);
  for (int k = 0; k < hg.D; ++k) v[k] = n01(rng);
  return v;
}

// Second-variation value of the cost along a scalar linear flow:
// -(h_xx y_N^2 + sum_i dt (l_xx y^2 + 2 l_xy y <y> + l_yy <y>^2)), averaged
// across paths. This is the quantity the top-left block of the backward form
// represents at the flow's start node.
MeanVar direct_form_value(const ProblemSpec& spec, const TrajectoryBundle& base,
                          const TrajectoryBundle& flow, const ControlPath& control) {
  const TimeGrid& g = base.grid;
  const int N = g.steps, L = g.lag_steps, M = base.n_paths;
  CompiledMeasure cm;
  if (spec.cost_uses_past) cm = compile_measure(spec.mu_cost, g);
  std::vector<double> acc(M, 0.0);
  Vec x(1), yl = Vec::Zero(1);
  Mat lxx(1, 1), lxy(1, 1), lyy(1, 1), hxx(1, 1);
  for (int p = 0; p < M; ++p) {
    double s = 0.0;
    for (int i = 0; i < N; ++i) {
      x[0] = base.value(p, i, 0);
      if (spec.cost_uses_past)
        yl[0] = cm.integrate([&](int j) { return base.value(p, i - (L - j), 0); });
      const Vec u = control.at(p, i);
      const double t = g.time_at(i);
      const double y = flow.value(p, i, 0);
      const double ya =
          spec.cost_uses_past
              ? cm.integrate([&](int j) { return flow.value(p, i - (L - j), 0); })
              : 0.0;
      spec.l_xx(t, x, yl, u, lxx);
      spec.l_xy(t, x, yl, u, lxy);
      spec.l_yy(t, x, yl, u, lyy);
      s += g.dt * (lxx(0, 0) * y * y + 2.0 * lxy(0, 0) * y * ya + lyy(0, 0) * ya * ya);
    }
    x[0] = base.value(p, N, 0);
    spec.h_xx(x, hxx);
    const double yN = flow.value(p, N, 0);
    acc[p] = -(s + hxx(0, 0) * yN * yN);
  }
  return mean_sem(acc);
}

} // namespace

TEST_CASE("product grid: layout, weights and segment lift") {
  TimeGrid g = make_grid(1.0, 16, 0.5);  // L = 8
  HilbertGrid hg = make_hilbert_grid(g, 2);
  CHECK(hg.tail_nodes == 9);
  CHECK(hg.D == 20);
  CHECK(hg.head(1) == 1);
  CHECK(hg.tail(0, 0) == 2);
  CHECK(hg.tail(8, 1) == 19);
  CHECK(hg.theta(0) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(hg.theta(8) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(hg.weights[0] == 1.0);
  CHECK(hg.weights[hg.tail(0, 0)] == doctest::Approx(0.5 * g.dt).epsilon(1e-15));
  CHECK(hg.weights[hg.tail(4, 1)] == doctest::Approx(g.dt).epsilon(1e-15));
  CHECK(hg.weights[hg.tail(8, 0)] == doctest::Approx(0.5 * g.dt).epsilon(1e-15));

  // inner product of all-ones: dim * (1 + trapezoid total) = 2 (1 + 8 dt)
  Vec ones = Vec::Ones(hg.D);
  CHECK(inner(hg, ones, ones) == doctest::Approx(2.0 * (1.0 + 8.0 * g.dt)).epsilon(1e-14));
  CHECK_THROWS_AS(inner(hg, Vec::Ones(3), ones), ShapeError);

  TrajectoryBundle tb;
  tb.grid = g;
  tb.n_paths = 1;
  tb.dim = 2;
  tb.allocate();
  for (int node = -g.lag_steps; node <= g.steps; ++node)
    for (int c = 0; c < 2; ++c) tb.at(0, node)[c] = node + 0.01 * c;
  Vec v = lift(hg, tb, 0, 5);
  CHECK(v[hg.head(0)] == 5.0);
  CHECK(v[hg.head(1)] == 5.01);
  CHECK(v[hg.tail(0, 0)] == -3.0);   // node 5 - L
  CHECK(v[hg.tail(3, 1)] == 0.01);
  CHECK(v[hg.tail(8, 0)] == 5.0);    // theta = 0 duplicates the head
  CHECK_THROWS_AS(lift(hg, tb, 0, 17), DomainError);
  CHECK_THROWS_AS(lift(hg, tb, 1, 5), DomainError);

  // no lag window, no product space
  CHECK_THROWS_AS(make_hilbert_grid(make_grid(1.0, 8, 0.0), 1), ConfigError);
}

TEST_CASE("grid shift: composition is exact and the adjoint pairs") {
  TimeGrid g = make_grid(1.0, 16, 0.5);
  HilbertGrid hg = make_hilbert_grid(g, 2);
  Vec v = random_point(hg, 11);
  Vec w = random_point(hg, 12);

  Mat S = shift_matrix(hg);
  Vec sv = shift_steps(hg, 1, v);
  CHECK((S * v - sv).cwiseAbs().maxCoeff() == 0.0);

  // semigroup property, coordinate selects only, so bitwise
  Vec a = shift_steps(hg, 2, shift_steps(hg, 3, v));
  Vec b = shift_steps(hg, 5, v);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  Vec c = shift_semigroup(hg, 5.0 * g.dt, v);
  CHECK((c - b).cwiseAbs().maxCoeff() == 0.0);

  // beyond the window everything has collapsed onto the head
  Vec far = shift_steps(hg, hg.grid.lag_steps + 3, v);
  for (int j = 0; j <= hg.grid.lag_steps; ++j)
    for (int cc = 0; cc < 2; ++cc) CHECK(far[hg.tail(j, cc)] == v[hg.head(cc)]);

  Mat Sadj = shift_adjoint(hg);
  const double lhs = inner(hg, sv, w);
  const double rhs = inner(hg, v, Vec(Sadj * w));
  CHECK(std::abs(lhs - rhs) <= 1e-12 * (1.0 + std::abs(lhs)));

  CHECK_THROWS_AS(shift_steps(hg, -1, v), DomainError);
  CHECK_THROWS_AS(shift_semigroup(hg, -0.5, v), DomainError);
  CHECK_THROWS_AS(shift_semigroup(hg, 1.37 * g.dt, v), AlignmentError);
}

TEST_CASE("assembled operators reproduce the linearized flow step by step") {
  ProblemSpec spec = lq_spec(LqDelayParams{}, 32);
  TimeGrid g = make_grid(1.0, 64, 0.5);
  ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 4, spec.dim_w, 905);
  TrajectoryBundle base = simulate_state(spec, g, u, W);
  const int start = 16;
  TrajectoryBundle flow =
      simulate_linearized_flow(spec, base, u, W, start, Vec::Ones(1));

  HilbertGrid hg = make_hilbert_grid(g, spec.dim_x);
  for (int p = 0; p < 4; ++p) {
    Vec Y = Vec::Zero(hg.D);
    Y[hg.head(0)] = 1.0;
    Y[hg.tail(hg.grid.lag_steps, 0)] = 1.0;
    for (int i = start; i < g.steps; ++i) {
      OperatorSet ops = assemble_operators(spec, base, u, i, p);
      Vec mid = Y;
      double dh = g.dt * (ops.B * Y)(0);
      for (int l = 0; l < spec.dim_w; ++l) dh += (ops.Sg[l] * Y)(0) * W.inc(p, i, l);
      mid[hg.head(0)] += dh;
      Y = shift_steps(hg, 1, mid);
      Vec ref = lift(hg, flow, p, i + 1);
      CHECK((Y - ref).cwiseAbs().maxCoeff() <= 1e-11 * (1.0 + ref.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("deterministic first adjoint head matches the state-space solver") {
  ProblemSpec spec = lq_spec(lq_no_noise(), 100);
  TimeGrid g = make_grid(1.0, 200, 0.5);
  ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 2, spec.dim_w, 31);
  TrajectoryBundle base = simulate_state(spec, g, u, W);

  AdjointSolution adj = solve_adjoint(spec, base, u, W);
  REQUIRE(adj.deterministic);
  FirstAdjointH sol = solve_first_adjoint_h(spec, base, u, W);
  CHECK(sol.deterministic);
  CHECK(!sol.mollified);

  // opposite orientation: head = -p, so negative where the state-space
  // adjoint is positive
  CHECK(sol.head(0, 0) < 0.0);
  double scale = 0.0;
  for (int i : {0, 50, 100, 150, 195})
    scale = std::max(scale, std::abs(node_mean_p(adj, i)[0]));
  for (int i : {0, 50, 100, 150, 195}) {
    const double want = -node_mean_p(adj, i)[0];
    CHECK(std::abs(sol.head(i, 0) - want) <= 0.02 * scale);
  }
  CHECK(sol.q_head.cwiseAbs().maxCoeff() == 0.0);
  CHECK(sol.head_sem.cwiseAbs().maxCoeff() == 0.0);
  CHECK(sol.tail_density0.allFinite());
}

TEST_CASE("first adjoint is the exact discrete dual of the linearized flow") {
  ProblemSpec spec = lq_spec(lq_no_noise(), 32);
  TimeGrid g = make_grid(1.0, 64, 0.5);
  const int L = g.lag_steps, N = g.steps;
  ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 1, spec.dim_w, 7);
  TrajectoryBundle base = simulate_state(spec, g, u, W);
  TrajectoryBundle flow = simulate_linearized_flow(spec, base, u, W, 0, Vec::Ones(1));
  FirstAdjointH sol = solve_first_adjoint_h(spec, base, u, W);
  REQUIRE(sol.deterministic);
  HilbertGrid hg = sol.hg;

  // <p(0), Y_0> plain = -h_x y_N - sum_i dt (l_x y_i + l_y <y>_i)
  const double lhs = sol.p0[hg.head(0)] + sol.p0[hg.tail(L, 0)];

  CompiledMeasure cm = compile_measure(spec.mu_cost, g);
  Vec x(1), yl(1), lx(1), ly(1), hx(1);
  double rhs = 0.0;
  for (int i = 0; i < N; ++i) {
    x[0] = base.value(0, i, 0);
    yl[0] = cm.integrate([&](int j) { return base.value(0, i - (L - j), 0); });
    const Vec uu = u.at(0, i);
    spec.l_x(g.time_at(i), x, yl, uu, lx);
    spec.l_y(g.time_at(i), x, yl, uu, ly);
    const double y = flow.value(0, i, 0);
    const double ya = cm.integrate([&](int j) { return flow.value(0, i - (L - j), 0); });
    rhs -= g.dt * (lx[0] * y + ly[0] * ya);
  }
  x[0] = base.value(0, N, 0);
  spec.h_x(x, hx);
  rhs -= hx[0] * flow.value(0, N, 0);

  CHECK(std::abs(lhs - rhs) <= 1e-10 * (1.0 + std::abs(rhs)));
}

TEST_CASE("pure diffusion-slope problem: backward form matches the closed form") {
  LqDelayParams p;
  p.a0 = p.a1 = p.au = 0.0;
  p.s0 = p.sy = p.su = 0.0;
  p.sx = 0.5;
  p.wx = p.wy = p.wu = 0.0;
  p.kT = 1.0;
  ProblemSpec spec = lq_spec(p, 32);
  TimeGrid g = make_grid(1.0, 64, 0.5);
  const int N = g.steps;
  ControlPath u = constant_control(Vec::Zero(1), g, "u-zero");
  BrownianBundle W(g, 512, spec.dim_w, 424);
  TrajectoryBundle base = simulate_state(spec, g, u, W);
  AdjointSolution adj = solve_adjoint(spec, base, u, W);
  SecondAdjointH sol = solve_second_adjoint_h(spec, base, u, adj, W);
  CHECK(sol.deterministic);

  // dP = -sx^2 P dt backward from -kT: P(i) = -(1 + sx^2 dt)^(N-i), and the
  // tail blocks never activate
  double ref = -1.0;
  for (int i = N; i >= 0; --i) {
    CHECK(sol.form[i](0, 0) == doctest::Approx(ref).epsilon(1e-12));
    ref += g.dt * ((0.5 * ref) * 0.5);
  }
  CHECK(extract_p00(sol, 0)(0, 0) ==
        doctest::Approx(-std::exp(0.25)).epsilon(1e-2));
  CHECK(sol.form[0](0, 5) == 0.0);
  CHECK(sol.form[0](5, 5) == 0.0);
  for (double qn : sol.q_norm) CHECK(qn == 0.0);
  CHECK(extract_p00_sem(sol, 0)(0, 0) == 0.0);
}

TEST_CASE("backward form is the exact discrete dual of the flow quadratic cost") {
  for (int steps : {64, 128}) {
    ProblemSpec spec = lq_spec(lq_no_noise(), steps / 2);
    TimeGrid g = make_grid(1.0, steps, 0.5);
    ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
    BrownianBundle W(g, 1, spec.dim_w, 5);
    TrajectoryBundle base = simulate_state(spec, g, u, W);
    AdjointSolution adj = solve_adjoint(spec, base, u, W);
    SecondAdjointH sol = solve_second_adjoint_h(spec, base, u, adj, W);
    REQUIRE(sol.deterministic);
    CHECK(sol.symmetry_drift <= 1e-10);
    CHECK((sol.form[0] - sol.form[0].transpose()).cwiseAbs().maxCoeff() == 0.0);

    // no noise: the recursion is the exact conditional step of the Euler
    // flow. The flow starts with the unit in the head and the theta = 0 slot,
    // so the dual contraction folds that slot in, as in the first adjoint.
    TrajectoryBundle flow = simulate_linearized_flow(spec, base, u, W, 0, Vec::Ones(1));
    const double ref = direct_form_value(spec, base, flow, u).mean;
    const HilbertGrid& hg = sol.hg;
    const int hd = hg.head(0), tl = hg.tail(g.lag_steps, 0);
    const Mat& G0 = sol.form[0];
    const double got = G0(hd, hd) + G0(hd, tl) + G0(tl, hd) + G0(tl, tl);
    CHECK(std::abs(got - ref) <= 1e-10 * (1.0 + std::abs(ref)));
  }
}

TEST_CASE("forced regression agrees with the deterministic shortcut") {
  ProblemSpec spec = lq_spec(LqDelayParams{}, 24);
  TimeGrid g = make_grid(1.0, 48, 0.5);
  ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 2048, spec.dim_w, 3117);
  TrajectoryBundle base = simulate_state(spec, g, u, W);
  AdjointSolution adj = solve_adjoint(spec, base, u, W);
  REQUIRE(!adj.deterministic);

  // coefficient processes are constant even though the paths are not, so the
  // shortcut applies; forcing the regression must land on the same form
  SecondAdjointH det = solve_second_adjoint_h(spec, base, u, adj, W);
  CHECK(det.deterministic);
  for (double qn : det.q_norm) CHECK(qn == 0.0);

  OperatorPipelineOptions fo;
  fo.force_regression = true;
  SecondAdjointH reg = solve_second_adjoint_h(spec, base, u, adj, W, fo);
  CHECK(!reg.deterministic);
  CHECK(reg.n_features > 0);

  const double p_det = extract_p00(det, 0)(0, 0);
  const double p_reg = extract_p00(reg, 0)(0, 0);
  CHECK(std::abs(p_reg - p_det) <=
        std::max(0.06 * std::abs(p_det), 6.0 * extract_p00_sem(reg, 0)(0, 0)));
  const int mid = g.steps / 2;
  const double m_det = extract_p00(det, mid)(0, 0);
  const double m_reg = extract_p00(reg, mid)(0, 0);
  CHECK(std::abs(m_reg - m_det) <=
        std::max(0.06 * std::abs(m_det), 6.0 * extract_p00_sem(reg, mid)(0, 0)));

  // the first adjoint under full noise runs through the regression branch and
  // must agree with the state-space solution at t = 0 (opposite orientation)
  FirstAdjointH fa = solve_first_adjoint_h(spec, base, u, W);
  CHECK(!fa.deterministic);
  const double scale = std::max(1e-12, std::abs(adj.p0[0]));
  CHECK(std::abs(fa.head(0, 0) + adj.p0[0]) <=
        0.05 * scale + 5.0 * (fa.head_sem(0, 0) + adj.p0_sem[0]));
}

TEST_CASE("path-dependent terminal Hessian: regression form matches the flow value") {
  LqDelayParams p;
  p.sx = 0.3;
  ProblemSpec spec = lq_spec(p, 16);
  const double kT = p.kT, kq = 1.0;
  spec.id += "-quartic";
  spec.h = [=](const Vec& x) {
    return 0.5 * kT * x[0] * x[0] + 0.25 * kq * x[0] * x[0] * x[0] * x[0];
  };
  spec.h_x = [=](const Vec& x, Vec& out) {
    out = Vec::Constant(1, kT * x[0] + kq * x[0] * x[0] * x[0]);
  };
  spec.h_xx = [=](const Vec& x, Mat& out) {
    out = Mat::Constant(1, 1, kT + 3.0 * kq * x[0] * x[0]);
  };

  TimeGrid g = make_grid(1.0, 32, 0.5);
  ControlPath u = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 4096, spec.dim_w, 9406);
  TrajectoryBundle base = simulate_state(spec, g, u, W);
  AdjointSolution adj = solve_adjoint(spec, base, u, W);
  SecondAdjointH sol = solve_second_adjoint_h(spec, base, u, adj, W);
  CHECK(!sol.deterministic);

  double qmax = 0.0;
  for (double qn : sol.q_norm) qmax = std::max(qmax, qn);
  CHECK(qmax > 0.0);

  TrajectoryBundle flow = simulate_linearized_flow(spec, base, u, W, 0, Vec::Ones(1));
  MeanVar ref = direct_form_value(spec, base, flow, u);
  const double got = extract_p00(sol, 0)(0, 0);
  CHECK(std::abs(got - ref.mean) <=
        std::max(6.0 * ref.sem, 0.08 * std::abs(ref.mean)));
}

TEST_CASE("point-mass channels require smoothing and converge as it tightens") {
  ProblemSpec spec = scenario_pointwise_delay(PointwiseDelayParams{});
  TimeGrid g = make_grid(1.0, 128, 0.25);
  ControlPath u = constant_control(Vec::Zero(1), g, "u-zero");
  BrownianBundle W(g, 512, spec.dim_w, 88);
  TrajectoryBundle base = simulate_state(spec, g, u, W);

  CHECK_THROWS_AS(assemble_operators(spec, base, u, 0), PipelineError);
  CHECK_THROWS_AS(solve_first_adjoint_h(spec, base, u, W), PipelineError);

  AdjointSolution adj = solve_adjoint(spec, base, u, W);

  OperatorPipelineOptions opt;
  opt.mollify_n = 8;
  FirstAdjointH fa = solve_first_adjoint_h(spec, base, u, W, opt);
  CHECK(fa.mollified);
  CHECK(fa.head.allFinite());

  double p00[4];
  int level[4] = {4, 8, 16, 32};
  for (int k = 0; k < 4; ++k) {
    OperatorPipelineOptions o;
    o.mollify_n = level[k];
    SecondAdjointH sol = solve_second_adjoint_h(spec, base, u, adj, W, o);
    CHECK(sol.deterministic);
    CHECK(sol.mollified);
    p00[k] = extract_p00(sol, 0)(0, 0);
  }
  const double d1 = std::abs(p00[0] - p00[1]);
  const double d2 = std::abs(p00[1] - p00[2]);
  const double d3 = std::abs(p00[2] - p00[3]);
  REQUIRE(d1 > 1e-7);
  CHECK(d2 <= d1);
  CHECK(d3 <= 0.7 * d1);
}

TEST_CASE("product-space solvers cross-check their inputs") {
  ProblemSpec spec = lq_spec(LqDelayParams{}, 16);
  TimeGrid g = make_grid(1.0, 32, 0.5);
  ControlPath u = constant_control(Vec::Zero(1), g, "u-zero");
  ControlPath v = constant_control(Vec::Constant(1, 0.5), g, "u-half");
  BrownianBundle W(g, 320, spec.dim_w, 1);
  BrownianBundle W2(g, 320, spec.dim_w, 2);
  TrajectoryBundle base = simulate_state(spec, g, u, W);

  CHECK_THROWS_AS(solve_first_adjoint_h(spec, base, u, W2), ConsistencyError);

  AdjointSolution adj = solve_adjoint(spec, base, u, W);
  CHECK_NOTHROW(solve_second_adjoint_h(spec, base, u, adj, W));

  // adjoint solved under another control
  TrajectoryBundle base_v = simulate_state(spec, g, v, W);
  AdjointSolution adj_v = solve_adjoint(spec, base_v, v, W);
  CHECK_THROWS_AS(solve_second_adjoint_h(spec, base, u, adj_v, W), ConsistencyError);

  // smoothed adjoint pair is not a valid driver input
  AdjointOptions am;
  am.mollify_n = 8;
  AdjointSolution adj_m = solve_adjoint(spec, base, u, W, am);
  CHECK(adj_m.mollified);
  CHECK_THROWS_AS(solve_second_adjoint_h(spec, base, u, adj_m, W), ConsistencyError);

  ProblemSpec no_hess = spec;
  no_hess.h_xx = nullptr;
  CHECK_THROWS_AS(solve_second_adjoint_h(no_hess, base, u, adj, W), ConfigError);
}
