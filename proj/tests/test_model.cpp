#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "smpdelay/model.hpp"
#include "smpdelay/sdde.hpp"

using namespace smpdelay;

TEST_CASE("scenario derivatives survive a finite-difference audit") {
  LqDelayParams lq;
  lq.resolution = 20;
  ProblemSpec s1 = scenario_lq_delay(lq);
  HypothesisReport r1 = validate_hypotheses(s1, 32);
  CHECK(r1.ok);
  CHECK(r1.worst_fd_residual <= 1e-4);

  PointwiseDelayParams pw;
  ProblemSpec s2 = scenario_pointwise_delay(pw);
  HypothesisReport r2 = validate_hypotheses(s2, 32);
  CHECK(r2.ok);

  PortfolioParams pf;
  pf.resolution = 10;
  ProblemSpec s3 = scenario_portfolio(pf);
  HypothesisReport r3 = validate_hypotheses(s3, 32);
  CHECK(r3.ok);
  CHECK(r3.lipschitz_u > 0.0);
  CHECK(r3.linear_growth > 0.0);
}

TEST_CASE("a lying derivative callback is flagged with its name") {
  LqDelayParams lq;
  lq.resolution = 10;
  ProblemSpec s = scenario_lq_delay(lq);
  double a0 = lq.a0;
  s.b_x = [a0](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, a0 + 0.05);
  };
  HypothesisReport r = validate_hypotheses(s, 16);
  CHECK_FALSE(r.ok);
  CHECK(r.worst_entry == "b_x");
  CHECK(r.worst_fd_residual > 1e-3);
}

TEST_CASE("structural validation rejects malformed problems") {
  LqDelayParams lq;
  lq.resolution = 10;
  ProblemSpec s = scenario_lq_delay(lq);
  validate_shapes(s);  // must not throw

  ProblemSpec bad = s;
  bad.x0 = Vec::Zero(2);
  CHECK_THROWS_AS(validate_shapes(bad), ShapeError);

  bad = s;
  bad.controls.points.clear();
  CHECK_THROWS_AS(validate_shapes(bad), ConfigError);

  bad = s;
  bad.mu_drift.clear();
  CHECK_THROWS_AS(validate_shapes(bad), ConfigError);

  bad = s;
  bad.mu_drift = {uniform_density(0.8, 10)};  // span beyond declared delay
  CHECK_THROWS_AS(validate_shapes(bad), ConsistencyError);

  bad = s;
  bad.b = nullptr;
  CHECK_THROWS_AS(validate_shapes(bad), ConfigError);
}

TEST_CASE("spike rewrites exactly the windowed rows") {
  TimeGrid g = make_grid(1.0, 20, 0.25);
  Vec u0 = Vec::Zero(1);
  ControlPath base = constant_control(u0, g, "zero");
  CHECK(base.values.rows() == 21);

  Vec v = Vec::Constant(1, 1.0);
  SpikeWindow w{0.5, 0.2, v};  // nodes 10..13
  ControlSet cs;
  cs.dim = 1;
  cs.points = {u0, v};
  ControlPath spiked = spike(base, {w}, g, &cs);
  for (int i = 0; i <= 20; ++i) {
    double expect = (i >= 10 && i <= 13) ? 1.0 : 0.0;
    CHECK(spiked.values(i, 0) == expect);
  }
  CHECK(spiked.id != base.id);

  // replacement outside the control set is refused
  SpikeWindow wbad{0.5, 0.2, Vec::Constant(1, 0.37)};
  CHECK_THROWS_AS(spike(base, {wbad}, g, &cs), ConfigError);

  // overlapping windows are refused
  SpikeWindow w2{0.55, 0.2, v};
  CHECK_THROWS_AS(spike(base, {w, w2}, g, &cs), ConfigError);

  // empty-width window is refused
  SpikeWindow w3{0.5, 0.0, v};
  CHECK_THROWS_AS(spike(base, {w3}, g, &cs), ConfigError);
}

TEST_CASE("scenario ids fingerprint the parameters") {
  LqDelayParams a, b;
  a.resolution = b.resolution = 10;
  b.a0 += 0.01;
  CHECK(scenario_lq_delay(a).id != scenario_lq_delay(b).id);
  CHECK(scenario_lq_delay(a).id == scenario_lq_delay(a).id);
}
