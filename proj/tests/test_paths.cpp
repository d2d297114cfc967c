#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "smpdelay/paths.hpp"

#include <cmath>

using namespace smpdelay;

TEST_CASE("grid construction resolves the delay exactly") {
  TimeGrid g = make_grid(1.0, 100, 0.3);
  CHECK(g.dt == doctest::Approx(0.01));
  CHECK(g.lag_steps == 30);
  CHECK(g.state_nodes() == 131);
  CHECK(g.adj_nodes() == 131);
  CHECK(g.time_at(-30) == doctest::Approx(-0.3));

  TimeGrid g0 = make_grid(2.0, 8, 0.0);
  CHECK(g0.lag_steps == 0);
  CHECK(g0.state_nodes() == 9);
}

TEST_CASE("misaligned delay is rejected with usable suggestions") {
  try {
    make_grid(1.0, 100, 1.0 / 3.0);
    FAIL("expected AlignmentError");
  } catch (const AlignmentError& e) {
    std::string msg = e.what();
    CHECK(msg.find("99") != std::string::npos);
  }
  CHECK_THROWS_AS(make_grid(1.0, 0, 0.1), ConfigError);
  CHECK_THROWS_AS(make_grid(-1.0, 10, 0.1), ConfigError);
  CHECK_THROWS_AS(make_grid(1.0, 10, -0.1), ConfigError);
}

TEST_CASE("counter normals are a pure function of their key") {
  double a = counter_normal(7, 11, 13, 0);
  double b = counter_normal(7, 11, 13, 0);
  CHECK(a == b);
  CHECK(counter_normal(8, 11, 13, 0) != a);
  CHECK(counter_normal(7, 12, 13, 0) != a);
  CHECK(counter_normal(7, 11, 14, 0) != a);
  CHECK(counter_normal(7, 11, 13, 1) != a);
  CHECK(std::isfinite(a));
}

TEST_CASE("bundle increments have the right moments") {
  TimeGrid g = make_grid(1.0, 16, 0.25);
  int M = 4096;
  BrownianBundle W(g, M, 1, 2024);
  double sum = 0.0, sum2 = 0.0, sum4 = 0.0;
  std::size_t n = 0;
  for (int p = 0; p < M; ++p)
    for (int s = 0; s < g.steps; ++s) {
      double v = W.inc(p, s, 0);
      sum += v;
      sum2 += v * v;
      sum4 += v * v * v * v;
      ++n;
    }
  double mean = sum / n;
  double var = sum2 / n;
  double kurt = (sum4 / n) / (var * var);
  CHECK(std::abs(mean) < 4.0 * std::sqrt(g.dt / static_cast<double>(n)));
  CHECK(var == doctest::Approx(g.dt).epsilon(0.02));
  CHECK(kurt == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("same seed reproduces the table, workers do not matter") {
  TimeGrid g = make_grid(0.5, 8, 0.125);
  BrownianBundle a(g, 2048, 2, 99, false, 1);
  BrownianBundle b(g, 2048, 2, 99, false, 4);
  for (int p = 0; p < 2048; p += 97)
    for (int s = 0; s < g.steps; ++s)
      for (int c = 0; c < 2; ++c)
        CHECK(a.inc(p, s, c) == b.inc(p, s, c));
  BrownianBundle c(g, 2048, 2, 100);
  bool all_same = true;
  for (int p = 0; p < 32 && all_same; ++p)
    for (int s = 0; s < g.steps && all_same; ++s)
      if (a.inc(p, s, 0) != c.inc(p, s, 0)) all_same = false;
  CHECK_FALSE(all_same);
}

TEST_CASE("antithetic halves mirror exactly") {
  TimeGrid g = make_grid(1.0, 4, 0.25);
  BrownianBundle W(g, 64, 1, 5, true);
  for (int p = 0; p < 32; ++p)
    for (int s = 0; s < 4; ++s)
      CHECK(W.inc(p + 32, s, 0) == -W.inc(p, s, 0));
  CHECK_THROWS_AS(BrownianBundle(g, 33, 1, 5, true), ConfigError);
}

TEST_CASE("trajectory bundle addressing covers history and horizon") {
  TimeGrid g = make_grid(1.0, 10, 0.3);
  TrajectoryBundle tb;
  tb.grid = g;
  tb.n_paths = 3;
  tb.dim = 2;
  tb.allocate();
  CHECK(tb.data.size() == 3u * 14u * 2u);
  tb.at(1, -3)[0] = 42.0;
  tb.at(1, -3)[1] = 43.0;
  tb.at(2, 10)[1] = 7.0;
  CHECK(tb.value(1, -3, 0) == 42.0);
  CHECK(tb.value(1, -3, 1) == 43.0);
  CHECK(tb.value(2, 10, 1) == 7.0);
  CHECK(tb.value(0, 0, 0) == 0.0);
}
