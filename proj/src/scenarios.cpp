#include "smpdelay/model.hpp"
#include "smpdelay/util.hpp"

#include <sstream>

namespace smpdelay {

namespace {

std::string fingerprint(const std::string& name, const std::vector<double>& vals) {
  std::ostringstream os;
  os << name;
  for (double v : vals) os << '|' << format_double(v);
  std::ostringstream id;
  id << name << '#' << std::hex << (fnv1a64(os.str()) & 0xFFFFFFFFULL);
  return id.str();
}

ControlSet scalar_controls(const std::vector<double>& vals) {
  ControlSet cs;
  cs.dim = 1;
  for (double v : vals) {
    Vec u(1);
    u[0] = v;
    cs.points.push_back(u);
  }
  return cs;
}

Tensor3 zero_t3(int count, int rows, int cols) {
  return Tensor3(count, Mat::Zero(rows, cols));
}

} // namespace

ProblemSpec scenario_lq_delay(const LqDelayParams& p) {
  if (p.resolution < 1)
    throw ConfigError("scenario_lq_delay: set resolution to the grid lag step count");
  ProblemSpec s;
  s.id = fingerprint("lq_delay",
                     {p.horizon, p.delay, p.a0, p.a1, p.au, p.s0, p.sx, p.sy, p.su,
                      p.wx, p.wy, p.wu, p.kT, p.x0, double(p.resolution)});
  s.dim_x = 1; s.dim_w = 1; s.dim_u = 1;
  s.horizon = p.horizon;
  s.delay = p.delay;
  s.mu_drift = {uniform_density(p.delay, p.resolution)};
  s.mu_diff = {uniform_density(p.delay, p.resolution)};
  s.mu_cost = uniform_density(p.delay, p.resolution);
  s.cost_uses_past = p.wy != 0.0;
  s.x0 = Vec::Constant(1, p.x0);
  double x0v = p.x0;
  s.history = [x0v](double) { return Vec::Constant(1, x0v); };
  s.controls = scalar_controls(p.control_values);

  const double a0 = p.a0, a1 = p.a1, au = p.au;
  const double s0 = p.s0, sx = p.sx, sy = p.sy, su = p.su;
  const double wx = p.wx, wy = p.wy, wu = p.wu, kT = p.kT;

  s.b = [=](double, const Vec& x, const Vec& y, const Vec& u, Vec& out) {
    out.resize(1);
    out[0] = a0 * x[0] + a1 * y[0] + au * u[0];
  };
  s.b_x = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, a0);
  };
  s.b_y = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, a1);
  };
  s.b_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.b_xy = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.b_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.sigma = [=](double, const Vec& x, const Vec& y, const Vec& u, Mat& out) {
    out = Mat::Constant(1, 1, s0 + sx * x[0] + sy * y[0] + su * u[0]);
  };
  s.sigma_x = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Constant(1, 1, sx));
  };
  s.sigma_y = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Constant(1, 1, sy));
  };
  s.sigma_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.sigma_xy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.sigma_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.l = [=](double, const Vec& x, const Vec& y, const Vec& u) {
    return 0.5 * (wx * x[0] * x[0] + wy * y[0] * y[0] + wu * u[0] * u[0]);
  };
  s.l_x = [=](double, const Vec& x, const Vec&, const Vec&, Vec& out) {
    out = Vec::Constant(1, wx * x[0]);
  };
  s.l_y = [=](double, const Vec&, const Vec& y, const Vec&, Vec& out) {
    out = Vec::Constant(1, wy * y[0]);
  };
  s.l_xx = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, wx);
  };
  s.l_xy = [](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Zero(1, 1);
  };
  s.l_yy = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, wy);
  };
  s.h = [=](const Vec& x) { return 0.5 * kT * x[0] * x[0]; };
  s.h_x = [=](const Vec& x, Vec& out) { out = Vec::Constant(1, kT * x[0]); };
  s.h_xx = [=](const Vec&, Mat& out) { out = Mat::Constant(1, 1, kT); };
  return s;
}

ProblemSpec scenario_pointwise_delay(const PointwiseDelayParams& p) {
  ProblemSpec s;
  s.id = fingerprint("pointwise_delay",
                     {p.horizon, p.delay, p.a0, p.a1, p.au, p.s0, p.sx, p.s1, p.su,
                      p.wx, p.wu, p.kT, p.x0});
  s.dim_x = 1; s.dim_w = 1; s.dim_u = 1;
  s.horizon = p.horizon;
  s.delay = p.delay;
  s.mu_drift = {point_mass(-p.delay, 1.0, p.delay)};
  s.mu_diff = {point_mass(-p.delay, 1.0, p.delay)};
  s.mu_cost = point_mass(0.0, 1.0, p.delay);
  s.cost_uses_past = false;
  s.x0 = Vec::Constant(1, p.x0);
  double x0v = p.x0;
  s.history = [x0v](double) { return Vec::Constant(1, x0v); };
  s.controls = scalar_controls(p.control_values);

  const double a0 = p.a0, a1 = p.a1, au = p.au;
  const double s0 = p.s0, sx = p.sx, s1 = p.s1, su = p.su;
  const double wx = p.wx, wu = p.wu, kT = p.kT;

  s.b = [=](double, const Vec& x, const Vec& y, const Vec& u, Vec& out) {
    out.resize(1);
    out[0] = a0 * x[0] + a1 * y[0] + au * u[0];
  };
  s.b_x = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, a0);
  };
  s.b_y = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, a1);
  };
  s.b_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.b_xy = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.b_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(1, 1, 1);
  };
  s.sigma = [=](double, const Vec& x, const Vec& y, const Vec& u, Mat& out) {
    out = Mat::Constant(1, 1, s0 + sx * x[0] + s1 * y[0] + su * u[0]);
  };
  s.sigma_x = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Constant(1, 1, sx));
  };
  s.sigma_y = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Constant(1, 1, s1));
  };
  s.sigma_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.sigma_xy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.sigma_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(1, Mat::Zero(1, 1)));
  };
  s.l = [=](double, const Vec& x, const Vec&, const Vec& u) {
    return 0.5 * (wx * x[0] * x[0] + wu * u[0] * u[0]);
  };
  s.l_x = [=](double, const Vec& x, const Vec&, const Vec&, Vec& out) {
    out = Vec::Constant(1, wx * x[0]);
  };
  s.l_y = [](double, const Vec&, const Vec&, const Vec&, Vec& out) {
    out = Vec::Zero(1);
  };
  s.l_xx = [=](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Constant(1, 1, wx);
  };
  s.l_xy = [](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Zero(1, 1);
  };
  s.l_yy = [](double, const Vec&, const Vec&, const Vec&, Mat& out) {
    out = Mat::Zero(1, 1);
  };
  s.h = [=](const Vec& x) { return 0.5 * kT * x[0] * x[0]; };
  s.h_x = [=](const Vec& x, Vec& out) { out = Vec::Constant(1, kT * x[0]); };
  s.h_xx = [=](const Vec&, Mat& out) { out = Mat::Constant(1, 1, kT); };
  return s;
}

ProblemSpec scenario_portfolio(const PortfolioParams& p) {
  if (p.resolution < 1)
    throw ConfigError("scenario_portfolio: set resolution to the grid lag step count");
  ProblemSpec s;
  s.id = fingerprint("portfolio",
                     {p.horizon, p.delay, p.S0, p.V0, p.r0, p.r1, p.b0, p.b1, p.sig0,
                      p.kappa_c, p.kappa_q, p.kappa_v, double(p.resolution)});
  s.dim_x = 2; s.dim_w = 1; s.dim_u = 2;
  s.horizon = p.horizon;
  s.delay = p.delay;
  // channel 0: moving average feeding the risky drift; channel 1: lagged price
  // feeding the interest rate. y = [<mu_b,S>, <mu_b,V>, <mu_r,S>, <mu_r,V>].
  s.mu_drift = {uniform_density(p.delay, p.resolution), point_mass(-p.delay, 1.0, p.delay)};
  s.mu_diff = {point_mass(0.0, 1.0, p.delay)};
  s.mu_cost = point_mass(0.0, 1.0, p.delay);
  s.cost_uses_past = false;
  s.x0 = Vec(2);
  s.x0 << p.S0, p.V0;
  double S0 = p.S0, V0 = p.V0;
  s.history = [S0, V0](double) {
    Vec h(2);
    h << S0, V0;
    return h;
  };
  ControlSet cs;
  cs.dim = 2;
  for (double pi : p.pi_grid)
    for (double c : p.c_grid) {
      Vec u(2);
      u << pi, c;
      cs.points.push_back(u);
    }
  s.controls = cs;

  const double r0 = p.r0, r1 = p.r1, b0 = p.b0, b1 = p.b1, sig0 = p.sig0;
  const double kc = p.kappa_c, kq = p.kappa_q, kv = p.kappa_v;
  // m(yb) = r0 + b0 + b1 (yb/S0 - 1), r(yr) = r0 + r1 (yr/S0 - 1)
  auto mdrift = [=](double yb) { return r0 + b0 + b1 * (yb / S0 - 1.0); };
  auto rate = [=](double yr) { return r0 + r1 * (yr / S0 - 1.0); };

  s.b = [=](double, const Vec& x, const Vec& y, const Vec& u, Vec& out) {
    out.resize(2);
    double md = mdrift(y[0]), r = rate(y[2]);
    out[0] = x[0] * md;
    out[1] = r * x[1] + u[0] * (md - r) - u[1];
  };
  s.b_x = [=](double, const Vec&, const Vec& y, const Vec&, Mat& out) {
    out = Mat::Zero(2, 2);
    out(0, 0) = mdrift(y[0]);
    out(1, 1) = rate(y[2]);
  };
  s.b_y = [=](double, const Vec& x, const Vec&, const Vec& u, Mat& out) {
    out = Mat::Zero(2, 4);
    out(0, 0) = x[0] * b1 / S0;
    out(1, 0) = u[0] * b1 / S0;
    out(1, 2) = (x[1] - u[0]) * r1 / S0;
  };
  s.b_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(2, 2, 2);
  };
  s.b_xy = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(2, 2, 4);
    out[0](0, 0) = b1 / S0;  // d^2 b_S / dS dy_b
    out[1](1, 2) = r1 / S0;  // d^2 b_V / dV dy_r
  };
  s.b_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = zero_t3(2, 4, 4);
  };
  s.sigma = [=](double, const Vec& x, const Vec&, const Vec& u, Mat& out) {
    out = Mat::Zero(2, 1);
    out(0, 0) = sig0 * x[0];
    out(1, 0) = sig0 * u[0];
  };
  s.sigma_x = [=](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Zero(2, 2));
    out[0](0, 0) = sig0;
  };
  s.sigma_y = [](double, const Vec&, const Vec&, const Vec&, Tensor3& out) {
    out = Tensor3(1, Mat::Zero(2, 2));
  };
  s.sigma_xx = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(2, Mat::Zero(2, 2)));
  };
  s.sigma_xy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(2, Mat::Zero(2, 2)));
  };
  s.sigma_yy = [](double, const Vec&, const Vec&, const Vec&, Tensor4& out) {
    out = Tensor4(1, Tensor3(2, Mat::Zero(2, 2)));
  };
  s.l = [=](double, const Vec&, const Vec&, const Vec& u) {
    return -kc * u[1] + kq * u[1] * u[1];  // minus the concave consumption utility
  };
  s.l_x = [](double, const Vec&, const Vec&, const Vec&, Vec& out) { out = Vec::Zero(2); };
  s.l_y = [](double, const Vec&, const Vec&, const Vec&, Vec& out) { out = Vec::Zero(2); };
  s.l_xx = [](double, const Vec&, const Vec&, const Vec&, Mat& out) { out = Mat::Zero(2, 2); };
  s.l_xy = [](double, const Vec&, const Vec&, const Vec&, Mat& out) { out = Mat::Zero(2, 2); };
  s.l_yy = [](double, const Vec&, const Vec&, const Vec&, Mat& out) { out = Mat::Zero(2, 2); };
  s.h = [=](const Vec& x) { return -(x[1] - kv * x[1] * x[1]); };
  s.h_x = [=](const Vec& x, Vec& out) {
    out = Vec::Zero(2);
    out[1] = -1.0 + 2.0 * kv * x[1];
  };
  s.h_xx = [=](const Vec&, Mat& out) {
    out = Mat::Zero(2, 2);
    out(1, 1) = 2.0 * kv;
  };
  return s;
}

} // namespace smpdelay
