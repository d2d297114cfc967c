#include "smpdelay/model.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace smpdelay {

ControlPath constant_control(const Vec& u, const TimeGrid& grid, const std::string& id) {
  ControlPath c;
  c.id = id;
  c.values = u.transpose().replicate(grid.steps + 1, 1);
  return c;
}

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

} // namespace

void validate_shapes(const ProblemSpec& spec) {
  if (spec.dim_x < 1 || spec.dim_w < 1 || spec.dim_u < 1)
    throw ConfigError("ProblemSpec: dimensions must be positive");
  if (!(spec.horizon > 0.0)) throw ConfigError("ProblemSpec: horizon must be positive");
  if (spec.delay < 0.0) throw ConfigError("ProblemSpec: negative delay");
  if (spec.mu_drift.empty()) throw ConfigError("ProblemSpec: need at least one drift delay channel");
  if (spec.mu_diff.empty()) throw ConfigError("ProblemSpec: need at least one diffusion delay channel");
  for (const auto& mu : spec.mu_drift)
    if (mu.span > spec.delay + 1e-12)
      throw ConsistencyError("ProblemSpec: drift measure span exceeds the declared delay");
  for (const auto& mu : spec.mu_diff)
    if (mu.span > spec.delay + 1e-12)
      throw ConsistencyError("ProblemSpec: diffusion measure span exceeds the declared delay");
  if (spec.cost_uses_past && spec.mu_cost.span > spec.delay + 1e-12)
    throw ConsistencyError("ProblemSpec: cost measure span exceeds the declared delay");
  require(spec.x0.size() == spec.dim_x, "ProblemSpec: x0 has wrong size");
  if (spec.delay > 0.0) {
    if (!spec.history) throw ConfigError("ProblemSpec: missing history segment");
    Vec h0 = spec.history(-0.5 * spec.delay);
    require(h0.size() == spec.dim_x, "ProblemSpec: history has wrong size");
  }
  if (spec.controls.points.empty()) throw ConfigError("ProblemSpec: empty control set");
  if (spec.controls.dim != spec.dim_u) throw ShapeError("ProblemSpec: control set dimension mismatch");
  for (const auto& pt : spec.controls.points)
    require(pt.size() == spec.dim_u, "ProblemSpec: control point has wrong size");

  if (!spec.b || !spec.sigma || !spec.l || !spec.h)
    throw ConfigError("ProblemSpec: b, sigma, l, h are required");

  const int d = spec.dim_x, m = spec.dim_w;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();
  const double t = 0.0;
  const Vec& x = spec.x0;
  Vec yb = Vec::Zero(kb * d), ys = Vec::Zero(ks * d), yl = Vec::Zero(d);
  const Vec& u = spec.controls.points.front();

  Vec vout;
  spec.b(t, x, yb, u, vout);
  require(vout.size() == d, "b output size");
  Mat mout;
  spec.sigma(t, x, ys, u, mout);
  require(mout.rows() == d && mout.cols() == m, "sigma output shape");
  spec.l(t, x, yl, u);
  spec.h(x);

  if (spec.b_x) { spec.b_x(t, x, yb, u, mout); require(mout.rows() == d && mout.cols() == d, "b_x shape"); }
  if (spec.b_y) { spec.b_y(t, x, yb, u, mout); require(mout.rows() == d && mout.cols() == kb * d, "b_y shape"); }
  Tensor3 t3;
  if (spec.b_xx) {
    spec.b_xx(t, x, yb, u, t3);
    require(static_cast<int>(t3.size()) == d, "b_xx count");
    for (const auto& blk : t3) require(blk.rows() == d && blk.cols() == d, "b_xx block shape");
  }
  if (spec.b_xy) {
    spec.b_xy(t, x, yb, u, t3);
    require(static_cast<int>(t3.size()) == d, "b_xy count");
    for (const auto& blk : t3) require(blk.rows() == d && blk.cols() == kb * d, "b_xy block shape");
  }
  if (spec.b_yy) {
    spec.b_yy(t, x, yb, u, t3);
    require(static_cast<int>(t3.size()) == d, "b_yy count");
    for (const auto& blk : t3) require(blk.rows() == kb * d && blk.cols() == kb * d, "b_yy block shape");
  }
  if (spec.sigma_x) {
    spec.sigma_x(t, x, ys, u, t3);
    require(static_cast<int>(t3.size()) == m, "sigma_x count");
    for (const auto& blk : t3) require(blk.rows() == d && blk.cols() == d, "sigma_x block shape");
  }
  if (spec.sigma_y) {
    spec.sigma_y(t, x, ys, u, t3);
    require(static_cast<int>(t3.size()) == m, "sigma_y count");
    for (const auto& blk : t3) require(blk.rows() == d && blk.cols() == ks * d, "sigma_y block shape");
  }
  Tensor4 t4;
  if (spec.sigma_xx) {
    spec.sigma_xx(t, x, ys, u, t4);
    require(static_cast<int>(t4.size()) == m, "sigma_xx count");
    for (const auto& ten : t4) {
      require(static_cast<int>(ten.size()) == d, "sigma_xx inner count");
      for (const auto& blk : ten) require(blk.rows() == d && blk.cols() == d, "sigma_xx block shape");
    }
  }
  if (spec.sigma_xy) {
    spec.sigma_xy(t, x, ys, u, t4);
    require(static_cast<int>(t4.size()) == m, "sigma_xy count");
    for (const auto& ten : t4) {
      require(static_cast<int>(ten.size()) == d, "sigma_xy inner count");
      for (const auto& blk : ten) require(blk.rows() == d && blk.cols() == ks * d, "sigma_xy block shape");
    }
  }
  if (spec.sigma_yy) {
    spec.sigma_yy(t, x, ys, u, t4);
    require(static_cast<int>(t4.size()) == m, "sigma_yy count");
    for (const auto& ten : t4) {
      require(static_cast<int>(ten.size()) == d, "sigma_yy inner count");
      for (const auto& blk : ten) require(blk.rows() == ks * d && blk.cols() == ks * d, "sigma_yy block shape");
    }
  }
  if (spec.l_x) { spec.l_x(t, x, yl, u, vout); require(vout.size() == d, "l_x size"); }
  if (spec.l_y) { spec.l_y(t, x, yl, u, vout); require(vout.size() == d, "l_y size"); }
  if (spec.l_xx) { spec.l_xx(t, x, yl, u, mout); require(mout.rows() == d && mout.cols() == d, "l_xx shape"); }
  if (spec.l_xy) { spec.l_xy(t, x, yl, u, mout); require(mout.rows() == d && mout.cols() == d, "l_xy shape"); }
  if (spec.l_yy) { spec.l_yy(t, x, yl, u, mout); require(mout.rows() == d && mout.cols() == d, "l_yy shape"); }
  if (spec.h_x) { Vec g; spec.h_x(x, g); require(g.size() == d, "h_x size"); }
  if (spec.h_xx) { Mat hh; spec.h_xx(x, hh); require(hh.rows() == d && hh.cols() == d, "h_xx shape"); }
}

namespace {

struct FdAccum {
  double worst = 0.0;
  std::string worst_entry;
  std::ostringstream detail;
  std::map<std::string, double> per_entry;

  void feed(const std::string& what, double an, double fd) {
    double res = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
    auto it = per_entry.find(what);
    if (it == per_entry.end()) per_entry[what] = res;
    else it->second = std::max(it->second, res);
    if (res > worst) { worst = res; worst_entry = what; }
  }
};

double fd_step(double scale) { return 1e-5 * std::max(1.0, std::abs(scale)); }

} // namespace

HypothesisReport validate_hypotheses(const ProblemSpec& spec, int probes,
                                     std::uint64_t seed, double fd_tol) {
  validate_shapes(spec);
  const int d = spec.dim_x, m = spec.dim_w;
  const int kb = spec.drift_channels(), ks = spec.diff_channels();
  HypothesisReport rep;
  rep.probes = probes;
  FdAccum acc;

  auto randn = [&](int probe, int slot) {
    return counter_normal(seed, probe, slot, 0);
  };

  Vec vplus(d), vminus(d), van(d);
  Mat mplus, mminus, man;
  Tensor3 t3an;

  for (int pr = 0; pr < probes; ++pr) {
    double t = 0.5 * spec.horizon * (1.0 + std::tanh(randn(pr, 0)));
    Vec x(d), yb(kb * d), ys(ks * d), yl(d);
    double scale = spec.x0.norm() + 1.0;
    for (int i = 0; i < d; ++i) x[i] = spec.x0[i] + scale * 0.5 * randn(pr, 1 + i);
    for (int i = 0; i < kb * d; ++i) yb[i] = scale * 0.5 * randn(pr, 10 + i);
    for (int i = 0; i < ks * d; ++i) ys[i] = scale * 0.5 * randn(pr, 30 + i);
    for (int i = 0; i < d; ++i) yl[i] = scale * 0.5 * randn(pr, 50 + i);
    const Vec& u = spec.controls.points[pr % spec.controls.points.size()];

    // first derivatives vs values
    if (spec.b_x) {
      spec.b_x(t, x, yb, u, man);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.b(t, xp, yb, u, vplus);
        spec.b(t, xm, yb, u, vminus);
        for (int a = 0; a < d; ++a)
          acc.feed("b_x", man(a, c), (vplus[a] - vminus[a]) / (2 * hstep));
      }
    }
    if (spec.b_y) {
      spec.b_y(t, x, yb, u, man);
      for (int c = 0; c < kb * d; ++c) {
        double hstep = fd_step(yb[c]);
        Vec yp = yb, ym = yb;
        yp[c] += hstep; ym[c] -= hstep;
        spec.b(t, x, yp, u, vplus);
        spec.b(t, x, ym, u, vminus);
        for (int a = 0; a < d; ++a)
          acc.feed("b_y", man(a, c), (vplus[a] - vminus[a]) / (2 * hstep));
      }
    }
    if (spec.sigma_x) {
      spec.sigma_x(t, x, ys, u, t3an);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.sigma(t, xp, ys, u, mplus);
        spec.sigma(t, xm, ys, u, mminus);
        for (int i = 0; i < m; ++i)
          for (int a = 0; a < d; ++a)
            acc.feed("sigma_x", t3an[i](a, c), (mplus(a, i) - mminus(a, i)) / (2 * hstep));
      }
    }
    if (spec.sigma_y) {
      spec.sigma_y(t, x, ys, u, t3an);
      for (int c = 0; c < ks * d; ++c) {
        double hstep = fd_step(ys[c]);
        Vec yp = ys, ym = ys;
        yp[c] += hstep; ym[c] -= hstep;
        spec.sigma(t, x, yp, u, mplus);
        spec.sigma(t, x, ym, u, mminus);
        for (int i = 0; i < m; ++i)
          for (int a = 0; a < d; ++a)
            acc.feed("sigma_y", t3an[i](a, c), (mplus(a, i) - mminus(a, i)) / (2 * hstep));
      }
    }
    if (spec.l_x) {
      spec.l_x(t, x, yl, u, van);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        acc.feed("l_x", van[c], (spec.l(t, xp, yl, u) - spec.l(t, xm, yl, u)) / (2 * hstep));
      }
    }
    if (spec.l_y) {
      spec.l_y(t, x, yl, u, van);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(yl[c]);
        Vec yp = yl, ym = yl;
        yp[c] += hstep; ym[c] -= hstep;
        acc.feed("l_y", van[c], (spec.l(t, x, yp, u) - spec.l(t, x, ym, u)) / (2 * hstep));
      }
    }
    if (spec.h_x) {
      Vec g;
      spec.h_x(x, g);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        acc.feed("h_x", g[c], (spec.h(xp) - spec.h(xm)) / (2 * hstep));
      }
    }

    // Hessian blocks vs first derivatives
    if (spec.b_xx && spec.b_x) {
      spec.b_xx(t, x, yb, u, t3an);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.b_x(t, xp, yb, u, mplus);
        spec.b_x(t, xm, yb, u, mminus);
        for (int j = 0; j < d; ++j)
          for (int a = 0; a < d; ++a)
            acc.feed("b_xx", t3an[j](a, c), (mplus(j, a) - mminus(j, a)) / (2 * hstep));
      }
    }
    if (spec.b_xy && spec.b_x) {
      spec.b_xy(t, x, yb, u, t3an);
      for (int c = 0; c < kb * d; ++c) {
        double hstep = fd_step(yb[c]);
        Vec yp = yb, ym = yb;
        yp[c] += hstep; ym[c] -= hstep;
        spec.b_x(t, x, yp, u, mplus);
        spec.b_x(t, x, ym, u, mminus);
        for (int j = 0; j < d; ++j)
          for (int a = 0; a < d; ++a)
            acc.feed("b_xy", t3an[j](a, c), (mplus(j, a) - mminus(j, a)) / (2 * hstep));
      }
    }
    if (spec.b_yy && spec.b_y) {
      spec.b_yy(t, x, yb, u, t3an);
      for (int c = 0; c < kb * d; ++c) {
        double hstep = fd_step(yb[c]);
        Vec yp = yb, ym = yb;
        yp[c] += hstep; ym[c] -= hstep;
        spec.b_y(t, x, yp, u, mplus);
        spec.b_y(t, x, ym, u, mminus);
        for (int j = 0; j < d; ++j)
          for (int a = 0; a < kb * d; ++a)
            acc.feed("b_yy", t3an[j](a, c), (mplus(j, a) - mminus(j, a)) / (2 * hstep));
      }
    }
    if (spec.sigma_xx && spec.sigma_x) {
      Tensor4 t4an;
      spec.sigma_xx(t, x, ys, u, t4an);
      Tensor3 sp, sm;
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.sigma_x(t, xp, ys, u, sp);
        spec.sigma_x(t, xm, ys, u, sm);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < d; ++j)
            for (int a = 0; a < d; ++a)
              acc.feed("sigma_xx", t4an[i][j](a, c), (sp[i](j, a) - sm[i](j, a)) / (2 * hstep));
      }
    }
    if (spec.sigma_xy && spec.sigma_x) {
      Tensor4 t4an;
      spec.sigma_xy(t, x, ys, u, t4an);
      Tensor3 sp, sm;
      for (int c = 0; c < ks * d; ++c) {
        double hstep = fd_step(ys[c]);
        Vec yp = ys, ym = ys;
        yp[c] += hstep; ym[c] -= hstep;
        spec.sigma_x(t, x, yp, u, sp);
        spec.sigma_x(t, x, ym, u, sm);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < d; ++j)
            for (int a = 0; a < d; ++a)
              acc.feed("sigma_xy", t4an[i][j](a, c), (sp[i](j, a) - sm[i](j, a)) / (2 * hstep));
      }
    }
    if (spec.sigma_yy && spec.sigma_y) {
      Tensor4 t4an;
      spec.sigma_yy(t, x, ys, u, t4an);
      Tensor3 sp, sm;
      for (int c = 0; c < ks * d; ++c) {
        double hstep = fd_step(ys[c]);
        Vec yp = ys, ym = ys;
        yp[c] += hstep; ym[c] -= hstep;
        spec.sigma_y(t, x, yp, u, sp);
        spec.sigma_y(t, x, ym, u, sm);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < ks * d; ++j)
            for (int a = 0; a < ks * d; ++a)
              acc.feed("sigma_yy", t4an[i][j](a, c), (sp[i](j, a) - sm[i](j, a)) / (2 * hstep));
      }
    }
    if (spec.l_xx && spec.l_x) {
      spec.l_xx(t, x, yl, u, man);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.l_x(t, xp, yl, u, vplus);
        spec.l_x(t, xm, yl, u, vminus);
        for (int a = 0; a < d; ++a)
          acc.feed("l_xx", man(a, c), (vplus[a] - vminus[a]) / (2 * hstep));
      }
    }
    if (spec.l_xy && spec.l_x) {
      spec.l_xy(t, x, yl, u, man);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(yl[c]);
        Vec yp = yl, ym = yl;
        yp[c] += hstep; ym[c] -= hstep;
        spec.l_x(t, x, yp, u, vplus);
        spec.l_x(t, x, ym, u, vminus);
        for (int a = 0; a < d; ++a)
          acc.feed("l_xy", man(a, c), (vplus[a] - vminus[a]) / (2 * hstep));
      }
    }
    if (spec.l_yy && spec.l_y) {
      spec.l_yy(t, x, yl, u, man);
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(yl[c]);
        Vec yp = yl, ym = yl;
        yp[c] += hstep; ym[c] -= hstep;
        spec.l_y(t, x, yp, u, vplus);
        spec.l_y(t, x, ym, u, vminus);
        for (int a = 0; a < d; ++a)
          acc.feed("l_yy", man(a, c), (vplus[a] - vminus[a]) / (2 * hstep));
      }
    }
    if (spec.h_xx && spec.h_x) {
      Mat hh;
      spec.h_xx(x, hh);
      Vec gp, gm;
      for (int c = 0; c < d; ++c) {
        double hstep = fd_step(x[c]);
        Vec xp = x, xm = x;
        xp[c] += hstep; xm[c] -= hstep;
        spec.h_x(xp, gp);
        spec.h_x(xm, gm);
        for (int a = 0; a < d; ++a)
          acc.feed("h_xx", hh(a, c), (gp[a] - gm[a]) / (2 * hstep));
      }
    }

    // growth and control sensitivity (informational)
    Vec bval;
    spec.b(t, x, yb, u, bval);
    Mat sval;
    spec.sigma(t, x, ys, u, sval);
    double denom = 1.0 + x.norm() + yb.norm() + u.norm();
    rep.linear_growth = std::max(rep.linear_growth,
                                 std::max(bval.norm(), sval.norm()) / denom);
    for (std::size_t i = 0; i + 1 < spec.controls.points.size(); ++i) {
      const Vec& u1 = spec.controls.points[i];
      const Vec& u2 = spec.controls.points[i + 1];
      double du = (u1 - u2).norm();
      if (du < 1e-14) continue;
      Vec b1, b2;
      spec.b(t, x, yb, u1, b1);
      spec.b(t, x, yb, u2, b2);
      Mat s1, s2;
      spec.sigma(t, x, ys, u1, s1);
      spec.sigma(t, x, ys, u2, s2);
      rep.lipschitz_u = std::max(rep.lipschitz_u,
                                 std::max((b1 - b2).norm(), (s1 - s2).norm()) / du);
    }
  }

  for (const auto& [what, res] : acc.per_entry)
    acc.detail << what << ": " << res << "\n";
  rep.worst_fd_residual = acc.worst;
  rep.worst_entry = acc.worst_entry;
  rep.detail = acc.detail.str();
  rep.ok = acc.worst <= fd_tol;
  return rep;
}

} // namespace smpdelay
