#include "smpdelay/hilbert.hpp"
#include "smpdelay/util.hpp"

#include "detail.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace smpdelay {

using namespace detail;

namespace {

using CMap = Eigen::Map<const Mat>;
using CVMap = Eigen::Map<const Vec>;
using MMap = Eigen::Map<Mat>;

// Column images of the one-step shift: coordinate b feeds head_c into
// {head_c, tail(L,c)}, tail(j,c) into tail(j-1,c) for j >= 1, and tail(0,c)
// off the window. Everything built on the shift uses these index lists
// instead of the dense matrix.
struct ShiftImages {
  std::vector<int> first, second;  // -1 when absent

  explicit ShiftImages(const HilbertGrid& hg) {
    first.assign(hg.D, -1);
    second.assign(hg.D, -1);
    const int L = hg.grid.lag_steps;
    for (int c = 0; c < hg.dim; ++c) {
      first[hg.head(c)] = hg.head(c);
      second[hg.head(c)] = hg.tail(L, c);
      for (int j = 1; j <= L; ++j) first[hg.tail(j, c)] = hg.tail(j - 1, c);
    }
  }
};

// out = S^T G S: (a,b) sums G over the image pairs, at most four entries.
void shift_sandwich(const ShiftImages& si, const Mat& G, Mat& out) {
  const int D = static_cast<int>(G.rows());
  for (int b = 0; b < D; ++b) {
    const int vb1 = si.first[b], vb2 = si.second[b];
    for (int a = 0; a < D; ++a) {
      const int va1 = si.first[a], va2 = si.second[a];
      double acc = 0.0;
      if (va1 >= 0 && vb1 >= 0) acc += G(va1, vb1);
      if (va1 >= 0 && vb2 >= 0) acc += G(va1, vb2);
      if (va2 >= 0 && vb1 >= 0) acc += G(va2, vb1);
      if (va2 >= 0 && vb2 >= 0) acc += G(va2, vb2);
      out(a, b) = acc;
    }
  }
}

// out = S^T v.
void shift_pullback(const ShiftImages& si, const Vec& v, Vec& out) {
  const int D = static_cast<int>(v.size());
  for (int a = 0; a < D; ++a) {
    double acc = 0.0;
    if (si.first[a] >= 0) acc += v[si.first[a]];
    if (si.second[a] >= 0) acc += v[si.second[a]];
    out[a] = acc;
  }
}

// Head-row map of a coefficient: head columns take the x-derivative, tail
// columns channel weight times the matching y-derivative block.
void fill_row_map(const HilbertGrid& hg, const double* vx, const double* vy,
                  const std::vector<CompiledMeasure>& chans, Mat& R) {
  const int d = hg.dim, L = hg.grid.lag_steps;
  R.setZero();
  R.leftCols(d) = CMap(vx, d, d);
  const int K = static_cast<int>(chans.size());
  CMap my(vy, d, static_cast<std::size_t>(K) * d);
  for (int ch = 0; ch < K; ++ch)
    for_weights(chans[ch], L, [&](int j, double w) {
      R.middleCols(hg.tail(j, 0), d) += w * my.middleCols(ch * d, d);
    });
}

// Adds c times the lifted quadratic form of one Hessian triple; tail blocks
// carry the channel weights on both slots, so tail-tail entries realize the
// discrete double integrals. Null pointers skip their block.
void add_hessian_form(const HilbertGrid& hg, double c, const double* pxx,
                      const double* pxy, const double* pyy, int K,
                      const std::vector<CompiledMeasure>& chans, Mat& F) {
  const int d = hg.dim, L = hg.grid.lag_steps;
  if (pxx) F.topLeftCorner(d, d) += c * CMap(pxx, d, d);
  if (pxy) {
    CMap xy(pxy, d, static_cast<std::size_t>(K) * d);
    for (int ch = 0; ch < K; ++ch)
      for_weights(chans[ch], L, [&](int j, double w) {
        F.block(0, hg.tail(j, 0), d, d) += (c * w) * xy.middleCols(ch * d, d);
        F.block(hg.tail(j, 0), 0, d, d) +=
            (c * w) * xy.middleCols(ch * d, d).transpose();
      });
  }
  if (pyy) {
    CMap yy(pyy, static_cast<std::size_t>(K) * d, static_cast<std::size_t>(K) * d);
    for (int ch = 0; ch < K; ++ch)
      for_weights(chans[ch], L, [&](int j, double w) {
        for (int ch2 = 0; ch2 < K; ++ch2)
          for_weights(chans[ch2], L, [&](int j2, double w2) {
            F.block(hg.tail(j, 0), hg.tail(j2, 0), d, d) +=
                (c * w * w2) * yy.block(ch * d, ch2 * d, d, d);
          });
      });
  }
}

// Coefficient processes along the base trajectory, flat like the adjoint
// solver keeps them: index (node * M + path) * block. Hessian tables exist
// only when the problem provides the callback.
struct HTables {
  int d = 0, m = 0, Kb = 0, Ks = 0, N = 0, M = 0, n_base = 0;
  bool cost_used = false;
  std::vector<double> bx, by, sx, sy;
  std::vector<double> lx, ly, hx;
  std::vector<double> lxx, lxy, lyy, hxx;
  std::vector<double> bxx, bxy, byy;
  std::vector<double> sxx, sxy, syy;
  std::vector<double> feat;
  double quad_b = 0.0, quad_s = 0.0;  // max |entry| over the b / sigma Hessians

  std::size_t at(int node, int path) const {
    return static_cast<std::size_t>(node) * M + path;
  }
  const double* bx_at(int n, int p) const { return bx.data() + at(n, p) * d * d; }
  const double* by_at(int n, int p) const { return by.data() + at(n, p) * d * Kb * d; }
  const double* sx_at(int n, int p, int l) const {
    return sx.data() + (at(n, p) * m + l) * d * d;
  }
  const double* sy_at(int n, int p, int l) const {
    return sy.data() + (at(n, p) * m + l) * d * Ks * d;
  }
  const double* lx_at(int n, int p) const { return lx.data() + at(n, p) * d; }
  const double* ly_at(int n, int p) const { return ly.data() + at(n, p) * d; }
  const double* hx_at(int p) const { return hx.data() + static_cast<std::size_t>(p) * d; }
  const double* lxx_at(int n, int p) const {
    return lxx.empty() ? nullptr : lxx.data() + at(n, p) * d * d;
  }
  const double* lxy_at(int n, int p) const {
    return lxy.empty() ? nullptr : lxy.data() + at(n, p) * d * d;
  }
  const double* lyy_at(int n, int p) const {
    return lyy.empty() ? nullptr : lyy.data() + at(n, p) * d * d;
  }
  const double* hxx_at(int p) const {
    return hxx.data() + static_cast<std::size_t>(p) * d * d;
  }
  const double* bxx_at(int n, int p, int j) const {
    return bxx.empty() ? nullptr : bxx.data() + (at(n, p) * d + j) * d * d;
  }
  const double* bxy_at(int n, int p, int j) const {
    return bxy.empty() ? nullptr : bxy.data() + (at(n, p) * d + j) * d * Kb * d;
  }
  const double* byy_at(int n, int p, int j) const {
    return byy.empty() ? nullptr : byy.data() + (at(n, p) * d + j) * Kb * d * Kb * d;
  }
  const double* sxx_at(int n, int p, int l, int j) const {
    return sxx.empty() ? nullptr : sxx.data() + ((at(n, p) * m + l) * d + j) * d * d;
  }
  const double* sxy_at(int n, int p, int l, int j) const {
    return sxy.empty() ? nullptr : sxy.data() + ((at(n, p) * m + l) * d + j) * d * Ks * d;
  }
  const double* syy_at(int n, int p, int l, int j) const {
    return syy.empty() ? nullptr
                       : syy.data() + ((at(n, p) * m + l) * d + j) * Ks * d * Ks * d;
  }
  const double* feat_at(int n, int p) const { return feat.data() + at(n, p) * n_base; }
};

HTables build_htables(const ProblemSpec& spec, const TrajectoryBundle& base,
                      const ControlPath& control, const Channels& args,
                      const std::vector<CompiledMeasure>& uniq, bool first,
                      bool second, int workers) {
  const TimeGrid& grid = base.grid;
  HTables tb;
  tb.d = spec.dim_x;
  tb.m = spec.dim_w;
  tb.Kb = spec.drift_channels();
  tb.Ks = spec.diff_channels();
  tb.N = grid.steps;
  tb.M = base.n_paths;
  tb.cost_used = spec.cost_uses_past;
  tb.n_base = tb.d * (1 + static_cast<int>(uniq.size()));

  const int d = tb.d, m = tb.m, Kb = tb.Kb, Ks = tb.Ks, N = tb.N, M = tb.M;
  const bool want_bh = second && (spec.b_xx || spec.b_xy || spec.b_yy);
  const bool want_sh = second && (spec.sigma_xx || spec.sigma_xy || spec.sigma_yy);

  std::size_t per_node = std::size_t(d) * d + std::size_t(d) * Kb * d +
                         std::size_t(m) * d * d + std::size_t(m) * d * Ks * d +
                         tb.n_base;
  if (first) per_node += 2 * std::size_t(d);
  if (second) per_node += 3 * std::size_t(d) * d;
  if (want_bh)
    per_node += std::size_t(d) * d * d + std::size_t(d) * d * Kb * d +
                std::size_t(d) * Kb * d * Kb * d;
  if (want_sh)
    per_node += std::size_t(m) * d *
                (std::size_t(d) * d + std::size_t(d) * Ks * d +
                 std::size_t(Ks) * d * Ks * d);
  if ((std::size_t(N) + 1) * M * per_node * 8 > std::size_t(6e9))
    throw ConfigError("product-space tables would need over 6 GB; reduce paths or steps");

  const std::size_t nodes = std::size_t(N) + 1;
  tb.bx.assign(nodes * M * d * d, 0.0);
  tb.by.assign(nodes * M * d * Kb * d, 0.0);
  tb.sx.assign(nodes * M * m * d * d, 0.0);
  tb.sy.assign(nodes * M * m * d * Ks * d, 0.0);
  tb.feat.assign(nodes * M * tb.n_base, 0.0);
  if (first) {
    tb.lx.assign(nodes * M * d, 0.0);
    tb.ly.assign(nodes * M * d, 0.0);
    tb.hx.assign(std::size_t(M) * d, 0.0);
  }
  if (second) {
    if (spec.l_xx) tb.lxx.assign(nodes * M * d * d, 0.0);
    if (spec.l_xy && tb.cost_used) tb.lxy.assign(nodes * M * d * d, 0.0);
    if (spec.l_yy && tb.cost_used) tb.lyy.assign(nodes * M * d * d, 0.0);
    tb.hxx.assign(std::size_t(M) * d * d, 0.0);
    if (want_bh) {
      if (spec.b_xx) tb.bxx.assign(nodes * M * d * d * d, 0.0);
      if (spec.b_xy) tb.bxy.assign(nodes * M * d * d * Kb * d, 0.0);
      if (spec.b_yy) tb.byy.assign(nodes * M * d * Kb * d * Kb * d, 0.0);
    }
    if (want_sh) {
      if (spec.sigma_xx) tb.sxx.assign(nodes * M * m * d * d * d, 0.0);
      if (spec.sigma_xy) tb.sxy.assign(nodes * M * m * d * d * Ks * d, 0.0);
      if (spec.sigma_yy) tb.syy.assign(nodes * M * m * d * Ks * d * Ks * d, 0.0);
    }
  }

  std::vector<Vec> u_nodes = hoist_controls(control, N + 1);
  const std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  std::vector<double> max_b(n_blocks, 0.0), max_s(n_blocks, 0.0);

  parallel_for_blocks(n_blocks, [&](std::size_t blk) {
    Vec x(d), ib(Kb * d), is(Ks * d), yl(d), lxv(d), lyv(d), iu(d), hxv(d);
    Mat bxm(d, d), lxxm(d, d), lxym(d, d), lyym(d, d), hxxm(d, d);
    Mat bym(d, Kb * d);
    Tensor3 sxm, sym, bxxT, bxyT, byyT;
    Tensor4 sxxT, sxyT, syyT;
    double mb = 0.0, ms = 0.0;
    const int pa = static_cast<int>(blk * kReductionBlock);
    const int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    for (int p = pa; p < pb; ++p) {
      for (int i = 0; i <= N; ++i) {
        const double* xi = base.at(p, i);
        for (int c = 0; c < d; ++c) x[c] = xi[c];
        stack_integrals(args.drift, base, p, i, ib);
        stack_integrals(args.diff, base, p, i, is);
        if (tb.cost_used) single_integral(args.cost, base, p, i, yl);
        else yl.setZero();
        const Vec& u = u_nodes[i];
        const double t = grid.time_at(i);
        const std::size_t o = tb.at(i, p);

        spec.b_x(t, x, ib, u, bxm);
        spec.b_y(t, x, ib, u, bym);
        spec.sigma_x(t, x, is, u, sxm);
        spec.sigma_y(t, x, is, u, sym);
        std::copy(bxm.data(), bxm.data() + d * d, tb.bx.data() + o * d * d);
        std::copy(bym.data(), bym.data() + d * Kb * d, tb.by.data() + o * d * Kb * d);
        for (int l = 0; l < m; ++l) {
          std::copy(sxm[l].data(), sxm[l].data() + d * d,
                    tb.sx.data() + (o * m + l) * d * d);
          std::copy(sym[l].data(), sym[l].data() + d * Ks * d,
                    tb.sy.data() + (o * m + l) * d * Ks * d);
        }

        if (!tb.lx.empty()) {
          spec.l_x(t, x, yl, u, lxv);
          std::copy(lxv.data(), lxv.data() + d, tb.lx.data() + o * d);
          if (tb.cost_used) {
            spec.l_y(t, x, yl, u, lyv);
            std::copy(lyv.data(), lyv.data() + d, tb.ly.data() + o * d);
          }
        }
        if (!tb.lxx.empty()) {
          spec.l_xx(t, x, yl, u, lxxm);
          std::copy(lxxm.data(), lxxm.data() + d * d, tb.lxx.data() + o * d * d);
        }
        if (!tb.lxy.empty()) {
          spec.l_xy(t, x, yl, u, lxym);
          std::copy(lxym.data(), lxym.data() + d * d, tb.lxy.data() + o * d * d);
        }
        if (!tb.lyy.empty()) {
          spec.l_yy(t, x, yl, u, lyym);
          std::copy(lyym.data(), lyym.data() + d * d, tb.lyy.data() + o * d * d);
        }
        if (!tb.bxx.empty()) {
          spec.b_xx(t, x, ib, u, bxxT);
          for (int j = 0; j < d; ++j) {
            std::copy(bxxT[j].data(), bxxT[j].data() + d * d,
                      tb.bxx.data() + (o * d + j) * d * d);
            mb = std::max(mb, bxxT[j].cwiseAbs().maxCoeff());
          }
        }
        if (!tb.bxy.empty()) {
          spec.b_xy(t, x, ib, u, bxyT);
          for (int j = 0; j < d; ++j) {
            std::copy(bxyT[j].data(), bxyT[j].data() + d * Kb * d,
                      tb.bxy.data() + (o * d + j) * d * Kb * d);
            mb = std::max(mb, bxyT[j].cwiseAbs().maxCoeff());
          }
        }
        if (!tb.byy.empty()) {
          spec.b_yy(t, x, ib, u, byyT);
          for (int j = 0; j < d; ++j) {
            std::copy(byyT[j].data(), byyT[j].data() + Kb * d * Kb * d,
                      tb.byy.data() + (o * d + j) * Kb * d * Kb * d);
            mb = std::max(mb, byyT[j].cwiseAbs().maxCoeff());
          }
        }
        if (!tb.sxx.empty()) {
          spec.sigma_xx(t, x, is, u, sxxT);
          for (int l = 0; l < m; ++l)
            for (int j = 0; j < d; ++j) {
              std::copy(sxxT[l][j].data(), sxxT[l][j].data() + d * d,
                        tb.sxx.data() + ((o * m + l) * d + j) * d * d);
              ms = std::max(ms, sxxT[l][j].cwiseAbs().maxCoeff());
            }
        }
        if (!tb.sxy.empty()) {
          spec.sigma_xy(t, x, is, u, sxyT);
          for (int l = 0; l < m; ++l)
            for (int j = 0; j < d; ++j) {
              std::copy(sxyT[l][j].data(), sxyT[l][j].data() + d * Ks * d,
                        tb.sxy.data() + ((o * m + l) * d + j) * d * Ks * d);
              ms = std::max(ms, sxyT[l][j].cwiseAbs().maxCoeff());
            }
        }
        if (!tb.syy.empty()) {
          spec.sigma_yy(t, x, is, u, syyT);
          for (int l = 0; l < m; ++l)
            for (int j = 0; j < d; ++j) {
              std::copy(syyT[l][j].data(), syyT[l][j].data() + Ks * d * Ks * d,
                        tb.syy.data() + ((o * m + l) * d + j) * Ks * d * Ks * d);
              ms = std::max(ms, syyT[l][j].cwiseAbs().maxCoeff());
            }
        }

        double* f = tb.feat.data() + o * tb.n_base;
        for (int c = 0; c < d; ++c) f[c] = x[c];
        for (std::size_t uc = 0; uc < uniq.size(); ++uc) {
          single_integral(uniq[uc], base, p, i, iu);
          for (int c = 0; c < d; ++c) f[(1 + uc) * d + c] = iu[c];
        }
      }
      const double* xT = base.at(p, N);
      for (int c = 0; c < d; ++c) x[c] = xT[c];
      if (!tb.hx.empty()) {
        spec.h_x(x, hxv);
        std::copy(hxv.data(), hxv.data() + d, tb.hx.data() + std::size_t(p) * d);
      }
      if (!tb.hxx.empty()) {
        spec.h_xx(x, hxxm);
        std::copy(hxxm.data(), hxxm.data() + d * d,
                  tb.hxx.data() + std::size_t(p) * d * d);
      }
    }
    max_b[blk] = mb;
    max_s[blk] = ms;
  }, workers);

  for (std::size_t b = 0; b < n_blocks; ++b) {
    tb.quad_b = std::max(tb.quad_b, max_b[b]);
    tb.quad_s = std::max(tb.quad_s, max_s[b]);
  }
  return tb;
}

// Path-independence of one flat table (block entries per node), decided by
// comparison against path 0.
bool slab_uniform(const std::vector<double>& v, std::size_t block, int nodes, int M) {
  if (v.empty() || M <= 1) return true;
  for (int n = 0; n < nodes; ++n) {
    const double* ref = v.data() + std::size_t(n) * M * block;
    for (int p = 1; p < M; ++p) {
      const double* row = v.data() + (std::size_t(n) * M + p) * block;
      for (std::size_t k = 0; k < block; ++k)
        if (std::abs(row[k] - ref[k]) > 1e-14 * (1.0 + std::abs(ref[k]))) return false;
    }
  }
  return true;
}

// Transport channels for the operator columns: the structure must be a
// density, so atom-bearing measures are rejected unless smoothing is on.
Channels transport_channels(const ProblemSpec& spec, const TimeGrid& grid,
                            const OperatorPipelineOptions& opt) {
  const int n = opt.mollify_n.value_or(0);
  auto prepare = [&](const DelayMeasure& mu, const char* what) {
    DelayMeasure mt = n > 0 ? mollify(mu, n, grid.lag_steps) : mu;
    if (!mt.atoms.empty()) {
      std::ostringstream os;
      os << "operator pipeline: the " << what
         << " channel carries point masses; set mollify_n to smooth them into a density";
      throw PipelineError(os.str());
    }
    return mt;
  };
  Channels ch;
  for (const auto& mu : spec.mu_drift)
    ch.drift.push_back(compile_measure(prepare(mu, "drift"), grid, opt.interpolate_atoms));
  for (const auto& mu : spec.mu_diff)
    ch.diff.push_back(compile_measure(prepare(mu, "diffusion"), grid, opt.interpolate_atoms));
  ch.cost_used = spec.cost_uses_past;
  if (ch.cost_used)
    ch.cost = compile_measure(prepare(spec.mu_cost, "running-cost"), grid,
                              opt.interpolate_atoms);
  return ch;
}

SimOptions sim_options(const OperatorPipelineOptions& opt) {
  SimOptions s;
  s.workers = opt.workers;
  s.interpolate_atoms = opt.interpolate_atoms;
  s.mollify_n = opt.mollify_n;
  return s;
}

void require(bool ok, const char* name) {
  if (!ok) {
    std::ostringstream os;
    os << "product-space solver needs the " << name << " callback";
    throw ConfigError(os.str());
  }
}

void check_open_loop(const ControlPath& control, const char* fn) {
  if (!control.shared()) {
    std::ostringstream os;
    os << fn << " expects an open-loop control";
    throw ConfigError(os.str());
  }
}

// The driver form of the second adjoint at one (node, path): minus the
// coefficient Hessians contracted with the adjoint pair, minus the running
// cost quadratic.
void driver_form(const HilbertGrid& hg, const HTables& tb, const Channels& trans,
                 const AdjointSolution& adj, int i, int p, Mat& F) {
  const int d = hg.dim, m = tb.m;
  F.setZero();
  add_hessian_form(hg, -1.0, tb.lxx_at(i, p), tb.lxy_at(i, p), tb.lyy_at(i, p), 1,
                   {trans.cost}, F);
  if (tb.quad_b > 0.0) {
    const double* pv = adj.p_at(p, i);
    for (int j = 0; j < d; ++j)
      if (pv[j] != 0.0)
        add_hessian_form(hg, -pv[j], tb.bxx_at(i, p, j), tb.bxy_at(i, p, j),
                         tb.byy_at(i, p, j), tb.Kb, trans.drift, F);
  }
  if (tb.quad_s > 0.0) {
    const double* qv = adj.q_at(p, i);
    for (int l = 0; l < m; ++l)
      for (int j = 0; j < d; ++j)
        if (qv[l * d + j] != 0.0)
          add_hessian_form(hg, -qv[l * d + j], tb.sxx_at(i, p, l, j),
                           tb.sxy_at(i, p, l, j), tb.syy_at(i, p, l, j), tb.Ks,
                           trans.diff, F);
  }
}

void check_adjoint_input(const AdjointSolution& adj, const ProblemSpec& spec,
                         const TrajectoryBundle& base, const ControlPath& control,
                         const BrownianBundle& W) {
  if (adj.spec_id != spec.id)
    throw ConsistencyError("second adjoint: the adjoint pair was solved for a different problem");
  if (adj.control_id != control.id)
    throw ConsistencyError("second adjoint: the adjoint pair was solved under a different control");
  if (!adj.grid.same(base.grid))
    throw ConsistencyError("second adjoint: adjoint grid does not match the trajectory");
  if (adj.seed != W.seed() || adj.n_paths != W.n_paths())
    throw ConsistencyError("second adjoint: adjoint noise bundle does not match");
  if (adj.mollified)
    throw ConsistencyError("second adjoint: pass the exact-measure adjoint pair; "
                           "smoothing applies to the operator columns only");
}

// Raw polynomial features at one node: intercept, regressors, their products.
void fill_phi(const HTables& tb, int node, Mat& Phi) {
  const int nb = tb.n_base, M = tb.M;
  for (int p = 0; p < M; ++p) {
    const double* f = tb.feat_at(node, p);
    Phi(p, 0) = 1.0;
    for (int a = 0; a < nb; ++a) Phi(p, 1 + a) = f[a];
    int col = 1 + nb;
    for (int a = 0; a < nb; ++a)
      for (int b = a; b < nb; ++b) Phi(p, col++) = f[a] * f[b];
  }
}

// Deterministic cross-path mean and error half-width of a per-path slab of
// `width` doubles: block sums in index order.
void blocked_moments(const std::vector<double>& slab, int M, int width, Vec& mean,
                     Vec& sem) {
  mean = Vec::Zero(width);
  sem = Vec::Zero(width);
  Vec sq = Vec::Zero(width);
  const std::size_t n_blocks = (M + kReductionBlock - 1) / kReductionBlock;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const int pa = static_cast<int>(b * kReductionBlock);
    const int pb = std::min<int>(M, pa + static_cast<int>(kReductionBlock));
    Vec s = Vec::Zero(width), s2 = Vec::Zero(width);
    for (int p = pa; p < pb; ++p) {
      CVMap row(slab.data() + std::size_t(p) * width, width);
      s += row;
      s2 += row.cwiseProduct(row);
    }
    mean += s;
    sq += s2;
  }
  mean /= double(M);
  if (M > 1)
    for (int k = 0; k < width; ++k) {
      double var = (sq[k] - M * mean[k] * mean[k]) / double(M - 1);
      sem[k] = std::sqrt(std::max(var, 0.0) / double(M));
    }
}

} // namespace

HilbertGrid make_hilbert_grid(const TimeGrid& grid, int dim) {
  if (dim < 1) throw ConfigError("product-space grid needs a positive state dimension");
  if (grid.lag_steps < 1)
    throw ConfigError("product-space grid needs a positive delay window; "
                      "without lags the plain state-space solvers apply");
  HilbertGrid hg;
  hg.grid = grid;
  hg.dim = dim;
  hg.tail_nodes = grid.lag_steps + 1;
  hg.D = dim * (grid.lag_steps + 2);
  hg.weights = Vec::Ones(hg.D);
  for (int j = 0; j <= grid.lag_steps; ++j) {
    const double w = (j == 0 || j == grid.lag_steps) ? 0.5 * grid.dt : grid.dt;
    for (int c = 0; c < dim; ++c) hg.weights[hg.tail(j, c)] = w;
  }
  return hg;
}

Vec lift(const HilbertGrid& hg, const TrajectoryBundle& tb, int path, int node) {
  if (tb.dim != hg.dim || !tb.grid.same(hg.grid))
    throw ConsistencyError("lift: trajectory does not live on this product grid");
  if (node < 0 || node > hg.grid.steps)
    throw DomainError("lift: node outside [0, steps]");
  if (path < 0 || path >= tb.n_paths) throw DomainError("lift: path out of range");
  const int d = hg.dim, L = hg.grid.lag_steps;
  Vec out(hg.D);
  const double* xh = tb.at(path, node);
  for (int c = 0; c < d; ++c) out[hg.head(c)] = xh[c];
  for (int j = 0; j <= L; ++j) {
    const double* xt = tb.at(path, node - L + j);
    for (int c = 0; c < d; ++c) out[hg.tail(j, c)] = xt[c];
  }
  return out;
}

double inner(const HilbertGrid& hg, const Vec& a, const Vec& b) {
  if (a.size() != hg.D || b.size() != hg.D)
    throw ShapeError("inner: vectors do not match the product grid");
  return (a.cwiseProduct(hg.weights)).dot(b);
}

Mat shift_matrix(const HilbertGrid& hg) {
  const int d = hg.dim, L = hg.grid.lag_steps;
  Mat S = Mat::Zero(hg.D, hg.D);
  for (int c = 0; c < d; ++c) {
    S(hg.head(c), hg.head(c)) = 1.0;
    for (int j = 0; j < L; ++j) S(hg.tail(j, c), hg.tail(j + 1, c)) = 1.0;
    S(hg.tail(L, c), hg.head(c)) = 1.0;
  }
  return S;
}

Mat shift_adjoint(const HilbertGrid& hg) {
  Mat S = shift_matrix(hg);
  return hg.weights.cwiseInverse().asDiagonal() * S.transpose() *
         hg.weights.asDiagonal();
}

Vec shift_steps(const HilbertGrid& hg, int k, const Vec& v) {
  if (v.size() != hg.D) throw ShapeError("shift: vector does not match the product grid");
  if (k < 0) throw DomainError("shift: step count must be nonnegative");
  const int d = hg.dim, L = hg.grid.lag_steps;
  Vec out(hg.D);
  for (int c = 0; c < d; ++c) {
    out[hg.head(c)] = v[hg.head(c)];
    for (int j = 0; j <= L; ++j)
      out[hg.tail(j, c)] = (j + k <= L) ? v[hg.tail(j + k, c)] : v[hg.head(c)];
  }
  return out;
}

Vec shift_semigroup(const HilbertGrid& hg, double t, const Vec& v) {
  if (t < -1e-12) throw DomainError("shift: time must be nonnegative");
  const double pos = t / hg.grid.dt;
  const double nearest = std::round(pos);
  if (std::abs(pos - nearest) > 1e-9 * std::max(1.0, pos)) {
    std::ostringstream os;
    os << "shift: time " << t << " is not a multiple of the grid step " << hg.grid.dt;
    throw AlignmentError(os.str());
  }
  return shift_steps(hg, static_cast<int>(nearest), v);
}

OperatorSet assemble_operators(const ProblemSpec& spec, const TrajectoryBundle& base,
                               const ControlPath& control, int node, int path,
                               const OperatorPipelineOptions& opt) {
  const TimeGrid& grid = base.grid;
  if (node < 0 || node > grid.steps)
    throw DomainError("assemble_operators: node outside [0, steps]");
  if (path < 0 || path >= base.n_paths)
    throw DomainError("assemble_operators: path out of range");
  require(bool(spec.b_x), "b_x");
  require(bool(spec.b_y), "b_y");
  require(bool(spec.sigma_x), "sigma_x");
  require(bool(spec.sigma_y), "sigma_y");
  require(bool(spec.l_x), "l_x");
  if (spec.cost_uses_past) require(bool(spec.l_y), "l_y");

  const HilbertGrid hg = make_hilbert_grid(grid, spec.dim_x);
  const Channels trans = transport_channels(spec, grid, opt);
  const SimOptions sopt = sim_options(opt);
  const Channels args = compile_channels(spec, grid, sopt, false);
  const int d = spec.dim_x, m = spec.dim_w;
  const int Kb = spec.drift_channels(), Ks = spec.diff_channels();

  Vec x(d), ib(Kb * d), is(Ks * d), yl(d);
  const double* xi = base.at(path, node);
  for (int c = 0; c < d; ++c) x[c] = xi[c];
  stack_integrals(args.drift, base, path, node, ib);
  stack_integrals(args.diff, base, path, node, is);
  if (spec.cost_uses_past) single_integral(args.cost, base, path, node, yl);
  else yl.setZero();
  const Vec u = control.at(path, node);
  const double t = grid.time_at(node);

  OperatorSet ops;
  Mat bxm(d, d), bym(d, Kb * d);
  spec.b_x(t, x, ib, u, bxm);
  spec.b_y(t, x, ib, u, bym);
  ops.B.resize(d, hg.D);
  fill_row_map(hg, bxm.data(), bym.data(), trans.drift, ops.B);

  Tensor3 sxm, sym;
  spec.sigma_x(t, x, is, u, sxm);
  spec.sigma_y(t, x, is, u, sym);
  ops.Sg.assign(m, Mat(d, hg.D));
  for (int l = 0; l < m; ++l)
    fill_row_map(hg, sxm[l].data(), sym[l].data(), trans.diff, ops.Sg[l]);

  Vec lxv(d), lyv(d);
  spec.l_x(t, x, yl, u, lxv);
  ops.Lx = Vec::Zero(hg.D);
  for (int c = 0; c < d; ++c) ops.Lx[hg.head(c)] = lxv[c];
  if (spec.cost_uses_past) {
    spec.l_y(t, x, yl, u, lyv);
    for_weights(trans.cost, grid.lag_steps, [&](int j, double w) {
      for (int c = 0; c < d; ++c) ops.Lx[hg.tail(j, c)] += w * lyv[c];
    });
  }

  Tensor3 bxxT, bxyT, byyT;
  if (spec.b_xx) spec.b_xx(t, x, ib, u, bxxT);
  if (spec.b_xy) spec.b_xy(t, x, ib, u, bxyT);
  if (spec.b_yy) spec.b_yy(t, x, ib, u, byyT);
  ops.Bxx.assign(d, Mat::Zero(hg.D, hg.D));
  for (int j = 0; j < d; ++j)
    add_hessian_form(hg, 1.0, bxxT.empty() ? nullptr : bxxT[j].data(),
                     bxyT.empty() ? nullptr : bxyT[j].data(),
                     byyT.empty() ? nullptr : byyT[j].data(), Kb, trans.drift,
                     ops.Bxx[j]);

  Tensor4 sxxT, sxyT, syyT;
  if (spec.sigma_xx) spec.sigma_xx(t, x, is, u, sxxT);
  if (spec.sigma_xy) spec.sigma_xy(t, x, is, u, sxyT);
  if (spec.sigma_yy) spec.sigma_yy(t, x, is, u, syyT);
  ops.Sgxx.assign(m, Tensor3(d, Mat::Zero(hg.D, hg.D)));
  for (int l = 0; l < m; ++l)
    for (int j = 0; j < d; ++j)
      add_hessian_form(hg, 1.0, sxxT.empty() ? nullptr : sxxT[l][j].data(),
                       sxyT.empty() ? nullptr : sxyT[l][j].data(),
                       syyT.empty() ? nullptr : syyT[l][j].data(), Ks, trans.diff,
                       ops.Sgxx[l][j]);

  Mat lxxm(d, d), lxym(d, d), lyym(d, d);
  bool has_lxy = spec.l_xy && spec.cost_uses_past;
  bool has_lyy = spec.l_yy && spec.cost_uses_past;
  if (spec.l_xx) spec.l_xx(t, x, yl, u, lxxm);
  if (has_lxy) spec.l_xy(t, x, yl, u, lxym);
  if (has_lyy) spec.l_yy(t, x, yl, u, lyym);
  ops.Lxx = Mat::Zero(hg.D, hg.D);
  add_hessian_form(hg, 1.0, spec.l_xx ? lxxm.data() : nullptr,
                   has_lxy ? lxym.data() : nullptr, has_lyy ? lyym.data() : nullptr,
                   1, {trans.cost}, ops.Lxx);
  return ops;
}

Vec lift_terminal_gradient(const HilbertGrid& hg, const ProblemSpec& spec,
                           const TrajectoryBundle& base, int path) {
  require(bool(spec.h_x), "h_x");
  const int d = hg.dim;
  Vec x(d), g(d);
  const double* xT = base.at(path, base.grid.steps);
  for (int c = 0; c < d; ++c) x[c] = xT[c];
  spec.h_x(x, g);
  Vec out = Vec::Zero(hg.D);
  for (int c = 0; c < d; ++c) out[hg.head(c)] = g[c];
  return out;
}

Mat lift_terminal_hessian(const HilbertGrid& hg, const ProblemSpec& spec,
                          const TrajectoryBundle& base, int path) {
  require(bool(spec.h_xx), "h_xx");
  const int d = hg.dim;
  Vec x(d);
  Mat h(d, d);
  const double* xT = base.at(path, base.grid.steps);
  for (int c = 0; c < d; ++c) x[c] = xT[c];
  spec.h_xx(x, h);
  Mat out = Mat::Zero(hg.D, hg.D);
  out.topLeftCorner(d, d) = h;
  return out;
}

FirstAdjointH solve_first_adjoint_h(const ProblemSpec& spec, const TrajectoryBundle& base,
                                    const ControlPath& control, const BrownianBundle& W,
                                    const OperatorPipelineOptions& opt) {
  const TimeGrid& grid = base.grid;
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  check_open_loop(control, "solve_first_adjoint_h");
  require(bool(spec.b_x), "b_x");
  require(bool(spec.b_y), "b_y");
  require(bool(spec.sigma_x), "sigma_x");
  require(bool(spec.sigma_y), "sigma_y");
  require(bool(spec.l_x), "l_x");
  if (spec.cost_uses_past) require(bool(spec.l_y), "l_y");
  require(bool(spec.h_x), "h_x");

  const HilbertGrid hg = make_hilbert_grid(grid, spec.dim_x);
  const ShiftImages si(hg);
  const Channels trans = transport_channels(spec, grid, opt);
  const SimOptions sopt = sim_options(opt);
  const Channels args = compile_channels(spec, grid, sopt, false);
  const std::vector<CompiledMeasure> uniq = unique_channels(spec, grid, sopt);
  const HTables tb =
      build_htables(spec, base, control, args, uniq, true, false, opt.workers);

  const int d = hg.dim, m = tb.m, N = grid.steps, M = tb.M, D = hg.D;
  const double dt = grid.dt;

  FirstAdjointH sol;
  sol.hg = hg;
  sol.spec_id = spec.id;
  sol.control_id = control.id;
  sol.seed = W.seed();
  sol.mollified = opt.mollify_n.has_value();
  sol.head = Mat::Zero(N + 1, d);
  sol.head_sem = Mat::Zero(N + 1, d);
  sol.q_head = Mat::Zero(N + 1, std::size_t(d) * m);
  sol.tail_density0 = Mat::Zero(grid.lag_steps + 1, d);

  const bool det = !opt.force_regression &&
                   slab_uniform(tb.bx, std::size_t(d) * d, N + 1, M) &&
                   slab_uniform(tb.by, std::size_t(d) * tb.Kb * d, N + 1, M) &&
                   slab_uniform(tb.lx, d, N + 1, M) &&
                   (!tb.cost_used || slab_uniform(tb.ly, d, N + 1, M)) &&
                   slab_uniform(tb.hx, d, 1, M);
  sol.deterministic = det;

  // plain driver gradient at one (node, path)
  auto cost_gradient = [&](int i, int p, Vec& lam) {
    lam.setZero();
    const double* lxv = tb.lx_at(i, p);
    for (int c = 0; c < d; ++c) lam[hg.head(c)] = lxv[c];
    if (tb.cost_used) {
      const double* lyv = tb.ly_at(i, p);
      for_weights(trans.cost, grid.lag_steps, [&](int j, double w) {
        for (int c = 0; c < d; ++c) lam[hg.tail(j, c)] += w * lyv[c];
      });
    }
  };

  if (det) {
    Vec phi = Vec::Zero(D), hat(D), lam(D);
    Mat R(d, D);
    const double* hxv = tb.hx_at(0);
    for (int c = 0; c < d; ++c) phi[hg.head(c)] = -hxv[c];
    for (int c = 0; c < d; ++c) sol.head(N, c) = phi[hg.head(c)];
    for (int i = N - 1; i >= 0; --i) {
      shift_pullback(si, phi, hat);
      fill_row_map(hg, tb.bx_at(i, 0), tb.by_at(i, 0), trans.drift, R);
      cost_gradient(i, 0, lam);
      phi = hat + dt * (R.transpose() * hat.head(d) - lam);
      for (int c = 0; c < d; ++c) sol.head(i, c) = phi[hg.head(c)];
    }
    sol.p0 = phi;
    for (int j = 0; j <= grid.lag_steps; ++j)
      for (int c = 0; c < d; ++c)
        sol.tail_density0(j, c) = phi[hg.tail(j, c)] / hg.weights[hg.tail(j, c)];
    return sol;
  }

  const int F = 1 + tb.n_base + tb.n_base * (tb.n_base + 1) / 2;
  std::vector<double> cur(std::size_t(M) * D, 0.0), nxt(std::size_t(M) * D, 0.0);
  for (int p = 0; p < M; ++p) {
    const double* hxv = tb.hx_at(p);
    for (int c = 0; c < d; ++c) nxt[std::size_t(p) * D + hg.head(c)] = -hxv[c];
  }
  {
    Vec mean, semv;
    blocked_moments(nxt, M, D, mean, semv);
    for (int c = 0; c < d; ++c) {
      sol.head(N, c) = mean[hg.head(c)];
      sol.head_sem(N, c) = semv[hg.head(c)];
    }
  }

  Mat Phi(M, F), Yt(M, D + std::size_t(m) * d);
  Vec hat(D), lam(D), phi(D), theta(std::size_t(m) * d);
  Mat R(d, D), Sl(d, D);
  for (int i = N - 1; i >= 0; --i) {
    fill_phi(tb, i, Phi);
    for (int p = 0; p < M; ++p) {
      CVMap row(nxt.data() + std::size_t(p) * D, D);
      shift_pullback(si, row, hat);
      for (int k = 0; k < D; ++k) Yt(p, k) = hat[k];
      for (int l = 0; l < m; ++l) {
        const double dw = W.inc(p, i, l);
        for (int a = 0; a < d; ++a)
          Yt(p, D + std::size_t(l) * d + a) = hat[hg.head(a)] * dw / dt;
      }
    }
    RidgeRegression rr;
    rr.build(Phi, opt.ridge, opt.min_paths_per_feature, i);
    sol.worst_rcond = std::min(sol.worst_rcond, rr.rcond);
    sol.n_features = std::max(sol.n_features, rr.Fa);
    Mat Fit = rr.fit(Yt);

    const int md = m * d;
    for (int p = 0; p < M; ++p) {
      for (int k = 0; k < D; ++k) hat[k] = Fit(p, k);
      for (int k = 0; k < md; ++k) theta[k] = Fit(p, D + k);
      fill_row_map(hg, tb.bx_at(i, p), tb.by_at(i, p), trans.drift, R);
      cost_gradient(i, p, lam);
      phi = hat + dt * (R.transpose() * hat.head(d) - lam);
      for (int l = 0; l < m; ++l) {
        fill_row_map(hg, tb.sx_at(i, p, l), tb.sy_at(i, p, l), trans.diff, Sl);
        phi += dt * (Sl.transpose() * theta.segment(std::size_t(l) * d, d));
      }
      std::copy(phi.data(), phi.data() + D, cur.data() + std::size_t(p) * D);
    }
    Vec mean, semv;
    blocked_moments(cur, M, D, mean, semv);
    for (int c = 0; c < d; ++c) {
      sol.head(i, c) = mean[hg.head(c)];
      sol.head_sem(i, c) = semv[hg.head(c)];
    }
    {
      std::vector<double> th(std::size_t(M) * m * d);
      for (int p = 0; p < M; ++p)
        for (int k = 0; k < m * d; ++k) th[std::size_t(p) * m * d + k] = Fit(p, D + k);
      Vec tmean, tsem;
      blocked_moments(th, M, m * d, tmean, tsem);
      for (int k = 0; k < m * d; ++k) sol.q_head(i, k) = tmean[k];
    }
    if (i == 0) {
      sol.p0 = Vec(D);
      CVMap row0(cur.data(), D);
      sol.p0 = row0;
      for (int j = 0; j <= grid.lag_steps; ++j)
        for (int c = 0; c < d; ++c)
          sol.tail_density0(j, c) = sol.p0[hg.tail(j, c)] / hg.weights[hg.tail(j, c)];
    }
    cur.swap(nxt);
  }
  return sol;
}

SecondAdjointH solve_second_adjoint_h(const ProblemSpec& spec, const TrajectoryBundle& base,
                                      const ControlPath& control, const AdjointSolution& adj,
                                      const BrownianBundle& W,
                                      const OperatorPipelineOptions& opt) {
  const TimeGrid& grid = base.grid;
  verify_run_inputs(spec, grid, control, W);
  verify_base_match(spec, base, grid, W);
  check_open_loop(control, "solve_second_adjoint_h");
  check_adjoint_input(adj, spec, base, control, W);
  require(bool(spec.b_x), "b_x");
  require(bool(spec.b_y), "b_y");
  require(bool(spec.sigma_x), "sigma_x");
  require(bool(spec.sigma_y), "sigma_y");
  require(bool(spec.h_xx), "h_xx");

  const HilbertGrid hg = make_hilbert_grid(grid, spec.dim_x);
  const ShiftImages si(hg);
  const Channels trans = transport_channels(spec, grid, opt);
  const SimOptions sopt = sim_options(opt);
  const Channels args = compile_channels(spec, grid, sopt, false);
  const std::vector<CompiledMeasure> uniq = unique_channels(spec, grid, sopt);
  const HTables tb =
      build_htables(spec, base, control, args, uniq, false, true, opt.workers);

  const int d = hg.dim, m = tb.m, N = grid.steps, M = tb.M, D = hg.D;
  const double dt = grid.dt;
  const bool has_quad = tb.quad_b > 0.0 || tb.quad_s > 0.0;

  SecondAdjointH sol;
  sol.hg = hg;
  sol.spec_id = spec.id;
  sol.control_id = control.id;
  sol.seed = W.seed();
  sol.mollified = opt.mollify_n.has_value();
  sol.form.assign(N + 1, Mat::Zero(D, D));
  sol.form_sem.assign(N + 1, Mat::Zero(D, D));
  sol.q_norm.assign(N, 0.0);

  bool det = !opt.force_regression &&
             slab_uniform(tb.bx, std::size_t(d) * d, N + 1, M) &&
             slab_uniform(tb.by, std::size_t(d) * tb.Kb * d, N + 1, M) &&
             slab_uniform(tb.sx, std::size_t(m) * d * d, N + 1, M) &&
             slab_uniform(tb.sy, std::size_t(m) * d * tb.Ks * d, N + 1, M) &&
             slab_uniform(tb.lxx, std::size_t(d) * d, N + 1, M) &&
             slab_uniform(tb.lxy, std::size_t(d) * d, N + 1, M) &&
             slab_uniform(tb.lyy, std::size_t(d) * d, N + 1, M) &&
             slab_uniform(tb.hxx, std::size_t(d) * d, 1, M) &&
             slab_uniform(tb.bxx, std::size_t(d) * d * d, N + 1, M) &&
             slab_uniform(tb.bxy, std::size_t(d) * d * tb.Kb * d, N + 1, M) &&
             slab_uniform(tb.byy, std::size_t(d) * tb.Kb * d * tb.Kb * d, N + 1, M) &&
             slab_uniform(tb.sxx, std::size_t(m) * d * d * d, N + 1, M) &&
             slab_uniform(tb.sxy, std::size_t(m) * d * d * tb.Ks * d, N + 1, M) &&
             slab_uniform(tb.syy, std::size_t(m) * d * tb.Ks * d * tb.Ks * d, N + 1, M);
  if (det && has_quad && !adj.deterministic) det = false;
  sol.deterministic = det;

  auto track_symmetry = [&](Mat& G, int step) {
    const double scale = 1.0 + G.cwiseAbs().maxCoeff();
    const double drift = (G - G.transpose()).cwiseAbs().maxCoeff() / scale;
    sol.symmetry_drift = std::max(sol.symmetry_drift, drift);
    if (drift > opt.symmetry_tol) {
      std::ostringstream os;
      os << "second adjoint: symmetry drift " << drift << " at step " << step;
      throw ConditioningError(os.str(), step);
    }
    G = 0.5 * (G + G.transpose()).eval();
  };

  if (det) {
    Mat G = Mat::Zero(D, D), Ghat(D, D), GB(D, D), Fx(D, D);
    Mat R(d, D), Sl(d, D);
    G.topLeftCorner(d, d) = -CMap(tb.hxx_at(0), d, d);
    sol.form[N] = G;
    for (int i = N - 1; i >= 0; --i) {
      shift_sandwich(si, G, Ghat);
      fill_row_map(hg, tb.bx_at(i, 0), tb.by_at(i, 0), trans.drift, R);
      GB.noalias() = Ghat.leftCols(d) * R;
      Mat step = Ghat + dt * (GB + GB.transpose());
      // dt^2 drift-drift term: with it the step is the exact conditional
      // expectation of the Euler flow quadratic, not just first-order in dt
      step.noalias() += (dt * dt) * (R.transpose() * Ghat.topLeftCorner(d, d) * R);
      for (int l = 0; l < m; ++l) {
        fill_row_map(hg, tb.sx_at(i, 0, l), tb.sy_at(i, 0, l), trans.diff, Sl);
        step.noalias() += dt * (Sl.transpose() * Ghat.topLeftCorner(d, d) * Sl);
      }
      driver_form(hg, tb, trans, adj, i, 0, Fx);
      step += dt * Fx;
      track_symmetry(step, i);
      G = step;
      sol.form[i] = G;
    }
    return sol;
  }

  const int K = D * (D + 1) / 2;
  std::vector<std::pair<int, int>> tri;
  tri.reserve(K);
  for (int r = 0; r < D; ++r)
    for (int c = r; c < D; ++c) tri.emplace_back(r, c);

  const std::size_t budget =
      (2 * std::size_t(M) * D * D + 2 * std::size_t(M) * (1 + m) * K) * 8;
  if (budget > std::size_t(1.6e9))
    throw ConfigError("second adjoint would need over 1.6 GB of per-path forms; "
                      "reduce paths or steps");

  const int F = 1 + tb.n_base + tb.n_base * (tb.n_base + 1) / 2;
  std::vector<double> cur(std::size_t(M) * D * D, 0.0), nxt(std::size_t(M) * D * D, 0.0);
  for (int p = 0; p < M; ++p) {
    MMap G(nxt.data() + std::size_t(p) * D * D, D, D);
    G.setZero();
    G.topLeftCorner(d, d) = -CMap(tb.hxx_at(p), d, d);
  }
  {
    Vec mean, semv;
    blocked_moments(nxt, M, D * D, mean, semv);
    sol.form[N] = CMap(mean.data(), D, D);
    sol.form_sem[N] = CMap(semv.data(), D, D);
  }

  Mat Phi(M, F), Yt(M, std::size_t(1 + m) * K);
  Mat Ghat(D, D), Eg(D, D), Th(D, D), GB(D, D), Fx(D, D), R(d, D), Sl(d, D);
  std::vector<double> qacc(M, 0.0);
  for (int i = N - 1; i >= 0; --i) {
    fill_phi(tb, i, Phi);
    for (int p = 0; p < M; ++p) {
      CMap G(nxt.data() + std::size_t(p) * D * D, D, D);
      shift_sandwich(si, G, Ghat);
      for (int k = 0; k < K; ++k) Yt(p, k) = Ghat(tri[k].first, tri[k].second);
      for (int l = 0; l < m; ++l) {
        const double s = W.inc(p, i, l) / dt;
        for (int k = 0; k < K; ++k) Yt(p, std::size_t(1 + l) * K + k) = Yt(p, k) * s;
      }
    }
    RidgeRegression rr;
    rr.build(Phi, opt.ridge, opt.min_paths_per_feature, i);
    sol.worst_rcond = std::min(sol.worst_rcond, rr.rcond);
    sol.n_features = std::max(sol.n_features, rr.Fa);
    Mat Fit = rr.fit(Yt);

    for (int p = 0; p < M; ++p) {
      for (int k = 0; k < K; ++k) {
        Eg(tri[k].first, tri[k].second) = Fit(p, k);
        Eg(tri[k].second, tri[k].first) = Fit(p, k);
      }
      fill_row_map(hg, tb.bx_at(i, p), tb.by_at(i, p), trans.drift, R);
      GB.noalias() = Eg.leftCols(d) * R;
      Mat step = Eg + dt * (GB + GB.transpose());
      step.noalias() += (dt * dt) * (R.transpose() * Eg.topLeftCorner(d, d) * R);
      double qn = 0.0;
      for (int l = 0; l < m; ++l) {
        for (int k = 0; k < K; ++k) {
          const double v = Fit(p, std::size_t(1 + l) * K + k);
          Th(tri[k].first, tri[k].second) = v;
          Th(tri[k].second, tri[k].first) = v;
        }
        qn += Th.squaredNorm();
        fill_row_map(hg, tb.sx_at(i, p, l), tb.sy_at(i, p, l), trans.diff, Sl);
        step.noalias() += dt * (Sl.transpose() * Eg.topLeftCorner(d, d) * Sl);
        Mat TS = Th.leftCols(d) * Sl;
        step += dt * (TS + TS.transpose());
        Mat RTS = R.transpose() * Th.topLeftCorner(d, d) * Sl;
        step += (dt * dt) * (RTS + RTS.transpose());
      }
      qacc[p] = qn;
      driver_form(hg, tb, trans, adj, i, p, Fx);
      step += dt * Fx;
      track_symmetry(step, i);
      MMap out(cur.data() + std::size_t(p) * D * D, D, D);
      out = step;
    }
    sol.q_norm[i] = std::sqrt(std::max(blocked_sum(qacc) / double(M), 0.0));
    Vec mean, semv;
    blocked_moments(cur, M, D * D, mean, semv);
    sol.form[i] = CMap(mean.data(), D, D);
    sol.form_sem[i] = CMap(semv.data(), D, D);
    cur.swap(nxt);
  }
  return sol;
}

Mat extract_p00(const SecondAdjointH& sol, int node) {
  if (node < 0 || node >= static_cast<int>(sol.form.size()))
    throw DomainError("extract_p00: node outside [0, steps]");
  return sol.form[node].topLeftCorner(sol.hg.dim, sol.hg.dim);
}

Mat extract_p00_sem(const SecondAdjointH& sol, int node) {
  if (node < 0 || node >= static_cast<int>(sol.form_sem.size()))
    throw DomainError("extract_p00: node outside [0, steps]");
  return sol.form_sem[node].topLeftCorner(sol.hg.dim, sol.hg.dim);
}

} // namespace smpdelay
