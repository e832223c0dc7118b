#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "qsteady/density.hpp"
#include "qsteady/operators.hpp"

namespace qsteady {

// Time-marching settings. Times are quoted in units of 1/gamma and converted
// through LiouvillianOps::gamma_scale, so the same settings mean the same
// physics regardless of the absolute loss rate.
struct SolverSettings {
  double dt = 0.02;
  double t_max = 10000.0;
  double eps_ss = 1e-8;
  double check_interval = 1.0;
  double positivity_tol = 1e-6;
  int max_halvings = 6;
  std::string scheme = "rk4";

  void validate() const {
    if (dt <= 0.0) throw UsageError("dt must be positive");
    if (t_max <= 0.0) throw UsageError("t_max must be positive");
    if (eps_ss <= 0.0) throw UsageError("eps_ss must be positive");
    if (check_interval <= 0.0) throw UsageError("check_interval must be positive");
    if (scheme != "rk4") throw UsageError("unknown integration scheme '" + scheme + "'");
  }
};

// Precomputed generator data. Beyond the sparse operators themselves it can
// carry a structure-exploiting description of an XYZ lattice generator
// (diagonal part, XOR-mask bond flips, per-site loss channels); applying that
// is several times cheaper than generic sparse products and matters a lot for
// scans at Hilbert dimension ~512 on a single core.
struct LiouvillianOps {
  Index dim = 0;
  double gamma_scale = 1.0;
  SparseOp H;
  std::vector<SparseOp> jumps;
  std::vector<SparseOp> jumps_adj;
  SparseOp weight;  // sum_j L_j^dag L_j
  bool weight_diagonal = false;
  RealVector weight_diag;

  bool structured = false;
  RealVector h_diag;
  struct BondFlip {
    Index mask;
  };
  std::vector<BondFlip> bond_flips;
  double bond_amp_aligned = 0.0;
  double bond_amp_anti = 0.0;
  struct FieldFlip {
    Index mask;
    Complex amp_from_down, amp_from_up;
  };
  std::vector<FieldFlip> field_flips;
  std::vector<Index> loss_masks;
  std::vector<double> loss_rates;
  std::vector<std::vector<Index>> loss_rows;  // basis states with the site bit clear

  static LiouvillianOps make(const SparseOp& hamiltonian,
                             const std::vector<SparseOp>& jump_ops,
                             double gamma_scale = 1.0) {
    LiouvillianOps ops;
    ops.dim = hamiltonian.rows();
    if (hamiltonian.cols() != ops.dim)
      throw DimensionError("Hamiltonian must be square");
    ops.gamma_scale = gamma_scale;
    ops.H = hamiltonian;
    ops.jumps = jump_ops;
    ops.weight = SparseOp(ops.dim, ops.dim);
    for (const SparseOp& l : ops.jumps) {
      if (l.rows() != ops.dim || l.cols() != ops.dim)
        throw DimensionError("jump operator dimension mismatch");
      ops.jumps_adj.emplace_back(l.adjoint());
      ops.weight += SparseOp(l.adjoint() * l);
    }
    ops.weight.prune([](Index, Index, const Complex& v) {
      return std::abs(v) > 0.0;
    });
    ops.weight_diagonal = true;
    for (int k = 0; k < ops.weight.outerSize() && ops.weight_diagonal; ++k)
      for (SparseOp::InnerIterator it(ops.weight, k); it; ++it)
        if (it.row() != it.col()) {
          ops.weight_diagonal = false;
          break;
        }
    ops.weight_diag = RealVector::Zero(ops.dim);
    if (ops.weight_diagonal)
      for (int k = 0; k < ops.weight.outerSize(); ++k)
        for (SparseOp::InnerIterator it(ops.weight, k); it; ++it)
          ops.weight_diag(it.row()) = it.value().real();
    return ops;
  }

  // Full-space lattice generator with the fast structured description.
  static LiouvillianOps for_lattice(const LatticeSpec& spec, int max_sites = 36) {
    LiouvillianOps ops = make(build_hamiltonian(spec, max_sites),
                              build_jump_operators(spec), spec.gamma);
    ops.structured = true;
    const int n = spec.n_sites();
    const double g = spec.gamma;
    const auto edges = enumerate_edges(spec);

    ops.h_diag = RealVector::Zero(ops.dim);
    for (Index s = 0; s < ops.dim; ++s) {
      double d = 0.0;
      for (const Edge& e : edges) {
        const double za = (s >> e.a) & 1 ? 1.0 : -1.0;
        const double zb = (s >> e.b) & 1 ? 1.0 : -1.0;
        d += spec.jz * za * zb;
      }
      ops.h_diag(s) = g * d;
    }
    // sx sx + sy sy on one bond is a single two-bit XOR flip whose amplitude
    // is Jx - Jy when the source bits agree and Jx + Jy when they differ;
    // the applier resolves the parity per basis state.
    for (const Edge& e : edges)
      ops.bond_flips.push_back({(Index{1} << e.a) | (Index{1} << e.b)});
    ops.bond_amp_aligned = g * (spec.jx - spec.jy);
    ops.bond_amp_anti = g * (spec.jx + spec.jy);

    if (spec.field_h != 0.0) {
      const double hx = g * spec.field_h * std::cos(spec.field_theta);
      const double hy = g * spec.field_h * std::sin(spec.field_theta);
      for (int j = 0; j < n; ++j) {
        FieldFlip f;
        f.mask = Index{1} << j;
        f.amp_from_down = Complex(hx, -hy);
        f.amp_from_up = Complex(hx, hy);
        ops.field_flips.push_back(f);
      }
    }

    for (int j = 0; j < n; ++j) {
      ops.loss_masks.push_back(Index{1} << j);
      ops.loss_rates.push_back(g);
      std::vector<Index> rows;
      rows.reserve(static_cast<std::size_t>(ops.dim / 2));
      for (Index s = 0; s < ops.dim; ++s)
        if (((s >> j) & 1) == 0) rows.push_back(s);
      ops.loss_rows.push_back(std::move(rows));
    }
    return ops;
  }

  // Crude spectral-radius proxy used to cap the RK4 step for stability.
  double stability_bound() const {
    RealVector row_sums = RealVector::Zero(dim);
    for (int k = 0; k < H.outerSize(); ++k)
      for (SparseOp::InnerIterator it(H, k); it; ++it)
        row_sums(it.row()) += std::abs(it.value());
    const double hmax = dim > 0 ? row_sums.maxCoeff() : 0.0;
    double wmax = 0.0;
    for (int k = 0; k < weight.outerSize(); ++k)
      for (SparseOp::InnerIterator it(weight, k); it; ++it)
        wmax = std::max(wmax, std::abs(it.value()));
    return 2.0 * hmax + wmax;
  }
};

namespace detail {

inline void apply_structured(const LiouvillianOps& ops, const DenseMatrix& rho,
                             DenseMatrix& out) {
  const Index dim = ops.dim;
  out.resize(dim, dim);
  const Complex* R = rho.data();
  Complex* O = out.data();
  const double* d = ops.h_diag.data();
  const double* wd = ops.weight_diag.data();
  const Complex mi(0.0, -1.0);
  for (Index c = 0; c < dim; ++c) {
    const Complex* rc = R + c * dim;
    Complex* oc = O + c * dim;
    const double dc = d[c];
    const double wc = wd[c];
    for (Index r = 0; r < dim; ++r)
      oc[r] = mi * ((d[r] - dc) * rc[r]) - 0.5 * (wd[r] + wc) * rc[r];
    for (const auto& f : ops.bond_flips) {
      const Index m = f.mask;
      const Complex* rflip = R + (c ^ m) * dim;
      // amplitude toward a basis state depends on the source-bit parity
      const Index lo = m & -m;
      const Index hi = m ^ lo;
      const bool cpar = ((c & lo) != 0) == ((c & hi) != 0);
      const double aright = cpar ? ops.bond_amp_aligned : ops.bond_amp_anti;
      for (Index r = 0; r < dim; ++r) {
        const Index rs = r ^ m;
        const bool rpar = ((rs & lo) != 0) == ((rs & hi) != 0);
        const double aleft = rpar ? ops.bond_amp_aligned : ops.bond_amp_anti;
        oc[r] += mi * (aleft * rc[rs] - aright * rflip[r]);
      }
    }
    for (const auto& f : ops.field_flips) {
      const Index m = f.mask;
      const Complex* rflip = R + (c ^ m) * dim;
      const Complex aright = (c & m) ? f.amp_from_up : f.amp_from_down;
      for (Index r = 0; r < dim; ++r) {
        const Index rs = r ^ m;
        const Complex aleft = (rs & m) ? f.amp_from_up : f.amp_from_down;
        oc[r] += mi * (aleft * rc[rs] - aright * rflip[r]);
      }
    }
  }
  for (std::size_t j = 0; j < ops.loss_rows.size(); ++j) {
    const auto& rows = ops.loss_rows[j];
    const Index m = ops.loss_masks[j];
    const double g = ops.loss_rates[j];
    for (const Index c0 : rows) {
      const Complex* src = R + (c0 | m) * dim;
      Complex* oc = O + c0 * dim;
      for (const Index r0 : rows) oc[r0] += g * src[r0 | m];
    }
  }
}

inline void apply_generic(const LiouvillianOps& ops, const DenseMatrix& rho,
                          DenseMatrix& out, DenseMatrix& scratch,
                          bool hermitian_input) {
  scratch.noalias() = ops.H * rho;
  if (hermitian_input) {
    // rho H = (H rho)^dag for Hermitian H and rho; saves one product
    out = Complex(0.0, -1.0) * (scratch - scratch.adjoint());
  } else {
    out = scratch;
    scratch.noalias() = rho * ops.H;
    out -= scratch;
    out *= Complex(0.0, -1.0);
  }
  for (std::size_t j = 0; j < ops.jumps.size(); ++j) {
    scratch.noalias() = ops.jumps[j] * rho;
    out.noalias() += scratch * ops.jumps_adj[j];
  }
  if (ops.weight_diagonal) {
    for (Index c = 0; c < ops.dim; ++c)
      out.col(c).array() -=
          (0.5 * (ops.weight_diag.array() + ops.weight_diag(c)))
              .cast<Complex>() *
          rho.col(c).array();
  } else {
    scratch.noalias() = ops.weight * rho;
    out -= 0.5 * scratch;
    scratch.noalias() = rho * ops.weight;
    out -= 0.5 * scratch;
  }
}

}  // namespace detail

inline void apply_liouvillian_into(const LiouvillianOps& ops, const DenseMatrix& rho,
                                   DenseMatrix& out, DenseMatrix& scratch,
                                   bool assume_hermitian = false) {
  if (rho.rows() != ops.dim || rho.cols() != ops.dim)
    throw DimensionError("state dimension does not match the generator");
  if (ops.structured)
    detail::apply_structured(ops, rho, out);
  else
    detail::apply_generic(ops, rho, out, scratch, assume_hermitian);
}

// Right-hand side of the master equation,
//   -i[H, rho] + sum_j (L_j rho L_j^dag - (1/2){L_j^dag L_j, rho}).
inline DenseMatrix apply_liouvillian(const LiouvillianOps& ops, const DenseMatrix& rho) {
  DenseMatrix out, scratch;
  apply_liouvillian_into(ops, rho, out, scratch, false);
  return out;
}

inline DenseMatrix apply_liouvillian(const SparseOp& hamiltonian,
                                     const std::vector<SparseOp>& jump_ops,
                                     const DenseMatrix& rho) {
  return apply_liouvillian(LiouvillianOps::make(hamiltonian, jump_ops), rho);
}

struct Rk4Workspace {
  DenseMatrix k1, k2, k3, k4, stage, scratch;
};

inline void rk4_step(const LiouvillianOps& ops, DenseMatrix& rho, double dt,
                     Rk4Workspace& ws) {
  apply_liouvillian_into(ops, rho, ws.k1, ws.scratch, true);
  ws.stage = rho + (0.5 * dt) * ws.k1;
  apply_liouvillian_into(ops, ws.stage, ws.k2, ws.scratch, true);
  ws.stage = rho + (0.5 * dt) * ws.k2;
  apply_liouvillian_into(ops, ws.stage, ws.k3, ws.scratch, true);
  ws.stage = rho + dt * ws.k3;
  apply_liouvillian_into(ops, ws.stage, ws.k4, ws.scratch, true);
  rho += (dt / 6.0) * (ws.k1 + 2.0 * ws.k2 + 2.0 * ws.k3 + ws.k4);
}

namespace detail {

// Projects onto Hermitian unit trace in one pass and reports the drift that
// was removed: (hermiticity, trace).
inline std::pair<double, double> enforce_state(DenseMatrix& rho) {
  const Index n = rho.rows();
  double herm = 0.0;
  for (Index c = 0; c < n; ++c) {
    herm = std::max(herm, std::abs(rho(c, c).imag()));
    rho(c, c) = Complex(rho(c, c).real(), 0.0);
    for (Index r = c + 1; r < n; ++r) {
      const Complex a = rho(r, c);
      const Complex b = std::conj(rho(c, r));
      herm = std::max(herm, std::abs(a - b));
      const Complex m = 0.5 * (a + b);
      rho(r, c) = m;
      rho(c, r) = std::conj(m);
    }
  }
  const double tr = rho.real().diagonal().sum();
  const double drift = std::abs(tr - 1.0);
  if (std::abs(tr) < 1e-300)
    throw PositivityError("state trace collapsed to zero during integration", 0.0);
  rho /= tr;
  return {herm, drift};
}

}  // namespace detail

struct SteadyResult {
  DensityMatrix rho;
  double reached_time = 0.0;  // units 1/gamma
  double residual_max = 0.0;  // max-norm of the generator applied to rho
  long rk4_steps = 0;
  long applies = 0;
  int dt_halvings = 0;
  double dt_used = 0.0;  // units 1/gamma
  double max_trace_drift = 0.0;
  double max_herm_drift = 0.0;
  int kernel_dim = 1;
  std::string method;
};

// Fixed-step RK4 integration until the trace-norm rate
// ||rho(t + dt_check) - rho(t)||_1 / dt_check falls below eps_ss
// (dt_check = 1/gamma). The step is capped by a stability bound and halved
// when a checkpoint finds an eigenvalue below -positivity_tol.
inline SteadyResult evolve_to_steady(const LiouvillianOps& ops,
                                     const DensityMatrix& rho0,
                                     const SolverSettings& settings = {}) {
  settings.validate();
  if (rho0.dim() != ops.dim)
    throw DimensionError("initial state does not match the generator dimension");
  SteadyResult out;
  out.method = "evolve-rk4";
  const double unit = 1.0 / ops.gamma_scale;  // absolute seconds per 1/gamma
  double dt = settings.dt * unit;
  const double bound = ops.stability_bound();
  if (bound > 0.0) dt = std::min(dt, 2.5 / bound);

  DensityMatrix state = rho0;
  state.enforce();
  Rk4Workspace ws;
  DenseMatrix prev = state.rho;
  double t = 0.0;
  const double t_max = settings.t_max * unit;
  const double check = settings.check_interval * unit;
  double rate = 0.0;
  while (t < t_max) {
    const long steps = std::max<long>(1, std::lround(check / dt));
    for (long s = 0; s < steps; ++s) {
      rk4_step(ops, state.rho, dt, ws);
      const auto [herm, trd] = detail::enforce_state(state.rho);
      out.max_herm_drift = std::max(out.max_herm_drift, herm);
      out.max_trace_drift = std::max(out.max_trace_drift, trd);
    }
    out.rk4_steps += steps;
    out.applies += 4 * steps;
    t += steps * dt;

    rate = trace_norm_hermitian(state.rho - prev) / (steps * dt * ops.gamma_scale);
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(state.rho, Eigen::EigenvaluesOnly);
    const double min_eig = es.eigenvalues().minCoeff();
    if (min_eig < -settings.positivity_tol) {
      if (++out.dt_halvings > settings.max_halvings)
        throw StepSizeError("positivity still violated after halving dt " +
                            std::to_string(settings.max_halvings) + " times");
      dt *= 0.5;
      prev = state.rho;
      continue;
    }
    if (rate < settings.eps_ss) {
      out.rho = std::move(state);
      out.rho.enforce();
      DenseMatrix resid, scratch;
      apply_liouvillian_into(ops, out.rho.rho, resid, scratch, true);
      out.applies += 1;
      out.residual_max = resid.cwiseAbs().maxCoeff();
      out.reached_time = t * ops.gamma_scale;
      out.dt_used = dt * ops.gamma_scale;
      return out;
    }
    prev = state.rho;
  }
  throw ConvergenceError("no stationary state within t_max; last trace-norm rate " +
                             std::to_string(rate),
                         rate, t * ops.gamma_scale);
}

inline SteadyResult evolve_to_steady(const SparseOp& hamiltonian,
                                     const std::vector<SparseOp>& jump_ops,
                                     const DensityMatrix& rho0,
                                     const SolverSettings& settings = {}) {
  return evolve_to_steady(LiouvillianOps::make(hamiltonian, jump_ops), rho0, settings);
}

// Column-major vectorization of the generator: acting on vec(rho) it equals
// -i(I kron H - H^T kron I) + sum_j [conj(L_j) kron L_j
//   - (1/2)(I kron L_j^dag L_j + (L_j^dag L_j)^T kron I)].
inline SparseOp liouvillian_superoperator(const SparseOp& hamiltonian,
                                          const std::vector<SparseOp>& jump_ops) {
  const Index dim = hamiltonian.rows();
  if (hamiltonian.cols() != dim) throw DimensionError("Hamiltonian must be square");
  const Index n = dim * dim;
  const Complex mi(0.0, -1.0);
  std::vector<Triplet> trips;
  for (int k = 0; k < hamiltonian.outerSize(); ++k)
    for (SparseOp::InnerIterator it(hamiltonian, k); it; ++it) {
      for (Index c = 0; c < dim; ++c) {
        trips.emplace_back(c * dim + it.row(), c * dim + it.col(), mi * it.value());
        trips.emplace_back(it.col() * dim + c, it.row() * dim + c, -mi * it.value());
      }
    }
  SparseOp weight(dim, dim);
  for (const SparseOp& l : jump_ops) {
    if (l.rows() != dim || l.cols() != dim)
      throw DimensionError("jump operator dimension mismatch");
    weight += SparseOp(l.adjoint() * l);
    // conj(L) kron L term, iterating over entry pairs
    for (int ko = 0; ko < l.outerSize(); ++ko)
      for (SparseOp::InnerIterator ito(l, ko); ito; ++ito)
        for (int ki = 0; ki < l.outerSize(); ++ki)
          for (SparseOp::InnerIterator iti(l, ki); iti; ++iti)
            trips.emplace_back(ito.row() * dim + iti.row(),
                               ito.col() * dim + iti.col(),
                               iti.value() * std::conj(ito.value()));
  }
  for (int k = 0; k < weight.outerSize(); ++k)
    for (SparseOp::InnerIterator it(weight, k); it; ++it) {
      for (Index c = 0; c < dim; ++c) {
        trips.emplace_back(c * dim + it.row(), c * dim + it.col(), -0.5 * it.value());
        trips.emplace_back(it.col() * dim + c, it.row() * dim + c, -0.5 * it.value());
      }
    }
  SparseOp s(n, n);
  s.setFromTriplets(trips.begin(), trips.end());
  return s;
}

struct NullspaceSettings {
  Index dense_dim_max = 32;  // largest Hilbert dim for the dense kernel route
  Index max_dim = 4096;      // hard guard for any nullspace solve
  double residual_target = 1e-10;
  double kernel_rel_tol = 1e-9;
  // accelerated fixed-point route
  double block_time = 1.0;  // units 1/gamma
  double dt = 0.02;
  int window = 5;
  long max_blocks = 400;
  enum class Route { Auto, Dense, Iterative };
  Route route = Route::Auto;

  void validate() const {
    if (residual_target <= 0.0) throw UsageError("residual target must be positive");
    if (block_time <= 0.0 || dt <= 0.0) throw UsageError("block_time and dt must be positive");
    if (window < 1) throw UsageError("acceleration window must be at least 1");
    if (max_blocks < 1) throw UsageError("max_blocks must be at least 1");
  }
};

namespace detail {

inline SteadyResult dense_kernel_state(const LiouvillianOps& ops,
                                       const NullspaceSettings& ns) {
  const Index dim = ops.dim;
  DenseMatrix s = DenseMatrix(liouvillian_superoperator(ops.H, ops.jumps));
  Eigen::BDCSVD<DenseMatrix> svd(s, Eigen::ComputeFullV);
  const RealVector& sv = svd.singularValues();
  const double smax = sv.size() > 0 ? sv(0) : 0.0;
  const double cut = smax * ns.kernel_rel_tol;
  int kernel = 0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) <= cut) ++kernel;
  if (kernel > 1)
    throw DegenerateKernelError(
        "stationary space has dimension " + std::to_string(kernel) +
            "; the steady state is not unique (symmetry sector or misconfiguration)",
        kernel);
  DenseVector v = svd.matrixV().col(s.cols() - 1);
  DenseMatrix candidate = Eigen::Map<DenseMatrix>(v.data(), dim, dim);
  const Complex tr = candidate.trace();
  if (std::abs(tr) < 1e-10)
    throw DegenerateKernelError(
        "kernel vector is traceless; the stationary space is ill-conditioned", kernel);
  candidate *= std::conj(tr) / std::abs(tr);  // rotate the global phase away
  SteadyResult out;
  out.method = "nullspace-dense";
  out.kernel_dim = std::max(kernel, 1);
  out.rho = DensityMatrix{std::move(candidate)};
  out.rho.enforce();
  DenseMatrix resid, scratch;
  apply_liouvillian_into(ops, out.rho.rho, resid, scratch, true);
  out.applies = 1;
  out.residual_max = resid.cwiseAbs().maxCoeff();
  if (out.residual_max > ns.residual_target * 100.0)
    throw ConvergenceError("dense kernel state fails the generator residual check",
                           out.residual_max, 0.0);
  return out;
}

// Anderson-accelerated fixed point of the RK4 flow map over one block of
// time. Real mixing coefficients keep iterates Hermitian with unit trace;
// convergence is measured as the max-norm of the generator on the fresh flow
// output, which is also the state returned.
inline SteadyResult accelerated_fixed_point(const LiouvillianOps& ops,
                                            const NullspaceSettings& ns,
                                            const DenseMatrix* warm) {
  const Index dim = ops.dim;
  const Index n = dim * dim;
  const double unit = 1.0 / ops.gamma_scale;
  double dt = ns.dt * unit;
  const double bound = ops.stability_bound();
  if (bound > 0.0) dt = std::min(dt, 2.5 / bound);
  const long steps = std::max<long>(1, std::lround(ns.block_time * unit / dt));

  DenseMatrix x;
  if (warm && warm->rows() == dim && warm->cols() == dim) {
    x = *warm;
  } else {
    x = DenseMatrix::Zero(dim, dim);
    x(0, 0) = 1.0;
  }
  enforce_state(x);

  SteadyResult out;
  out.method = "nullspace-iterative";
  out.dt_used = dt * ops.gamma_scale;

  Rk4Workspace ws;
  DenseMatrix g;
  DenseMatrix df(n, ns.window), dg(n, ns.window);
  DenseVector f_prev(n), g_prev(n), fvec(n);
  int hist = 0;
  double res_prev = std::numeric_limits<double>::infinity();
  bool have_prev = false;

  for (long block = 0; block < ns.max_blocks; ++block) {
    g = x;
    for (long s = 0; s < steps; ++s) {
      rk4_step(ops, g, dt, ws);
      enforce_state(g);
    }
    out.rk4_steps += steps;
    out.applies += 4 * steps + 1;
    DenseMatrix resid;
    apply_liouvillian_into(ops, g, resid, ws.scratch, true);
    const double res = resid.cwiseAbs().maxCoeff();
    out.reached_time = (block + 1) * ns.block_time;
    if (res < ns.residual_target) {
      out.rho = DensityMatrix{std::move(g)};
      out.rho.enforce();
      out.residual_max = res;
      return out;
    }

    const Eigen::Map<const DenseVector> gmap(g.data(), n);
    const Eigen::Map<const DenseVector> xmap(x.data(), n);
    fvec = gmap - xmap;

    const bool diverging = res > 1.5 * res_prev;
    if (diverging) hist = 0;
    if (have_prev && !diverging) {
      if (hist == ns.window) {
        for (int c = 0; c + 1 < ns.window; ++c) {
          df.col(c) = df.col(c + 1);
          dg.col(c) = dg.col(c + 1);
        }
        hist -= 1;
      }
      df.col(hist) = fvec - f_prev;
      dg.col(hist) = gmap - g_prev;
      hist += 1;
    }
    f_prev = fvec;
    g_prev = gmap;
    res_prev = res;
    have_prev = true;

    if (hist == 0) {
      x = g;
      continue;
    }
    // real least squares min ||fvec - df * theta|| via normal equations;
    // real coefficients preserve Hermiticity and the unit trace exactly
    Eigen::MatrixXd ata(hist, hist);
    Eigen::VectorXd atb(hist);
    for (int i = 0; i < hist; ++i) {
      for (int j = i; j < hist; ++j) {
        ata(i, j) = df.col(i).dot(df.col(j)).real();
        ata(j, i) = ata(i, j);
      }
      atb(i) = df.col(i).dot(fvec).real();
    }
    ata.diagonal().array() += 1e-12 * (ata.trace() / hist + 1.0);
    const Eigen::VectorXd theta = ata.ldlt().solve(atb);
    Eigen::Map<DenseVector> xnew(x.data(), n);
    xnew = gmap;
    for (int i = 0; i < hist; ++i) xnew -= theta(i) * dg.col(i);
    enforce_state(x);
  }
  throw ConvergenceError("accelerated fixed point exhausted its block budget",
                         res_prev, out.reached_time);
}

}  // namespace detail

inline SteadyResult steady_state_nullspace(const LiouvillianOps& ops,
                                           const NullspaceSettings& ns = {},
                                           const DenseMatrix* warm = nullptr) {
  ns.validate();
  if (ops.dim > ns.max_dim)
    throw DimensionError("nullspace solve refused above dimension " +
                         std::to_string(ns.max_dim) +
                         "; use the corner or trajectory solvers");
  switch (ns.route) {
    case NullspaceSettings::Route::Dense:
      return detail::dense_kernel_state(ops, ns);
    case NullspaceSettings::Route::Iterative:
      return detail::accelerated_fixed_point(ops, ns, warm);
    case NullspaceSettings::Route::Auto:
    default:
      if (ops.dim <= ns.dense_dim_max) return detail::dense_kernel_state(ops, ns);
      return detail::accelerated_fixed_point(ops, ns, warm);
  }
}

inline SteadyResult steady_state_nullspace(const SparseOp& hamiltonian,
                                           const std::vector<SparseOp>& jump_ops,
                                           const NullspaceSettings& ns = {},
                                           const DenseMatrix* warm = nullptr) {
  return steady_state_nullspace(LiouvillianOps::make(hamiltonian, jump_ops), ns, warm);
}

enum class SteadyMethod { Auto, Evolve, DenseNullspace, IterativeNullspace };

inline const char* to_string(SteadyMethod m) {
  switch (m) {
    case SteadyMethod::Auto: return "auto";
    case SteadyMethod::Evolve: return "evolve";
    case SteadyMethod::DenseNullspace: return "nullspace-dense";
    case SteadyMethod::IterativeNullspace: return "nullspace-iterative";
  }
  return "unknown";
}

inline SteadyResult solve_steady(const LiouvillianOps& ops,
                                 SteadyMethod method = SteadyMethod::Auto,
                                 const SolverSettings& evolve_settings = {},
                                 NullspaceSettings ns = {},
                                 const DensityMatrix* rho0 = nullptr) {
  switch (method) {
    case SteadyMethod::Evolve: {
      DensityMatrix init;
      if (rho0)
        init = *rho0;
      else
        init = pure_state_density(all_down_state(ops.dim));
      return evolve_to_steady(ops, init, evolve_settings);
    }
    case SteadyMethod::DenseNullspace:
      ns.route = NullspaceSettings::Route::Dense;
      return steady_state_nullspace(ops, ns, rho0 ? &rho0->rho : nullptr);
    case SteadyMethod::IterativeNullspace:
      ns.route = NullspaceSettings::Route::Iterative;
      return steady_state_nullspace(ops, ns, rho0 ? &rho0->rho : nullptr);
    case SteadyMethod::Auto:
    default:
      ns.route = NullspaceSettings::Route::Auto;
      return steady_state_nullspace(ops, ns, rho0 ? &rho0->rho : nullptr);
  }
}

}  // namespace qsteady
