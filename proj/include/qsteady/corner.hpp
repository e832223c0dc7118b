#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qsteady/density.hpp"
#include "qsteady/lattice.hpp"
#include "qsteady/master.hpp"
#include "qsteady/operators.hpp"
#include "qsteady/trajectory.hpp"
#include "qsteady/types.hpp"

namespace qsteady {

// Corner-space renormalization: solve small patches of the lattice exactly,
// keep the most probable product states of neighbouring patches, and rebuild
// every operator the remaining merges need inside that truncated basis.

// Basis produced by merging two solved blocks. Pairs are (left eigenstate,
// right eigenstate) indices ranked by joint weight p_i * q_j, descending,
// ties broken lexicographically on (i, j). The corner vectors are the
// corresponding product states, so the basis is orthonormal by construction.
struct CornerBasis {
  Index dim_a = 0;
  Index dim_b = 0;
  Index m_c = 0;
  std::vector<std::pair<Index, Index>> pairs;
  RealVector joint_weights;        // weight of each retained pair
  double retained_weight = 1.0;    // kept fraction of the total product weight
  bool clamped = false;            // requested dimension exceeded the product space
  DenseMatrix vectors_a;           // eigenvector columns of the left block
  DenseMatrix vectors_b;           // eigenvector columns of the right block

  Index product_dim() const { return dim_a * dim_b; }

  // Corner vectors as explicit columns over the product space, index
  // v = a * dim_b + b. Intended for tests and small systems; the projection
  // kernels below never materialize this matrix.
  DenseMatrix isometry() const {
    const Index full = product_dim();
    if (full * m_c > (Index{1} << 25))
      throw UnsupportedError(
          "explicit corner isometry would hold " + std::to_string(full * m_c) +
          " entries; use the projection kernels instead");
    DenseMatrix b(full, m_c);
    for (Index k = 0; k < m_c; ++k) {
      const auto [ia, jb] = pairs[static_cast<std::size_t>(k)];
      for (Index r = 0; r < dim_a; ++r)
        b.block(r * dim_b, k, dim_b, 1) = vectors_a(r, ia) * vectors_b.col(jb);
    }
    return b;
  }
};

// Ranks all dim_a * dim_b product pairs by joint weight and keeps the m_c
// heaviest. The walk is best-first over the index grid: probabilities are
// sorted descending, so every candidate is dominated by its predecessors and
// enters the frontier through a unique parent. A requested dimension above
// the product space is clamped (flagged on the result).
inline CornerBasis merge_corner(const SpectralDecomposition& a,
                                const SpectralDecomposition& b, Index m_c) {
  if (a.dim() < 1 || b.dim() < 1)
    throw UsageError("cannot merge an empty spectral decomposition");
  if (m_c < 1) throw UsageError("corner dimension must be at least 1");
  CornerBasis basis;
  basis.dim_a = a.dim();
  basis.dim_b = b.dim();
  const Index full = basis.product_dim();
  if (m_c > full) {
    basis.clamped = true;
    m_c = full;
  }
  basis.m_c = m_c;
  basis.vectors_a = a.states;
  basis.vectors_b = b.states;

  struct Cand {
    double w;
    Index i, j;
  };
  const auto worse = [](const Cand& x, const Cand& y) {
    if (x.w != y.w) return x.w < y.w;
    if (x.i != y.i) return x.i > y.i;
    return x.j > y.j;
  };
  std::priority_queue<Cand, std::vector<Cand>, decltype(worse)> frontier(worse);
  frontier.push({a.probabilities(0) * b.probabilities(0), 0, 0});
  basis.pairs.reserve(static_cast<std::size_t>(m_c));
  basis.joint_weights.resize(m_c);
  while (static_cast<Index>(basis.pairs.size()) < m_c) {
    const Cand top = frontier.top();
    frontier.pop();
    basis.joint_weights(static_cast<Index>(basis.pairs.size())) = top.w;
    basis.pairs.emplace_back(top.i, top.j);
    if (top.i + 1 < basis.dim_a)
      frontier.push({a.probabilities(top.i + 1) * b.probabilities(top.j),
                     top.i + 1, top.j});
    if (top.i == 0 && top.j + 1 < basis.dim_b)
      frontier.push({a.probabilities(0) * b.probabilities(top.j + 1), Index{0},
                     top.j + 1});
  }
  if (basis.m_c == full) {
    basis.retained_weight = 1.0;
  } else {
    const double total = a.probabilities.sum() * b.probabilities.sum();
    basis.retained_weight =
        total > 0.0 ? std::min(basis.joint_weights.sum() / total, 1.0) : 1.0;
  }
  return basis;
}

// B^dagger op B with the isometry written out. Exact but quadratic in the
// product dimension; the structured kernels below are what the merges use.
inline DenseMatrix project_operator(const SparseOp& op, const CornerBasis& basis) {
  if (op.rows() != basis.product_dim() || op.cols() != basis.product_dim())
    throw DimensionError("operator does not live on the product space of the basis");
  const DenseMatrix b = basis.isometry();
  return b.adjoint() * (op * b);
}

inline DenseMatrix project_operator(const DenseMatrix& op, const CornerBasis& basis) {
  if (op.rows() != basis.product_dim() || op.cols() != basis.product_dim())
    throw DimensionError("operator does not live on the product space of the basis");
  const DenseMatrix b = basis.isometry();
  return b.adjoint() * (op * b);
}

namespace detail {

// V^dagger M V: the operator rewritten in the eigenbasis the corner pairs
// index into. Every block operator passes through here once per merge.
inline DenseMatrix eigenbasis_transform(const DenseMatrix& m, const DenseMatrix& v) {
  return v.adjoint() * m * v;
}

}  // namespace detail

// Projection of (op_a x identity) given op_a already in the left eigenbasis:
// matrix elements are a_tilde(i_k, i_l) when the right indices agree.
inline DenseMatrix project_left(const DenseMatrix& a_tilde, const CornerBasis& basis) {
  if (a_tilde.rows() != basis.dim_a || a_tilde.cols() != basis.dim_a)
    throw DimensionError("operator does not live on the left block");
  DenseMatrix out(basis.m_c, basis.m_c);
  for (Index l = 0; l < basis.m_c; ++l) {
    const auto [il, jl] = basis.pairs[static_cast<std::size_t>(l)];
    for (Index k = 0; k < basis.m_c; ++k) {
      const auto [ik, jk] = basis.pairs[static_cast<std::size_t>(k)];
      out(k, l) = (jk == jl) ? a_tilde(ik, il) : Complex(0.0, 0.0);
    }
  }
  return out;
}

inline DenseMatrix project_right(const DenseMatrix& b_tilde, const CornerBasis& basis) {
  if (b_tilde.rows() != basis.dim_b || b_tilde.cols() != basis.dim_b)
    throw DimensionError("operator does not live on the right block");
  DenseMatrix out(basis.m_c, basis.m_c);
  for (Index l = 0; l < basis.m_c; ++l) {
    const auto [il, jl] = basis.pairs[static_cast<std::size_t>(l)];
    for (Index k = 0; k < basis.m_c; ++k) {
      const auto [ik, jk] = basis.pairs[static_cast<std::size_t>(k)];
      out(k, l) = (ik == il) ? b_tilde(jk, jl) : Complex(0.0, 0.0);
    }
  }
  return out;
}

// Projection of (op_a x op_b), both already in their block eigenbases.
inline DenseMatrix project_pair(const DenseMatrix& a_tilde, const DenseMatrix& b_tilde,
                                const CornerBasis& basis) {
  if (a_tilde.rows() != basis.dim_a || b_tilde.rows() != basis.dim_b)
    throw DimensionError("pair operators do not live on the two blocks");
  DenseMatrix out(basis.m_c, basis.m_c);
  for (Index l = 0; l < basis.m_c; ++l) {
    const auto [il, jl] = basis.pairs[static_cast<std::size_t>(l)];
    for (Index k = 0; k < basis.m_c; ++k) {
      const auto [ik, jk] = basis.pairs[static_cast<std::size_t>(k)];
      out(k, l) = a_tilde(ik, il) * b_tilde(jk, jl);
    }
  }
  return out;
}

// One rectangular patch of columns carried through the merge cascade: its
// steady state plus every operator later steps still need, all expressed in
// the patch's current (possibly truncated) basis. Local site ids run down
// each column, leftmost column first: local = x * height + y.
struct BlockState {
  int width = 0;
  int height = 0;
  Index dim = 0;
  DenseMatrix hamiltonian;            // bonds and field internal to the patch
  std::vector<DenseMatrix> lowering;  // per-site loss channels, sqrt(gamma) included
  std::map<int, std::array<DenseMatrix, 3>> boundary_paulis;  // {sx, sy, sz}
  DenseMatrix total_sx, total_sy, total_sz;  // sums over all sites of the patch
  std::vector<DenseMatrix> wrap_bonds;  // per column: the full vertical wrap term
  DensityMatrix rho;
  double residual = 0.0;
  std::string method;

  int n_sites() const { return width * height; }
  int local_site(int x, int y) const { return x * height + y; }
};

// Assembles the operator content of one open column at the couplings of
// `spec`. Vertical wrap bonds and all horizontal couplings stay pending:
// the wrap is tracked as a single operator so the final merge can attach it
// after any number of truncations, and seams are built from the boundary
// Pauli sets.
inline BlockState make_strip_block(const LatticeSpec& spec) {
  spec.validate();
  if (spec.ly > 12)
    throw UnsupportedError("column strips above 2^12 states are not supported");
  LatticeSpec strip = spec;
  strip.lx = 1;
  strip.periodic_x = false;
  strip.periodic_y = false;

  BlockState b;
  b.width = 1;
  b.height = strip.ly;
  b.dim = strip.dim();
  b.hamiltonian = DenseMatrix(build_hamiltonian(strip));
  const int n = strip.n_sites();
  const double root = std::sqrt(spec.gamma);
  b.total_sx = DenseMatrix::Zero(b.dim, b.dim);
  b.total_sy = DenseMatrix::Zero(b.dim, b.dim);
  b.total_sz = DenseMatrix::Zero(b.dim, b.dim);
  for (int s = 0; s < n; ++s) {
    b.lowering.push_back(root * DenseMatrix(site_operator(n, s, PauliKind::Minus)));
    std::array<DenseMatrix, 3> p = {DenseMatrix(site_operator(n, s, PauliKind::X)),
                                    DenseMatrix(site_operator(n, s, PauliKind::Y)),
                                    DenseMatrix(site_operator(n, s, PauliKind::Z))};
    b.total_sx += p[0];
    b.total_sy += p[1];
    b.total_sz += p[2];
    b.boundary_paulis[s] = std::move(p);
  }
  if (spec.periodic_y && spec.ly >= 2) {
    const auto& top = b.boundary_paulis.at(b.local_site(0, spec.ly - 1));
    const auto& bot = b.boundary_paulis.at(b.local_site(0, 0));
    b.wrap_bonds.push_back(spec.gamma * (spec.jx * (top[0] * bot[0]) +
                                         spec.jy * (top[1] * bot[1]) +
                                         spec.jz * (top[2] * bot[2])));
  }
  return b;
}

struct CornerSettings {
  Index m_c = 256;               // corner dimension used by make_merge_plan
  Index dense_dim_max = 16;      // solves at or below go through the dense kernel
  Index master_dim_max = 4096;   // solves at or below use the master equation
  double retained_floor = 0.9;   // warn when a merge keeps less weight than this
  double p_floor = 1e-12;        // probabilities at or below count as unoccupied
  double negative_tol = 1e-6;    // eigenvalue slack when decomposing solved blocks
  double memory_budget = 3.5e9;  // bytes of merged operators a step may allocate
  std::string checkpoint_dir;    // empty: no per-level checkpoints
  NullspaceSettings nullspace;
  EnsembleSettings ensemble;

  void validate() const {
    if (m_c < 1) throw UsageError("corner dimension must be at least 1");
    if (dense_dim_max < 1 || master_dim_max < dense_dim_max)
      throw UsageError("solver dispatch thresholds are out of order");
    if (retained_floor < 0.0 || retained_floor > 1.0)
      throw UsageError("retained-weight floor must lie in [0, 1]");
    if (memory_budget <= 0.0) throw UsageError("memory budget must be positive");
    nullspace.validate();
  }
};

struct CornerStepInfo {
  int left_width = 0;
  int right_width = 0;  // zero for the strip solve itself
  Index product_dim = 0;
  Index corner_dim = 0;
  double retained_weight = 1.0;
  double residual = 0.0;
  std::string method;
};

struct CornerDiagnostics {
  std::vector<CornerStepInfo> steps;
  std::vector<std::string> warnings;
};

struct CornerResult {
  BlockState block;
  CornerDiagnostics diagnostics;
};

struct MergeStep {
  int left_width = 0;
  int right_width = 0;
  int left_column = 0;  // absolute x where the left block starts
  bool final_step = false;
  Index m_c = 0;
  std::vector<Edge> activated;  // bonds this merge switches on, global site ids
};

struct MergePlan {
  LatticeSpec spec;
  std::vector<MergeStep> steps;
};

namespace detail {

inline bool same_lattice(const LatticeSpec& a, const LatticeSpec& b) {
  return a.lx == b.lx && a.ly == b.ly && a.periodic_x == b.periodic_x &&
         a.periodic_y == b.periodic_y && a.jx == b.jx && a.jy == b.jy &&
         a.jz == b.jz && a.gamma == b.gamma && a.field_h == b.field_h &&
         a.field_theta == b.field_theta;
}

// The strip bonds plus all activated seam and wrap bonds must reproduce the
// lattice edge list exactly, multiplicities included. This is an internal
// consistency check on the plan builder, not a user-facing precondition.
inline void check_edge_partition(const MergePlan& plan) {
  const LatticeSpec& spec = plan.spec;
  std::multiset<std::pair<int, int>> want;
  for (const Edge& e : enumerate_edges(spec))
    want.insert(std::minmax(e.a, e.b));
  std::multiset<std::pair<int, int>> got;
  for (int x = 0; x < spec.lx; ++x)
    for (int y = 0; y + 1 < spec.ly; ++y)
      got.insert(std::minmax(spec.site(x, y), spec.site(x, y + 1)));
  for (const MergeStep& step : plan.steps)
    for (const Edge& e : step.activated)
      got.insert(std::minmax(e.a, e.b));
  if (got != want)
    throw Error("merge plan does not partition the lattice bonds");
}

}  // namespace detail

// Pairwise column-doubling schedule: every column starts as an open strip,
// adjacent blocks merge left to right, odd blocks ride along to the next
// round. Seam bonds activate at the merge that joins their columns; both
// periodic wraps activate only at the final merge.
inline MergePlan make_merge_plan(const LatticeSpec& spec, Index m_c) {
  spec.validate();
  if (spec.lx < 2)
    throw UsageError(
        "corner decomposition needs at least two columns; solve single-column "
        "lattices with the full-space solvers");
  if (m_c < 1) throw UsageError("corner dimension must be at least 1");
  MergePlan plan;
  plan.spec = spec;
  std::vector<std::pair<int, int>> blocks;  // (first column, width)
  for (int x = 0; x < spec.lx; ++x) blocks.push_back({x, 1});
  while (blocks.size() > 1) {
    std::vector<std::pair<int, int>> next;
    for (std::size_t i = 0; i + 1 < blocks.size(); i += 2) {
      MergeStep step;
      step.left_column = blocks[i].first;
      step.left_width = blocks[i].second;
      step.right_width = blocks[i + 1].second;
      step.m_c = m_c;
      step.final_step = blocks.size() == 2;
      const int xl = blocks[i].first + blocks[i].second - 1;
      const int xr = blocks[i + 1].first;
      for (int y = 0; y < spec.ly; ++y)
        step.activated.push_back({spec.site(xl, y), spec.site(xr, y)});
      if (step.final_step) {
        if (spec.periodic_x)
          for (int y = 0; y < spec.ly; ++y)
            step.activated.push_back({spec.site(spec.lx - 1, y), spec.site(0, y)});
        if (spec.periodic_y && spec.ly >= 2)
          for (int x = 0; x < spec.lx; ++x)
            step.activated.push_back({spec.site(x, spec.ly - 1), spec.site(x, 0)});
      }
      plan.steps.push_back(std::move(step));
      next.push_back({blocks[i].first, blocks[i].second + blocks[i + 1].second});
    }
    if (blocks.size() % 2 == 1) next.push_back(blocks.back());
    blocks = std::move(next);
  }
  detail::check_edge_partition(plan);
  return plan;
}

namespace detail {

// Prune exact zeros only; projected operators keep their structural sparsity
// (loss channels touch one eigenpair band) and nothing else should be dropped.
inline SparseOp sparsified(const DenseMatrix& m) {
  SparseOp s = m.sparseView(1.0, 0.0);
  s.makeCompressed();
  return s;
}

// Steady state of one block in its own basis. Dispatch by dimension: dense
// kernel, then the accelerated master solver (warm started when a previous
// state is supplied), then trajectory averaging with state accumulation.
inline void solve_block(BlockState& b, const LatticeSpec& spec,
                        const CornerSettings& settings, const DenseMatrix* warm) {
  SparseOp h = sparsified(b.hamiltonian);
  std::vector<SparseOp> jumps;
  jumps.reserve(b.lowering.size());
  for (const auto& l : b.lowering) jumps.push_back(sparsified(l));
  LiouvillianOps ops = LiouvillianOps::make(h, jumps, spec.gamma);
  if (b.dim <= settings.master_dim_max) {
    NullspaceSettings ns = settings.nullspace;
    ns.dense_dim_max = settings.dense_dim_max;
    ns.max_dim = std::max(ns.max_dim, settings.master_dim_max);
    ns.route = NullspaceSettings::Route::Auto;
    SteadyResult res = steady_state_nullspace(ops, ns, warm);
    b.rho = std::move(res.rho);
    b.residual = res.residual_max;
    b.method = res.method;
  } else {
    EnsembleSettings es = settings.ensemble;
    es.accumulate_state = true;
    EnsembleResult res = run_ensemble(ops, es, {});
    if (!res.has_state)
      throw UnsupportedError("trajectory solve did not return a state average");
    b.rho = std::move(res.rho);
    b.method = "trajectory";
    DenseMatrix resid, scratch;
    apply_liouvillian_into(ops, b.rho.rho, resid, scratch, true);
    b.residual = resid.cwiseAbs().maxCoeff();
  }
}

inline std::string format_weight(double w) {
  std::ostringstream out;
  out.precision(6);
  out << w;
  return out.str();
}

// Joins two solved blocks: ranks the product pairs, projects every carried
// operator into the corner, attaches the seam bonds (plus both wraps on the
// final step), and re-solves. The result is a block like any other, so the
// cascade can keep going.
inline BlockState merge_blocks(const BlockState& a, const BlockState& c,
                               const LatticeSpec& spec, const MergeStep& step,
                               const CornerSettings& settings,
                               CornerDiagnostics& diag) {
  if (a.height != c.height)
    throw DimensionError("cannot merge blocks of different heights");
  if (a.width != step.left_width || c.width != step.right_width)
    throw UsageError("merge step widths do not match the supplied blocks");

  const SpectralDecomposition da =
      spectral_decomposition(a.rho, settings.p_floor, settings.negative_tol);
  const SpectralDecomposition db =
      spectral_decomposition(c.rho, settings.p_floor, settings.negative_tol);
  CornerBasis basis = merge_corner(da, db, step.m_c);
  if (basis.clamped)
    diag.warnings.push_back("corner dimension clamped to the product dimension " +
                            std::to_string(basis.product_dim()));
  if (basis.retained_weight < settings.retained_floor)
    diag.warnings.push_back(
        "merge " + std::to_string(a.width) + "+" + std::to_string(c.width) +
        " retained weight " + format_weight(basis.retained_weight) +
        " is below the floor " + format_weight(settings.retained_floor) +
        "; increase the corner dimension");

  const int h = a.height;
  const int w = a.width + c.width;
  const Index m = basis.m_c;
  const bool last = step.final_step;

  // every operator the merged block will hold, plus transform scratch
  const std::size_t n_ops = a.lowering.size() + c.lowering.size() + 4 +
                            (last ? 0 : 6 * static_cast<std::size_t>(h) +
                                            a.wrap_bonds.size() + c.wrap_bonds.size());
  const double bytes = static_cast<double>(n_ops + 6) * static_cast<double>(m) *
                       static_cast<double>(m) * 16.0;
  if (bytes > settings.memory_budget)
    throw UnsupportedError("merged operator set would need about " +
                           std::to_string(static_cast<long long>(bytes / 1e6)) +
                           " MB, over the configured budget");

  BlockState out;
  out.width = w;
  out.height = h;
  out.dim = m;

  const auto ta = [&](const DenseMatrix& op) {
    return eigenbasis_transform(op, basis.vectors_a);
  };
  const auto tb = [&](const DenseMatrix& op) {
    return eigenbasis_transform(op, basis.vectors_b);
  };

  out.hamiltonian = project_left(ta(a.hamiltonian), basis) +
                    project_right(tb(c.hamiltonian), basis);

  const double g = spec.gamma;
  const auto add_bond = [&](const std::array<DenseMatrix, 3>& pa,
                            const std::array<DenseMatrix, 3>& pb) {
    out.hamiltonian += g * spec.jx * project_pair(ta(pa[0]), tb(pb[0]), basis) +
                       g * spec.jy * project_pair(ta(pa[1]), tb(pb[1]), basis) +
                       g * spec.jz * project_pair(ta(pa[2]), tb(pb[2]), basis);
  };
  for (int y = 0; y < h; ++y)
    add_bond(a.boundary_paulis.at(a.local_site(a.width - 1, y)),
             c.boundary_paulis.at(c.local_site(0, y)));
  if (last && spec.periodic_x)
    for (int y = 0; y < h; ++y)
      add_bond(a.boundary_paulis.at(a.local_site(0, y)),
               c.boundary_paulis.at(c.local_site(c.width - 1, y)));
  if (last && spec.periodic_y && h >= 2) {
    for (const auto& wb : a.wrap_bonds)
      out.hamiltonian += project_left(ta(wb), basis);
    for (const auto& wb : c.wrap_bonds)
      out.hamiltonian += project_right(tb(wb), basis);
  }

  out.lowering.reserve(a.lowering.size() + c.lowering.size());
  for (const auto& l : a.lowering) out.lowering.push_back(project_left(ta(l), basis));
  for (const auto& l : c.lowering) out.lowering.push_back(project_right(tb(l), basis));

  out.total_sx = project_left(ta(a.total_sx), basis) + project_right(tb(c.total_sx), basis);
  out.total_sy = project_left(ta(a.total_sy), basis) + project_right(tb(c.total_sy), basis);
  out.total_sz = project_left(ta(a.total_sz), basis) + project_right(tb(c.total_sz), basis);

  if (!last) {
    for (int y = 0; y < h; ++y) {
      const auto& pa = a.boundary_paulis.at(a.local_site(0, y));
      out.boundary_paulis[out.local_site(0, y)] = {project_left(ta(pa[0]), basis),
                                                   project_left(ta(pa[1]), basis),
                                                   project_left(ta(pa[2]), basis)};
      const auto& pb = c.boundary_paulis.at(c.local_site(c.width - 1, y));
      out.boundary_paulis[out.local_site(w - 1, y)] = {
          project_right(tb(pb[0]), basis), project_right(tb(pb[1]), basis),
          project_right(tb(pb[2]), basis)};
    }
    for (const auto& wb : a.wrap_bonds)
      out.wrap_bonds.push_back(project_left(ta(wb), basis));
    for (const auto& wb : c.wrap_bonds)
      out.wrap_bonds.push_back(project_right(tb(wb), basis));
  }

  // warm start: the product of the parents' stationary states, truncated to
  // the corner and renormalized; it is diagonal in this basis by construction
  DenseMatrix warm = DenseMatrix::Zero(m, m);
  const double kept = basis.joint_weights.sum();
  if (kept > 0.0)
    warm.diagonal() = (basis.joint_weights / kept).cast<Complex>();
  else
    warm.diagonal().setConstant(Complex(1.0 / static_cast<double>(m), 0.0));

  solve_block(out, spec, settings, &warm);

  CornerStepInfo info;
  info.left_width = a.width;
  info.right_width = c.width;
  info.product_dim = basis.product_dim();
  info.corner_dim = m;
  info.retained_weight = basis.retained_weight;
  info.residual = out.residual;
  info.method = out.method;
  diag.steps.push_back(std::move(info));
  return out;
}

inline constexpr std::uint32_t kBlockMagic = 0x42435351u;  // "QSCB"
inline constexpr std::uint32_t kBlockVersion = 1;

inline void put_matrix(std::ostream& out, const DenseMatrix& m) {
  put_pod(out, static_cast<std::int64_t>(m.rows()));
  put_pod(out, static_cast<std::int64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(Complex) * m.size()));
}

inline DenseMatrix get_matrix(std::istream& in) {
  std::int64_t rows = 0, cols = 0;
  get_pod(in, rows);
  get_pod(in, cols);
  if (rows < 0 || cols < 0 || rows > (1 << 15) || cols > (1 << 15))
    throw IoError("stored matrix has an implausible shape");
  DenseMatrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(Complex) * m.size()));
  if (!in) throw IoError("stored matrix is truncated");
  return m;
}

inline void save_block(const std::string& path, const BlockState& b,
                       const LatticeSpec& spec, Index m_c,
                       const CornerStepInfo& info) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write block checkpoint " + tmp);
    put_pod(out, kBlockMagic);
    put_pod(out, kBlockVersion);
    put_pod(out, std::uint32_t{0x01020304u});
    put_pod(out, static_cast<std::int32_t>(spec.lx));
    put_pod(out, static_cast<std::int32_t>(spec.ly));
    put_pod(out, static_cast<std::uint8_t>(spec.periodic_x ? 1 : 0));
    put_pod(out, static_cast<std::uint8_t>(spec.periodic_y ? 1 : 0));
    put_pod(out, spec.jx);
    put_pod(out, spec.jy);
    put_pod(out, spec.jz);
    put_pod(out, spec.gamma);
    put_pod(out, spec.field_h);
    put_pod(out, spec.field_theta);
    put_pod(out, static_cast<std::int64_t>(m_c));
    put_pod(out, static_cast<std::int32_t>(b.width));
    put_pod(out, static_cast<std::int32_t>(b.height));
    put_pod(out, static_cast<std::int64_t>(b.dim));
    put_matrix(out, b.hamiltonian);
    put_pod(out, static_cast<std::int32_t>(b.lowering.size()));
    for (const auto& l : b.lowering) put_matrix(out, l);
    put_pod(out, static_cast<std::int32_t>(b.boundary_paulis.size()));
    for (const auto& [site, trio] : b.boundary_paulis) {
      put_pod(out, static_cast<std::int32_t>(site));
      for (const auto& p : trio) put_matrix(out, p);
    }
    put_matrix(out, b.total_sx);
    put_matrix(out, b.total_sy);
    put_matrix(out, b.total_sz);
    put_pod(out, static_cast<std::int32_t>(b.wrap_bonds.size()));
    for (const auto& wb : b.wrap_bonds) put_matrix(out, wb);
    put_matrix(out, b.rho.rho);
    put_pod(out, b.residual);
    put_pod(out, static_cast<std::int32_t>(b.method.size()));
    out.write(b.method.data(), static_cast<std::streamsize>(b.method.size()));
    put_pod(out, static_cast<std::int32_t>(info.left_width));
    put_pod(out, static_cast<std::int32_t>(info.right_width));
    put_pod(out, static_cast<std::int64_t>(info.product_dim));
    put_pod(out, info.retained_weight);
    if (!out) throw IoError("short write on block checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// Returns false when no checkpoint exists. A file written for different
// lattice parameters or corner dimension is refused rather than ignored.
inline bool load_block(const std::string& path, const LatticeSpec& spec, Index m_c,
                       BlockState& b, CornerStepInfo& info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::uint32_t magic = 0, version = 0, layout = 0;
  get_pod(in, magic);
  get_pod(in, version);
  get_pod(in, layout);
  if (!in || magic != kBlockMagic) throw IoError("not a block checkpoint: " + path);
  if (version != kBlockVersion || layout != 0x01020304u)
    throw IoError("block checkpoint has an unsupported version or byte order");
  std::int32_t lx = 0, ly = 0;
  std::uint8_t px = 0, py = 0;
  double jx = 0, jy = 0, jz = 0, gamma = 0, fh = 0, ft = 0;
  std::int64_t saved_mc = 0;
  get_pod(in, lx);
  get_pod(in, ly);
  get_pod(in, px);
  get_pod(in, py);
  get_pod(in, jx);
  get_pod(in, jy);
  get_pod(in, jz);
  get_pod(in, gamma);
  get_pod(in, fh);
  get_pod(in, ft);
  get_pod(in, saved_mc);
  if (!in) throw IoError("block checkpoint is truncated: " + path);
  if (lx != spec.lx || ly != spec.ly || (px != 0) != spec.periodic_x ||
      (py != 0) != spec.periodic_y || jx != spec.jx || jy != spec.jy ||
      jz != spec.jz || gamma != spec.gamma || fh != spec.field_h ||
      ft != spec.field_theta || saved_mc != static_cast<std::int64_t>(m_c))
    throw UsageError("block checkpoint " + path +
                     " was written for different parameters; remove it or point "
                     "the run at a fresh directory");
  std::int32_t width = 0, height = 0;
  std::int64_t dim = 0;
  get_pod(in, width);
  get_pod(in, height);
  get_pod(in, dim);
  b = BlockState{};
  b.width = width;
  b.height = height;
  b.dim = dim;
  b.hamiltonian = get_matrix(in);
  std::int32_t n = 0;
  get_pod(in, n);
  for (std::int32_t i = 0; i < n; ++i) b.lowering.push_back(get_matrix(in));
  get_pod(in, n);
  for (std::int32_t i = 0; i < n; ++i) {
    std::int32_t site = 0;
    get_pod(in, site);
    std::array<DenseMatrix, 3> trio = {get_matrix(in), get_matrix(in), get_matrix(in)};
    b.boundary_paulis[site] = std::move(trio);
  }
  b.total_sx = get_matrix(in);
  b.total_sy = get_matrix(in);
  b.total_sz = get_matrix(in);
  get_pod(in, n);
  for (std::int32_t i = 0; i < n; ++i) b.wrap_bonds.push_back(get_matrix(in));
  b.rho = DensityMatrix{get_matrix(in)};
  get_pod(in, b.residual);
  get_pod(in, n);
  if (!in || n < 0 || n > 64) throw IoError("block checkpoint is truncated: " + path);
  b.method.resize(static_cast<std::size_t>(n));
  in.read(b.method.data(), n);
  std::int32_t lw = 0, rw = 0;
  std::int64_t pdim = 0;
  double retained = 1.0;
  get_pod(in, lw);
  get_pod(in, rw);
  get_pod(in, pdim);
  get_pod(in, retained);
  if (!in) throw IoError("block checkpoint is truncated: " + path);
  info.left_width = lw;
  info.right_width = rw;
  info.product_dim = pdim;
  info.corner_dim = b.dim;
  info.retained_weight = retained;
  info.residual = b.residual;
  info.method = b.method + " (checkpoint)";
  return true;
}

inline std::string block_path(const std::string& dir, int width, Index m_c) {
  return dir + "/block_w" + std::to_string(width) + "_m" + std::to_string(m_c) +
         ".qscb";
}

}  // namespace detail

// Runs the merge cascade for `plan`. Columns of a uniform lattice are
// interchangeable, so each distinct block width is built once and reused;
// the per-width results can be checkpointed and picked up by a later run.
inline CornerResult corner_steady_state(const LatticeSpec& spec, const MergePlan& plan,
                                        const CornerSettings& settings = {}) {
  settings.validate();
  spec.validate();
  if (!detail::same_lattice(spec, plan.spec))
    throw UsageError("merge plan was built for a different lattice");
  if (plan.steps.empty()) throw UsageError("merge plan has no steps");
  const bool checkpointing = !settings.checkpoint_dir.empty();
  if (checkpointing) std::filesystem::create_directories(settings.checkpoint_dir);

  CornerDiagnostics diag;
  std::map<int, BlockState> by_width;

  {
    BlockState strip;
    CornerStepInfo info;
    const std::string path =
        checkpointing ? detail::block_path(settings.checkpoint_dir, 1, 0) : "";
    if (!checkpointing || !detail::load_block(path, spec, 0, strip, info)) {
      strip = make_strip_block(spec);
      detail::solve_block(strip, spec, settings, nullptr);
      info.left_width = 1;
      info.right_width = 0;
      info.product_dim = strip.dim;
      info.corner_dim = strip.dim;
      info.retained_weight = 1.0;
      info.residual = strip.residual;
      info.method = strip.method;
      if (checkpointing) detail::save_block(path, strip, spec, 0, info);
    }
    diag.steps.push_back(std::move(info));
    by_width[1] = std::move(strip);
  }

  for (const MergeStep& step : plan.steps) {
    const int w = step.left_width + step.right_width;
    if (by_width.count(w)) continue;  // same width, same couplings: reuse
    const auto left = by_width.find(step.left_width);
    const auto right = by_width.find(step.right_width);
    if (left == by_width.end() || right == by_width.end())
      throw UsageError("merge plan refers to a block width that was never built");
    BlockState merged;
    CornerStepInfo info;
    const std::string path =
        checkpointing ? detail::block_path(settings.checkpoint_dir, w, step.m_c) : "";
    if (checkpointing && detail::load_block(path, spec, step.m_c, merged, info)) {
      diag.steps.push_back(std::move(info));
    } else {
      merged = detail::merge_blocks(left->second, right->second, spec, step,
                                    settings, diag);
      if (checkpointing)
        detail::save_block(path, merged, spec, step.m_c, diag.steps.back());
    }
    by_width[w] = std::move(merged);
  }

  auto final_it = by_width.find(spec.lx);
  if (final_it == by_width.end())
    throw UsageError("merge plan never produced the full lattice width");
  CornerResult out;
  out.block = std::move(final_it->second);
  out.diagnostics = std::move(diag);
  return out;
}

// Real expectation value in the corner basis. tr(rho O) via the elementwise
// contraction; the imaginary part is a consistency check, not data.
inline double corner_expectation(const BlockState& block, const DenseMatrix& op) {
  if (op.rows() != block.dim || op.cols() != block.dim)
    throw DimensionError("operator does not match the corner dimension");
  const Complex v = block.rho.rho.transpose().cwiseProduct(op).sum();
  if (std::abs(v.imag()) > 1e-9)
    throw HermiticityError("corner expectation has imaginary part " +
                               std::to_string(v.imag()),
                           v.imag());
  return v.real();
}

struct CornerConvergencePoint {
  Index m_c = 0;
  double value = 0.0;
  double error = 0.0;
};

struct CornerConvergence {
  std::vector<CornerConvergencePoint> trace;
  CornerResult result;
  Index converged_m_c = 0;
};

// Reruns the cascade along an ascending corner-dimension schedule until the
// observable moves by less than `tol` between consecutive points (widened by
// the estimates' own errors when the solves are stochastic). Exhausting the
// schedule is an error; the message carries the full trace.
template <typename Observable>
CornerConvergence converge_in_corner_dim(const LatticeSpec& spec,
                                         const std::vector<Index>& schedule,
                                         Observable&& observable, double tol,
                                         const CornerSettings& base = {}) {
  if (schedule.empty()) throw UsageError("corner dimension schedule is empty");
  for (std::size_t k = 1; k < schedule.size(); ++k)
    if (schedule[k] <= schedule[k - 1])
      throw UsageError("corner dimension schedule must be strictly increasing");
  if (tol <= 0.0) throw UsageError("convergence tolerance must be positive");

  CornerConvergence out;
  double prev = 0.0, prev_err = 0.0, delta = 0.0;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    CornerSettings settings = base;
    settings.m_c = schedule[k];
    const MergePlan plan = make_merge_plan(spec, schedule[k]);
    CornerResult res = corner_steady_state(spec, plan, settings);
    const ObservableEstimate est = observable(static_cast<const CornerResult&>(res));
    out.trace.push_back({schedule[k], est.value, est.error});
    if (k > 0) {
      delta = std::abs(est.value - prev);
      if (delta < tol + est.error + prev_err) {
        out.result = std::move(res);
        out.converged_m_c = schedule[k];
        return out;
      }
    }
    prev = est.value;
    prev_err = est.error;
  }
  std::ostringstream msg;
  msg.precision(12);
  msg << "corner observable did not settle within " << tol << "; trace:";
  for (const auto& p : out.trace) msg << " M=" << p.m_c << " -> " << p.value;
  throw ConvergenceError(msg.str(), delta, 0.0);
}

}  // namespace qsteady
