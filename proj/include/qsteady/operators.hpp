#pragma once

#include <cmath>
#include <fstream>
#include <vector>

#include "qsteady/lattice.hpp"
#include "qsteady/types.hpp"

namespace qsteady {

// Basis convention: computational z basis with site j stored in bit j of the
// basis-state index, so site 0 is the fastest-varying factor. Bit value 0 is
// spin down, bit value 1 is spin up, and sigma_z = diag(-1, +1) in that order.
enum class PauliKind { X, Y, Z, Plus, Minus };

inline Eigen::Matrix2cd pauli_matrix(PauliKind kind) {
  Eigen::Matrix2cd m = Eigen::Matrix2cd::Zero();
  const Complex im(0.0, 1.0);
  switch (kind) {
    case PauliKind::X:
      m(0, 1) = 1.0;
      m(1, 0) = 1.0;
      break;
    case PauliKind::Y:
      m(0, 1) = im;
      m(1, 0) = -im;
      break;
    case PauliKind::Z:
      m(0, 0) = -1.0;
      m(1, 1) = 1.0;
      break;
    case PauliKind::Plus:
      m(1, 0) = 1.0;
      break;
    case PauliKind::Minus:
      m(0, 1) = 1.0;
      break;
  }
  return m;
}

namespace detail {

inline void check_sparse_dim(int n_sites) {
  if (n_sites > 30)
    throw DimensionError("Hilbert dimension exceeds what full-space operators support; "
                         "use the corner solver for lattices this large");
}

}  // namespace detail

// Single-site operator embedded into the n-site space.
inline SparseOp site_operator(int n_sites, int site, PauliKind kind) {
  if (n_sites < 1) throw UsageError("site_operator needs at least one site");
  if (site < 0 || site >= n_sites) throw UsageError("site index out of range");
  detail::check_sparse_dim(n_sites);
  const Index dim = Index{1} << n_sites;
  const Eigen::Matrix2cd a = pauli_matrix(kind);
  std::vector<Triplet> trips;
  trips.reserve(static_cast<std::size_t>(dim));
  const Index mask = Index{1} << site;
  for (Index col = 0; col < dim; ++col) {
    const int b = static_cast<int>((col >> site) & 1);
    for (int bp = 0; bp < 2; ++bp) {
      const Complex v = a(bp, b);
      if (v == Complex(0.0, 0.0)) continue;
      const Index row = (col & ~mask) | (Index{bp} << site);
      trips.emplace_back(row, col, v);
    }
  }
  SparseOp op(dim, dim);
  op.setFromTriplets(trips.begin(), trips.end());
  return op;
}

inline SparseOp site_operator(const LatticeSpec& spec, int site, PauliKind kind) {
  spec.validate();
  return site_operator(spec.n_sites(), site, kind);
}

// Anisotropic XYZ Hamiltonian with an optional uniform in-plane drive:
//   H = sum_bonds (Jx sx sx + Jy sy sy + Jz sz sz)
//     + h sum_sites (cos(theta) sx + sin(theta) sy),
// all scaled by gamma, since LatticeSpec quotes couplings in units of the
// loss rate.
// Assembled in one pass over basis states per bond instead of via Kronecker
// products; the flip amplitude of (sx sx + sy sy) depends only on whether the
// two bits agree.
inline SparseOp build_hamiltonian(const LatticeSpec& spec, int max_sites = 36) {
  spec.validate();
  if (spec.n_sites() > max_sites)
    throw DimensionError("lattice too large for a full-space Hamiltonian; "
                         "use the corner solver");
  detail::check_sparse_dim(spec.n_sites());
  const Index dim = static_cast<Index>(spec.dim());
  const double g = spec.gamma;
  const auto edges = enumerate_edges(spec);

  std::vector<Triplet> trips;
  trips.reserve(static_cast<std::size_t>(dim) *
                (2 * edges.size() + (spec.field_h != 0.0 ? spec.n_sites() : 0) + 1));

  for (const Edge& e : edges) {
    const Index ma = Index{1} << e.a;
    const Index mb = Index{1} << e.b;
    for (Index col = 0; col < dim; ++col) {
      const bool ba = (col & ma) != 0;
      const bool bb = (col & mb) != 0;
      const double za = ba ? 1.0 : -1.0;
      const double zb = bb ? 1.0 : -1.0;
      trips.emplace_back(col, col, Complex(g * spec.jz * za * zb, 0.0));
      // sx sx flips both bits with amplitude 1; sy sy flips them with
      // amplitude -1 when aligned and +1 when anti-aligned.
      const double flip = g * (spec.jx + spec.jy * (ba == bb ? -1.0 : 1.0));
      if (flip != 0.0) trips.emplace_back(col ^ ma ^ mb, col, Complex(flip, 0.0));
    }
  }

  if (spec.field_h != 0.0) {
    const double hx = g * spec.field_h * std::cos(spec.field_theta);
    const double hy = g * spec.field_h * std::sin(spec.field_theta);
    for (int j = 0; j < spec.n_sites(); ++j) {
      const Index mj = Index{1} << j;
      for (Index col = 0; col < dim; ++col) {
        const bool bj = (col & mj) != 0;
        const Complex v(hx, bj ? hy : -hy);
        if (v != Complex(0.0, 0.0)) trips.emplace_back(col ^ mj, col, v);
      }
    }
  }

  SparseOp h(dim, dim);
  h.setFromTriplets(trips.begin(), trips.end());
  h.prune([](Index, Index, const Complex& v) { return v != Complex(0.0, 0.0); });
  return h;
}

// One local loss channel sqrt(gamma) sigma^- per site.
inline std::vector<SparseOp> build_jump_operators(const LatticeSpec& spec) {
  spec.validate();
  detail::check_sparse_dim(spec.n_sites());
  const double root = std::sqrt(spec.gamma);
  std::vector<SparseOp> jumps;
  jumps.reserve(static_cast<std::size_t>(spec.n_sites()));
  for (int j = 0; j < spec.n_sites(); ++j) {
    jumps.push_back(root * site_operator(spec.n_sites(), j, PauliKind::Minus));
  }
  return jumps;
}

inline double max_abs(const SparseOp& op) {
  double m = 0.0;
  for (int k = 0; k < op.outerSize(); ++k)
    for (SparseOp::InnerIterator it(op, k); it; ++it)
      m = std::max(m, std::abs(it.value()));
  return m;
}

inline double hermiticity_error(const SparseOp& op) {
  const SparseOp diff = op - SparseOp(op.adjoint());
  return max_abs(diff);
}

// Text form "row col real imag", one entry per line, zero-based indices.
inline void write_coo_text(std::ostream& out, const SparseOp& op) {
  out.precision(17);
  out << op.rows() << " " << op.cols() << "\n";
  for (int k = 0; k < op.outerSize(); ++k)
    for (SparseOp::InnerIterator it(op, k); it; ++it)
      out << it.row() << " " << it.col() << " " << it.value().real() << " "
          << it.value().imag() << "\n";
}

inline void save_coo_text(const std::string& path, const SparseOp& op) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write operator file '" + path + "'");
  write_coo_text(out, op);
}

inline SparseOp read_coo_text(std::istream& in) {
  Index rows = 0;
  Index cols = 0;
  if (!(in >> rows >> cols)) throw IoError("operator file has no size header");
  if (rows < 0 || cols < 0) throw IoError("operator file has a negative size");
  std::vector<Triplet> trips;
  Index r = 0;
  Index c = 0;
  double re = 0.0;
  double im = 0.0;
  while (in >> r >> c >> re >> im) {
    if (r < 0 || r >= rows || c < 0 || c >= cols)
      throw IoError("operator entry out of bounds");
    trips.emplace_back(r, c, Complex(re, im));
  }
  if (!in.eof() && in.fail()) throw IoError("malformed operator entry");
  SparseOp op(rows, cols);
  op.setFromTriplets(trips.begin(), trips.end());
  return op;
}

inline SparseOp load_coo_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open operator file '" + path + "'");
  return read_coo_text(in);
}

// Everything a steady-state pipeline needs about one lattice in one place.
// `sites` maps local operator slots to lattice site ids; for full-space sets
// it is just 0..n-1, for corner-space sets it tracks the merge ordering.
struct OperatorSet {
  std::vector<int> sites;
  Index dim = 0;
  bool full_space = true;
  SparseOp hamiltonian;
  std::vector<SparseOp> jumps;
  std::vector<SparseOp> sx, sy, sz;
  SparseOp sum_sx, sum_sy, sum_sz;

  int n_sites() const { return static_cast<int>(sites.size()); }

  void finalize_sums() {
    sum_sx = SparseOp(dim, dim);
    sum_sy = SparseOp(dim, dim);
    sum_sz = SparseOp(dim, dim);
    for (std::size_t j = 0; j < sites.size(); ++j) {
      sum_sx += sx[j];
      sum_sy += sy[j];
      sum_sz += sz[j];
    }
  }
};

inline OperatorSet build_operator_set(const LatticeSpec& spec, int max_sites = 36) {
  OperatorSet ops;
  ops.dim = static_cast<Index>(spec.dim());
  ops.full_space = true;
  ops.hamiltonian = build_hamiltonian(spec, max_sites);
  ops.jumps = build_jump_operators(spec);
  for (int j = 0; j < spec.n_sites(); ++j) {
    ops.sites.push_back(j);
    ops.sx.push_back(site_operator(spec.n_sites(), j, PauliKind::X));
    ops.sy.push_back(site_operator(spec.n_sites(), j, PauliKind::Y));
    ops.sz.push_back(site_operator(spec.n_sites(), j, PauliKind::Z));
  }
  ops.finalize_sums();
  return ops;
}

}  // namespace qsteady
