// Scratch probe: truncation profile of the 2x2 corner against the exact
// solution, plus a brute-force cross-check of the merged generator.

#include <cstdio>
#include <vector>

#include "qsteady/corner.hpp"
#include "qsteady/density.hpp"
#include "qsteady/lattice.hpp"
#include "qsteady/master.hpp"
#include "qsteady/operators.hpp"

namespace qs = qsteady;
using qs::Complex;
using qs::DenseMatrix;
using qs::Index;

namespace {

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

double site_average_z(const qs::DensityMatrix& rho, const qs::LatticeSpec& spec) {
  double sum = 0.0;
  for (int s = 0; s < spec.n_sites(); ++s) {
    const DenseMatrix op =
        DenseMatrix(qs::site_operator(spec.n_sites(), s, qs::PauliKind::Z));
    sum += rho.rho.transpose().cwiseProduct(op).sum().real();
  }
  return sum / spec.n_sites();
}

void profile(double jy) {
  qs::LatticeSpec spec;
  spec.jy = jy;
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const double mz_full = site_average_z(qs::steady_state_nullspace(ops).rho, spec);
  std::printf("jy=%.3f  full Mz=%+.6f\n", jy, mz_full);
  for (Index m : {Index{4}, Index{6}, Index{8}, Index{10}, Index{12}, Index{14},
                  Index{16}}) {
    const qs::MergePlan plan = qs::make_merge_plan(spec, m);
    const qs::CornerResult res = qs::corner_steady_state(spec, plan, {});
    const double mz =
        qs::corner_expectation(res.block, res.block.total_sz) / spec.n_sites();
    std::printf("  M=%2ld  Mz=%+.6f  err=%.3e  retained=%.8f\n",
                static_cast<long>(m), mz, std::abs(mz - mz_full),
                res.diagnostics.steps.back().retained_weight);
  }
}

// Builds the 2x2 generator directly on the strip-product space (left column
// tensor right column), projects it with the explicit isometry, and solves.
// Independent of merge_blocks end to end. With periodic_strip the columns are
// solved as rings (their own wrap bond included), and the merge activates
// only the horizontal bonds.
void brute_force(double jy, Index m_c, bool periodic_strip) {
  qs::LatticeSpec spec;
  spec.jy = jy;
  qs::LatticeSpec strip = spec;
  strip.lx = 1;
  strip.periodic_x = false;
  strip.periodic_y = periodic_strip;

  const DenseMatrix h_strip = DenseMatrix(qs::build_hamiltonian(strip));
  const double root = std::sqrt(spec.gamma);
  std::vector<DenseMatrix> low = {
      root * DenseMatrix(qs::site_operator(2, 0, qs::PauliKind::Minus)),
      root * DenseMatrix(qs::site_operator(2, 1, qs::PauliKind::Minus))};
  std::array<std::array<DenseMatrix, 3>, 2> pauli;
  for (int s = 0; s < 2; ++s)
    pauli[s] = {DenseMatrix(qs::site_operator(2, s, qs::PauliKind::X)),
                DenseMatrix(qs::site_operator(2, s, qs::PauliKind::Y)),
                DenseMatrix(qs::site_operator(2, s, qs::PauliKind::Z))};

  // strip steady states and the corner basis
  const qs::LiouvillianOps strip_ops = qs::LiouvillianOps::for_lattice(strip);
  const qs::DensityMatrix rho_strip = qs::steady_state_nullspace(strip_ops).rho;
  const auto d = qs::spectral_decomposition(rho_strip, 1e-12, 1e-6);
  const qs::CornerBasis basis = qs::merge_corner(d, d, m_c);
  const DenseMatrix b = basis.isometry();

  // product-space generator: strips, seam bonds (doubled by the x wrap),
  // vertical wraps (double the internal strip bond)
  const DenseMatrix i4 = DenseMatrix::Identity(4, 4);
  DenseMatrix h = kron(h_strip, i4) + kron(i4, h_strip);
  const double g = spec.gamma;
  const double js[3] = {spec.jx, spec.jy, spec.jz};
  for (int y = 0; y < 2; ++y)
    for (int a = 0; a < 3; ++a)
      h += 2.0 * g * js[a] * kron(pauli[y][a], pauli[y][a]);
  if (!periodic_strip)
    for (int a = 0; a < 3; ++a)
      h += g * js[a] * kron((pauli[1][a] * pauli[0][a]).eval(), i4) +
           g * js[a] * kron(i4, (pauli[1][a] * pauli[0][a]).eval());

  std::vector<qs::SparseOp> jumps;
  DenseMatrix hp = b.adjoint() * h * b;
  std::vector<qs::SparseOp> pj;
  for (int s = 0; s < 2; ++s) {
    pj.push_back((b.adjoint() * kron(low[s], i4) * b).sparseView(1.0, 0.0));
    pj.push_back((b.adjoint() * kron(i4, low[s]) * b).sparseView(1.0, 0.0));
  }
  const qs::LiouvillianOps cops =
      qs::LiouvillianOps::make(hp.sparseView(1.0, 0.0), pj, spec.gamma);
  qs::NullspaceSettings ns;
  const qs::DensityMatrix rho = qs::steady_state_nullspace(cops, ns).rho;
  DenseMatrix sz = DenseMatrix::Zero(16, 16);
  for (int s = 0; s < 2; ++s)
    sz += kron(pauli[s][2], i4) + kron(i4, pauli[s][2]);
  const DenseMatrix szp = b.adjoint() * sz * b;
  const double mz = rho.rho.transpose().cwiseProduct(szp).sum().real() / 4.0;
  std::printf("brute force jy=%.3f M=%2ld %s  Mz=%+.6f\n", jy,
              static_cast<long>(m_c), periodic_strip ? "ring strips" : "open strips",
              mz);
}

}  // namespace

int main() {
  for (double jy = 0.90; jy < 1.001; jy += 0.01) {
    qs::LatticeSpec spec;
    spec.jy = jy;
    const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
    const double mz_full =
        site_average_z(qs::steady_state_nullspace(ops).rho, spec);
    const qs::MergePlan plan = qs::make_merge_plan(spec, 8);
    const qs::CornerResult res = qs::corner_steady_state(spec, plan, {});
    const double mz =
        qs::corner_expectation(res.block, res.block.total_sz) / spec.n_sites();
    std::printf("jy=%.3f  full=%+.7f  corner8=%+.7f  err=%.3e\n", jy, mz_full,
                mz, std::abs(mz - mz_full));
  }
  return 0;
}
