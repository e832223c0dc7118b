#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include "qsteady/types.hpp"

namespace qsteady {

// Dense density matrix. Solvers keep it Hermitian with unit trace up to
// roundoff; `enforce` projects back onto that set.
struct DensityMatrix {
  DenseMatrix rho;

  DensityMatrix() = default;
  explicit DensityMatrix(DenseMatrix m) : rho(std::move(m)) {
    if (rho.rows() != rho.cols()) throw DimensionError("density matrix must be square");
  }

  Index dim() const { return rho.rows(); }

  double hermiticity_error() const {
    return (rho - rho.adjoint()).cwiseAbs().maxCoeff();
  }

  double trace_error() const { return std::abs(rho.trace() - Complex(1.0, 0.0)); }

  double min_eigenvalue() const {
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(0.5 * (rho + rho.adjoint()),
                                                  Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }

  void enforce() {
    rho = 0.5 * (rho + rho.adjoint());
    const double tr = rho.trace().real();
    if (std::abs(tr) < 1e-300) throw PositivityError("density matrix has zero trace", 0.0);
    rho /= tr;
  }
};

inline DensityMatrix pure_state_density(const DenseVector& psi) {
  const double n2 = psi.squaredNorm();
  if (n2 <= 0.0) throw UsageError("cannot form a state from the zero vector");
  DensityMatrix out;
  out.rho = (psi * psi.adjoint()) / n2;
  return out;
}

// All spins down: basis state 0, the dark state of the local loss channels.
inline DenseVector all_down_state(Index dim) {
  DenseVector psi = DenseVector::Zero(dim);
  psi(0) = 1.0;
  return psi;
}

inline double trace_norm_hermitian(const DenseMatrix& m) {
  Eigen::SelfAdjointEigenSolver<DenseMatrix> es(0.5 * (m + m.adjoint()),
                                                Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().sum();
}

inline double trace_distance(const DensityMatrix& a, const DensityMatrix& b) {
  if (a.dim() != b.dim()) throw DimensionError("trace distance needs equal dimensions");
  return 0.5 * trace_norm_hermitian(a.rho - b.rho);
}

// Eigendecomposition of a state, probabilities sorted in descending order.
// Weights below `p_floor` are kept as exact zeros while their eigenvectors
// stay in `states`: zero-probability directions still matter to observables
// built from transition elements.
struct SpectralDecomposition {
  RealVector probabilities;
  DenseMatrix states;
  double p_floor = 1e-12;

  Index dim() const { return states.rows(); }

  int significant() const {
    int n = 0;
    for (Index i = 0; i < probabilities.size(); ++i)
      if (probabilities(i) > 0.0) ++n;
    return n;
  }
};

inline SpectralDecomposition spectral_decomposition(const DensityMatrix& rho,
                                                    double p_floor = 1e-12,
                                                    double negative_tol = 1e-8) {
  Eigen::SelfAdjointEigenSolver<DenseMatrix> es(0.5 * (rho.rho + rho.rho.adjoint()));
  if (es.info() != Eigen::Success)
    throw Error("eigendecomposition of the density matrix failed");
  const Index n = rho.dim();
  SpectralDecomposition out;
  out.p_floor = p_floor;
  out.probabilities.resize(n);
  out.states.resize(n, n);
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -negative_tol)
    throw PositivityError("density matrix has a significantly negative eigenvalue",
                          min_eig);
  // Ascending from Eigen; flip to descending.
  for (Index i = 0; i < n; ++i) {
    const Index src = n - 1 - i;
    const double p = es.eigenvalues()(src);
    out.probabilities(i) = (p > p_floor) ? p : 0.0;
    out.states.col(i) = es.eigenvectors().col(src);
  }
  return out;
}

// Raw binary snapshot: magic, version, layout check word, dimension, then the
// row-major complex matrix. A small JSON sidecar with provenance is written
// next to it by callers that have context to record.
namespace detail {

inline constexpr char kSnapshotMagic[4] = {'Q', 'S', 'D', 'M'};
inline constexpr std::uint32_t kSnapshotVersion = 1;
inline constexpr std::uint32_t kSnapshotLayout = 0x01020304u;

}  // namespace detail

inline void write_density_snapshot(const std::string& path, const DensityMatrix& rho) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write snapshot '" + path + "'");
  out.write(detail::kSnapshotMagic, 4);
  const std::uint32_t version = detail::kSnapshotVersion;
  const std::uint32_t layout = detail::kSnapshotLayout;
  const std::int64_t dim = rho.dim();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&layout), sizeof layout);
  out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  for (Index r = 0; r < rho.dim(); ++r) {
    for (Index c = 0; c < rho.dim(); ++c) {
      const Complex v = rho.rho(r, c);
      const double re = v.real();
      const double im = v.imag();
      out.write(reinterpret_cast<const char*>(&re), sizeof re);
      out.write(reinterpret_cast<const char*>(&im), sizeof im);
    }
  }
  if (!out) throw IoError("short write on snapshot '" + path + "'");
}

inline DensityMatrix read_density_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open snapshot '" + path + "'");
  char magic[4] = {};
  std::uint32_t version = 0;
  std::uint32_t layout = 0;
  std::int64_t dim = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&layout), sizeof layout);
  in.read(reinterpret_cast<char*>(&dim), sizeof dim);
  if (!in || std::memcmp(magic, detail::kSnapshotMagic, 4) != 0)
    throw IoError("'" + path + "' is not a density snapshot");
  if (version != detail::kSnapshotVersion)
    throw IoError("snapshot '" + path + "' has unsupported version");
  if (layout != detail::kSnapshotLayout)
    throw IoError("snapshot '" + path + "' was written with a different byte order");
  if (dim < 1 || dim > (std::int64_t{1} << 15))
    throw IoError("snapshot '" + path + "' has an implausible dimension");
  DensityMatrix out;
  out.rho.resize(dim, dim);
  for (std::int64_t r = 0; r < dim; ++r) {
    for (std::int64_t c = 0; c < dim; ++c) {
      double re = 0.0;
      double im = 0.0;
      in.read(reinterpret_cast<char*>(&re), sizeof re);
      in.read(reinterpret_cast<char*>(&im), sizeof im);
      out.rho(r, c) = Complex(re, im);
    }
  }
  if (!in) throw IoError("snapshot '" + path + "' is truncated");
  return out;
}

}  // namespace qsteady
