// Corner-space renormalization: pair ranking, projection kernels, the merge
// cascade against full-space solutions, checkpointing, and the convergence
// loop over corner dimensions.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qsteady/corner.hpp"
#include "qsteady/density.hpp"
#include "qsteady/lattice.hpp"
#include "qsteady/master.hpp"
#include "qsteady/operators.hpp"
#include "qsteady/rng.hpp"

namespace qs = qsteady;
using qs::Complex;
using qs::DenseMatrix;
using qs::Index;

namespace {

qs::SpectralDecomposition decomp_from_probabilities(std::vector<double> p) {
  qs::SpectralDecomposition d;
  d.probabilities =
      Eigen::Map<qs::RealVector>(p.data(), static_cast<Index>(p.size()));
  d.states = DenseMatrix::Identity(d.probabilities.size(), d.probabilities.size());
  return d;
}

DenseMatrix random_complex(Index rows, Index cols, qs::CounterRng& rng) {
  DenseMatrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i)
      m(i, j) = Complex(rng.next_double() - 0.5, rng.next_double() - 0.5);
  return m;
}

DenseMatrix random_hermitian(Index dim, qs::CounterRng& rng) {
  const DenseMatrix m = random_complex(dim, dim, rng);
  return (m + m.adjoint()).eval() / 2.0;
}

qs::DensityMatrix random_density(Index dim, qs::CounterRng& rng) {
  const DenseMatrix m = random_complex(dim, dim, rng);
  qs::DensityMatrix rho{(m * m.adjoint()).eval()};
  rho.enforce();
  return rho;
}

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Full-space magnetization components for the cross checks.
double site_average(const qs::DensityMatrix& rho, const qs::LatticeSpec& spec,
                    qs::PauliKind kind) {
  double sum = 0.0;
  for (int s = 0; s < spec.n_sites(); ++s) {
    const DenseMatrix op = DenseMatrix(qs::site_operator(spec.n_sites(), s, kind));
    sum += rho.rho.transpose().cwiseProduct(op).sum().real();
  }
  return sum / spec.n_sites();
}

qs::DensityMatrix full_space_steady_state(const qs::LatticeSpec& spec) {
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  return qs::steady_state_nullspace(ops).rho;
}

double corner_site_average(const qs::BlockState& block, const DenseMatrix& total) {
  return qs::corner_expectation(block, total) / block.n_sites();
}

}  // namespace

TEST(MergeCorner, RanksPairsByJointWeight) {
  const auto a = decomp_from_probabilities({0.9, 0.1});
  const auto b = decomp_from_probabilities({0.8, 0.2});
  const qs::CornerBasis basis = qs::merge_corner(a, b, 2);
  ASSERT_EQ(basis.m_c, 2);
  EXPECT_EQ(basis.pairs[0], std::make_pair(Index{0}, Index{0}));
  EXPECT_EQ(basis.pairs[1], std::make_pair(Index{0}, Index{1}));
  EXPECT_NEAR(basis.joint_weights(0), 0.72, 1e-15);
  EXPECT_NEAR(basis.joint_weights(1), 0.18, 1e-15);
  EXPECT_NEAR(basis.retained_weight, 0.90, 1e-12);
  EXPECT_FALSE(basis.clamped);
}

TEST(MergeCorner, BreaksTiesLexicographically) {
  const auto a = decomp_from_probabilities({0.5, 0.5});
  const auto b = decomp_from_probabilities({0.5, 0.5});
  const qs::CornerBasis basis = qs::merge_corner(a, b, 3);
  ASSERT_EQ(basis.pairs.size(), 3u);
  EXPECT_EQ(basis.pairs[0], std::make_pair(Index{0}, Index{0}));
  EXPECT_EQ(basis.pairs[1], std::make_pair(Index{0}, Index{1}));
  EXPECT_EQ(basis.pairs[2], std::make_pair(Index{1}, Index{0}));
  EXPECT_NEAR(basis.retained_weight, 0.75, 1e-12);
}

TEST(MergeCorner, AgreesWithAFullSortOnRandomWeights) {
  qs::CounterRng rng(7, 0);
  std::vector<double> pa(5), pb(7);
  // quantized draws produce deliberate ties across the two factors
  for (double& v : pa) v = std::floor(rng.next_double() * 5.0) + 1.0;
  for (double& v : pb) v = std::floor(rng.next_double() * 5.0) + 1.0;
  std::sort(pa.rbegin(), pa.rend());
  std::sort(pb.rbegin(), pb.rend());
  const auto a = decomp_from_probabilities(pa);
  const auto b = decomp_from_probabilities(pb);

  std::vector<std::pair<Index, Index>> cells;
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 7; ++j) cells.push_back({i, j});
  std::sort(cells.begin(), cells.end(), [&](const auto& x, const auto& y) {
    const double wx = pa[static_cast<std::size_t>(x.first)] *
                      pb[static_cast<std::size_t>(x.second)];
    const double wy = pa[static_cast<std::size_t>(y.first)] *
                      pb[static_cast<std::size_t>(y.second)];
    if (wx != wy) return wx > wy;
    return x < y;
  });

  for (const Index m : {Index{1}, Index{5}, Index{17}, Index{35}}) {
    const qs::CornerBasis basis = qs::merge_corner(a, b, m);
    ASSERT_EQ(basis.pairs.size(), static_cast<std::size_t>(m));
    for (Index k = 0; k < m; ++k)
      EXPECT_EQ(basis.pairs[static_cast<std::size_t>(k)],
                cells[static_cast<std::size_t>(k)])
          << "rank " << k << " at corner dimension " << m;
  }
}

TEST(MergeCorner, ClampsAtTheProductDimension) {
  const auto a = decomp_from_probabilities({0.7, 0.3});
  const auto b = decomp_from_probabilities({0.6, 0.4});
  const qs::CornerBasis basis = qs::merge_corner(a, b, 100);
  EXPECT_TRUE(basis.clamped);
  EXPECT_EQ(basis.m_c, 4);
  EXPECT_DOUBLE_EQ(basis.retained_weight, 1.0);
}

TEST(MergeCorner, RetainedWeightIsMonotoneInTheCornerDimension) {
  qs::CounterRng rng(11, 0);
  std::vector<double> pa(6), pb(5);
  for (double& v : pa) v = rng.next_double() + 1e-3;
  for (double& v : pb) v = rng.next_double() + 1e-3;
  std::sort(pa.rbegin(), pa.rend());
  std::sort(pb.rbegin(), pb.rend());
  const auto a = decomp_from_probabilities(pa);
  const auto b = decomp_from_probabilities(pb);
  double prev = 0.0;
  for (Index m = 1; m <= 30; ++m) {
    const double retained = qs::merge_corner(a, b, m).retained_weight;
    EXPECT_GE(retained, prev - 1e-15) << "corner dimension " << m;
    prev = retained;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(CornerBasis, VectorsAreOrthonormal) {
  qs::CounterRng rng(3, 0);
  const auto da = qs::spectral_decomposition(random_density(8, rng));
  const auto db = qs::spectral_decomposition(random_density(4, rng));
  const qs::CornerBasis basis = qs::merge_corner(da, db, 12);
  const DenseMatrix b = basis.isometry();
  EXPECT_LT((b.adjoint() * b - DenseMatrix::Identity(12, 12)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(ProjectOperator, IdentityProjectsToTheIdentity) {
  qs::CounterRng rng(4, 0);
  const auto da = qs::spectral_decomposition(random_density(4, rng));
  const auto db = qs::spectral_decomposition(random_density(8, rng));
  const qs::CornerBasis basis = qs::merge_corner(da, db, 9);
  const DenseMatrix p = qs::project_operator(DenseMatrix::Identity(32, 32), basis);
  EXPECT_LT((p - DenseMatrix::Identity(9, 9)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ProjectOperator, FullCornerKeepsTheSpectrum) {
  qs::CounterRng rng(5, 0);
  const auto da = qs::spectral_decomposition(random_density(4, rng));
  const auto db = qs::spectral_decomposition(random_density(3, rng));
  const qs::CornerBasis basis = qs::merge_corner(da, db, 12);
  const DenseMatrix op = random_hermitian(12, rng);
  const DenseMatrix projected = qs::project_operator(op, basis);
  Eigen::SelfAdjointEigenSolver<DenseMatrix> before(op);
  Eigen::SelfAdjointEigenSolver<DenseMatrix> after(projected);
  EXPECT_LT((before.eigenvalues() - after.eigenvalues()).cwiseAbs().maxCoeff(),
            1e-9);
}

TEST(ProjectOperator, StructuredKernelsMatchTheExplicitIsometry) {
  qs::CounterRng rng(6, 0);
  const auto da = qs::spectral_decomposition(random_density(4, rng));
  const auto db = qs::spectral_decomposition(random_density(3, rng));
  const qs::CornerBasis basis = qs::merge_corner(da, db, 7);
  const DenseMatrix opa = random_complex(4, 4, rng);
  const DenseMatrix opb = random_complex(3, 3, rng);
  const DenseMatrix ta = basis.vectors_a.adjoint() * opa * basis.vectors_a;
  const DenseMatrix tb = basis.vectors_b.adjoint() * opb * basis.vectors_b;
  const DenseMatrix ia = DenseMatrix::Identity(4, 4);
  const DenseMatrix ib = DenseMatrix::Identity(3, 3);

  const double dl = (qs::project_left(ta, basis) -
                     qs::project_operator(kron(opa, ib), basis))
                        .cwiseAbs()
                        .maxCoeff();
  const double dr = (qs::project_right(tb, basis) -
                     qs::project_operator(kron(ia, opb), basis))
                        .cwiseAbs()
                        .maxCoeff();
  const double dp = (qs::project_pair(ta, tb, basis) -
                     qs::project_operator(kron(opa, opb), basis))
                        .cwiseAbs()
                        .maxCoeff();
  EXPECT_LT(dl, 1e-12);
  EXPECT_LT(dr, 1e-12);
  EXPECT_LT(dp, 1e-12);
}

TEST(ProjectOperator, RejectsMismatchedDimensions) {
  const auto a = decomp_from_probabilities({0.6, 0.4});
  const auto b = decomp_from_probabilities({0.7, 0.3});
  const qs::CornerBasis basis = qs::merge_corner(a, b, 3);
  EXPECT_THROW(qs::project_left(DenseMatrix::Identity(3, 3), basis),
               qs::DimensionError);
  EXPECT_THROW(qs::project_operator(DenseMatrix::Identity(5, 5), basis),
               qs::DimensionError);
}

TEST(MakeMergePlan, BuildsTheColumnDoublingSchedule) {
  qs::LatticeSpec spec;
  spec.lx = 6;
  spec.ly = 6;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 128);
  ASSERT_EQ(plan.steps.size(), 5u);
  EXPECT_EQ(plan.steps[0].left_width, 1);
  EXPECT_EQ(plan.steps[3].left_width, 2);
  EXPECT_EQ(plan.steps[3].right_width, 2);
  EXPECT_EQ(plan.steps[4].left_width, 4);
  EXPECT_EQ(plan.steps[4].right_width, 2);
  for (std::size_t i = 0; i + 1 < plan.steps.size(); ++i)
    EXPECT_FALSE(plan.steps[i].final_step);
  EXPECT_TRUE(plan.steps.back().final_step);
  for (const auto& step : plan.steps) EXPECT_EQ(step.m_c, 128);
}

TEST(MakeMergePlan, ActivatesWrapBondsOnlyAtTheFinalStep) {
  qs::LatticeSpec spec;
  spec.lx = 3;
  spec.ly = 3;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 64);
  ASSERT_EQ(plan.steps.size(), 2u);
  EXPECT_EQ(plan.steps[0].activated.size(), 3u);  // one seam, three rows
  // final step: seam plus the x wrap plus one y wrap per column
  EXPECT_EQ(plan.steps[1].activated.size(), 9u);
}

TEST(MakeMergePlan, CoversAssortedShapesExactly) {
  // the builder cross-checks its bond partition against the lattice edges
  const std::vector<std::tuple<int, int, bool, bool>> shapes = {
      {2, 2, true, true},  {2, 1, true, true},  {3, 3, true, true},
      {4, 2, true, true},  {2, 4, true, true},  {6, 6, true, true},
      {5, 3, true, true},  {4, 4, false, true}, {3, 2, false, false},
      {6, 1, true, false},
  };
  for (const auto& [lx, ly, px, py] : shapes) {
    qs::LatticeSpec spec;
    spec.lx = lx;
    spec.ly = ly;
    spec.periodic_x = px;
    spec.periodic_y = py;
    EXPECT_NO_THROW(qs::make_merge_plan(spec, 32))
        << lx << "x" << ly << " periodic " << px << py;
  }
}

TEST(MakeMergePlan, RejectsSingleColumnLattices) {
  qs::LatticeSpec spec;
  spec.lx = 1;
  spec.ly = 4;
  EXPECT_THROW(qs::make_merge_plan(spec, 16), qs::UsageError);
}

TEST(CornerSteadyState, FullCornerDimensionReproducesTheFullSpace) {
  qs::LatticeSpec spec;  // 2x2 periodic
  spec.jy = 1.2;
  spec.field_h = 0.05;
  spec.field_theta = 0.7;
  const qs::DensityMatrix full = full_space_steady_state(spec);

  const qs::MergePlan plan = qs::make_merge_plan(spec, 16);
  qs::CornerSettings settings;
  const qs::CornerResult res = qs::corner_steady_state(spec, plan, settings);

  ASSERT_EQ(res.block.dim, 16);
  ASSERT_EQ(res.diagnostics.steps.size(), 2u);
  EXPECT_DOUBLE_EQ(res.diagnostics.steps[1].retained_weight, 1.0);
  EXPECT_TRUE(res.diagnostics.warnings.empty());

  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sz),
              site_average(full, spec, qs::PauliKind::Z), 1e-6);
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sx),
              site_average(full, spec, qs::PauliKind::X), 1e-6);
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sy),
              site_average(full, spec, qs::PauliKind::Y), 1e-6);
}

TEST(CornerSteadyState, TightTruncationStaysClose) {
  // Halving the corner dimension is only accurate where the steady state is
  // close to the strip product; near the XY-symmetric point the truncation
  // error sits around 2e-3 and grows past 1e-1 by jy = jz.
  qs::LatticeSpec spec;  // 2x2 periodic
  spec.jy = 0.92;
  const qs::DensityMatrix full = full_space_steady_state(spec);

  const qs::MergePlan plan = qs::make_merge_plan(spec, 8);
  qs::CornerSettings settings;
  settings.retained_floor = 1.0;  // force the truncation warning
  const qs::CornerResult res = qs::corner_steady_state(spec, plan, settings);

  ASSERT_EQ(res.block.dim, 8);
  EXPECT_LT(res.diagnostics.steps[1].retained_weight, 1.0);
  EXPECT_FALSE(res.diagnostics.warnings.empty());
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sz),
              site_average(full, spec, qs::PauliKind::Z), 1e-2);
}

TEST(CornerSteadyState, TwoSiteChainIsExact) {
  qs::LatticeSpec spec;
  spec.lx = 2;
  spec.ly = 1;
  spec.jy = 1.3;
  spec.field_h = 0.1;
  spec.field_theta = 0.3;
  const qs::DensityMatrix full = full_space_steady_state(spec);
  const qs::MergePlan plan = qs::make_merge_plan(spec, 4);
  const qs::CornerResult res = qs::corner_steady_state(spec, plan, {});
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sz),
              site_average(full, spec, qs::PauliKind::Z), 1e-8);
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sx),
              site_average(full, spec, qs::PauliKind::X), 1e-8);
}

TEST(CornerSteadyState, TrajectoryRouteAgreesWithTheFullSpace) {
  qs::LatticeSpec spec;  // 2x2 periodic
  spec.jy = 1.1;
  const qs::DensityMatrix full = full_space_steady_state(spec);

  qs::CornerSettings settings;
  settings.dense_dim_max = 8;
  settings.master_dim_max = 8;  // push the final dim-16 solve onto trajectories
  settings.ensemble.n_trajectories = 200;
  settings.ensemble.t_burn = 15.0;
  settings.ensemble.t_avg = 60.0;
  settings.ensemble.seed = 99;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 16);
  const qs::CornerResult res = qs::corner_steady_state(spec, plan, settings);

  EXPECT_EQ(res.diagnostics.steps[1].method, "trajectory");
  EXPECT_NEAR(corner_site_average(res.block, res.block.total_sz),
              site_average(full, spec, qs::PauliKind::Z), 0.02);
}

TEST(CornerSteadyState, RefusesAPlanForADifferentLattice) {
  qs::LatticeSpec spec;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 8);
  qs::LatticeSpec other = spec;
  other.jy = 1.05;
  EXPECT_THROW(qs::corner_steady_state(other, plan, {}), qs::UsageError);
}

TEST(CornerSteadyState, RefusesMergesOverTheMemoryBudget) {
  qs::LatticeSpec spec;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 16);
  qs::CornerSettings settings;
  settings.memory_budget = 1e3;
  EXPECT_THROW(qs::corner_steady_state(spec, plan, settings), qs::UnsupportedError);
}

TEST(CornerSteadyState, CheckpointedRunsReloadBitIdentically) {
  const std::string dir = testing::TempDir() + "corner_ckpt_roundtrip";
  std::filesystem::remove_all(dir);

  qs::LatticeSpec spec;
  spec.jy = 1.15;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 8);
  qs::CornerSettings settings;
  settings.checkpoint_dir = dir;

  const qs::CornerResult first = qs::corner_steady_state(spec, plan, settings);
  const qs::CornerResult second = qs::corner_steady_state(spec, plan, settings);

  EXPECT_EQ((first.block.rho.rho - second.block.rho.rho).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((first.block.total_sz - second.block.total_sz).cwiseAbs().maxCoeff(),
            0.0);
  ASSERT_EQ(second.diagnostics.steps.size(), 2u);
  EXPECT_NE(second.diagnostics.steps[1].method.find("checkpoint"),
            std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(CornerSteadyState, RefusesACheckpointWrittenForOtherCouplings) {
  const std::string dir = testing::TempDir() + "corner_ckpt_mismatch";
  std::filesystem::remove_all(dir);

  qs::LatticeSpec spec;
  qs::CornerSettings settings;
  settings.checkpoint_dir = dir;
  qs::corner_steady_state(spec, qs::make_merge_plan(spec, 8), settings);

  qs::LatticeSpec other = spec;
  other.jy = 1.2;
  EXPECT_THROW(
      qs::corner_steady_state(other, qs::make_merge_plan(other, 8), settings),
      qs::UsageError);
  std::filesystem::remove_all(dir);
}

TEST(CornerExpectation, GuardsAgainstImaginaryParts) {
  qs::LatticeSpec spec;
  const qs::MergePlan plan = qs::make_merge_plan(spec, 4);
  const qs::CornerResult res = qs::corner_steady_state(spec, plan, {});
  const DenseMatrix skew =
      Complex(0.0, 1.0) * DenseMatrix::Identity(res.block.dim, res.block.dim);
  EXPECT_THROW(qs::corner_expectation(res.block, skew), qs::HermiticityError);
}

TEST(ConvergeInCornerDim, AConstantObservableConvergesAtTheSecondPoint) {
  qs::LatticeSpec spec;  // 2x2 periodic
  const auto observable = [](const qs::CornerResult&) {
    return qs::ObservableEstimate{0.5, 0.0};
  };
  const qs::CornerConvergence conv =
      qs::converge_in_corner_dim(spec, {Index{4}, Index{8}, Index{16}}, observable,
                                 1e-6, {});
  EXPECT_EQ(conv.converged_m_c, 8);
  ASSERT_EQ(conv.trace.size(), 2u);
  EXPECT_DOUBLE_EQ(conv.trace[1].value, 0.5);
}

TEST(ConvergeInCornerDim, AnExhaustedScheduleThrowsWithTheTrace) {
  qs::LatticeSpec spec;
  const auto observable = [](const qs::CornerResult& r) {
    return qs::ObservableEstimate{static_cast<double>(r.block.dim), 0.0};
  };
  try {
    qs::converge_in_corner_dim(spec, {Index{4}, Index{6}, Index{8}}, observable,
                               1e-3, {});
    FAIL() << "schedule exhaustion must throw";
  } catch (const qs::ConvergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("trace"), std::string::npos);
    EXPECT_NEAR(e.residual, 2.0, 1e-12);
  }
}

TEST(ConvergeInCornerDim, RejectsBadSchedules) {
  qs::LatticeSpec spec;
  const auto observable = [](const qs::CornerResult&) {
    return qs::ObservableEstimate{0.0, 0.0};
  };
  EXPECT_THROW(qs::converge_in_corner_dim(spec, {}, observable, 1e-3, {}),
               qs::UsageError);
  EXPECT_THROW(
      qs::converge_in_corner_dim(spec, {Index{8}, Index{8}}, observable, 1e-3, {}),
      qs::UsageError);
  EXPECT_THROW(
      qs::converge_in_corner_dim(spec, {Index{4}, Index{8}}, observable, 0.0, {}),
      qs::UsageError);
}

TEST(ConvergeInCornerDim, ThreeByThreeAgreesWithTheFullSpace) {
  qs::LatticeSpec spec;
  spec.lx = 3;
  spec.ly = 3;
  const qs::DensityMatrix full = full_space_steady_state(spec);
  const double mz_full = site_average(full, spec, qs::PauliKind::Z);

  const auto observable = [](const qs::CornerResult& r) {
    return qs::ObservableEstimate{corner_site_average(r.block, r.block.total_sz),
                                  0.0};
  };
  const std::vector<Index> schedule = {32, 64, 128, 256, 512};
  const qs::CornerConvergence conv =
      qs::converge_in_corner_dim(spec, schedule, observable, 1e-3, {});
  EXPECT_LE(conv.converged_m_c, 512);
  EXPECT_NEAR(conv.trace.back().value, mz_full, 1e-3);
}
