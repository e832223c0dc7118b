#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "qsteady/trajectory.hpp"

namespace qs = qsteady;
using qs::Complex;

namespace {

qs::LatticeSpec plaquette_spec() {
  qs::LatticeSpec spec;
  spec.lx = 2;
  spec.ly = 2;
  spec.jx = 0.9;
  spec.jy = 1.2;
  spec.jz = 1.0;
  return spec;
}

std::vector<qs::SparseOp> site_z_observables(const qs::LatticeSpec& spec) {
  std::vector<qs::SparseOp> obs;
  for (int j = 0; j < spec.n_sites(); ++j)
    obs.push_back(qs::site_operator(spec, j, qs::PauliKind::Z));
  return obs;
}

double dense_expectation(const qs::SparseOp& op, const qs::DensityMatrix& rho) {
  return (op * rho.rho).eval().trace().real();
}

// Two-sided Kolmogorov-Smirnov p-value against the unit-rate exponential,
// using the asymptotic Kolmogorov distribution.
double ks_exponential_p_value(std::vector<double> times) {
  std::sort(times.begin(), times.end());
  const double n = static_cast<double>(times.size());
  double d = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double f = 1.0 - std::exp(-times[i]);
    d = std::max(d, std::abs(f - static_cast<double>(i + 1) / n));
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
    q += (k % 2 == 1) ? term : -term;
  }
  return std::clamp(q, 0.0, 1.0);
}

}  // namespace

TEST(AdvanceTrajectory, WaitingTimesOfABareSpinAreExponential) {
  // A drive-free spin prepared up decays at rate gamma; the norm-threshold
  // rule must reproduce the exponential waiting-time law.
  qs::LatticeSpec spec;
  spec.lx = 1;
  spec.ly = 1;
  spec.jx = spec.jy = spec.jz = 0.0;
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);

  qs::EnsembleSettings settings;
  settings.seed = 777;

  const int n = 2500;
  std::vector<double> first_jumps;
  first_jumps.reserve(n);
  qs::detail::Rk4VecWorkspace ws;
  for (int i = 0; i < n; ++i) {
    qs::TrajectoryState st = qs::init_trajectory(ops, settings, i, 0);
    st.psi.setZero();
    st.psi(1) = 1.0;  // spin up
    std::vector<double> jumps;
    for (int block = 0; block < 40 && jumps.empty(); ++block)
      qs::advance_trajectory(ops, st, 100, 0.01, ws, &jumps);
    ASSERT_FALSE(jumps.empty());
    EXPECT_EQ(st.n_jumps, 1);  // after the jump the spin is dark
    first_jumps.push_back(jumps.front());
  }
  const double p = ks_exponential_p_value(std::move(first_jumps));
  EXPECT_GT(p, 0.01);
}

TEST(AdvanceTrajectory, DarkStateNeverJumps) {
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(plaquette_spec());
  qs::EnsembleSettings settings;
  qs::TrajectoryState st = qs::init_trajectory(ops, settings, 0, 0);

  // All spins down sits at the bottom of every loss channel; in the jx == jy
  // limit (flip amplitude zero) nothing repopulates it, so the only dynamics
  // left is the diagonal phase and no jump may ever fire.
  qs::LiouvillianOps iso = ops;
  iso.bond_amp_aligned = 0.0;
  qs::detail::Rk4VecWorkspace ws;
  qs::advance_trajectory(iso, st, 1000, 0.01, ws);
  EXPECT_EQ(st.n_jumps, 0);
  EXPECT_NEAR(st.psi.squaredNorm(), 1.0, 1e-5);
  EXPECT_NEAR(std::abs(st.psi(0)), 1.0, 1e-5);
}

TEST(RunEnsemble, ReproducesTheDenseSteadyState) {
  const qs::LatticeSpec spec = plaquette_spec();
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const auto observables = site_z_observables(spec);

  const qs::SteadyResult dense = qs::steady_state_nullspace(ops);

  qs::EnsembleSettings settings;
  settings.n_trajectories = 160;
  settings.dt = 0.01;
  settings.t_burn = 15.0;
  settings.t_avg = 60.0;
  settings.sample_interval = 0.2;
  settings.seed = 2024;
  const qs::EnsembleResult res = qs::run_ensemble(ops, settings, observables);

  EXPECT_TRUE(res.completed);
  EXPECT_GT(res.total_jumps, 0);
  EXPECT_EQ(res.samples_per_trajectory, 301);  // every 20 steps in [1500, 7500]
  for (std::size_t k = 0; k < observables.size(); ++k) {
    const double ref = dense_expectation(observables[k], dense.rho);
    const double err = std::max(res.observables[k].error, 1e-4);
    EXPECT_NEAR(res.observables[k].value, ref, 5.0 * err)
        << "site " << k << " drifted from the dense answer";
  }
}

TEST(RunEnsemble, ErrorBarShrinksWithTrajectoryCount) {
  const qs::LatticeSpec spec = plaquette_spec();
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const auto observables = site_z_observables(spec);

  qs::EnsembleSettings small;
  small.n_trajectories = 60;
  small.t_burn = 10.0;
  small.t_avg = 30.0;
  small.sample_interval = 0.2;
  small.seed = 99;
  qs::EnsembleSettings large = small;
  large.n_trajectories = 240;

  const auto a = qs::run_ensemble(ops, small, observables);
  const auto b = qs::run_ensemble(ops, large, observables);
  // Quadrupling the ensemble should halve the error bar, up to noise.
  const double ratio = a.observables[0].error / b.observables[0].error;
  EXPECT_GT(ratio, 1.2);
  EXPECT_LT(ratio, 3.5);
}

TEST(RunEnsemble, ThreadCountDoesNotChangeAnyBit) {
  const qs::LatticeSpec spec = plaquette_spec();
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const auto observables = site_z_observables(spec);

  qs::EnsembleSettings settings;
  settings.n_trajectories = 40;
  settings.t_burn = 5.0;
  settings.t_avg = 15.0;
  settings.sample_interval = 0.2;
  settings.accumulate_state = true;
  settings.n_groups = 8;
  settings.seed = 5150;

  qs::EnsembleSettings serial = settings;
  serial.threads = 1;
  qs::EnsembleSettings wide = settings;
  wide.threads = 4;

  const auto a = qs::run_ensemble(ops, serial, observables);
  const auto b = qs::run_ensemble(ops, wide, observables);

  EXPECT_EQ(a.total_jumps, b.total_jumps);
  for (std::size_t k = 0; k < observables.size(); ++k) {
    EXPECT_EQ(a.observables[k].value, b.observables[k].value);
    EXPECT_EQ(a.observables[k].error, b.observables[k].error);
  }
  ASSERT_TRUE(a.has_state);
  ASSERT_TRUE(b.has_state);
  EXPECT_EQ((a.rho.rho - b.rho.rho).cwiseAbs().maxCoeff(), 0.0);
}

TEST(RunEnsemble, CheckpointResumeMatchesAnUninterruptedRun) {
  const qs::LatticeSpec spec = plaquette_spec();
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const auto observables = site_z_observables(spec);

  qs::EnsembleSettings settings;
  settings.n_trajectories = 30;
  settings.t_burn = 5.0;
  settings.t_avg = 15.0;
  settings.sample_interval = 0.2;
  settings.chunk_time = 5.0;
  settings.accumulate_state = true;
  settings.n_groups = 5;
  settings.seed = 31415;

  const auto straight = qs::run_ensemble(ops, settings, observables);
  EXPECT_TRUE(straight.completed);

  const std::string path = testing::TempDir() + "ensemble_resume_test.ckpt";
  std::remove(path.c_str());
  qs::EnsembleSettings interrupted = settings;
  interrupted.checkpoint_path = path;
  interrupted.stop_after_chunks = 2;
  const auto partial = qs::run_ensemble(ops, interrupted, observables);
  EXPECT_FALSE(partial.completed);

  qs::EnsembleSettings resume = settings;
  resume.checkpoint_path = path;
  const auto resumed = qs::run_ensemble(ops, resume, observables);
  EXPECT_TRUE(resumed.completed);
  std::remove(path.c_str());

  EXPECT_EQ(straight.total_jumps, resumed.total_jumps);
  EXPECT_EQ(straight.samples_per_trajectory, resumed.samples_per_trajectory);
  for (std::size_t k = 0; k < observables.size(); ++k) {
    EXPECT_EQ(straight.observables[k].value, resumed.observables[k].value);
    EXPECT_EQ(straight.observables[k].error, resumed.observables[k].error);
  }
  EXPECT_EQ((straight.rho.rho - resumed.rho.rho).cwiseAbs().maxCoeff(), 0.0);
}

TEST(RunEnsemble, CheckpointWrittenWithOtherParametersIsRejected) {
  const qs::LatticeSpec spec = plaquette_spec();
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  const auto observables = site_z_observables(spec);

  const std::string path = testing::TempDir() + "ensemble_reject_test.ckpt";
  std::remove(path.c_str());

  qs::EnsembleSettings settings;
  settings.n_trajectories = 8;
  settings.t_burn = 1.0;
  settings.t_avg = 4.0;
  settings.sample_interval = 0.5;
  settings.chunk_time = 2.0;
  settings.n_groups = 2;
  settings.checkpoint_path = path;
  settings.stop_after_chunks = 1;
  (void)qs::run_ensemble(ops, settings, observables);

  qs::EnsembleSettings reseeded = settings;
  reseeded.seed += 1;
  EXPECT_THROW((void)qs::run_ensemble(ops, reseeded, observables),
               qs::UsageError);

  qs::EnsembleSettings finer = settings;
  finer.dt = 0.005;
  EXPECT_THROW((void)qs::run_ensemble(ops, finer, observables), qs::UsageError);
  std::remove(path.c_str());
}

TEST(EffectiveHamiltonian, MatchesTheDriftDefinition) {
  qs::LatticeSpec spec = plaquette_spec();
  spec.jz = 1.05;
  spec.field_h = 0.35;
  spec.field_theta = 0.6;
  spec.gamma = 1.3;
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);

  const qs::DenseMatrix heff = qs::DenseMatrix(qs::make_effective_hamiltonian(ops));
  const qs::DenseMatrix expected =
      qs::DenseMatrix(ops.H) - Complex(0.0, 0.5) * qs::DenseMatrix(ops.weight);
  EXPECT_LT((heff - expected).cwiseAbs().maxCoeff(), 1e-14);

  // Structured and generic drift evaluations must agree on a random state.
  qs::CounterRng rng(4242, 0);
  qs::DenseVector psi(ops.dim);
  for (qs::Index r = 0; r < ops.dim; ++r)
    psi(r) = Complex(rng.next_double() - 0.5, rng.next_double() - 0.5);
  psi.normalize();

  qs::DenseVector fast, slow;
  qs::detail::effective_rhs(ops, psi, fast);
  qs::LiouvillianOps generic = ops;
  generic.structured = false;
  qs::detail::effective_rhs(generic, psi, slow);
  EXPECT_LT((fast - slow).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ChannelWeights, MatchTheJumpOperators) {
  qs::LatticeSpec spec = plaquette_spec();
  spec.field_h = 0.25;
  const qs::LiouvillianOps ops = qs::LiouvillianOps::for_lattice(spec);
  qs::LiouvillianOps generic = ops;
  generic.structured = false;

  qs::CounterRng rng(8888, 3);
  qs::DenseVector psi(ops.dim);
  for (qs::Index r = 0; r < ops.dim; ++r)
    psi(r) = Complex(rng.next_double() - 0.5, rng.next_double() - 0.5);
  psi.normalize();

  qs::DenseVector scratch;
  double total = 0.0;
  for (std::size_t j = 0; j < ops.jumps.size(); ++j) {
    const double fast = qs::detail::channel_weight(ops, psi, j, scratch);
    const double slow = qs::detail::channel_weight(generic, psi, j, scratch);
    EXPECT_NEAR(fast, slow, 1e-13);
    total += fast;

    qs::DenseVector a = psi, b = psi;
    qs::detail::collapse_into_channel(ops, j, a, scratch);
    qs::detail::collapse_into_channel(generic, j, b, scratch);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_NEAR(a.squaredNorm(), 1.0, 1e-13);
  }
  // The channel weights sum to the expectation of sum_j L_j^dag L_j.
  scratch.noalias() = ops.weight * psi;
  EXPECT_NEAR(total, psi.dot(scratch).real(), 1e-13);
}

TEST(EnsembleSettings, RejectsUnusableParameters) {
  qs::EnsembleSettings s;
  s.n_trajectories = 0;
  EXPECT_THROW(s.validate(), qs::UsageError);
  s = {};
  s.sample_interval = 0.001;  // below one step
  EXPECT_THROW(s.validate(), qs::UsageError);
  s = {};
  s.dt = -0.01;
  EXPECT_THROW(s.validate(), qs::UsageError);
}
