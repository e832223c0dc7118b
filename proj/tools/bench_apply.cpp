// Timing probe for the generator application and the steady-state solvers.
// Used to size scan grids before long runs; not part of the test suite.

#include <chrono>
#include <cstdio>

#include "qsteady/master.hpp"

using namespace qsteady;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int main(int argc, char** argv) {
  LatticeSpec spec;
  spec.lx = 3;
  spec.ly = 3;
  spec.jy = argc > 1 ? std::atof(argv[1]) : 1.15;
  spec.field_h = argc > 2 ? std::atof(argv[2]) : 0.0;

  const LiouvillianOps ops = LiouvillianOps::for_lattice(spec);
  LiouvillianOps generic = ops;
  generic.structured = false;

  DenseMatrix rho = DenseMatrix::Zero(ops.dim, ops.dim);
  rho(0, 0) = 1.0;
  DenseMatrix out, scratch;

  auto t0 = Clock::now();
  for (int i = 0; i < 50; ++i) apply_liouvillian_into(ops, rho, out, scratch, true);
  std::printf("structured apply: %.2f ms\n", ms_since(t0) / 50.0);

  t0 = Clock::now();
  for (int i = 0; i < 10; ++i) apply_liouvillian_into(generic, rho, out, scratch, true);
  std::printf("generic apply:    %.2f ms\n", ms_since(t0) / 10.0);

  Rk4Workspace ws;
  t0 = Clock::now();
  for (int i = 0; i < 10; ++i) rk4_step(ops, rho, 0.02, ws);
  std::printf("rk4 step:         %.2f ms\n", ms_since(t0) / 10.0);

  NullspaceSettings ns;
  ns.route = NullspaceSettings::Route::Iterative;
  ns.residual_target = 1e-9;
  t0 = Clock::now();
  const SteadyResult r = steady_state_nullspace(ops, ns);
  std::printf("cold solve dim %ld: %.1f s, blocks=%.0f, residual=%.2e\n",
              static_cast<long>(ops.dim), ms_since(t0) / 1000.0, r.reached_time,
              r.residual_max);

  // warm restart from a neighbouring coupling
  LatticeSpec next = spec;
  next.jy = spec.jy + 0.025;
  const LiouvillianOps ops2 = LiouvillianOps::for_lattice(next);
  t0 = Clock::now();
  const SteadyResult r2 = steady_state_nullspace(ops2, ns, &r.rho.rho);
  std::printf("warm solve:       %.1f s, blocks=%.0f, residual=%.2e\n",
              ms_since(t0) / 1000.0, r2.reached_time, r2.residual_max);
  return 0;
}
