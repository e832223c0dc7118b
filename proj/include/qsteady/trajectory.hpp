#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "qsteady/master.hpp"
#include "qsteady/parallel.hpp"
#include "qsteady/rng.hpp"

namespace qsteady {

struct EnsembleSettings {
  int n_trajectories = 500;
  double dt = 0.01;          // units 1/gamma
  double t_burn = 20.0;      // discarded transient
  double t_avg = 200.0;      // averaging window
  double sample_interval = 0.1;   // observable sampling cadence
  double chunk_time = 20.0;       // checkpoint cadence
  std::uint64_t seed = 12345;
  int threads = 0;  // 0 = hardware default; grouping keeps results identical anyway
  int n_groups = 10;
  bool accumulate_state = false;
  std::string checkpoint_path;  // empty disables checkpointing
  long stop_after_chunks = 0;   // abort the run early (0 = run to completion)

  void validate() const {
    if (n_trajectories < 1) throw UsageError("need at least one trajectory");
    if (dt <= 0.0 || t_avg <= 0.0 || t_burn < 0.0)
      throw UsageError("trajectory times must be positive (t_burn may be zero)");
    if (sample_interval < dt)
      throw UsageError("sample_interval must be at least one step");
    if (chunk_time < dt) throw UsageError("chunk_time must be at least one step");
    if (n_groups < 1) throw UsageError("need at least one trajectory group");
  }
};

struct ObservableEstimate {
  double value = 0.0;
  double error = 0.0;  // standard error across trajectory means
};

// Effective drift generator: psi' = -i H psi - (1/2) sum_j L_j^dag L_j psi.
inline SparseOp make_effective_hamiltonian(const LiouvillianOps& ops) {
  return SparseOp(ops.H - Complex(0.0, 0.5) * ops.weight);
}

namespace detail {

inline void effective_rhs(const LiouvillianOps& ops, const DenseVector& psi,
                          DenseVector& out) {
  const Index dim = ops.dim;
  out.resize(dim);
  const Complex mi(0.0, -1.0);
  if (ops.structured) {
    const Complex* p = psi.data();
    Complex* o = out.data();
    const double* d = ops.h_diag.data();
    const double* wd = ops.weight_diag.data();
    for (Index r = 0; r < dim; ++r) o[r] = mi * (d[r] * p[r]) - 0.5 * wd[r] * p[r];
    for (const auto& f : ops.bond_flips) {
      const Index m = f.mask;
      const Index lo = m & -m;
      const Index hi = m ^ lo;
      for (Index r = 0; r < dim; ++r) {
        const Index rs = r ^ m;
        const bool par = ((rs & lo) != 0) == ((rs & hi) != 0);
        o[r] += mi * ((par ? ops.bond_amp_aligned : ops.bond_amp_anti) * p[rs]);
      }
    }
    for (const auto& f : ops.field_flips) {
      const Index m = f.mask;
      for (Index r = 0; r < dim; ++r) {
        const Index rs = r ^ m;
        o[r] += mi * (((rs & m) ? f.amp_from_up : f.amp_from_down) * p[rs]);
      }
    }
    return;
  }
  out.noalias() = ops.H * psi;
  out *= mi;
  if (ops.weight_diagonal)
    out.array() -= 0.5 * ops.weight_diag.array().cast<Complex>() * psi.array();
  else
    out -= 0.5 * (ops.weight * psi);
}

struct Rk4VecWorkspace {
  DenseVector k1, k2, k3, k4, stage, scratch, saved;
};

inline void rk4_vec_step(const LiouvillianOps& ops, DenseVector& psi, double dt,
                         Rk4VecWorkspace& ws) {
  effective_rhs(ops, psi, ws.k1);
  ws.stage = psi + (0.5 * dt) * ws.k1;
  effective_rhs(ops, ws.stage, ws.k2);
  ws.stage = psi + (0.5 * dt) * ws.k2;
  effective_rhs(ops, ws.stage, ws.k3);
  ws.stage = psi + dt * ws.k3;
  effective_rhs(ops, ws.stage, ws.k4);
  psi += (dt / 6.0) * (ws.k1 + 2.0 * ws.k2 + 2.0 * ws.k3 + ws.k4);
}

inline double channel_weight(const LiouvillianOps& ops, const DenseVector& psi,
                             std::size_t j, DenseVector& scratch) {
  if (ops.structured) {
    const Index m = ops.loss_masks[j];
    double w = 0.0;
    for (const Index r0 : ops.loss_rows[j]) w += std::norm(psi(r0 | m));
    return ops.loss_rates[j] * w;
  }
  scratch.noalias() = ops.jumps[j] * psi;
  return scratch.squaredNorm();
}

inline void collapse_into_channel(const LiouvillianOps& ops, std::size_t j,
                                  DenseVector& psi, DenseVector& scratch) {
  if (ops.structured) {
    const Index m = ops.loss_masks[j];
    const double root = std::sqrt(ops.loss_rates[j]);
    scratch.setZero(psi.size());
    for (const Index r0 : ops.loss_rows[j]) scratch(r0) = root * psi(r0 | m);
  } else {
    scratch.noalias() = ops.jumps[j] * psi;
  }
  const double norm = scratch.norm();
  if (norm < 1e-150)
    throw StepSizeError("collapse produced a null state; the channel weight vanished");
  psi = scratch / norm;
}

}  // namespace detail

struct TrajectoryState {
  DenseVector psi;
  long step = 0;
  long n_jumps = 0;
  double threshold = 0.0;
  CounterRng rng;
  // accumulated per-observable sums over the sampling window
  RealVector sums;
  long n_samples = 0;
};

inline TrajectoryState init_trajectory(const LiouvillianOps& ops,
                                       const EnsembleSettings& settings,
                                       int index, int n_observables) {
  TrajectoryState st;
  st.psi = all_down_state(ops.dim);
  st.rng = CounterRng(settings.seed, static_cast<std::uint64_t>(index));
  st.threshold = st.rng.next_open();
  st.sums = RealVector::Zero(n_observables);
  return st;
}

// Advances one trajectory by `steps` grid steps of size dt (absolute time).
// Jumps are located inside a step by linear interpolation of log ||psi||^2,
// applied at the interpolated time, and the remainder of the step is then
// integrated so trajectories stay on a common time grid. When `jump_times`
// is given, each jump's absolute time is appended.
inline void advance_trajectory(const LiouvillianOps& ops, TrajectoryState& st,
                               long steps, double dt_abs,
                               detail::Rk4VecWorkspace& ws,
                               std::vector<double>* jump_times = nullptr) {
  for (long s = 0; s < steps; ++s) {
    const double n2_old = st.psi.squaredNorm();
    ws.saved = st.psi;
    detail::rk4_vec_step(ops, st.psi, dt_abs, ws);
    double n2_new = st.psi.squaredNorm();
    if (n2_new < 1e-12 * n2_old)
      throw StepSizeError("trajectory norm collapsed within one step; decrease dt");
    if (n2_new < st.threshold) {
      // interpolate the crossing of the threshold in log norm
      double frac = 1.0;
      if (n2_new < n2_old) {
        frac = (std::log(st.threshold) - std::log(n2_old)) /
               (std::log(n2_new) - std::log(n2_old));
        frac = std::clamp(frac, 0.0, 1.0);
      }
      st.psi = ws.saved;
      if (frac > 0.0) detail::rk4_vec_step(ops, st.psi, frac * dt_abs, ws);
      if (jump_times)
        jump_times->push_back((st.step + frac) * dt_abs);

      double total = 0.0;
      std::vector<double> weights(ops.jumps.size());
      for (std::size_t j = 0; j < ops.jumps.size(); ++j) {
        weights[j] = detail::channel_weight(ops, st.psi, j, ws.scratch);
        total += weights[j];
      }
      if (total <= 0.0)
        throw StepSizeError("no decay channel available at a jump event");
      double pick = st.rng.next_double() * total;
      std::size_t channel = ops.jumps.size() - 1;
      for (std::size_t j = 0; j < ops.jumps.size(); ++j) {
        if (pick < weights[j]) {
          channel = j;
          break;
        }
        pick -= weights[j];
      }
      detail::collapse_into_channel(ops, channel, st.psi, ws.scratch);
      st.threshold = st.rng.next_open();
      st.n_jumps += 1;
      if (frac < 1.0) detail::rk4_vec_step(ops, st.psi, (1.0 - frac) * dt_abs, ws);
    }
    st.step += 1;
  }
}

struct EnsembleResult {
  std::vector<ObservableEstimate> observables;
  int n_trajectories = 0;
  long total_jumps = 0;
  long samples_per_trajectory = 0;
  bool completed = true;  // false if the run stopped at stop_after_chunks
  bool has_state = false;
  DensityMatrix rho;                   // ensemble and time averaged state
  std::vector<DenseMatrix> group_states;  // normalized per-group states
  std::vector<double> group_weights;      // sample fractions, sum to one
};

namespace detail {

struct EnsembleGrid {
  long total_steps = 0;
  long burn_steps = 0;
  long stride = 0;
  long steps_per_chunk = 0;
  long n_chunks = 0;
  double dt_abs = 0.0;
};

inline EnsembleGrid make_grid(const LiouvillianOps& ops,
                              const EnsembleSettings& s) {
  EnsembleGrid g;
  const double unit = 1.0 / ops.gamma_scale;
  g.dt_abs = s.dt * unit;
  g.burn_steps = std::lround(s.t_burn / s.dt);
  g.total_steps = g.burn_steps + std::max<long>(1, std::lround(s.t_avg / s.dt));
  g.stride = std::max<long>(1, std::lround(s.sample_interval / s.dt));
  g.steps_per_chunk = std::max<long>(1, std::lround(s.chunk_time / s.dt));
  g.n_chunks = (g.total_steps + g.steps_per_chunk - 1) / g.steps_per_chunk;
  return g;
}

inline bool sample_due(const EnsembleGrid& g, long step_completed) {
  return step_completed > 0 && step_completed >= g.burn_steps &&
         (step_completed - g.burn_steps) % g.stride == 0;
}

// Checkpoint layout: header, then per-trajectory records, then group sums.
inline constexpr char kEnsembleMagic[4] = {'Q', 'S', 'T', 'J'};
inline constexpr std::uint32_t kEnsembleVersion = 1;

template <typename T>
void put_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void get_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated ensemble checkpoint");
}

inline void save_ensemble_checkpoint(const EnsembleSettings& settings, Index dim,
                                     int n_obs, long chunks_done,
                                     const std::vector<TrajectoryState>& states,
                                     const std::vector<DenseMatrix>& group_sums,
                                     const std::vector<long>& group_samples) {
  const std::string tmp = settings.checkpoint_path + ".tmp";
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write ensemble checkpoint '" + tmp + "'");
  out.write(kEnsembleMagic, 4);
  put_pod(out, kEnsembleVersion);
  put_pod(out, std::uint32_t{0x01020304u});
  put_pod(out, static_cast<std::int64_t>(dim));
  put_pod(out, static_cast<std::int32_t>(settings.n_trajectories));
  put_pod(out, static_cast<std::int32_t>(settings.n_groups));
  put_pod(out, static_cast<std::int32_t>(n_obs));
  put_pod(out, static_cast<std::uint8_t>(settings.accumulate_state ? 1 : 0));
  put_pod(out, settings.seed);
  put_pod(out, settings.dt);
  put_pod(out, settings.t_burn);
  put_pod(out, settings.t_avg);
  put_pod(out, settings.sample_interval);
  put_pod(out, settings.chunk_time);
  put_pod(out, static_cast<std::int64_t>(chunks_done));
  for (const TrajectoryState& st : states) {
    put_pod(out, static_cast<std::int64_t>(st.step));
    put_pod(out, static_cast<std::int64_t>(st.n_jumps));
    put_pod(out, st.threshold);
    const RngState& rs = st.rng.state();
    for (std::uint32_t w : rs.key) put_pod(out, w);
    for (std::uint32_t w : rs.ctr) put_pod(out, w);
    for (std::uint32_t w : rs.buf) put_pod(out, w);
    put_pod(out, rs.pos);
    put_pod(out, static_cast<std::int64_t>(st.n_samples));
    out.write(reinterpret_cast<const char*>(st.sums.data()),
              static_cast<std::streamsize>(sizeof(double) * n_obs));
    out.write(reinterpret_cast<const char*>(st.psi.data()),
              static_cast<std::streamsize>(sizeof(Complex) * dim));
  }
  if (settings.accumulate_state) {
    for (std::size_t g = 0; g < group_sums.size(); ++g) {
      put_pod(out, static_cast<std::int64_t>(group_samples[g]));
      out.write(reinterpret_cast<const char*>(group_sums[g].data()),
                static_cast<std::streamsize>(sizeof(Complex) * dim * dim));
    }
  }
  out.close();
  if (!out) throw IoError("failed to flush ensemble checkpoint '" + tmp + "'");
  if (std::rename(tmp.c_str(), settings.checkpoint_path.c_str()) != 0)
    throw IoError("cannot move checkpoint into place at '" +
                  settings.checkpoint_path + "'");
}

// Returns the number of completed chunks (zero when no checkpoint exists).
inline long load_ensemble_checkpoint(const EnsembleSettings& settings, Index dim,
                                     int n_obs, std::vector<TrajectoryState>& states,
                                     std::vector<DenseMatrix>& group_sums,
                                     std::vector<long>& group_samples) {
  std::ifstream in(settings.checkpoint_path, std::ios::binary);
  if (!in) return 0;
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kEnsembleMagic, 4) != 0)
    throw IoError("'" + settings.checkpoint_path + "' is not an ensemble checkpoint");
  std::uint32_t version = 0, layout = 0;
  get_pod(in, version);
  get_pod(in, layout);
  if (version != kEnsembleVersion || layout != 0x01020304u)
    throw IoError("unsupported ensemble checkpoint version");
  std::int64_t file_dim = 0;
  std::int32_t file_n = 0, file_groups = 0, file_obs = 0;
  std::uint8_t file_state = 0;
  std::uint64_t file_seed = 0;
  double file_dt = 0, file_burn = 0, file_avg = 0, file_sample = 0, file_chunk = 0;
  get_pod(in, file_dim);
  get_pod(in, file_n);
  get_pod(in, file_groups);
  get_pod(in, file_obs);
  get_pod(in, file_state);
  get_pod(in, file_seed);
  get_pod(in, file_dt);
  get_pod(in, file_burn);
  get_pod(in, file_avg);
  get_pod(in, file_sample);
  get_pod(in, file_chunk);
  if (file_dim != dim || file_n != settings.n_trajectories ||
      file_groups != settings.n_groups || file_obs != n_obs ||
      file_state != (settings.accumulate_state ? 1 : 0) ||
      file_seed != settings.seed || file_dt != settings.dt ||
      file_burn != settings.t_burn || file_avg != settings.t_avg ||
      file_sample != settings.sample_interval || file_chunk != settings.chunk_time)
    throw UsageError("ensemble checkpoint '" + settings.checkpoint_path +
                     "' was written with different run parameters");
  std::int64_t chunks_done = 0;
  get_pod(in, chunks_done);
  for (TrajectoryState& st : states) {
    std::int64_t step = 0, jumps = 0, samples = 0;
    get_pod(in, step);
    get_pod(in, jumps);
    get_pod(in, st.threshold);
    RngState rs;
    for (std::uint32_t& w : rs.key) get_pod(in, w);
    for (std::uint32_t& w : rs.ctr) get_pod(in, w);
    for (std::uint32_t& w : rs.buf) get_pod(in, w);
    get_pod(in, rs.pos);
    get_pod(in, samples);
    st.step = step;
    st.n_jumps = jumps;
    st.n_samples = samples;
    st.rng.restore(rs);
    in.read(reinterpret_cast<char*>(st.sums.data()),
            static_cast<std::streamsize>(sizeof(double) * n_obs));
    in.read(reinterpret_cast<char*>(st.psi.data()),
            static_cast<std::streamsize>(sizeof(Complex) * dim));
    if (!in) throw IoError("truncated ensemble checkpoint");
  }
  if (settings.accumulate_state) {
    for (std::size_t g = 0; g < group_sums.size(); ++g) {
      std::int64_t samples = 0;
      get_pod(in, samples);
      group_samples[g] = samples;
      in.read(reinterpret_cast<char*>(group_sums[g].data()),
              static_cast<std::streamsize>(sizeof(Complex) * dim * dim));
      if (!in) throw IoError("truncated ensemble checkpoint");
    }
  }
  return chunks_done;
}

}  // namespace detail

// Runs the ensemble and averages <psi|O|psi>/<psi|psi> over the window for
// each supplied observable. Trajectories are processed in fixed groups, one
// worker per group, so results are identical for every thread count; groups
// double as jackknife blocks for errors on quantities derived from the
// accumulated state. With a checkpoint path the run is resumable in chunks.
inline EnsembleResult run_ensemble(const LiouvillianOps& ops,
                                   const EnsembleSettings& settings,
                                   const std::vector<SparseOp>& observables) {
  settings.validate();
  if (settings.accumulate_state && ops.dim > 1024)
    throw UnsupportedError(
        "state accumulation above dimension 1024 would not fit in memory");
  for (const SparseOp& op : observables)
    if (op.rows() != ops.dim || op.cols() != ops.dim)
      throw DimensionError("observable dimension mismatch");

  const detail::EnsembleGrid grid = detail::make_grid(ops, settings);
  const int n = settings.n_trajectories;
  const int n_groups = std::min(settings.n_groups, n);
  const int n_obs = static_cast<int>(observables.size());

  std::vector<TrajectoryState> states;
  states.reserve(n);
  for (int j = 0; j < n; ++j)
    states.push_back(init_trajectory(ops, settings, j, n_obs));

  std::vector<DenseMatrix> group_sums;
  std::vector<long> group_samples(n_groups, 0);
  if (settings.accumulate_state)
    group_sums.assign(n_groups, DenseMatrix::Zero(ops.dim, ops.dim));

  long chunks_done = 0;
  if (!settings.checkpoint_path.empty())
    chunks_done = detail::load_ensemble_checkpoint(settings, ops.dim, n_obs,
                                                   states, group_sums,
                                                   group_samples);

  // contiguous group ranges: group g owns [bounds[g], bounds[g+1])
  std::vector<int> bounds(n_groups + 1, 0);
  for (int g = 0; g <= n_groups; ++g)
    bounds[g] = static_cast<int>((static_cast<long>(n) * g) / n_groups);

  bool completed = true;
  for (long chunk = chunks_done; chunk < grid.n_chunks; ++chunk) {
    if (settings.stop_after_chunks > 0 && chunk >= settings.stop_after_chunks) {
      completed = false;
      break;
    }
    const long chunk_end =
        std::min(grid.total_steps, (chunk + 1) * grid.steps_per_chunk);
    parallel_for(n_groups, settings.threads, [&](Index g) {
      detail::Rk4VecWorkspace ws;
      for (int j = bounds[g]; j < bounds[g + 1]; ++j) {
        TrajectoryState& st = states[j];
        while (st.step < chunk_end) {
          // advance to the next sampling point (or chunk end) in one call
          long target = chunk_end;
          if (st.step >= grid.burn_steps) {
            const long next_sample =
                grid.burn_steps +
                ((st.step - grid.burn_steps) / grid.stride + 1) * grid.stride;
            target = std::min(target, next_sample);
          } else {
            target = std::min(target, grid.burn_steps);
          }
          advance_trajectory(ops, st, target - st.step, grid.dt_abs, ws);
          if (detail::sample_due(grid, st.step)) {
            const double n2 = st.psi.squaredNorm();
            for (int k = 0; k < n_obs; ++k) {
              ws.scratch.noalias() = observables[k] * st.psi;
              st.sums(k) += st.psi.dot(ws.scratch).real() / n2;
            }
            if (settings.accumulate_state) {
              group_sums[g].noalias() += (st.psi * st.psi.adjoint()) / n2;
              group_samples[g] += 1;
            }
            st.n_samples += 1;
          }
        }
      }
    });
    if (!settings.checkpoint_path.empty())
      detail::save_ensemble_checkpoint(settings, ops.dim, n_obs, chunk + 1,
                                       states, group_sums, group_samples);
  }

  EnsembleResult out;
  out.n_trajectories = n;
  out.completed = completed;
  out.samples_per_trajectory = states.empty() ? 0 : states.front().n_samples;
  out.observables.resize(n_obs);
  for (int k = 0; k < n_obs; ++k) {
    double mean = 0.0;
    for (const TrajectoryState& st : states)
      mean += st.sums(k) / std::max<long>(1, st.n_samples);
    mean /= n;
    double var = 0.0;
    for (const TrajectoryState& st : states) {
      const double m = st.sums(k) / std::max<long>(1, st.n_samples);
      var += (m - mean) * (m - mean);
    }
    out.observables[k].value = mean;
    out.observables[k].error =
        n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  }
  for (const TrajectoryState& st : states) out.total_jumps += st.n_jumps;

  if (settings.accumulate_state) {
    long total_samples = 0;
    for (long c : group_samples) total_samples += c;
    if (total_samples == 0)
      throw ConvergenceError("no samples were collected for the ensemble state",
                             0.0, 0.0);
    DenseMatrix sum = DenseMatrix::Zero(ops.dim, ops.dim);
    for (int g = 0; g < n_groups; ++g) sum += group_sums[g];
    out.rho = DensityMatrix{sum / static_cast<double>(total_samples)};
    out.rho.enforce();
    out.has_state = true;
    for (int g = 0; g < n_groups; ++g) {
      if (group_samples[g] == 0) continue;
      out.group_states.push_back(group_sums[g] /
                                 static_cast<double>(group_samples[g]));
      out.group_weights.push_back(static_cast<double>(group_samples[g]) /
                                  static_cast<double>(total_samples));
    }
  }
  return out;
}

// Leave-one-group-out error for a scalar derived from the averaged state.
inline ObservableEstimate jackknife_estimate(
    const std::vector<DenseMatrix>& group_states,
    const std::vector<double>& group_weights,
    const std::function<double(const DensityMatrix&)>& derive) {
  const int g_count = static_cast<int>(group_states.size());
  if (g_count < 2)
    throw UsageError("jackknife needs at least two trajectory groups");
  DenseMatrix total = DenseMatrix::Zero(group_states[0].rows(), group_states[0].cols());
  for (int g = 0; g < g_count; ++g) total += group_weights[g] * group_states[g];

  ObservableEstimate est;
  {
    DensityMatrix full{total};
    full.enforce();
    est.value = derive(full);
  }
  std::vector<double> leave_out(g_count);
  double mean = 0.0;
  for (int g = 0; g < g_count; ++g) {
    DenseMatrix rest = total - group_weights[g] * group_states[g];
    DensityMatrix state{rest / (1.0 - group_weights[g])};
    state.enforce();
    leave_out[g] = derive(state);
    mean += leave_out[g];
  }
  mean /= g_count;
  double var = 0.0;
  for (double v : leave_out) var += (v - mean) * (v - mean);
  est.error = std::sqrt(var * (g_count - 1) / g_count);
  return est;
}

}  // namespace qsteady
