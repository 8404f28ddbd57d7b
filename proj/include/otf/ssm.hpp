#pragma once

#include "otf/common.hpp"
#include "otf/rng.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace otf::ssm {

enum class Dynamics { Lorenz63, Lorenz96, Linear };
enum class Integrator { Euler, Rk4, Discrete };
enum class ObsKind { Select, Square };

/// Discrete-time state-space model: a dynamics kernel (deterministic drift +
/// additive Gaussian process noise), an observation kernel, and a Gaussian
/// initial law. Lorenz systems use the canonical chaotic parameters; the
/// linear model applies its matrix directly per step (Discrete integrator).
struct StateSpaceModel {
  int state_dim = 0;
  int obs_dim = 0;

  Dynamics dynamics = Dynamics::Linear;
  Integrator integrator = Integrator::Discrete;
  double dt = 0.01;

  // Lorenz 63 parameters.
  double l63_sigma = 10.0, l63_rho = 28.0, l63_beta = 8.0 / 3.0;
  // Lorenz 96 forcing.
  double l96_forcing = 8.0;
  // Linear dynamics matrix (Discrete: u' = A u; Euler/Rk4: du/dt = A u).
  Mat linear_a;

  Vec sigma_proc;  // per-dimension process-noise std, >= 0
  Vec sigma_obs;   // per-dimension observation-noise std, > 0

  ObsKind obs_kind = ObsKind::Select;
  std::vector<int> obs_select;  // 0-based component indices, used by Select

  Vec init_mean;
  Mat init_cov;

  bool truth_process_noise = false;  // whether simulate_truth adds process noise

  void validate() const {
    detail::require(state_dim >= 1, "state_dim must be >= 1");
    detail::require(obs_dim >= 1, "obs_dim must be >= 1");
    detail::require(dt > 0.0, "dt must be > 0");
    detail::require(sigma_proc.size() == state_dim, "sigma_proc dimension mismatch");
    detail::require(sigma_obs.size() == obs_dim, "sigma_obs dimension mismatch");
    detail::require(sigma_proc.minCoeff() >= 0.0, "sigma_proc must be >= 0");
    detail::require(sigma_obs.minCoeff() > 0.0, "sigma_obs must be > 0");
    if (obs_kind == ObsKind::Select) {
      detail::require(static_cast<int>(obs_select.size()) == obs_dim, "obs_select size must equal obs_dim");
      for (int idx : obs_select)
        detail::require(idx >= 0 && idx < state_dim, "observation selector index out of range");
    } else {
      detail::require(obs_dim == state_dim, "elementwise-square observation requires obs_dim == state_dim");
    }
    if (dynamics == Dynamics::Lorenz63) detail::require(state_dim == 3, "Lorenz 63 requires state_dim == 3");
    if (dynamics == Dynamics::Lorenz96) detail::require(state_dim >= 4, "Lorenz 96 requires state_dim >= 4");
    if (dynamics == Dynamics::Linear)
      detail::require(linear_a.rows() == state_dim && linear_a.cols() == state_dim, "linear_a dimension mismatch");
    detail::require(init_mean.size() == state_dim, "init_mean dimension mismatch");
    detail::require(init_cov.rows() == state_dim && init_cov.cols() == state_dim, "init_cov dimension mismatch");
  }
};

/// N particles, one state per row. Weights are present only between an SIR
/// reweighting and the subsequent resample; everywhere else the ensemble is
/// unweighted.
struct Ensemble {
  Mat particles;               // N x n
  std::optional<Vec> weights;  // simplex vector when present

  int size() const { return static_cast<int>(particles.rows()); }
  int dim() const { return static_cast<int>(particles.cols()); }

  void validate() const {
    detail::require(size() >= 2, "ensemble needs at least 2 particles");
    if (weights) {
      detail::require(weights->size() == size(), "weight vector length mismatch");
      detail::require(weights->minCoeff() >= 0.0, "weights must be nonnegative");
      detail::require(std::abs(weights->sum() - 1.0) <= 1e-12, "weights must sum to 1");
    }
  }
};

struct Trajectory {
  Mat states;        // t_steps x n
  Mat observations;  // t_steps x m
  std::uint64_t seed = 0;
};

inline Vec drift_eval(const StateSpaceModel& model, const Vec& u) {
  detail::require(u.size() == model.state_dim, "drift_eval: state dimension mismatch");
  switch (model.dynamics) {
    case Dynamics::Lorenz63: {
      Vec f(3);
      f[0] = model.l63_sigma * (u[1] - u[0]);
      f[1] = u[0] * (model.l63_rho - u[2]) - u[1];
      f[2] = u[0] * u[1] - model.l63_beta * u[2];
      return f;
    }
    case Dynamics::Lorenz96: {
      const int n = model.state_dim;
      Vec f(n);
      for (int i = 0; i < n; ++i) {
        const int ip1 = (i + 1) % n;
        const int im1 = (i - 1 + n) % n;
        const int im2 = (i - 2 + n) % n;
        f[i] = (u[ip1] - u[im2]) * u[im1] - u[i] + model.l96_forcing;
      }
      return f;
    }
    case Dynamics::Linear:
      return model.linear_a * u;
  }
  throw ContractError("drift_eval: unknown dynamics");
}

/// One deterministic integrator step over dt followed by additive noise
/// scaling: u' = integrate(u) + sigma_proc .* noise.
inline Vec step_dynamics(const StateSpaceModel& model, const Vec& u, const Vec& noise) {
  detail::require(u.size() == model.state_dim, "step_dynamics: state dimension mismatch");
  detail::require(noise.size() == model.state_dim, "step_dynamics: noise dimension mismatch");
  Vec next;
  switch (model.integrator) {
    case Integrator::Euler:
      next = u + model.dt * drift_eval(model, u);
      break;
    case Integrator::Rk4: {
      const double h = model.dt;
      const Vec k1 = drift_eval(model, u);
      const Vec k2 = drift_eval(model, u + 0.5 * h * k1);
      const Vec k3 = drift_eval(model, u + 0.5 * h * k2);
      const Vec k4 = drift_eval(model, u + h * k3);
      next = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      break;
    }
    case Integrator::Discrete:
      next = drift_eval(model, u);
      break;
  }
  next += model.sigma_proc.cwiseProduct(noise);
  if (!next.allFinite()) throw NumericError("step_dynamics: non-finite state");
  return next;
}

inline Vec observation_map(const StateSpaceModel& model, const Vec& u) {
  detail::require(u.size() == model.state_dim, "observe: state dimension mismatch");
  Vec h(model.obs_dim);
  if (model.obs_kind == ObsKind::Select) {
    for (int k = 0; k < model.obs_dim; ++k) h[k] = u[model.obs_select[static_cast<std::size_t>(k)]];
  } else {
    h = 0.5 * u.cwiseProduct(u);
  }
  return h;
}

inline Vec observe(const StateSpaceModel& model, const Vec& u, const Vec& noise) {
  detail::require(noise.size() == model.obs_dim, "observe: noise dimension mismatch");
  return observation_map(model, u) + model.sigma_obs.cwiseProduct(noise);
}

inline Vec sample_initial_state(const StateSpaceModel& model, const RngStream& stream) {
  return model.init_mean + psd_sqrt(model.init_cov) * stream.normal_vec(model.state_dim);
}

/// Simulates one hidden trajectory plus its observation sequence. States use
/// the model's truth-noise flag; observations always carry fresh noise.
/// Deterministic given (model, t_steps, seed).
inline Trajectory simulate_truth(const StateSpaceModel& model, int t_steps, std::uint64_t seed) {
  detail::require(t_steps >= 1, "simulate_truth: t_steps must be >= 1");
  model.validate();
  const RngStream root = RngStream(seed).fold(Role::Misc).fold(0xfeedULL);
  Trajectory traj;
  traj.seed = seed;
  traj.states.resize(t_steps, model.state_dim);
  traj.observations.resize(t_steps, model.obs_dim);

  Vec u = sample_initial_state(model, root.fold(Role::Init));
  const Vec zero_noise = Vec::Zero(model.state_dim);
  for (int t = 0; t < t_steps; ++t) {
    const RngStream st = root.fold(static_cast<std::uint64_t>(t) + 1);
    const Vec pnoise =
        model.truth_process_noise ? st.fold(Role::ProcessNoise).normal_vec(model.state_dim) : zero_noise;
    try {
      u = step_dynamics(model, u, pnoise);
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << e.what() << " at step " << t;
      throw NumericError(os.str());
    }
    traj.states.row(t) = u.transpose();
    traj.observations.row(t) = observe(model, u, st.fold(Role::ObsNoise).normal_vec(model.obs_dim)).transpose();
  }
  return traj;
}

inline Ensemble sample_initial_ensemble(const StateSpaceModel& model, int n_particles, const RngStream& stream) {
  detail::require(n_particles >= 2, "ensemble needs at least 2 particles");
  const Mat chol = psd_sqrt(model.init_cov);
  Ensemble ens;
  ens.particles.resize(n_particles, model.state_dim);
  for (int i = 0; i < n_particles; ++i) {
    const RngStream si = stream.fold(Role::Init).fold(static_cast<std::uint64_t>(i));
    ens.particles.row(i) = (model.init_mean + chol * si.normal_vec(model.state_dim)).transpose();
  }
  return ens;
}

/// Pushes every particle independently through the dynamics with fresh
/// process noise. `step_stream` must already encode (run seed, step index);
/// particle index and role are folded here.
inline Ensemble forecast(const StateSpaceModel& model, const Ensemble& ens, const RngStream& step_stream) {
  detail::require(!ens.weights.has_value(), "forecast expects an unweighted ensemble");
  ens.validate();
  Ensemble out;
  out.particles.resize(ens.size(), model.state_dim);
  const RngStream proc = step_stream.fold(Role::ProcessNoise);
  for (int i = 0; i < ens.size(); ++i) {
    const Vec noise = proc.fold(static_cast<std::uint64_t>(i)).normal_vec(model.state_dim);
    try {
      out.particles.row(i) = step_dynamics(model, ens.particles.row(i).transpose(), noise).transpose();
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << e.what() << " (particle " << i << ")";
      throw NumericError(os.str());
    }
  }
  return out;
}

/// Per-particle simulated observations h(u_i) + sigma_obs .* noise_i.
inline Mat simulate_observations(const StateSpaceModel& model, const Ensemble& ens, const RngStream& step_stream,
                                 Role role = Role::ObsSim) {
  Mat y(ens.size(), model.obs_dim);
  const RngStream obs = step_stream.fold(role);
  for (int i = 0; i < ens.size(); ++i) {
    const Vec noise = obs.fold(static_cast<std::uint64_t>(i)).normal_vec(model.obs_dim);
    y.row(i) = observe(model, ens.particles.row(i).transpose(), noise).transpose();
  }
  return y;
}

}  // namespace otf::ssm
