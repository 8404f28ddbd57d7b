#pragma once

#include "otf/autodiff.hpp"
#include "otf/common.hpp"
#include "otf/cot.hpp"
#include "otf/metrics.hpp"
#include "otf/rng.hpp"
#include "otf/ssm.hpp"

#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

namespace otf::filters {

enum class FilterKind { Otf, OtfEnkf, Enkf, Sir };

inline const char* kind_name(FilterKind k) {
  switch (k) {
    case FilterKind::Otf:
      return "otf";
    case FilterKind::OtfEnkf:
      return "otf_enkf";
    case FilterKind::Enkf:
      return "enkf";
    case FilterKind::Sir:
      return "sir";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// EnKF
// ---------------------------------------------------------------------------

struct EnKFGain {
  Mat k;  // n x m
};

/// Empirical gain K = Cov(u, y_sim) Cov(y_sim)^{-1} with a small trace-scaled
/// jitter on the observation covariance before inversion.
inline EnKFGain enkf_gain(const Mat& u, const Mat& ysim) {
  detail::require(u.rows() == ysim.rows(), "enkf_gain: row count mismatch");
  detail::require(u.rows() >= 2, "enkf_gain: need at least 2 particles");
  const auto n = static_cast<double>(u.rows());
  const Eigen::RowVectorXd mu = u.colwise().mean();
  const Eigen::RowVectorXd my = ysim.colwise().mean();
  const Mat uc = u.rowwise() - mu;
  const Mat yc = ysim.rowwise() - my;
  const Mat cov_uy = uc.transpose() * yc / (n - 1.0);
  Mat cov_yy = yc.transpose() * yc / (n - 1.0);
  const int m = static_cast<int>(cov_yy.rows());
  cov_yy += (1e-8 * cov_yy.trace() / m) * Mat::Identity(m, m);
  const Eigen::LLT<Mat> llt(cov_yy);
  if (llt.info() != Eigen::Success) throw NumericError("enkf_gain: singular observation covariance");
  EnKFGain gain;
  gain.k = llt.solve(cov_uy.transpose()).transpose();
  if (!gain.k.allFinite()) throw NumericError("enkf_gain: non-finite gain");
  return gain;
}

/// Stochastic analysis update w_i = v_i + K (Y - ysim_i).
inline ssm::Ensemble enkf_analysis(const ssm::Ensemble& ens, const EnKFGain& gain, const Vec& y_obs, const Mat& ysim) {
  detail::require(ysim.rows() == ens.size(), "enkf_analysis: row count mismatch");
  detail::require(y_obs.size() == ysim.cols(), "enkf_analysis: observation dimension mismatch");
  detail::require(gain.k.rows() == ens.dim() && gain.k.cols() == y_obs.size(), "enkf_analysis: gain shape mismatch");
  ssm::Ensemble out;
  out.particles = ens.particles + (ysim.rowwise() - y_obs.transpose()) * gain.k.transpose() * -1.0;
  return out;
}

// ---------------------------------------------------------------------------
// SIR
// ---------------------------------------------------------------------------

/// Forecast, reweight by the Gaussian observation likelihood, and resample
/// back to N equally weighted particles (multinomial by default).
inline ssm::Ensemble sir_step(const ssm::Ensemble& ens, const ssm::StateSpaceModel& model, const Vec& y_obs,
                              const RngStream& step_stream, bool systematic = false) {
  const ssm::Ensemble fc = ssm::forecast(model, ens, step_stream);
  const int n = fc.size();
  Vec logw(n);
  for (int i = 0; i < n; ++i) {
    const Vec h = ssm::observation_map(model, fc.particles.row(i).transpose());
    const Vec r = (y_obs - h).cwiseQuotient(model.sigma_obs);
    logw[i] = -0.5 * r.squaredNorm();
  }
  const double max_logw = logw.maxCoeff();
  if (!std::isfinite(max_logw)) {
    std::ostringstream os;
    os << "sir_step: weight degeneracy, max log-weight = " << max_logw;
    throw NumericError(os.str());
  }
  Vec w = (logw.array() - max_logw).exp();
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::ostringstream os;
    os << "sir_step: weight degeneracy, max log-weight = " << max_logw;
    throw NumericError(os.str());
  }
  w /= total;

  // cumulative table + per-slot uniforms
  Vec cum(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += w[i];
    cum[i] = acc;
  }
  cum[n - 1] = 1.0;
  const RngStream rs = step_stream.fold(Role::Resample);
  ssm::Ensemble out;
  out.particles.resize(n, fc.dim());
  for (int i = 0; i < n; ++i) {
    const double target = systematic ? (static_cast<double>(i) + rs.uniform(0)) / n : rs.uniform(static_cast<std::uint64_t>(i));
    const int idx = static_cast<int>(std::lower_bound(cum.data(), cum.data() + n, target) - cum.data());
    out.particles.row(i) = fc.particles.row(std::min(idx, n - 1));
  }
  return out;
}

/// Normalized likelihood weights of an ensemble (diagnostic helper).
inline Vec sir_weights(const ssm::Ensemble& ens, const ssm::StateSpaceModel& model, const Vec& y_obs) {
  const int n = ens.size();
  Vec logw(n);
  for (int i = 0; i < n; ++i) {
    const Vec h = ssm::observation_map(model, ens.particles.row(i).transpose());
    const Vec r = (y_obs - h).cwiseQuotient(model.sigma_obs);
    logw[i] = -0.5 * r.squaredNorm();
  }
  Vec w = (logw.array() - logw.maxCoeff()).exp();
  return w / w.sum();
}

// ---------------------------------------------------------------------------
// Transport filter state and step
// ---------------------------------------------------------------------------

struct OtfConfig {
  cot::TrainConfig train;
  int width = 64;
  int blocks = 2;
  bool ideal = false;  // regenerate independent particle systems each step
  // EnKF-referenced variant trains the near-identity correction; the plain
  // variant trains the full map with an identity skip.
};

/// Mutable state carried across transport-filter steps: the forecast
/// ensemble u, its shuffled reference v, per-particle simulated observations,
/// the current map/potential pair, and the persistent optimizer state.
struct FilterState {
  ssm::Ensemble u;
  Mat v;
  Mat ysim;
  cot::TransportPair maps;
  cot::AdamPair opt;
  int t = 0;
  // storage for the idealized independent-resimulation scheme
  std::vector<cot::TransportPair> history;
  std::vector<Vec> observations_seen;
};

inline cot::TransportPair make_transport_pair(const ssm::StateSpaceModel& model, const OtfConfig& cfg,
                                              cot::Variant variant, std::uint64_t seed) {
  ad::NetArch map_arch;
  map_arch.y_dim = model.obs_dim;
  map_arch.u_dim = model.state_dim;
  map_arch.out_dim = model.state_dim;
  map_arch.width = cfg.width;
  map_arch.blocks = cfg.blocks;
  map_arch.zero_init_output = true;
  // the plain map starts as the identity; the EnKF correction starts at zero
  map_arch.identity_skip = variant == cot::Variant::Plain;
  ad::NetArch psi_arch = map_arch;
  psi_arch.out_dim = 1;
  psi_arch.identity_skip = false;
  return {ad::Mlp::make(map_arch, seed * 2 + 1), ad::Mlp::make(psi_arch, seed * 2 + 2)};
}

/// Initialization: sample x_i from the initial law, forecast once, simulate
/// per-particle observations, shuffle the reference.
inline FilterState otf_init(const ssm::StateSpaceModel& model, int n_particles, const OtfConfig& cfg,
                            cot::Variant variant, std::uint64_t seed) {
  FilterState state;
  const RngStream run(seed);
  const ssm::Ensemble x0 = ssm::sample_initial_ensemble(model, n_particles, run.fold(0));
  state.u = ssm::forecast(model, x0, run.fold(1));
  state.ysim = ssm::simulate_observations(model, state.u, run.fold(1));
  const auto perm = run.fold(1).fold(Role::Shuffle).permutation(n_particles);
  state.v.resizeLike(state.u.particles);
  for (int i = 0; i < n_particles; ++i) state.v.row(i) = state.u.particles.row(perm[static_cast<std::size_t>(i)]);
  state.maps = make_transport_pair(model, cfg, variant, seed);
  state.opt = {ad::AdamState::make(state.maps.map.param_count(), cfg.train.lr_map),
               ad::AdamState::make(state.maps.psi.param_count(), cfg.train.lr_psi)};
  state.t = 1;
  return state;
}

namespace detail_otf {

/// Rebuilds two independent particle systems by full resimulation through all
/// stored maps (the idealized scheme; cost grows linearly in t).
inline void ideal_resimulate(FilterState& state, const ssm::StateSpaceModel& model, const RngStream& run) {
  const int n = state.u.size();
  const RngStream fresh = run.fold(Role::Misc).fold(static_cast<std::uint64_t>(state.t));
  ssm::Ensemble us = ssm::sample_initial_ensemble(model, n, fresh.fold(1));
  ssm::Ensemble vs = ssm::sample_initial_ensemble(model, n, fresh.fold(2));
  for (std::size_t tau = 0; tau <= state.history.size(); ++tau) {
    us = ssm::forecast(model, us, fresh.fold(3).fold(tau));
    vs = ssm::forecast(model, vs, fresh.fold(4).fold(tau));
    if (tau < state.history.size()) {
      const Vec& y = state.observations_seen[tau];
      const Mat yrep_u = y.transpose().replicate(n, 1);
      us.particles = state.history[tau].map.eval(yrep_u, us.particles);
      vs.particles = state.history[tau].map.eval(yrep_u, vs.particles);
    }
  }
  state.u = us;
  state.v = vs.particles;
  state.ysim = ssm::simulate_observations(model, state.u, fresh.fold(5));
}

}  // namespace detail_otf

/// One transport-filter step: train on the current batch, transport the
/// particles conditioned on the incoming observation, forecast, and
/// re-assemble the next batch. Returns the posterior ensemble at time t.
inline ssm::Ensemble otf_step(FilterState& state, const ssm::StateSpaceModel& model, const Vec& y_obs,
                              const OtfConfig& cfg, cot::Variant variant, const RngStream& run,
                              cot::TrainResult* train_result = nullptr) {
  const int n = state.u.size();
  const RngStream step_stream = run.fold(static_cast<std::uint64_t>(state.t));
  const int iters = cfg.train.iterations_for_step(state.t - 1);

  cot::TrainingBatch batch;
  batch.y = state.ysim;
  batch.u = state.u.particles;
  batch.v = state.v;

  EnKFGain gain;
  if (variant == cot::Variant::EnkfReference) {
    gain = enkf_gain(state.u.particles, state.ysim);
    // transported reference w_i = v_i + K (y_i - h(v_i, fresh noise))
    Mat ybar(n, model.obs_dim);
    const RngStream ref_obs = step_stream.fold(Role::RefObs);
    for (int i = 0; i < n; ++i) {
      const Vec noise = ref_obs.fold(static_cast<std::uint64_t>(i)).normal_vec(model.obs_dim);
      ybar.row(i) = ssm::observe(model, state.v.row(i).transpose(), noise).transpose();
    }
    batch.w = state.v + (state.ysim - ybar) * gain.k.transpose();
  }

  if (!cfg.train.warm_start && state.t > 1) {
    state.maps = make_transport_pair(model, cfg, variant, run.fold(Role::ParamInit).fold(static_cast<std::uint64_t>(state.t)).key());
    state.opt = {ad::AdamState::make(state.maps.map.param_count(), cfg.train.lr_map),
                 ad::AdamState::make(state.maps.psi.param_count(), cfg.train.lr_psi)};
  }

  cot::TrainResult tr;
  try {
    tr = cot::train_maxmin(cfg.train, batch, state.maps, variant, step_stream, &state.opt, iters);
  } catch (const Error& e) {
    std::ostringstream os;
    os << e.what() << " (filter step " << state.t << ")";
    throw TrainingDivergedError(os.str());
  }
  if (train_result) *train_result = tr;

  // particle update conditioned on the incoming observation
  ssm::Ensemble posterior;
  const Mat yrep = y_obs.transpose().replicate(n, 1);
  if (variant == cot::Variant::Plain) {
    posterior.particles = state.maps.map.eval(yrep, state.u.particles);
  } else {
    const Mat w_y = state.u.particles + (state.ysim.rowwise() - y_obs.transpose()) * gain.k.transpose() * -1.0;
    posterior.particles = w_y + state.maps.map.eval(yrep, w_y);
  }
  if (!posterior.particles.allFinite()) {
    std::ostringstream os;
    os << "transport filter produced non-finite particles at step " << state.t;
    throw NumericError(os.str());
  }

  if (cfg.ideal) {
    state.history.push_back(state.maps);
    state.observations_seen.push_back(y_obs);
  }

  // forecast and next-batch assembly
  state.t += 1;
  const RngStream next_stream = run.fold(static_cast<std::uint64_t>(state.t));
  if (cfg.ideal) {
    detail_otf::ideal_resimulate(state, model, run);
  } else {
    state.u = ssm::forecast(model, posterior, next_stream);
    state.ysim = ssm::simulate_observations(model, state.u, next_stream);
    const auto perm = next_stream.fold(Role::Shuffle).permutation(n);
    for (int i = 0; i < n; ++i) state.v.row(i) = state.u.particles.row(perm[static_cast<std::size_t>(i)]);
  }
  return posterior;
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

struct RunConfig {
  int n_particles = 250;
  OtfConfig otf;
  bool sir_systematic = false;
  int snapshot_stride = 1;  // store posterior ensembles every k steps (0 = none)
  std::vector<metrics::DivergenceSpec> divergences;
};

struct MetricRow {
  int step = 0;
  std::string metric;
  double value = 0.0;
  double stderr_ = 0.0;
};

/// Output of one filter run: posterior snapshots, per-step summary
/// statistics, metric rows against the supplied references, wall clock.
struct FilterRun {
  FilterKind kind = FilterKind::Enkf;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<int> snapshot_steps;
  std::vector<Mat> snapshots;
  Mat posterior_means;  // t_steps x n
  Mat observations;
  std::vector<MetricRow> metric_rows;
  Vec wall_clock_s;  // per step
};

/// Runs a filter over an observation sequence. Deterministic per
/// (kind, model, observations, cfg, seed). When `truth` is supplied the MSE
/// series is recorded; when `reference` posterior sample sets are supplied
/// every configured divergence is recorded per step.
inline FilterRun run_filter(FilterKind kind, const ssm::StateSpaceModel& model, const Mat& observations,
                            const RunConfig& cfg, std::uint64_t seed, const Mat* truth = nullptr,
                            const std::vector<Mat>* reference = nullptr) {
  detail::require(observations.rows() >= 1, "run_filter: empty observation sequence");
  model.validate();
  const int t_steps = static_cast<int>(observations.rows());
  const RngStream run(seed);

  FilterRun out;
  out.kind = kind;
  out.seed = seed;
  out.observations = observations;
  out.posterior_means.resize(t_steps, model.state_dim);
  out.wall_clock_s = Vec::Zero(t_steps);

  const cot::Variant variant = kind == FilterKind::OtfEnkf ? cot::Variant::EnkfReference : cot::Variant::Plain;
  FilterState state;
  ssm::Ensemble ens;
  if (kind == FilterKind::Otf || kind == FilterKind::OtfEnkf) {
    state = otf_init(model, cfg.n_particles, cfg.otf, variant, seed);
  } else {
    ens = ssm::sample_initial_ensemble(model, cfg.n_particles, run.fold(0));
  }

  for (int t = 0; t < t_steps; ++t) {
    const auto start = std::chrono::steady_clock::now();
    const Vec y_obs = observations.row(t).transpose();
    const RngStream step_stream = run.fold(static_cast<std::uint64_t>(t) + 1);
    ssm::Ensemble posterior;
    switch (kind) {
      case FilterKind::Otf:
      case FilterKind::OtfEnkf:
        posterior = otf_step(state, model, y_obs, cfg.otf, variant, run);
        break;
      case FilterKind::Enkf: {
        const ssm::Ensemble fc = ssm::forecast(model, ens, step_stream);
        const Mat ysim = ssm::simulate_observations(model, fc, step_stream);
        posterior = enkf_analysis(fc, enkf_gain(fc.particles, ysim), y_obs, ysim);
        ens = posterior;
        break;
      }
      case FilterKind::Sir: {
        posterior = sir_step(ens, model, y_obs, step_stream, cfg.sir_systematic);
        ens = posterior;
        break;
      }
    }
    out.posterior_means.row(t) = posterior.particles.colwise().mean();
    if (cfg.snapshot_stride > 0 && t % cfg.snapshot_stride == 0) {
      out.snapshot_steps.push_back(t);
      out.snapshots.push_back(posterior.particles);
    }
    if (reference) {
      detail::require(static_cast<int>(reference->size()) == t_steps, "run_filter: reference step count mismatch");
      for (const auto& spec : cfg.divergences) {
        MetricRow row;
        row.step = t;
        switch (spec.kind) {
          case metrics::DivergenceSpec::Kind::W1:
            row.metric = "w1";
            break;
          case metrics::DivergenceSpec::Kind::W2:
            row.metric = "w2";
            break;
          case metrics::DivergenceSpec::Kind::Mmd:
            row.metric = "mmd";
            break;
          case metrics::DivergenceSpec::Kind::Mse:
            continue;  // handled against the truth below
        }
        row.value = metrics::divergence(posterior.particles, (*reference)[static_cast<std::size_t>(t)], spec);
        out.metric_rows.push_back(row);
      }
    }
    out.wall_clock_s[t] =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - start).count();
  }

  if (truth) {
    const Vec mse = metrics::mse_series(out.posterior_means, *truth);
    for (int t = 0; t < t_steps; ++t) out.metric_rows.push_back({t, "mse", mse[t], 0.0});
  }
  return out;
}

}  // namespace otf::filters
