#pragma once

#include "otf/harness.hpp"

#include <atomic>
#include <chrono>
#include <functional>
#include <iostream>
#include <thread>

namespace otf::harness {

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

inline ssm::StateSpaceModel squared_static_model(int dim, double sigma) {
  ssm::StateSpaceModel m;
  m.state_dim = dim;
  m.obs_dim = dim;
  m.dynamics = ssm::Dynamics::Linear;
  m.integrator = ssm::Integrator::Discrete;
  m.linear_a = Mat::Identity(dim, dim);
  m.sigma_proc = Vec::Zero(dim);
  m.sigma_obs = Vec::Constant(dim, sigma);
  m.obs_kind = ssm::ObsKind::Square;
  m.init_mean = Vec::Zero(dim);
  m.init_cov = Mat::Identity(dim, dim);
  return m;
}

/// Fraction of ordered sample pairs on which the map conditioned at y_star
/// violates monotonicity, i.e. <T(y, u_i) - T(y, u_j), u_j - u_i> > 0.
inline double monotonicity_violation_fraction(const ad::Mlp& map, const Vec& y_star, const Mat& u_samples) {
  const int n = static_cast<int>(u_samples.rows());
  const Mat yrep = y_star.transpose().replicate(n, 1);
  const Mat t = map.eval(yrep, u_samples);
  long violations = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if ((t.row(i) - t.row(j)).dot(u_samples.row(j) - u_samples.row(i)) > 0.0) ++violations;
    }
  return static_cast<double>(violations) / (static_cast<double>(n) * (n - 1));
}

inline int env_worker_count() {
  if (const char* env = std::getenv("OTF_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs `jobs` tasks on a small worker pool; each task writes only its own
/// result slot, so the merged output is deterministic.
inline void parallel_for_jobs(int jobs, const std::function<void(int)>& work) {
  const int workers = std::min(env_worker_count(), jobs);
  if (workers <= 1) {
    for (int j = 0; j < jobs; ++j) work(j);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int j = next.fetch_add(1); j < jobs; j = next.fetch_add(1)) work(j);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Cell results and persistence
// ---------------------------------------------------------------------------

struct CellResult {
  std::string experiment;
  std::string filter;
  std::uint64_t seed = 0;
  std::vector<ResultRow> rows;
  bool failed = false;
  std::string error;
  // persisted artifacts
  std::optional<filters::FilterRun> run;
  std::optional<cot::TransportPair> trained;  // static experiments keep the final maps
};

inline void write_text_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline std::string matrix_csv(const Mat& m) {
  std::ostringstream os;
  char buf[40];
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      os << (j ? "," : "") << buf;
    }
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json net_to_json(const ad::Mlp& net) {
  nlohmann::json j;
  j["format"] = 1;
  j["arch"] = {{"y_dim", net.arch.y_dim},       {"u_dim", net.arch.u_dim},
               {"out_dim", net.arch.out_dim},   {"width", net.arch.width},
               {"blocks", net.arch.blocks},     {"residual", net.arch.residual},
               {"zero_init_output", net.arch.zero_init_output}, {"identity_skip", net.arch.identity_skip}};
  j["params"] = std::vector<double>(net.params.values.data(), net.params.values.data() + net.params.values.size());
  return j;
}

inline ad::Mlp net_from_json(const nlohmann::json& j) {
  detail::require(j.at("format").get<int>() == 1, "unsupported map file format version");
  ad::NetArch arch;
  const auto& a = j.at("arch");
  arch.y_dim = a.at("y_dim").get<int>();
  arch.u_dim = a.at("u_dim").get<int>();
  arch.out_dim = a.at("out_dim").get<int>();
  arch.width = a.at("width").get<int>();
  arch.blocks = a.at("blocks").get<int>();
  arch.residual = a.at("residual").get<bool>();
  arch.zero_init_output = a.at("zero_init_output").get<bool>();
  arch.identity_skip = a.at("identity_skip").get<bool>();
  ad::Mlp net = ad::Mlp::make(arch, 0);
  const auto params = j.at("params").get<std::vector<double>>();
  detail::require(static_cast<int>(params.size()) == net.param_count(), "map file parameter count mismatch");
  net.params.values = Eigen::Map<const Vec>(params.data(), static_cast<Eigen::Index>(params.size()));
  return net;
}

// ---------------------------------------------------------------------------
// Static bimodal experiment (one Bayesian update, exact posterior available)
// ---------------------------------------------------------------------------

/// Exact posterior sampler for the static squared-observation model: the
/// posterior factorizes per dimension, each factor sampled by its quantile
/// function. Deterministic stratified draws with a seeded shuffle.
inline Mat squared_posterior_exact_samples(int dim, double y_value, double sigma, int n, const RngStream& rng) {
  const oracle::Density1D post = oracle::posterior_squared_model(y_value, sigma);
  Mat out(n, dim);
  for (int d = 0; d < dim; ++d) {
    const auto perm = rng.fold(static_cast<std::uint64_t>(d)).permutation(n);
    for (int i = 0; i < n; ++i)
      out(i, d) = post.quantile((static_cast<double>(perm[static_cast<std::size_t>(i)]) + 0.5) / n);
  }
  return out;
}

inline CellResult run_static_cell(const ExperimentConfig& cfg, const FilterConfig& fc, int dim, std::uint64_t seed) {
  CellResult cell;
  cell.experiment = "bimodal_n" + std::to_string(dim);
  cell.filter = fc.name;
  cell.seed = seed;
  const auto t_start = std::chrono::steady_clock::now();

  ssm::StateSpaceModel model = squared_static_model(dim, cfg.static_sigma);
  const RngStream run(seed);
  const ssm::Ensemble prior = ssm::sample_initial_ensemble(model, fc.particles, run.fold(0));
  const Vec y_star = Vec::Constant(dim, cfg.static_observation);

  const Mat exact = squared_posterior_exact_samples(dim, cfg.static_observation, cfg.static_sigma, fc.particles,
                                                    RngStream(seed).fold(Role::Misc));
  metrics::DivergenceSpec w2spec;
  w2spec.kind = metrics::DivergenceSpec::Kind::W2;
  w2spec.size_cap = cfg.w2_size_cap;

  Mat posterior;
  switch (fc.kind) {
    case filters::FilterKind::Otf: {
      cot::TrainingBatch batch = cot::batch_assemble(prior, model, run.fold(1));
      cot::TransportPair pair = filters::make_transport_pair(model, fc.run.otf, cot::Variant::Plain, seed);
      cot::train_maxmin(fc.run.otf.train, batch, pair, cot::Variant::Plain, run.fold(2));
      posterior = pair.map.eval(y_star.transpose().replicate(fc.particles, 1), prior.particles);
      cell.trained = pair;
      const double viol = monotonicity_violation_fraction(pair.map, y_star, prior.particles);
      cell.rows.push_back({cell.experiment, fc.name, seed, 0, "mono_viol", viol});
      if (dim == 1) {
        const oracle::Density1D prior_d = oracle::Density1D::gaussian(0.0, 1.0);
        const oracle::Density1D post_d = oracle::posterior_squared_model(cfg.static_observation, cfg.static_sigma);
        const int mc = 4000;
        Mat yq = Mat::Constant(mc, 1, cfg.static_observation), uq(mc, 1);
        for (int i = 0; i < mc; ++i) uq(i, 0) = RngStream(101).fold(static_cast<std::uint64_t>(i)).normal(0);
        const Mat tq = pair.map.eval(yq, uq);
        double err = 0.0;
        for (int i = 0; i < mc; ++i) err += std::pow(tq(i, 0) - oracle::cdf_map_1d(prior_d, post_d, uq(i, 0)), 2);
        cell.rows.push_back({cell.experiment, fc.name, seed, 0, "map_l2_oracle", std::sqrt(err / mc)});
      }
      break;
    }
    case filters::FilterKind::OtfEnkf: {
      cot::TrainingBatch batch = cot::batch_assemble(prior, model, run.fold(1));
      const auto gain = filters::enkf_gain(prior.particles, batch.y);
      Mat ybar(fc.particles, model.obs_dim);
      const RngStream ref_obs = run.fold(1).fold(Role::RefObs);
      for (int i = 0; i < fc.particles; ++i)
        ybar.row(i) =
            ssm::observe(model, batch.v.row(i).transpose(), ref_obs.fold(static_cast<std::uint64_t>(i)).normal_vec(model.obs_dim))
                .transpose();
      batch.w = batch.v + (batch.y - ybar) * gain.k.transpose();
      cot::TransportPair pair = filters::make_transport_pair(model, fc.run.otf, cot::Variant::EnkfReference, seed);
      cot::train_maxmin(fc.run.otf.train, batch, pair, cot::Variant::EnkfReference, run.fold(2));
      const Mat w_y = prior.particles + (batch.y.rowwise() - y_star.transpose()) * gain.k.transpose() * -1.0;
      posterior = w_y + pair.map.eval(y_star.transpose().replicate(fc.particles, 1), w_y);
      cell.trained = pair;
      break;
    }
    case filters::FilterKind::Enkf: {
      const Mat ysim = ssm::simulate_observations(model, prior, run.fold(1));
      posterior = filters::enkf_analysis(prior, filters::enkf_gain(prior.particles, ysim), y_star, ysim).particles;
      break;
    }
    case filters::FilterKind::Sir: {
      ssm::Ensemble post = filters::sir_step(prior, model, y_star, run.fold(1));
      posterior = post.particles;
      break;
    }
  }

  const double w2 = dim == 1 ? metrics::wasserstein_1d(posterior.col(0), exact.col(0), 2)
                             : metrics::wasserstein_exact(posterior, exact, 2, cfg.w2_size_cap);
  cell.rows.push_back({cell.experiment, fc.name, seed, 0, "w2", w2});
  const double secs =
      std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t_start).count();
  cell.rows.push_back({cell.experiment, fc.name, seed, 0, "wall_seconds", secs});

  filters::FilterRun fr;
  fr.kind = fc.kind;
  fr.seed = seed;
  fr.snapshot_steps = {0};
  fr.snapshots = {posterior};
  fr.observations = y_star.transpose();
  fr.posterior_means = posterior.colwise().mean();
  cell.run = fr;
  return cell;
}

// ---------------------------------------------------------------------------
// Dynamic (filtering) experiments
// ---------------------------------------------------------------------------

inline ssm::StateSpaceModel truth_model(const ExperimentConfig& cfg) {
  ssm::StateSpaceModel m = cfg.model;
  if (cfg.truth_init_mean) m.init_mean = *cfg.truth_init_mean;
  if (cfg.truth_init_cov) m.init_cov = *cfg.truth_init_cov;
  return m;
}

/// Reference posterior sample sets per step from a large-N SIR run on the
/// shared observations.
inline std::vector<Mat> sir_reference(const ssm::StateSpaceModel& model, const Mat& observations, int n_particles,
                                      std::uint64_t seed) {
  filters::RunConfig rc;
  rc.n_particles = n_particles;
  rc.snapshot_stride = 1;
  const filters::FilterRun run = filters::run_filter(filters::FilterKind::Sir, model, observations, rc, seed);
  return run.snapshots;
}

inline CellResult run_dynamic_cell(const ExperimentConfig& cfg, const FilterConfig& fc, std::uint64_t seed,
                                   const ssm::Trajectory& truth, const std::vector<Mat>* reference) {
  CellResult cell;
  cell.experiment = cfg.experiment == ExperimentKind::Lorenz63   ? "lorenz63"
                    : cfg.experiment == ExperimentKind::Lorenz96 ? "lorenz96"
                                                                 : "linear_gaussian";
  cell.filter = fc.name;
  cell.seed = seed;

  filters::RunConfig rc = fc.run;
  rc.n_particles = fc.particles;
  rc.snapshot_stride = cfg.snapshot_stride;
  const bool want_w2 =
      std::find(cfg.metric_names.begin(), cfg.metric_names.end(), "w2") != cfg.metric_names.end() && reference;
  if (want_w2) {
    metrics::DivergenceSpec spec;
    spec.kind = metrics::DivergenceSpec::Kind::W2;
    spec.size_cap = cfg.w2_size_cap;
    rc.divergences.push_back(spec);
  }
  const bool want_mse = std::find(cfg.metric_names.begin(), cfg.metric_names.end(), "mse") != cfg.metric_names.end();

  // thin the reference clouds to the filter's ensemble size for the exact
  // assignment solver (rows of a resampled reference are exchangeable)
  std::vector<Mat> thinned;
  const std::vector<Mat>* ref_ptr = nullptr;
  if (want_w2) {
    thinned.reserve(reference->size());
    for (const auto& r : *reference)
      thinned.push_back(r.rows() > fc.particles ? Mat(r.topRows(fc.particles)) : r);
    ref_ptr = &thinned;
  }

  const filters::FilterRun run =
      filters::run_filter(fc.kind, cfg.model, truth.observations, rc, seed, want_mse ? &truth.states : nullptr, ref_ptr);

  for (const auto& row : run.metric_rows)
    cell.rows.push_back({cell.experiment, fc.name, seed, row.step, row.metric, row.value});
  // sign coverage of the first state component (bimodality diagnostic)
  for (std::size_t s = 0; s < run.snapshots.size(); ++s) {
    const auto& snap = run.snapshots[s];
    const bool both = snap.col(0).minCoeff() < 0.0 && snap.col(0).maxCoeff() > 0.0;
    cell.rows.push_back({cell.experiment, fc.name, seed, run.snapshot_steps[s], "both_signs", both ? 1.0 : 0.0});
  }
  const double total_s = run.wall_clock_s.sum();
  cell.rows.push_back({cell.experiment, fc.name, seed, 0, "wall_seconds", total_s});
  cell.run = run;
  return cell;
}

// ---------------------------------------------------------------------------
// Rate study: quadratic-class map estimation error versus sample size
// ---------------------------------------------------------------------------

/// Linear-Gaussian conditional instance for the rate study:
/// hidden u ~ N(0, I_n), observation y = H u + noise with H the leading
/// obs_dim rows of the identity. The optimal quadratic potential comes from
/// the Gaussian transport closed form.
struct RateInstance {
  int n = 2, m = 1;
  double obs_noise = 0.5;
  Mat h;          // m x n selector
  Mat post_cov;   // posterior covariance (constant in y)
  Mat post_gain;  // posterior mean = post_gain * y
  ad::QuadraticPotential optimum;

  static RateInstance make(int n, int m, double obs_noise) {
    detail::require(m <= n, "rate study: obs_dim must be <= state_dim");
    RateInstance inst;
    inst.n = n;
    inst.m = m;
    inst.obs_noise = obs_noise;
    inst.h = Mat::Identity(m, n);
    const Mat r = obs_noise * obs_noise * Mat::Identity(m, m);
    const Mat s = inst.h * inst.h.transpose() + r;
    inst.post_gain = inst.h.transpose() * s.inverse();
    inst.post_cov = Mat::Identity(n, n) - inst.post_gain * inst.h;
    // transport N(0, I) -> N(post_gain y, post_cov): A = post_cov^{1/2}
    inst.optimum.q0 = psd_sqrt(inst.post_cov);
    inst.optimum.b0 = Vec::Zero(n);
    inst.optimum.by = inst.post_gain;
    return inst;
  }

  cot::TrainingBatch sample(int n_samples, const RngStream& rng) const {
    cot::TrainingBatch b;
    b.y.resize(n_samples, m);
    b.u.resize(n_samples, n);
    b.v.resize(n_samples, n);
    for (int i = 0; i < n_samples; ++i) {
      const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
      const Vec u = si.fold(1).normal_vec(n);
      const Vec y = h * u + obs_noise * si.fold(2).normal_vec(m);
      b.u.row(i) = u.transpose();
      b.y.row(i) = y.transpose();
      b.v.row(i) = si.fold(3).normal_vec(n).transpose();
    }
    return b;
  }

  /// Exact squared L2(eta) distance between the gradients of a fitted
  /// quadratic potential and the optimum, integrated over v ~ N(0, I) and
  /// y ~ N(0, H H^T + R).
  double map_error_sq(const ad::QuadraticPotential& fit) const {
    const Mat dq = fit.q0 - optimum.q0;
    const Mat db = fit.by - optimum.by;
    const Vec dc = fit.b0 - optimum.b0;
    const Mat sy = h * h.transpose() + obs_noise * obs_noise * Mat::Identity(m, m);
    return (dq * dq.transpose()).trace() + (db * sy * db.transpose()).trace() + dc.squaredNorm();
  }
};

inline CellResult run_rate_cell(const ExperimentConfig& cfg, int n_samples, std::uint64_t seed) {
  CellResult cell;
  cell.experiment = "rate_n" + std::to_string(n_samples);
  cell.filter = "quadratic";
  cell.seed = seed;
  const RateInstance inst = RateInstance::make(cfg.rate_state_dim, cfg.rate_obs_dim, cfg.rate_obs_noise);
  const cot::TrainingBatch batch = inst.sample(n_samples, RngStream(seed).fold(7));
  const ad::QuadraticPotential fit = cot::fit_quadratic_semidual(batch);
  cell.rows.push_back({cell.experiment, "quadratic", seed, 0, "map_err", std::sqrt(inst.map_error_sq(fit))});
  cell.rows.push_back({cell.experiment, "quadratic", seed, 0, "semidual", cot::semidual_empirical(fit, batch)});
  return cell;
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct RunOptions {
  std::optional<std::vector<std::uint64_t>> seeds;      // override
  std::optional<std::vector<std::string>> filter_names;  // override
  bool force = false;
};

inline std::uint64_t truth_seed(std::uint64_t seed) { return mix64(seed ^ 0x7057e3dULL); }

/// Runs every (filter, seed) cell of the experiment, persists artifacts under
/// `out_dir`, and returns the merged result table. Partial failures are
/// recorded and reported; the call throws only if nothing succeeded.
ResultTable run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, const RunOptions& opts = {});

inline void persist_cell(const fs::path& dir, const ExperimentConfig& cfg, const CellResult& cell) {
  const fs::path cell_dir = dir / "runs" / (cell.experiment + "_" + cell.filter + "_s" + std::to_string(cell.seed));
  fs::create_directories(cell_dir);
  std::ostringstream metrics_csv;
  metrics_csv << "step,metric,value\n";
  for (const auto& r : cell.rows) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    metrics_csv << r.step << "," << r.metric << "," << buf << "\n";
  }
  write_text_file(cell_dir / "metrics.csv", metrics_csv.str());
  if (cell.run) {
    for (std::size_t s = 0; s < cell.run->snapshots.size(); ++s) {
      if (cfg.snapshot_stride <= 0) break;
      char name[32];
      std::snprintf(name, sizeof(name), "ens_%06d.csv", cell.run->snapshot_steps[s]);
      write_text_file(cell_dir / name, matrix_csv(cell.run->snapshots[s]));
    }
    write_text_file(cell_dir / "posterior_means.csv", matrix_csv(cell.run->posterior_means));
  }
  if (cell.trained) {
    write_text_file(cell_dir / "map.json", net_to_json(cell.trained->map).dump(2));
    write_text_file(cell_dir / "potential.json", net_to_json(cell.trained->psi).dump(2));
  }
}

inline ResultTable run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, const RunOptions& opts) {
  const fs::path dir(out_dir);
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path) && !opts.force) {
    std::ifstream in(manifest_path);
    nlohmann::json m;
    in >> m;
    if (m.value("config_hash", std::uint64_t(0)) != cfg.config_hash)
      throw ConfigError("output directory " + out_dir +
                        " holds results for a different configuration; pass force to overwrite");
  }
  fs::create_directories(dir);

  std::vector<std::uint64_t> seeds = opts.seeds.value_or(cfg.seeds);
  std::vector<FilterConfig> filter_list;
  if (opts.filter_names) {
    for (const auto& name : *opts.filter_names) {
      const auto it = std::find_if(cfg.filter_list.begin(), cfg.filter_list.end(),
                                   [&](const FilterConfig& fc) { return fc.name == name; });
      if (it == cfg.filter_list.end()) throw ConfigError("unknown filter selection '" + name + "'");
      filter_list.push_back(*it);
    }
  } else {
    filter_list = cfg.filter_list;
  }

  const auto wall_start = std::chrono::steady_clock::now();
  std::vector<CellResult> cells;

  if (cfg.experiment == ExperimentKind::RateStudy) {
    std::vector<std::pair<int, std::uint64_t>> jobs;
    for (const int n : cfg.rate_sample_sizes)
      for (const auto seed : seeds) jobs.emplace_back(n, seed);
    cells.resize(jobs.size());
    parallel_for_jobs(static_cast<int>(jobs.size()), [&](int j) {
      const auto [n, seed] = jobs[static_cast<std::size_t>(j)];
      try {
        cells[static_cast<std::size_t>(j)] = run_rate_cell(cfg, n, seed);
      } catch (const std::exception& e) {
        cells[static_cast<std::size_t>(j)].failed = true;
        cells[static_cast<std::size_t>(j)].error = e.what();
        cells[static_cast<std::size_t>(j)].experiment = "rate_n" + std::to_string(n);
        cells[static_cast<std::size_t>(j)].seed = seed;
      }
    });
  } else if (cfg.experiment == ExperimentKind::StaticBimodal) {
    struct Job {
      int dim;
      const FilterConfig* fc;
      std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const int dim : cfg.static_dims)
      for (const auto& fc : filter_list)
        for (const auto seed : seeds) jobs.push_back({dim, &fc, seed});
    cells.resize(jobs.size());
    parallel_for_jobs(static_cast<int>(jobs.size()), [&](int j) {
      const Job& job = jobs[static_cast<std::size_t>(j)];
      try {
        cells[static_cast<std::size_t>(j)] = run_static_cell(cfg, *job.fc, job.dim, job.seed);
      } catch (const std::exception& e) {
        cells[static_cast<std::size_t>(j)].failed = true;
        cells[static_cast<std::size_t>(j)].error = e.what();
        cells[static_cast<std::size_t>(j)].experiment = "bimodal_n" + std::to_string(job.dim);
        cells[static_cast<std::size_t>(j)].filter = job.fc->name;
        cells[static_cast<std::size_t>(j)].seed = job.seed;
      }
    });
  } else {
    // shared truth and reference per seed, filters fan out
    struct SeedData {
      ssm::Trajectory truth;
      std::vector<Mat> reference;
      bool has_reference = false;
    };
    std::vector<SeedData> seed_data(seeds.size());
    parallel_for_jobs(static_cast<int>(seeds.size()), [&](int j) {
      const auto seed = seeds[static_cast<std::size_t>(j)];
      seed_data[static_cast<std::size_t>(j)].truth = ssm::simulate_truth(truth_model(cfg), cfg.t_steps, truth_seed(seed));
      if (cfg.reference.kind == ReferenceConfig::Kind::Sir) {
        seed_data[static_cast<std::size_t>(j)].reference = sir_reference(
            cfg.model, seed_data[static_cast<std::size_t>(j)].truth.observations, cfg.reference.particles, mix64(seed + 13));
        seed_data[static_cast<std::size_t>(j)].has_reference = true;
      }
    });

    struct Job {
      const FilterConfig* fc;
      std::size_t seed_idx;
    };
    std::vector<Job> jobs;
    for (const auto& fc : filter_list)
      for (std::size_t si = 0; si < seeds.size(); ++si) jobs.push_back({&fc, si});
    cells.resize(jobs.size());
    parallel_for_jobs(static_cast<int>(jobs.size()), [&](int j) {
      const Job& job = jobs[static_cast<std::size_t>(j)];
      const auto seed = seeds[job.seed_idx];
      const SeedData& sd = seed_data[job.seed_idx];
      try {
        cells[static_cast<std::size_t>(j)] =
            run_dynamic_cell(cfg, *job.fc, seed, sd.truth, sd.has_reference ? &sd.reference : nullptr);
      } catch (const std::exception& e) {
        cells[static_cast<std::size_t>(j)].failed = true;
        cells[static_cast<std::size_t>(j)].error = e.what();
        cells[static_cast<std::size_t>(j)].filter = job.fc->name;
        cells[static_cast<std::size_t>(j)].seed = seed;
      }
    });
  }

  ResultTable table;
  table.config_hash = cfg.config_hash;
  int failures = 0;
  for (const auto& cell : cells) {
    if (cell.failed) {
      ++failures;
      std::cerr << "cell " << cell.experiment << "/" << cell.filter << "/seed " << cell.seed
                << " failed: " << cell.error << "\n";
      continue;
    }
    table.rows.insert(table.rows.end(), cell.rows.begin(), cell.rows.end());
    persist_cell(dir, cfg, cell);
  }
  table.sort();

  const double wall_s =
      std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - wall_start).count();
  nlohmann::json manifest;
  manifest["config_hash"] = cfg.config_hash;
  manifest["config"] = cfg.serialized;
  manifest["format"] = 1;
  manifest["wall_seconds"] = wall_s;
  manifest["failed_cells"] = failures;
  write_text_file(manifest_path, manifest.dump(2));
  write_text_file(dir / "results.csv", table.to_csv());
  write_text_file(dir / "config.effective.cfg", cfg.serialized);

  if (failures == static_cast<int>(cells.size())) throw Error("every experiment cell failed");
  if (failures > 0) throw Error(std::to_string(failures) + " experiment cell(s) failed; partial results persisted");
  return table;
}

// ---------------------------------------------------------------------------
// Stability probe
// ---------------------------------------------------------------------------

struct StabilityProbeResult {
  Vec divergence;  // per step
  double slope = 0.0;
  double r_squared = 0.0;
};

/// Runs the reference filter from two initial laws against shared
/// observations and reports the per-step divergence along with a log-linear
/// fit of its decay.
inline StabilityProbeResult stability_probe(const ExperimentConfig& cfg, std::uint64_t seed) {
  const ssm::Trajectory truth = ssm::simulate_truth(truth_model(cfg), cfg.t_steps, truth_seed(seed));
  filters::RunConfig rc;
  rc.n_particles = cfg.probe_particles;
  rc.snapshot_stride = 1;

  ssm::StateSpaceModel shifted = cfg.model;
  shifted.init_mean.array() += cfg.probe_shift;

  const filters::FilterRun run1 = filters::run_filter(filters::FilterKind::Sir, cfg.model, truth.observations, rc, seed);
  const filters::FilterRun run2 = filters::run_filter(filters::FilterKind::Sir, shifted, truth.observations, rc, seed);

  StabilityProbeResult out;
  out.divergence.resize(cfg.t_steps);
  metrics::DivergenceSpec spec;
  spec.kind = metrics::DivergenceSpec::Kind::W2;
  spec.size_cap = std::max(cfg.w2_size_cap, 256);
  for (int t = 0; t < cfg.t_steps; ++t) {
    Mat a = run1.snapshots[static_cast<std::size_t>(t)];
    Mat b = run2.snapshots[static_cast<std::size_t>(t)];
    const int cap = std::min(spec.size_cap, static_cast<int>(a.rows()));
    if (a.rows() > cap) a = a.topRows(cap);
    if (b.rows() > cap) b = b.topRows(cap);
    out.divergence[t] = metrics::divergence(a, b, spec);
  }

  // log-linear fit of max(divergence, tiny)
  const int n = cfg.t_steps;
  Vec x(n), y(n);
  for (int t = 0; t < n; ++t) {
    x[t] = t;
    y[t] = std::log(std::max(out.divergence[t], 1e-12));
  }
  const double xm = x.mean(), ym = y.mean();
  const double sxx = (x.array() - xm).square().sum();
  const double sxy = ((x.array() - xm) * (y.array() - ym)).sum();
  out.slope = sxx > 0 ? sxy / sxx : 0.0;
  const Vec fit = (out.slope * (x.array() - xm) + ym).matrix();
  const double ss_res = (y - fit).squaredNorm();
  const double ss_tot = (y.array() - ym).square().sum();
  out.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Plot data emission
// ---------------------------------------------------------------------------

/// Writes per-figure CSV files derived from a result table / run directory.
/// Keys: "w2_vs_dim", "metric_series:<metric>", "traj_bands:<filter>:<seed>",
/// "density1d:<experiment>:<seed>".
inline std::string emit_plotdata(const fs::path& table_dir, const std::string& figure_key) {
  const fs::path results_path = table_dir / "results.csv";
  auto load_table = [&]() {
    std::ifstream in(results_path);
    if (!in) throw ConfigError("no results.csv under " + table_dir.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ResultTable::from_csv(ss.str());
  };

  auto split_key = [&](const std::string& s) {
    std::vector<std::string> parts;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ':')) parts.push_back(tok);
    return parts;
  };
  const auto parts = split_key(figure_key);
  std::ostringstream os;
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };

  if (parts[0] == "w2_vs_dim") {
    const ResultTable table = load_table();
    // mean and stderr of w2 across seeds per (dim, filter)
    std::map<std::pair<int, std::string>, std::vector<double>> groups;
    for (const auto& r : table.rows) {
      if (r.metric != "w2" || r.experiment.rfind("bimodal_n", 0) != 0) continue;
      const int dim = std::stoi(r.experiment.substr(9));
      groups[{dim, r.filter}].push_back(r.value);
    }
    if (groups.empty()) throw ConfigError("w2_vs_dim: no bimodal w2 rows in the table");
    os << "dim,filter,mean,stderr\n";
    for (const auto& [key, vals] : groups) {
      double m = 0;
      for (const double v : vals) m += v;
      m /= static_cast<double>(vals.size());
      double s2 = 0;
      for (const double v : vals) s2 += (v - m) * (v - m);
      const double se = vals.size() > 1 ? std::sqrt(s2 / (static_cast<double>(vals.size()) - 1) / static_cast<double>(vals.size())) : 0.0;
      os << key.first << "," << key.second << "," << num(m) << "," << num(se) << "\n";
    }
    return os.str();
  }

  if (parts[0] == "metric_series") {
    if (parts.size() != 2) throw ConfigError("metric_series key wants the form metric_series:<metric>");
    const ResultTable table = load_table();
    std::map<std::pair<int, std::string>, std::vector<double>> groups;
    for (const auto& r : table.rows)
      if (r.metric == parts[1]) groups[{r.step, r.filter}].push_back(r.value);
    if (groups.empty()) throw ConfigError("metric_series: no rows for metric '" + parts[1] + "'");
    os << "step,filter,mean,stderr\n";
    for (const auto& [key, vals] : groups) {
      double m = 0;
      for (const double v : vals) m += v;
      m /= static_cast<double>(vals.size());
      double s2 = 0;
      for (const double v : vals) s2 += (v - m) * (v - m);
      const double se = vals.size() > 1 ? std::sqrt(s2 / (static_cast<double>(vals.size()) - 1) / static_cast<double>(vals.size())) : 0.0;
      os << key.first << "," << key.second << "," << num(m) << "," << num(se) << "\n";
    }
    return os.str();
  }

  if (parts[0] == "traj_bands" || parts[0] == "density1d") {
    if (parts.size() != 3) throw ConfigError(parts[0] + " key wants the form " + parts[0] + ":<name>:<seed>");
    // locate the run directory
    std::vector<fs::path> matches;
    const fs::path runs = table_dir / "runs";
    if (fs::exists(runs))
      for (const auto& entry : fs::directory_iterator(runs)) {
        const std::string name = entry.path().filename().string();
        if (name.find(parts[1]) != std::string::npos && name.rfind("_s" + parts[2]) == name.size() - 2 - parts[2].size())
          matches.push_back(entry.path());
      }
    if (matches.empty()) throw ConfigError(parts[0] + ": no run directory matching '" + parts[1] + "' seed " + parts[2]);
    std::sort(matches.begin(), matches.end());

    if (parts[0] == "traj_bands") {
      os << "step,state,q05,q50,q95\n";
      for (const auto& entry : fs::directory_iterator(matches.front())) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ens_", 0) != 0) continue;
        const int step = std::stoi(name.substr(4, 6));
        std::ifstream in(entry.path());
        std::vector<std::vector<double>> cols;
        std::string line;
        while (std::getline(in, line)) {
          std::istringstream ls(line);
          std::string tok;
          std::size_t c = 0;
          while (std::getline(ls, tok, ',')) {
            if (cols.size() <= c) cols.resize(c + 1);
            cols[c].push_back(std::stod(tok));
            ++c;
          }
        }
        for (std::size_t c = 0; c < cols.size(); ++c) {
          auto& v = cols[c];
          std::sort(v.begin(), v.end());
          auto q = [&](double p) { return v[std::min(v.size() - 1, static_cast<std::size_t>(p * static_cast<double>(v.size())))]; };
          os << step << "," << c + 1 << "," << num(q(0.05)) << "," << num(q(0.5)) << "," << num(q(0.95)) << "\n";
        }
      }
      return os.str();
    }

    // density1d: gaussian kernel density of the stored posterior particles,
    // one column per matching filter run
    os << "u";
    std::vector<std::pair<std::string, std::vector<double>>> clouds;
    for (const auto& run_dir : matches) {
      std::ifstream in(run_dir / "ens_000000.csv");
      if (!in) continue;
      std::vector<double> pts;
      std::string line;
      while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tok;
        std::getline(ls, tok, ',');
        pts.push_back(std::stod(tok));
      }
      clouds.emplace_back(run_dir.filename().string(), std::move(pts));
      os << "," << run_dir.filename().string();
    }
    os << "\n";
    if (clouds.empty()) throw ConfigError("density1d: no stored posterior ensembles found");
    for (int g = 0; g <= 200; ++g) {
      const double u = -4.0 + 8.0 * g / 200.0;
      os << num(u);
      for (const auto& [name, pts] : clouds) {
        (void)name;
        double sd = 0, mean = 0;
        for (const double p : pts) mean += p;
        mean /= static_cast<double>(pts.size());
        for (const double p : pts) sd += (p - mean) * (p - mean);
        sd = std::sqrt(sd / static_cast<double>(pts.size()));
        const double bw = std::max(1e-3, 1.06 * sd * std::pow(static_cast<double>(pts.size()), -0.2));
        double acc = 0;
        for (const double p : pts) acc += std::exp(-0.5 * (u - p) * (u - p) / (bw * bw));
        acc /= static_cast<double>(pts.size()) * bw * std::sqrt(2.0 * M_PI);
        os << "," << num(acc);
      }
      os << "\n";
    }
    return os.str();
  }

  throw ConfigError("unknown figure key '" + figure_key + "'");
}

}  // namespace otf::harness
