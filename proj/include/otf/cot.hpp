#pragma once

#include "otf/autodiff.hpp"
#include "otf/common.hpp"
#include "otf/rng.hpp"
#include "otf/ssm.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

namespace otf::cot {

// ---------------------------------------------------------------------------
// Batches and configuration
// ---------------------------------------------------------------------------

/// Target pairs (y_i, u_i), the shuffled reference v, and (for the
/// EnKF-referenced objective) the transported reference w.
struct TrainingBatch {
  Mat y;  // N x m
  Mat u;  // N x n
  Mat v;  // N x n, a permutation of the rows of u when built by batch_assemble
  std::optional<Mat> w;

  int size() const { return static_cast<int>(u.rows()); }
  void validate() const {
    detail::require(y.rows() == u.rows() && v.rows() == u.rows(), "batch row counts differ");
    detail::require(v.cols() == u.cols(), "batch u/v dimension mismatch");
    if (w) detail::require(w->rows() == u.rows() && w->cols() == u.cols(), "batch w shape mismatch");
  }
};

struct EluSpec {
  double alpha = 0.01;
  double operator()(double x) const { return x > 0.0 ? x : alpha * (std::exp(x) - 1.0); }
};

struct TrainConfig {
  int iterations = 5000;
  double lr_psi = 1e-3;
  double lr_map = 1e-3;
  double lambda_map = 0.0;  // weight of the monotonicity penalty on T
  double lambda_psi = 0.0;  // weight of the Laplacian penalty on psi
  int map_steps_per_psi_step = 1;
  double elu_alpha = 0.01;
  // per-filter-step iteration decay: iters_t = max(iters * decay^t, min_iters)
  double iter_decay = 0.9;
  int min_iters = 100;
  bool warm_start = true;
  // Pairs drawn per iteration for the monotonicity penalty; the full
  // N(N-1) sum is used when it does not exceed this budget.
  int pair_sample = 2048;
  // Saddle-point stabilizers: hold the learning rates for the first
  // lr_decay_start fraction of the run, then anneal linearly to
  // lr_floor * lr; average both players' weights over the trailing
  // average_frac fraction of iterations.
  double lr_decay_start = 0.5;
  double lr_floor = 0.02;
  double average_frac = 0.2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_threshold = 1e6;
  int trace_stride = 10;

  void validate() const {
    detail::require(iterations >= 1, "iterations must be >= 1");
    detail::require(lambda_map >= 0.0 && lambda_psi >= 0.0, "penalty weights must be >= 0");
    detail::require(elu_alpha > 0.0, "ELU alpha must be > 0");
    detail::require(map_steps_per_psi_step >= 1, "inner/outer ratio must be >= 1");
    detail::require(iter_decay > 0.0 && iter_decay <= 1.0, "iteration decay must be in (0, 1]");
    detail::require(pair_sample >= 1, "pair_sample must be >= 1");
    detail::require(lr_decay_start >= 0.0 && lr_decay_start <= 1.0, "lr_decay_start must lie in [0, 1]");
    detail::require(lr_floor >= 0.0 && lr_floor <= 1.0, "lr_floor must lie in [0, 1]");
    detail::require(average_frac >= 0.0 && average_frac <= 1.0, "average_frac must lie in [0, 1]");
  }

  int iterations_for_step(int t) const {
    const double scaled = static_cast<double>(iterations) * std::pow(iter_decay, static_cast<double>(t));
    return std::max(min_iters, static_cast<int>(std::floor(scaled)));
  }
};

/// Draws the training triples from a forecast ensemble: u = particles,
/// y = per-particle simulated observations, v = u shuffled by a uniform
/// random permutation.
inline TrainingBatch batch_assemble(const ssm::Ensemble& ens, const ssm::StateSpaceModel& model,
                                    const RngStream& step_stream) {
  detail::require(ens.size() >= 2, "batch_assemble: need at least 2 particles");
  TrainingBatch batch;
  batch.u = ens.particles;
  batch.y = ssm::simulate_observations(model, ens, step_stream, Role::ObsSim);
  const auto perm = step_stream.fold(Role::Shuffle).permutation(ens.size());
  batch.v.resizeLike(batch.u);
  for (int i = 0; i < ens.size(); ++i) batch.v.row(i) = batch.u.row(perm[static_cast<std::size_t>(i)]);
  return batch;
}

// ---------------------------------------------------------------------------
// Objectives and penalties (data path; trainable versions live in the loop)
// ---------------------------------------------------------------------------

/// Empirical transport objective
///   J = mean_i [ 1/2 |T(y_i, v_i) - v_i|^2 - psi(y_i, T(y_i, v_i)) + psi(y_i, u_i) ].
template <class PotFn, class MapFn>
double objective_J(const PotFn& psi, const MapFn& tmap, const TrainingBatch& batch) {
  batch.validate();
  const Mat tv = tmap(batch.y, batch.v);
  const Vec cost = 0.5 * (tv - batch.v).rowwise().squaredNorm();
  const Vec psi_t = psi(batch.y, tv);
  const Vec psi_u = psi(batch.y, batch.u);
  const double j = (cost - psi_t + psi_u).mean();
  if (!std::isfinite(j)) throw NumericError("objective_J is not finite");
  return j;
}

/// EnKF-referenced objective
///   J = mean_i [ psi(y_i, u_i) + 1/2 |T~(y_i, w_i)|^2 - psi(y_i, T~(y_i, w_i) + w_i) ].
template <class PotFn, class MapFn>
double objective_enkf(const PotFn& psi, const MapFn& tilde, const TrainingBatch& batch) {
  batch.validate();
  detail::require(batch.w.has_value(), "objective_enkf requires the EnKF-transported reference w");
  const Mat tw = tilde(batch.y, *batch.w);
  const Vec cost = 0.5 * tw.rowwise().squaredNorm();
  const Vec psi_t = psi(batch.y, tw + *batch.w);
  const Vec psi_u = psi(batch.y, batch.u);
  const double j = (psi_u + cost - psi_t).mean();
  if (!std::isfinite(j)) throw NumericError("objective_enkf is not finite");
  return j;
}

/// Monotonicity penalty over all N(N-1) ordered pairs (diagonal terms are
/// zero under the ELU and included in the normalization as written):
///   R_T = 1/(N(N-1)) sum_i sum_j g_T(<T(y_i, v_i) - T(y_i, v_j), v_j - v_i>).
template <class MapFn>
double penalty_monotone(const MapFn& tmap, const TrainingBatch& batch, const EluSpec& g) {
  batch.validate();
  const int n = batch.size();
  detail::require(n >= 2, "penalty_monotone: need at least 2 samples");
  const Mat tv = tmap(batch.y, batch.v);
  double acc = 0.0;
  Mat y_rep(n, batch.y.cols());
  for (int i = 0; i < n; ++i) {
    y_rep = batch.y.row(i).replicate(n, 1);
    const Mat t_cross = tmap(y_rep, batch.v);  // row j: T(y_i, v_j)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double arg = (tv.row(i) - t_cross.row(j)).dot(batch.v.row(j) - batch.v.row(i));
      acc += g(arg);
    }
  }
  return acc / (static_cast<double>(n) * (n - 1));
}

/// Laplacian-magnitude penalty R_psi = mean_i g_psi(|lap_u psi(y_i, u_i)|^2).
template <class Potential>
double penalty_laplacian(const Potential& psi, const TrainingBatch& batch, const EluSpec& g) {
  batch.validate();
  double acc = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const Vec y = batch.y.row(i).transpose();
    const Vec u = batch.u.row(i).transpose();
    const double lap = ad::laplacian_u(psi, y, u, ad::default_laplacian_step(u));
    acc += g(lap * lap);
  }
  return acc / batch.size();
}

inline auto map_fn(const ad::Mlp& net) {
  return [&net](const Mat& y, const Mat& u) { return net.eval(y, u); };
}
inline auto potential_fn(const ad::Mlp& net) {
  return [&net](const Mat& y, const Mat& u) { return Vec(net.eval(y, u).col(0)); };
}

// ---------------------------------------------------------------------------
// Max-min training
// ---------------------------------------------------------------------------

/// The trained map/potential pair. For the EnKF-referenced variant the map
/// member is the near-identity correction applied on top of the EnKF update.
struct TransportPair {
  ad::Mlp map;
  ad::Mlp psi;
};

enum class Variant { Plain, EnkfReference };

struct AdamPair {
  ad::AdamState map;
  ad::AdamState psi;
};

struct TraceRow {
  int iteration = 0;
  double j = 0.0;
  double r_map = 0.0;
  double r_psi = 0.0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  double final_j = 0.0;
};

namespace detail_train {

struct PairSample {
  std::vector<int> i, j;
};

inline PairSample sample_pairs(int n, int budget, const RngStream& rng) {
  PairSample out;
  const long full = static_cast<long>(n) * (n - 1);
  if (full <= budget) {
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (a != b) {
          out.i.push_back(a);
          out.j.push_back(b);
        }
    return out;
  }
  out.i.reserve(static_cast<std::size_t>(budget));
  out.j.reserve(static_cast<std::size_t>(budget));
  for (int k = 0; k < budget; ++k) {
    const int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * k), static_cast<std::uint64_t>(n)));
    int b = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * k + 1), static_cast<std::uint64_t>(n - 1)));
    if (b >= a) ++b;
    out.i.push_back(a);
    out.j.push_back(b);
  }
  return out;
}

inline void read_param_grads(const ad::Tape& tape, const std::vector<ad::Tape::Id>& pids, const ad::ParamLayout& layout,
                             Vec& out) {
  out.setZero();
  for (std::size_t s = 0; s < pids.size(); ++s) {
    const Mat& g = tape.grad(pids[s]);
    if (g.size() == 0) continue;
    const auto& sl = layout.slices[s];
    for (int c = 0; c < sl.cols; ++c)
      for (int r = 0; r < sl.rows; ++r) out[sl.offset + c * sl.rows + r] = g(r, c);
  }
}

}  // namespace detail_train

/// Alternating Adam on the empirical max-min objective: descent steps on the
/// map objective J + lambda_T R_T, then an ascent step on the potential
/// objective J - lambda_psi R_psi. The monotonicity penalty is evaluated on
/// a random subsample of ordered pairs when the full sum exceeds the
/// configured budget; for the EnKF-referenced variant it is computed for the
/// whole near-identity map w + T~(y, w).
inline TrainResult train_maxmin(const TrainConfig& cfg, const TrainingBatch& batch, TransportPair& pair,
                                Variant variant, const RngStream& rng, AdamPair* opt = nullptr,
                                int iterations_override = -1) {
  cfg.validate();
  batch.validate();
  if (variant == Variant::EnkfReference)
    detail::require(batch.w.has_value(), "EnKF-referenced training requires batch.w");
  const int n = batch.size();
  const int n_dim = static_cast<int>(batch.u.cols());
  const Mat& ref = variant == Variant::Plain ? batch.v : *batch.w;

  AdamPair local{ad::AdamState::make(pair.map.param_count(), cfg.lr_map),
                 ad::AdamState::make(pair.psi.param_count(), cfg.lr_psi)};
  AdamPair& adam = opt ? *opt : local;
  for (ad::AdamState* st : {&adam.map, &adam.psi}) {
    st->beta1 = cfg.adam_beta1;
    st->beta2 = cfg.adam_beta2;
    st->eps = cfg.adam_eps;
  }
  adam.map.lr = cfg.lr_map;
  adam.psi.lr = cfg.lr_psi;

  const int iters = iterations_override > 0 ? iterations_override : cfg.iterations;
  const EluSpec g{cfg.elu_alpha};

  // per-row Laplacian steps and shift matrices reused across iterations
  Vec inv_h2;
  std::vector<Mat> lap_shifts;
  if (cfg.lambda_psi > 0.0) {
    inv_h2.resize(n);
    Vec h(n);
    for (int i = 0; i < n; ++i) {
      h[i] = ad::default_laplacian_step(batch.u.row(i).transpose());
      inv_h2[i] = 1.0 / (h[i] * h[i]);
    }
    for (int d = 0; d < n_dim; ++d) {
      Mat s = Mat::Zero(n, n_dim);
      s.col(d) = h;
      lap_shifts.push_back(std::move(s));
    }
  }

  TrainResult result;
  Vec grad_map(pair.map.param_count()), grad_psi(pair.psi.param_count());
  Mat tv_data;

  Vec map_avg = Vec::Zero(pair.map.param_count());
  Vec psi_avg = Vec::Zero(pair.psi.param_count());
  int n_avg = 0;
  const int avg_start = iters - std::max(1, static_cast<int>(cfg.average_frac * iters));
  const int hold = static_cast<int>(cfg.lr_decay_start * iters);

  for (int it = 0; it < iters; ++it) {
    const RngStream iter_rng = rng.fold(Role::PairSample).fold(static_cast<std::uint64_t>(it));
    const double anneal =
        it < hold ? 1.0
                  : 1.0 - (1.0 - cfg.lr_floor) * static_cast<double>(it - hold) / std::max(1, iters - hold);
    adam.map.lr = cfg.lr_map * anneal;
    adam.psi.lr = cfg.lr_psi * anneal;
    double r_map_val = 0.0;

    for (int inner = 0; inner < cfg.map_steps_per_psi_step; ++inner) {
      ad::Tape tape;
      const auto map_ids = pair.map.bind(tape, true);
      const auto psi_ids = pair.psi.bind(tape, false);
      const ad::Tape::Id yid = tape.input(batch.y);
      const ad::Tape::Id rid = tape.input(ref);
      const ad::Tape::Id tv = pair.map.forward(tape, yid, rid, map_ids);

      ad::Tape::Id cost;
      ad::Tape::Id transported;  // points fed to psi
      if (variant == Variant::Plain) {
        cost = tape.scale(tape.mean_all(tape.rows_sqnorm(tape.sub(tv, rid))), 0.5);
        transported = tv;
      } else {
        cost = tape.scale(tape.mean_all(tape.rows_sqnorm(tv)), 0.5);
        transported = tape.add_const(tv, ref);
      }
      const ad::Tape::Id psi_t = pair.psi.forward(tape, yid, transported, psi_ids);
      ad::Tape::Id loss = tape.sub(cost, tape.mean_all(psi_t));

      if (cfg.lambda_map > 0.0) {
        const auto pairs = detail_train::sample_pairs(n, cfg.pair_sample, iter_rng.fold(inner));
        const auto np = static_cast<int>(pairs.i.size());
        Mat y_i(np, batch.y.cols()), ref_j(np, n_dim), dv(np, n_dim);
        for (int k = 0; k < np; ++k) {
          y_i.row(k) = batch.y.row(pairs.i[static_cast<std::size_t>(k)]);
          ref_j.row(k) = ref.row(pairs.j[static_cast<std::size_t>(k)]);
          dv.row(k) = ref.row(pairs.j[static_cast<std::size_t>(k)]) - ref.row(pairs.i[static_cast<std::size_t>(k)]);
        }
        const ad::Tape::Id t_i = tape.gather_rows(tv, pairs.i);
        const ad::Tape::Id t_ij = pair.map.forward(tape, tape.input(y_i), tape.input(ref_j), map_ids);
        ad::Tape::Id diff = tape.sub(t_i, t_ij);
        if (variant == Variant::EnkfReference) diff = tape.add_const(diff, -dv);  // full map adds w_i - w_j
        const ad::Tape::Id r_pen = tape.mean_all(tape.elu(tape.rowdot(diff, tape.input(dv)), cfg.elu_alpha));
        r_map_val = tape.scalar(r_pen);
        loss = tape.add(loss, tape.scale(r_pen, cfg.lambda_map));
      }

      tape.backward(loss);
      detail_train::read_param_grads(tape, map_ids, pair.map.params.layout, grad_map);
      ad::adam_update(adam.map, pair.map.params.values, grad_map, ad::StepSign::Descent);
    }
    // the potential ascends against the freshly updated map
    tv_data = pair.map.eval(batch.y, ref);

    // potential ascent step; the map is frozen data here
    double j_val, r_psi_val = 0.0;
    {
      const Mat transported = variant == Variant::Plain ? tv_data : Mat(tv_data + ref);
      const double map_cost = variant == Variant::Plain ? 0.5 * (tv_data - ref).rowwise().squaredNorm().mean()
                                                        : 0.5 * tv_data.rowwise().squaredNorm().mean();
      ad::Tape tape;
      const auto psi_ids = pair.psi.bind(tape, true);
      const ad::Tape::Id yid = tape.input(batch.y);
      const ad::Tape::Id psi_u = pair.psi.forward(tape, yid, tape.input(batch.u), psi_ids);
      const ad::Tape::Id psi_t = pair.psi.forward(tape, yid, tape.input(transported), psi_ids);
      const ad::Tape::Id j_psi = tape.sub(tape.mean_all(psi_u), tape.mean_all(psi_t));
      ad::Tape::Id objective = j_psi;

      if (cfg.lambda_psi > 0.0) {
        // second differences of potential values keep the penalty
        // differentiable in the potential weights
        const ad::Tape::Id psi_0 = psi_u;
        ad::Tape::Id lap = tape.input(Mat::Zero(n, 1));
        for (int d = 0; d < n_dim; ++d) {
          const ad::Tape::Id psi_p = pair.psi.forward(tape, yid, tape.input(batch.u + lap_shifts[static_cast<std::size_t>(d)]), psi_ids);
          const ad::Tape::Id psi_m = pair.psi.forward(tape, yid, tape.input(batch.u - lap_shifts[static_cast<std::size_t>(d)]), psi_ids);
          const ad::Tape::Id second = tape.sub(tape.add(psi_p, psi_m), tape.scale(psi_0, 2.0));
          lap = tape.add(lap, tape.cmul_const(second, inv_h2));
        }
        const ad::Tape::Id r_pen = tape.mean_all(tape.elu(tape.square(lap), cfg.elu_alpha));
        r_psi_val = tape.scalar(r_pen);
        objective = tape.sub(objective, tape.scale(r_pen, cfg.lambda_psi));
      }

      tape.backward(objective);
      detail_train::read_param_grads(tape, psi_ids, pair.psi.params.layout, grad_psi);
      ad::adam_update(adam.psi, pair.psi.params.values, grad_psi, ad::StepSign::Ascent);
      j_val = map_cost + tape.scalar(j_psi);
    }

    if (!std::isfinite(j_val) || std::abs(j_val) > cfg.divergence_threshold) {
      std::ostringstream os;
      os << "training diverged at iteration " << it << " with J = " << j_val << " (last traced J values:";
      const auto tail = std::min<std::size_t>(result.trace.size(), 5);
      for (std::size_t k = result.trace.size() - tail; k < result.trace.size(); ++k)
        os << " " << result.trace[k].j;
      os << ")";
      throw TrainingDivergedError(os.str());
    }
    if (it % cfg.trace_stride == 0 || it == iters - 1)
      result.trace.push_back({it, j_val, r_map_val, r_psi_val});
    result.final_j = j_val;

    if (cfg.average_frac > 0.0 && it >= avg_start) {
      map_avg += pair.map.params.values;
      psi_avg += pair.psi.params.values;
      ++n_avg;
    }
  }
  if (n_avg > 0) {
    pair.map.params.values = map_avg / n_avg;
    pair.psi.params.values = psi_avg / n_avg;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Empirical semidual for the quadratic class
// ---------------------------------------------------------------------------

/// Empirical semidual value S_hat(phi) = mean_i [ phi(y_i, v_i) + phi*(y_i, u_i) ].
inline double semidual_empirical(const ad::QuadraticPotential& phi, const TrainingBatch& batch) {
  batch.validate();
  double acc = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const Vec y = batch.y.row(i).transpose();
    acc += phi.eval(y, batch.v.row(i).transpose()) + phi.conjugate(y, batch.u.row(i).transpose());
  }
  return acc / batch.size();
}

/// Minimizes the empirical semidual over quadratics with constant Q and
/// b(y) affine in y, by exact alternating updates:
///  - given Q, the affine part solves a linear system;
///  - given the affine part, Q solves Q Sv Q = Sz via the spd geometric mean.
inline ad::QuadraticPotential fit_quadratic_semidual(const TrainingBatch& batch, int alternations = 40) {
  batch.validate();
  const int n = static_cast<int>(batch.u.cols());
  const int m = static_cast<int>(batch.y.cols());
  const double nn = batch.size();

  const Vec y_bar = batch.y.colwise().mean().transpose();
  const Vec u_bar = batch.u.colwise().mean().transpose();
  const Vec v_bar = batch.v.colwise().mean().transpose();
  const Mat yc = batch.y.rowwise() - y_bar.transpose();
  const Mat cov_yy = yc.transpose() * yc / nn + 1e-12 * Mat::Identity(m, m);
  const Mat cov_uy = (batch.u.rowwise() - u_bar.transpose()).transpose() * yc / nn;
  const Mat cov_vy = (batch.v.rowwise() - v_bar.transpose()).transpose() * yc / nn;
  const Mat s_v = batch.v.transpose() * batch.v / nn + 1e-12 * Mat::Identity(n, n);

  ad::QuadraticPotential phi;
  phi.q0 = Mat::Identity(n, n);
  phi.b0 = Vec::Zero(n);
  phi.by = Mat::Zero(n, m);

  Eigen::SelfAdjointEigenSolver<Mat> esv(s_v);
  const Mat sv_half = esv.eigenvectors() * esv.eigenvalues().cwiseSqrt().asDiagonal() * esv.eigenvectors().transpose();
  const Mat sv_half_inv =
      esv.eigenvectors() * esv.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * esv.eigenvectors().transpose();

  const Eigen::LLT<Mat> yy_llt(cov_yy);
  for (int it = 0; it < alternations; ++it) {
    // affine part given Q
    phi.by = yy_llt.solve((cov_uy - phi.q0 * cov_vy).transpose()).transpose();
    phi.b0 = u_bar - phi.q0 * v_bar - phi.by * y_bar;
    // Q given the affine part: residuals z_i = u_i - b(y_i), solve Q Sv Q = Sz
    Mat z = batch.u - batch.y * phi.by.transpose();
    z.rowwise() -= phi.b0.transpose();
    const Mat s_z = z.transpose() * z / nn + 1e-12 * Mat::Identity(n, n);
    phi.q0 = sv_half_inv * psd_sqrt(sv_half * s_z * sv_half) * sv_half_inv;
    phi.q0 = 0.5 * (phi.q0 + phi.q0.transpose());
  }
  return phi;
}

}  // namespace otf::cot
