#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "otf/cot.hpp"
#include "otf/oracle.hpp"

using namespace otf;
using namespace otf::cot;

namespace {

ssm::StateSpaceModel squared_model_1d(double sigma) {
  ssm::StateSpaceModel m;
  m.state_dim = 1;
  m.obs_dim = 1;
  m.dynamics = ssm::Dynamics::Linear;
  m.integrator = ssm::Integrator::Discrete;
  m.linear_a = Mat::Identity(1, 1);
  m.sigma_proc = Vec::Zero(1);
  m.sigma_obs = Vec::Constant(1, sigma);
  m.obs_kind = ssm::ObsKind::Square;
  m.obs_select.clear();
  m.init_mean = Vec::Zero(1);
  m.init_cov = Mat::Identity(1, 1);
  return m;
}

TrainingBatch tiny_batch(const Mat& y, const Mat& u, const Mat& v) {
  TrainingBatch b;
  b.y = y;
  b.u = u;
  b.v = v;
  return b;
}

ad::NetArch arch_1d(bool identity_skip, int out_dim = 1) {
  ad::NetArch a;
  a.y_dim = 1;
  a.u_dim = 1;
  a.out_dim = out_dim;
  a.width = 32;
  a.blocks = 2;
  a.zero_init_output = true;
  a.identity_skip = identity_skip;
  return a;
}

const auto identity_map = [](const Mat&, const Mat& u) { return u; };
const auto zero_potential = [](const Mat& y, const Mat&) { return Vec(Vec::Zero(y.rows())); };

}  // namespace

TEST_CASE("batch_assemble shuffles the particles and simulates observations") {
  auto model = squared_model_1d(1e-9);
  ssm::Ensemble ens;
  ens.particles = Mat(4, 1);
  ens.particles << 1, 2, 3, 4;
  const TrainingBatch batch = batch_assemble(ens, model, RngStream(3));
  CHECK(batch.size() == 4);
  // v must be a permutation of u
  Vec su = batch.u.col(0), sv = batch.v.col(0);
  std::sort(su.data(), su.data() + 4);
  std::sort(sv.data(), sv.data() + 4);
  CHECK((su - sv).norm() == 0.0);
  // y = u^2/2 with (near) zero obs noise
  for (int i = 0; i < 4; ++i) CHECK(batch.y(i, 0) == doctest::Approx(0.5 * batch.u(i, 0) * batch.u(i, 0)).epsilon(1e-6));
}

TEST_CASE("batch_assemble with two particles yields one of the two permutations") {
  auto model = squared_model_1d(1.0);
  ssm::Ensemble ens;
  ens.particles = Mat(2, 1);
  ens.particles << 5, 9;
  const TrainingBatch batch = batch_assemble(ens, model, RngStream(1));
  const bool same = batch.v(0, 0) == 5 && batch.v(1, 0) == 9;
  const bool swapped = batch.v(0, 0) == 9 && batch.v(1, 0) == 5;
  CHECK((same || swapped));
}

TEST_CASE("batch_assemble rejects singleton ensembles") {
  auto model = squared_model_1d(1.0);
  ssm::Ensemble ens;
  ens.particles = Mat::Zero(1, 1);
  CHECK_THROWS_AS(batch_assemble(ens, model, RngStream(0)), ContractError);
}

TEST_CASE("objective_J vanishes for the identity map with zero potential") {
  const RngStream rng(5);
  const TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(6), rng.fold(1).normal_vec(6), rng.fold(2).normal_vec(6));
  CHECK(objective_J(zero_potential, identity_map, b) == 0.0);
}

TEST_CASE("objective_J vanishes for the identity map when v equals u") {
  const RngStream rng(6);
  const Mat u = rng.fold(0).normal_vec(6);
  const TrainingBatch b = tiny_batch(rng.fold(1).normal_vec(6), u, u);
  const auto psi = [](const Mat& y, const Mat& u2) { return Vec((y.col(0).array() * u2.col(0).array()).matrix()); };
  CHECK(objective_J(psi, identity_map, b) == doctest::Approx(0.0));
}

TEST_CASE("objective_J single-sample shift example") {
  const TrainingBatch b = tiny_batch(Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Zero(1, 1));
  const auto shift = [](const Mat&, const Mat& u) { return Mat(u.array() + 1.0); };
  CHECK(objective_J(zero_potential, shift, b) == doctest::Approx(0.5));
}

TEST_CASE("objective_J is invariant under joint row permutation of the batch") {
  const RngStream rng(7);
  TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(8), rng.fold(1).normal_vec(8), rng.fold(2).normal_vec(8));
  const auto psi = [](const Mat& y, const Mat& u) { return Vec((y.col(0).array() * u.col(0).array() + u.col(0).array().square()).matrix()); };
  const auto tmap = [](const Mat& y, const Mat& u) { return Mat(u + 0.3 * y); };
  const double j0 = objective_J(psi, tmap, b);
  const auto perm = RngStream(9).permutation(8);
  TrainingBatch bp = b;
  for (int i = 0; i < 8; ++i) {
    bp.y.row(i) = b.y.row(perm[static_cast<std::size_t>(i)]);
    bp.u.row(i) = b.u.row(perm[static_cast<std::size_t>(i)]);
    bp.v.row(i) = b.v.row(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(objective_J(psi, tmap, bp) == doctest::Approx(j0).epsilon(1e-12));
}

TEST_CASE("penalty_monotone hand values") {
  Mat v(2, 1);
  v << 0, 1;
  const TrainingBatch b = tiny_batch(Mat::Zero(2, 1), v, v);
  const EluSpec g{0.01};

  const auto negation = [](const Mat&, const Mat& u) { return Mat(-u); };
  CHECK(penalty_monotone(negation, b, g) == doctest::Approx(1.0));

  CHECK(penalty_monotone(identity_map, b, g) == doctest::Approx(0.01 * (std::exp(-1.0) - 1.0)));

  Mat v_equal = Mat::Constant(3, 1, 0.8);
  const TrainingBatch b2 = tiny_batch(Mat::Zero(3, 1), v_equal, v_equal);
  CHECK(penalty_monotone(identity_map, b2, g) == doctest::Approx(0.0));
}

TEST_CASE("penalty_monotone sign tracks the monotonicity of scaled maps") {
  const RngStream rng(11);
  const TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(12), rng.fold(1).normal_vec(12), rng.fold(2).normal_vec(12));
  const EluSpec g{0.01};
  const auto expanding = [](const Mat&, const Mat& u) { return Mat(2.0 * u); };
  const auto contracting = [](const Mat&, const Mat& u) { return Mat(-0.5 * u); };
  CHECK(penalty_monotone(expanding, b, g) <= 0.0);
  CHECK(penalty_monotone(contracting, b, g) > 0.0);
}

TEST_CASE("penalty_laplacian on quadratic potentials") {
  const RngStream rng(13);
  TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(5), Mat::Zero(5, 2), Mat::Zero(5, 2));
  for (int i = 0; i < 5; ++i) b.u.row(i) = rng.fold(1).normal_vec(2 * 5).segment(2 * i, 2).transpose();
  b.v = b.u;
  const EluSpec g{0.01};

  ad::QuadraticPotential iso;
  iso.q0 = Mat::Identity(2, 2);
  iso.b0 = Vec::Zero(2);
  iso.by = Mat::Zero(2, 1);
  CHECK(penalty_laplacian(iso, b, g) == doctest::Approx(4.0).epsilon(1e-7));

  ad::QuadraticPotential diag;
  diag.q0 = Mat::Zero(2, 2);
  diag.q0(0, 0) = 1.0;
  diag.q0(1, 1) = 3.0;
  diag.b0 = Vec::Zero(2);
  diag.by = Mat::Zero(2, 1);
  CHECK(penalty_laplacian(diag, b, g) == doctest::Approx(16.0).epsilon(1e-7));

  ad::QuadraticPotential linear;
  linear.q0 = Mat::Zero(2, 2);
  linear.b0 = Vec::Constant(2, 1.7);
  linear.by = Mat::Zero(2, 1);
  CHECK(penalty_laplacian(linear, b, g) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("objective_enkf basics") {
  const RngStream rng(17);
  TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(6), rng.fold(1).normal_vec(6), rng.fold(2).normal_vec(6));
  const auto zero_map = [](const Mat& y, const Mat&) { return Mat(Mat::Zero(y.rows(), 1)); };

  CHECK_THROWS_AS(objective_enkf(zero_potential, zero_map, b), ContractError);

  b.w = b.u;  // the Gaussian-exact reference equals the target samples
  CHECK(objective_enkf(zero_potential, zero_map, b) == 0.0);
  const auto psi = [](const Mat& y, const Mat& u) { return Vec((y.col(0).array() + u.col(0).array().square()).matrix()); };
  CHECK(objective_enkf(psi, zero_map, b) == doctest::Approx(0.0));

  TrainingBatch b1 = tiny_batch(Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Zero(1, 1));
  b1.w = Mat::Zero(1, 1);
  const auto one_map = [](const Mat& y, const Mat&) { return Mat(Mat::Ones(y.rows(), 1)); };
  CHECK(objective_enkf(zero_potential, one_map, b1) == doctest::Approx(0.5));
}

TEST_CASE("semidual_empirical closed-form values") {
  const RngStream rng(19);
  ad::QuadraticPotential phi;
  phi.q0 = Mat::Identity(1, 1);
  phi.b0 = Vec::Zero(1);
  phi.by = Mat::Zero(1, 1);

  // v a permutation of u: S_hat = mean |u|^2
  const Vec u = rng.fold(0).normal_vec(8);
  Mat um = u, vm = u;
  const auto perm = rng.fold(1).permutation(8);
  for (int i = 0; i < 8; ++i) vm(i, 0) = u[perm[static_cast<std::size_t>(i)]];
  const TrainingBatch b = tiny_batch(Mat::Zero(8, 1), um, vm);
  CHECK(semidual_empirical(phi, b) == doctest::Approx(u.squaredNorm() / 8.0));

  const TrainingBatch b0 = tiny_batch(Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Zero(1, 1));
  CHECK(semidual_empirical(phi, b0) == doctest::Approx(0.0));

  ad::QuadraticPotential phi2;
  phi2.q0 = 2.0 * Mat::Identity(1, 1);
  phi2.b0 = Vec::Zero(1);
  phi2.by = Mat::Zero(1, 1);
  TrainingBatch b2 = tiny_batch(Mat::Zero(1, 1), Mat::Constant(1, 1, 2.0), Mat::Zero(1, 1));
  CHECK(semidual_empirical(phi2, b2) == doctest::Approx(1.0));
}

TEST_CASE("semidual optimality margin on a large linear-gaussian batch") {
  // eta_U = N(0, 1), nu(.|y) = N(0.5 y, 0.75), y ~ N(0, 2): the joint of
  // (y, u) comes from u0 ~ N(0,1), y = u0 + e with e ~ N(0,1).
  const int n = 10000;
  const RngStream rng(23);
  TrainingBatch b;
  b.y.resize(n, 1);
  b.u.resize(n, 1);
  b.v.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
    const double u0 = si.normal(0);
    const double y = u0 + si.normal(1);
    // posterior draw: N(y/2, 1/2)
    b.y(i, 0) = y;
    b.u(i, 0) = 0.5 * y + std::sqrt(0.5) * si.normal(2);
    b.v(i, 0) = si.normal(3);
  }
  ad::QuadraticPotential opt;
  opt.q0 = Mat::Constant(1, 1, std::sqrt(0.5));  // brenier N(0,1) -> N(., 1/2)
  opt.b0 = Vec::Zero(1);
  opt.by = Mat::Constant(1, 1, 0.5);

  const double s_opt = semidual_empirical(opt, b);
  const RngStream prng(29);
  for (int trial = 0; trial < 10; ++trial) {
    ad::QuadraticPotential phi = opt;
    phi.q0(0, 0) += 0.3 * prng.fold(trial).uniform(0);
    phi.b0[0] += 0.3 * prng.fold(trial).normal(1);
    phi.by(0, 0) += 0.3 * prng.fold(trial).normal(2);
    // Monte-Carlo slack: 3 standard errors of the difference estimate
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const Vec y = b.y.row(i).transpose();
      const double d = phi.eval(y, b.v.row(i).transpose()) + phi.conjugate(y, b.u.row(i).transpose()) -
                       opt.eval(y, b.v.row(i).transpose()) - opt.conjugate(y, b.u.row(i).transpose());
      acc += d;
      acc2 += d * d;
    }
    const double mean_d = acc / n;
    const double se = std::sqrt(std::max(0.0, (acc2 / n - mean_d * mean_d) / (n - 1)));
    CHECK(s_opt <= semidual_empirical(phi, b) + 3.0 * se + 1e-9);
  }
}

TEST_CASE("fit_quadratic_semidual recovers the optimum on a large batch") {
  const int n = 20000;
  const RngStream rng(31);
  TrainingBatch b;
  b.y.resize(n, 1);
  b.u.resize(n, 1);
  b.v.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
    const double y = std::sqrt(2.0) * si.normal(1);
    b.y(i, 0) = y;
    b.u(i, 0) = 0.5 * y + std::sqrt(0.5) * si.normal(2);
    b.v(i, 0) = si.normal(3);
  }
  const ad::QuadraticPotential fit = fit_quadratic_semidual(b);
  CHECK(fit.q0(0, 0) == doctest::Approx(std::sqrt(0.5)).epsilon(0.05));
  CHECK(fit.by(0, 0) == doctest::Approx(0.5).epsilon(0.05));
  CHECK(std::abs(fit.b0[0]) < 0.05);
}

TEST_CASE("training with zero learning rates leaves parameters unchanged") {
  TrainConfig cfg;
  cfg.iterations = 20;
  cfg.lr_map = 0.0;
  cfg.lr_psi = 0.0;
  const RngStream rng(37);
  const TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(16), rng.fold(1).normal_vec(16), rng.fold(2).normal_vec(16));
  TransportPair pair{ad::Mlp::make(arch_1d(true), 1), ad::Mlp::make(arch_1d(false), 2)};
  const Vec map0 = pair.map.params.values;
  const Vec psi0 = pair.psi.params.values;
  train_maxmin(cfg, b, pair, Variant::Plain, RngStream(5));
  CHECK((pair.map.params.values - map0).norm() == 0.0);
  CHECK((pair.psi.params.values - psi0).norm() == 0.0);
}

TEST_CASE("1D gaussian shift task trains to the analytic map u + 1") {
  // eta = N(0, 1); nu(.|y) = N(1, 1) for every y; the optimal map at any
  // fixed y is a unit shift. Evaluated at y = 0, the center of the
  // observation marginal.
  const int n = 1024;
  const RngStream rng(41);
  TrainingBatch b;
  b.y.resize(n, 1);
  b.u.resize(n, 1);
  b.v.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
    b.y(i, 0) = si.normal(0);
    b.u(i, 0) = 1.0 + si.normal(1);
    b.v(i, 0) = si.normal(2);
  }
  int passes = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TransportPair pair{ad::Mlp::make(arch_1d(true), seed), ad::Mlp::make(arch_1d(false), 100 + seed)};
    TrainConfig cfg;
    cfg.iterations = 5000;
    cfg.trace_stride = 500;
    train_maxmin(cfg, b, pair, Variant::Plain, RngStream(seed));
    // L2(eta) error of the trained map against u + 1 over a normal sample
    const int mc = 2000;
    double err = 0.0;
    Mat yq = Mat::Zero(mc, 1), uq(mc, 1);
    for (int i = 0; i < mc; ++i) uq(i, 0) = RngStream(78).fold(static_cast<std::uint64_t>(i)).normal(1);
    const Mat tq = pair.map.eval(yq, uq);
    for (int i = 0; i < mc; ++i) err += std::pow(tq(i, 0) - (uq(i, 0) + 1.0), 2);
    err = std::sqrt(err / mc);
    INFO("seed ", seed, " map error ", err);
    if (err <= 0.1) ++passes;
  }
  CHECK(passes == 3);
}

TEST_CASE("warm start from converged parameters barely moves the objective") {
  const int n = 256;
  const RngStream rng(43);
  TrainingBatch b;
  b.y.resize(n, 1);
  b.u.resize(n, 1);
  b.v.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
    b.y(i, 0) = si.normal(0);
    b.u(i, 0) = 1.0 + si.normal(1);
    b.v(i, 0) = si.normal(2);
  }
  TransportPair pair{ad::Mlp::make(arch_1d(true), 3), ad::Mlp::make(arch_1d(false), 4)};
  TrainConfig cfg;
  cfg.iterations = 4000;
  AdamPair opt{ad::AdamState::make(pair.map.param_count(), cfg.lr_map),
               ad::AdamState::make(pair.psi.param_count(), cfg.lr_psi)};
  const TrainResult first = train_maxmin(cfg, b, pair, Variant::Plain, RngStream(6), &opt);
  // resume at the terminal annealed learning rate
  cfg.lr_map *= cfg.lr_floor;
  cfg.lr_psi *= cfg.lr_floor;
  cfg.iterations = 10;
  const TrainResult more = train_maxmin(cfg, b, pair, Variant::Plain, RngStream(7), &opt);
  CHECK(std::abs(more.final_j - first.final_j) < 1e-3);
}

TEST_CASE("training reports divergence with a trace") {
  const RngStream rng(47);
  TrainingBatch b = tiny_batch(rng.fold(0).normal_vec(8), rng.fold(1).normal_vec(8), rng.fold(2).normal_vec(8));
  TransportPair pair{ad::Mlp::make(arch_1d(true), 9), ad::Mlp::make(arch_1d(false), 10)};
  TrainConfig cfg;
  cfg.iterations = 200;
  cfg.lr_psi = 10.0;  // absurd rate to force blow-up
  cfg.lr_map = 10.0;
  cfg.divergence_threshold = 10.0;
  CHECK_THROWS_AS(train_maxmin(cfg, b, pair, Variant::Plain, RngStream(8)), TrainingDivergedError);
}

TEST_CASE("iteration decay schedule") {
  TrainConfig cfg;
  cfg.iterations = 1000;
  cfg.iter_decay = 0.5;
  cfg.min_iters = 100;
  CHECK(cfg.iterations_for_step(0) == 1000);
  CHECK(cfg.iterations_for_step(1) == 500);
  CHECK(cfg.iterations_for_step(2) == 250);
  CHECK(cfg.iterations_for_step(5) == 100);
}
