#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "otf/autodiff.hpp"

using namespace otf;
using namespace otf::ad;

namespace {

NetArch small_arch(int m, int n, int out, bool zero_out = true) {
  NetArch a;
  a.y_dim = m;
  a.u_dim = n;
  a.out_dim = out;
  a.width = 16;
  a.blocks = 2;
  a.zero_init_output = zero_out;
  return a;
}

Mat random_mat(const RngStream& rng, int rows, int cols) {
  Mat out(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out(i, j) = rng.normal(static_cast<std::uint64_t>(i * cols + j));
  return out;
}

// Scalar loss used by the finite-difference probes: 1/2 sum of squared outputs.
double net_loss(const Mlp& net, const Mat& y, const Mat& u) {
  return 0.5 * net.eval(y, u).squaredNorm();
}

Vec net_param_grad(const Mlp& net, const Mat& y, const Mat& u) {
  Tape tape;
  const Tape::Id yid = tape.input(y);
  const Tape::Id uid = tape.input(u);
  const auto pids = net.bind(tape, true);
  const Tape::Id out = net.forward(tape, yid, uid, pids);
  tape.backward(tape.scale(tape.sum(tape.square(out)), 0.5));
  Vec g(net.param_count());
  for (std::size_t s = 0; s < pids.size(); ++s) {
    const auto& sl = net.params.layout.slices[s];
    const Mat& gs = tape.grad(pids[s]);
    for (int j = 0; j < sl.cols; ++j)
      for (int i = 0; i < sl.rows; ++i) g[sl.offset + j * sl.rows + i] = gs(i, j);
  }
  return g;
}

}  // namespace

TEST_CASE("zero-init map is exactly the zero function") {
  const Mlp net = Mlp::make(small_arch(2, 3, 3), 7);
  const RngStream rng(3);
  for (int k = 0; k < 10; ++k) {
    const Vec y = rng.fold(2 * k).normal_vec(2);
    const Vec u = rng.fold(2 * k + 1).normal_vec(3);
    CHECK(net.eval_vec(y, u).norm() == 0.0);
  }
}

TEST_CASE("hand-built linear layer selecting the u block is the identity on u") {
  NetArch a = small_arch(2, 3, 3, false);
  a.blocks = 0;
  a.width = 5;  // = y_dim + u_dim
  Mlp net = Mlp::make(a, 0);
  net.params.values.setZero();
  net.params.block("w_in") = Mat::Identity(5, 5);
  Mat w_out = Mat::Zero(5, 3);
  w_out.block(2, 0, 3, 3) = Mat::Identity(3, 3);
  net.params.block("w_out") = w_out;
  Vec y(2), u(3);
  y << 0.3, -0.7;
  u << 1.0, 2.0, -3.0;
  CHECK((net.eval_vec(y, u) - u).norm() < 1e-14);
}

TEST_CASE("identity-skip net with zero-init output starts as the identity map") {
  NetArch a = small_arch(1, 3, 3, true);
  a.identity_skip = true;
  const Mlp net = Mlp::make(a, 5);
  const RngStream rng(4);
  const Vec y = rng.fold(0).normal_vec(1);
  const Vec u = rng.fold(1).normal_vec(3);
  CHECK((net.eval_vec(y, u) - u).norm() == 0.0);
}

TEST_CASE("tape forward agrees with the data path") {
  const Mlp net = Mlp::make(small_arch(2, 3, 3, false), 11);
  const RngStream rng(5);
  const Mat y = random_mat(rng.fold(1), 7, 2);
  const Mat u = random_mat(rng.fold(2), 7, 3);
  Tape tape;
  const auto pids = net.bind(tape, false);
  const Tape::Id out = net.forward(tape, tape.input(y), tape.input(u), pids);
  CHECK((tape.val(out) - net.eval(y, u)).norm() < 1e-13);
}

TEST_CASE("perturbing one weight moves the loss like the analytic gradient") {
  Mlp net = Mlp::make(small_arch(2, 3, 3, false), 13);
  const RngStream rng(6);
  const Mat y = random_mat(rng.fold(0), 1, 2);
  const Mat u = random_mat(rng.fold(1), 1, 3);
  const Vec g = net_param_grad(net, y, u);
  const double h = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    const int idx = static_cast<int>(
        rng.fold(99).below(static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(net.param_count())));
    Mlp p = net, m = net;
    p.params.values[idx] += h;
    m.params.values[idx] -= h;
    const double fd = (net_loss(p, y, u) - net_loss(m, y, u)) / (2 * h);
    CHECK(std::abs(fd - g[idx]) <= 1e-4 * std::max(1.0, std::abs(g[idx])));
  }
}

TEST_CASE("quadratic potential evaluation") {
  QuadraticPotential q;
  q.q0 = Mat::Identity(2, 2);
  q.b0 = Vec::Zero(2);
  q.by = Mat::Zero(2, 1);
  Vec u(2), y(1);
  u << 1, 1;
  y << 0;
  CHECK(q.eval(y, u) == doctest::Approx(1.0));

  QuadraticPotential q2;
  q2.q0 = 2.0 * Mat::Identity(2, 2);
  q2.b0 = Vec(2);
  q2.b0 << 1, 0;
  q2.by = Mat::Zero(2, 1);
  Vec u2(2);
  u2 << 1, 0;
  CHECK(q2.eval(y, u2) == doctest::Approx(2.0));
}

TEST_CASE("zero-parameter potential is zero") {
  const Mlp psi = Mlp::make(small_arch(1, 2, 1), 21);
  Vec y(1), u(2);
  y << 0.4;
  u << -1.0, 2.0;
  CHECK(eval_potential(psi, y, u) == 0.0);
}

TEST_CASE("grad_u of 1/2|u|^2 is u") {
  QuadraticPotential q;
  q.q0 = Mat::Identity(3, 3);
  q.b0 = Vec::Zero(3);
  q.by = Mat::Zero(3, 1);
  Vec y(1), u(3);
  y << 0;
  u << 1, -2, 0.5;
  CHECK((q.grad_u(y, u) - u).norm() < 1e-14);
}

TEST_CASE("grad_u of a random MLP matches central differences") {
  Mlp psi = Mlp::make(small_arch(2, 3, 1, false), 31);
  const RngStream rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec y = rng.fold(3 * trial).normal_vec(2);
    const Vec u = rng.fold(3 * trial + 1).normal_vec(3);
    const Vec g = grad_u_point(psi, y, u);
    const double h = 1e-5;
    for (int i = 0; i < 3; ++i) {
      Vec up = u, um = u;
      up[i] += h;
      um[i] -= h;
      const double fd = (eval_potential(psi, y, up) - eval_potential(psi, y, um)) / (2 * h);
      CHECK(std::abs(fd - g[i]) <= 1e-5 * std::max(1.0, std::abs(g[i])));
    }
  }
}

TEST_CASE("grad_u of a potential constant in u is zero") {
  Mlp psi = Mlp::make(small_arch(1, 2, 1, false), 33);
  psi.params.block("w_in").block(1, 0, 2, psi.arch.width).setZero();
  Vec y(1), u(2);
  y << 1.3;
  u << 0.2, -0.4;
  CHECK(grad_u_point(psi, y, u).norm() < 1e-14);
}

TEST_CASE("laplacian of 1/2|u|^2 in dim 2 is 2") {
  QuadraticPotential q;
  q.q0 = Mat::Identity(2, 2);
  q.b0 = Vec::Zero(2);
  q.by = Mat::Zero(2, 1);
  Vec y(1), u(2);
  y << 0;
  u << 0.7, -0.3;
  CHECK(laplacian_u(q, y, u, 1e-3) == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("laplacian of a quadratic equals trace(Q)") {
  QuadraticPotential q;
  q.q0 = Mat::Zero(2, 2);
  q.q0(0, 0) = 1.0;
  q.q0(1, 1) = 3.0;
  q.b0 = Vec::Zero(2);
  q.by = Mat::Zero(2, 1);
  Vec y(1), u(2);
  y << 0;
  u << 0.1, 0.2;
  CHECK(laplacian_u(q, y, u, 1e-3) == doctest::Approx(4.0).epsilon(1e-8));
}

TEST_CASE("laplacian of a linear potential is zero") {
  QuadraticPotential q;
  q.q0 = Mat::Zero(2, 2);
  q.b0 = Vec::Constant(2, 2.5);
  q.by = Mat::Zero(2, 1);
  Vec y(1), u(2);
  y << 0;
  u << 1.0, -1.0;
  CHECK(std::abs(laplacian_u(q, y, u, 1e-3)) < 1e-8);
}

TEST_CASE("backprop of u^T b with respect to b recovers u") {
  Vec u(2);
  u << 1.5, -2.5;
  Tape tape;
  const Tape::Id bid = tape.input(Mat::Zero(1, 2), true);
  const Tape::Id uid = tape.input(u.transpose());
  // loss = sum over the batch row of u .* b
  const Tape::Id brows = tape.add_rowvec(tape.input(Mat::Zero(1, 2)), bid);
  tape.backward(tape.sum(tape.rowdot(uid, brows)));
  CHECK((tape.grad(bid).row(0).transpose() - u).norm() < 1e-14);
}

TEST_CASE("backprop of a zero loss gives zero gradients") {
  const Mlp net = Mlp::make(small_arch(1, 2, 2, false), 41);
  Tape tape;
  const auto pids = net.bind(tape, true);
  const Tape::Id u = tape.input(Mat::Zero(4, 2));
  const Tape::Id y = tape.input(Mat::Zero(4, 1));
  const Tape::Id out = net.forward(tape, y, u, pids);
  tape.backward(tape.scale(tape.sum(out), 0.0));
  for (const auto id : pids) CHECK(tape.grad(id).norm() == 0.0);
}

TEST_CASE("backprop matches finite differences on 100 random probes") {
  const RngStream rng(55);
  int probes = 0;
  for (int net_idx = 0; net_idx < 5; ++net_idx) {
    Mlp net = Mlp::make(small_arch(2, 2, 2, false), 100 + static_cast<std::uint64_t>(net_idx));
    const Mat y = random_mat(rng.fold(7 * net_idx), 5, 2);
    const Mat u = random_mat(rng.fold(7 * net_idx + 1), 5, 2);
    const Vec g = net_param_grad(net, y, u);
    for (int t = 0; t < 20; ++t, ++probes) {
      const int idx = static_cast<int>(rng.fold(1000 + net_idx)
                                           .below(static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(net.param_count())));
      const double h = 1e-5;
      Mlp p = net, m = net;
      p.params.values[idx] += h;
      m.params.values[idx] -= h;
      const double fd = (net_loss(p, y, u) - net_loss(m, y, u)) / (2 * h);
      CHECK(std::abs(fd - g[idx]) <= 1e-5 * std::max(1.0, std::abs(g[idx])));
    }
  }
  CHECK(probes == 100);
}

TEST_CASE("non-finite loss raises a numeric error naming an op") {
  Tape tape;
  const Tape::Id a = tape.input(Mat::Constant(1, 1, 1e308), true);
  const Tape::Id loss = tape.square(a);
  CHECK_THROWS_AS(tape.backward(loss), NumericError);
}

TEST_CASE("adam first descent step with unit gradient moves by about lr") {
  AdamState st = AdamState::make(1, 1e-3);
  Vec p = Vec::Zero(1);
  adam_update(st, p, Vec::Constant(1, 1.0), StepSign::Descent);
  CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("adam leaves parameters unchanged under zero gradient") {
  AdamState st = AdamState::make(3, 1e-2);
  Vec p = Vec::Constant(3, 0.7);
  adam_update(st, p, Vec::Zero(3), StepSign::Descent);
  CHECK((p.array() == 0.7).all());
}

TEST_CASE("adam ascent and descent are exact negations") {
  const Vec g = RngStream(9).normal_vec(4);
  AdamState s1 = AdamState::make(4, 5e-3), s2 = AdamState::make(4, 5e-3);
  Vec p1 = Vec::Zero(4), p2 = Vec::Zero(4);
  adam_update(s1, p1, g, StepSign::Descent);
  adam_update(s2, p2, g, StepSign::Ascent);
  CHECK((p1 + p2).norm() == 0.0);
}

TEST_CASE("constrained quadratic potential eigenvalue bounds hold on sampled y") {
  QuadraticPotential q;
  q.q0 = Mat(2, 2);
  q.q0 << 2.0, 0.3, 0.3, 1.5;
  q.b0 = Vec::Zero(2);
  q.by = Mat::Zero(2, 1);
  q.eig_bounds = {1.0, 3.0};
  const RngStream rng(71);
  for (int k = 0; k < 50; ++k) CHECK_NOTHROW(q.check_eig_bounds(rng.fold(k).normal_vec(1)));
  q.eig_bounds = {2.5, 3.0};
  CHECK_THROWS_AS(q.check_eig_bounds(Vec::Zero(1)), ContractError);
}

TEST_CASE("parameter layout slices partition the flat vector") {
  const Mlp net = Mlp::make(small_arch(2, 3, 3), 1);
  int covered = 0;
  int expected_offset = 0;
  for (const auto& s : net.params.layout.slices) {
    CHECK(s.offset == expected_offset);
    expected_offset += s.rows * s.cols;
    covered += s.rows * s.cols;
  }
  CHECK(covered == net.param_count());
  CHECK(net.params.values.size() == covered);
}

TEST_CASE("singular Q makes the conjugate undefined") {
  QuadraticPotential q;
  q.q0 = Mat::Zero(2, 2);
  q.b0 = Vec::Zero(2);
  q.by = Mat::Zero(2, 1);
  CHECK_THROWS_AS(q.conjugate(Vec::Zero(1), Vec::Ones(2)), NumericError);
}
