#pragma once

#include "otf/common.hpp"
#include "otf/rng.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace otf::ad {

// ---------------------------------------------------------------------------
// Flat parameter storage
// ---------------------------------------------------------------------------

/// Maps named (rows x cols) blocks onto contiguous slices of one flat vector.
/// Optimizer steps, serialization, and finite-difference probes all operate
/// on the flat vector; forward passes view blocks through the layout.
struct ParamLayout {
  struct Slice {
    std::string name;
    int offset = 0, rows = 0, cols = 0;
  };
  std::vector<Slice> slices;
  int total = 0;

  int add(const std::string& name, int rows, int cols) {
    slices.push_back({name, total, rows, cols});
    total += rows * cols;
    return static_cast<int>(slices.size()) - 1;
  }
  const Slice& find(const std::string& name) const {
    for (const auto& s : slices)
      if (s.name == name) return s;
    throw ContractError("parameter slice not found: " + name);
  }
};

struct ParamVector {
  Vec values;
  ParamLayout layout;

  Eigen::Map<Mat> block(int slice_idx) {
    const auto& s = layout.slices[static_cast<std::size_t>(slice_idx)];
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Mat> block(int slice_idx) const {
    const auto& s = layout.slices[static_cast<std::size_t>(slice_idx)];
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Mat> block(const std::string& name) {
    const auto& s = layout.find(name);
    return {values.data() + s.offset, s.rows, s.cols};
  }
};

// ---------------------------------------------------------------------------
// Reverse-mode tape over matrix-valued nodes
// ---------------------------------------------------------------------------

/// A small dynamic tape. Nodes hold batch matrices (N x k); backward() runs
/// the recorded adjoint ops in reverse and accumulates gradients into every
/// node that requested them. Scalar results are 1x1 matrices.
class Tape {
 public:
  using Id = int;

  Id input(Mat value, bool wants_grad = false) {
    return push(std::move(value), wants_grad, "input", {}, nullptr);
  }

  Id add(Id a, Id b) {
    return push(val(a) + val(b), needs(a) || needs(b), "add", {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad);
      t.accum(n.parents[1], n.grad);
    });
  }

  Id sub(Id a, Id b) {
    return push(val(a) - val(b), needs(a) || needs(b), "sub", {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad);
      t.accum(n.parents[1], -n.grad);
    });
  }

  Id add_const(Id a, const Mat& c) {
    return push(val(a) + c, needs(a), "add_const", {a}, [](Tape& t, const Node& n) { t.accum(n.parents[0], n.grad); });
  }

  Id scale(Id a, double c) {
    return push(c * val(a), needs(a), "scale", {a},
                [c](Tape& t, const Node& n) { t.accum(n.parents[0], c * n.grad); });
  }

  // Row-broadcast bias: A (N x k) + b (1 x k).
  Id add_rowvec(Id a, Id b) {
    Mat v = val(a);
    v.rowwise() += val(b).row(0);
    return push(std::move(v), needs(a) || needs(b), "add_rowvec", {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad);
      t.accum(n.parents[1], n.grad.colwise().sum());
    });
  }

  Id matmul(Id a, Id b) {
    return push(val(a) * val(b), needs(a) || needs(b), "matmul", {a, b}, [](Tape& t, const Node& n) {
      t.accum_expr(n.parents[0], n.grad * t.val(n.parents[1]).transpose());
      t.accum_expr(n.parents[1], t.val(n.parents[0]).transpose() * n.grad);
    });
  }

  Id cmul(Id a, Id b) {
    return push(val(a).cwiseProduct(val(b)), needs(a) || needs(b), "cmul", {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad.cwiseProduct(t.val(n.parents[1])));
      t.accum(n.parents[1], n.grad.cwiseProduct(t.val(n.parents[0])));
    });
  }

  Id cmul_const(Id a, const Mat& c) {
    return push(val(a).cwiseProduct(c), needs(a), "cmul_const", {a},
                [c](Tape& t, const Node& n) { t.accum(n.parents[0], n.grad.cwiseProduct(c)); });
  }

  Id tanh_(Id a) {
    Mat v = val(a).array().tanh().matrix();
    return push(std::move(v), needs(a), "tanh", {a}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix()));
    });
  }

  Id elu(Id a, double alpha) {
    const Mat& x = val(a);
    Mat v = x.unaryExpr([alpha](double z) { return z > 0.0 ? z : alpha * (std::exp(z) - 1.0); });
    return push(std::move(v), needs(a), "elu", {a}, [alpha](Tape& t, const Node& n) {
      const Mat& x0 = t.val(n.parents[0]);
      Mat d = x0.unaryExpr([alpha](double z) { return z > 0.0 ? 1.0 : alpha * std::exp(z); });
      t.accum(n.parents[0], n.grad.cwiseProduct(d));
    });
  }

  Id square(Id a) {
    return push(val(a).array().square().matrix(), needs(a), "square", {a}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], 2.0 * n.grad.cwiseProduct(t.val(n.parents[0])));
    });
  }

  // Per-row squared Euclidean norm: (N x k) -> (N x 1).
  Id rows_sqnorm(Id a) {
    Mat v = val(a).rowwise().squaredNorm();
    return push(std::move(v), needs(a), "rows_sqnorm", {a}, [](Tape& t, const Node& n) {
      const Mat& x = t.val(n.parents[0]);
      t.accum_expr(n.parents[0], x.array().colwise() * (2.0 * n.grad.col(0).array()));
    });
  }

  // Per-row inner product: (N x k, N x k) -> (N x 1).
  Id rowdot(Id a, Id b) {
    Mat v = val(a).cwiseProduct(val(b)).rowwise().sum();
    return push(std::move(v), needs(a) || needs(b), "rowdot", {a, b}, [](Tape& t, const Node& n) {
      t.accum_expr(n.parents[0], t.val(n.parents[1]).array().colwise() * n.grad.col(0).array());
      t.accum_expr(n.parents[1], t.val(n.parents[0]).array().colwise() * n.grad.col(0).array());
    });
  }

  Id concat_cols(Id a, Id b) {
    Mat v(val(a).rows(), val(a).cols() + val(b).cols());
    v << val(a), val(b);
    return push(std::move(v), needs(a) || needs(b), "concat_cols", {a, b}, [](Tape& t, const Node& n) {
      const auto ca = t.val(n.parents[0]).cols();
      t.accum(n.parents[0], n.grad.leftCols(ca));
      t.accum(n.parents[1], n.grad.rightCols(n.grad.cols() - ca));
    });
  }

  Id gather_rows(Id a, std::vector<int> rows) {
    const Mat& x = val(a);
    Mat v(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return push(std::move(v), needs(a), "gather_rows", {a}, [rows](Tape& t, const Node& n) {
      Node& p = t.nodes_[static_cast<std::size_t>(n.parents[0])];
      if (!p.wants_grad && !p.back) return;
      t.ensure_grad(n.parents[0]);
      for (std::size_t i = 0; i < rows.size(); ++i)
        p.grad.row(rows[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    });
  }

  Id sum(Id a) {
    Mat v(1, 1);
    v(0, 0) = val(a).sum();
    return push(std::move(v), needs(a), "sum", {a}, [](Tape& t, const Node& n) {
      t.accum_expr(n.parents[0], Mat::Constant(t.val(n.parents[0]).rows(), t.val(n.parents[0]).cols(), n.grad(0, 0)));
    });
  }

  Id mean_all(Id a) {
    const double inv = 1.0 / static_cast<double>(val(a).size());
    Mat v(1, 1);
    v(0, 0) = val(a).sum() * inv;
    return push(std::move(v), needs(a), "mean", {a}, [inv](Tape& t, const Node& n) {
      t.accum_expr(n.parents[0],
                   Mat::Constant(t.val(n.parents[0]).rows(), t.val(n.parents[0]).cols(), inv * n.grad(0, 0)));
    });
  }

  const Mat& val(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Mat& grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  double scalar(Id id) const {
    const Mat& v = val(id);
    detail::require(v.size() == 1, "scalar() on a non-scalar node");
    return v(0, 0);
  }

  /// Reverse sweep from a scalar root. Clears all gradients first; throws
  /// NumericError naming the first non-finite node when the root is not
  /// finite.
  void backward(Id root) {
    detail::require(val(root).size() == 1, "backward root must be scalar");
    if (!std::isfinite(scalar(root))) {
      for (const auto& n : nodes_)
        if (!n.value.allFinite()) throw NumericError("non-finite value in op '" + n.op + "'");
      throw NumericError("non-finite loss");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    ensure_grad(root);
    nodes_[static_cast<std::size_t>(root)].grad(0, 0) = 1.0;
    for (Id id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back && n.grad.size() > 0) n.back(*this, n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::array<Id, 2> parents{-1, -1};
    bool wants_grad = false;
    std::string op;
    std::function<void(Tape&, const Node&)> back;
  };

  bool needs(Id id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.wants_grad || static_cast<bool>(n.back);
  }

  void ensure_grad(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }

  void accum(Id id, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.wants_grad && !n.back) return;
    ensure_grad(id);
    n.grad += g;
  }

  template <class Expr>
  void accum_expr(Id id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.wants_grad && !n.back) return;
    ensure_grad(id);
    n.grad += g.matrix();
  }

  Id push(Mat value, bool track, const char* op, std::array<Id, 2> parents,
          std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.parents = parents;
    n.op = op;
    if (track) n.back = std::move(back);
    n.wants_grad = track && !n.back;  // pure leaf requested gradient
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Residual MLP (map and potential parameterizations)
// ---------------------------------------------------------------------------

enum class Activation { Tanh };

struct NetArch {
  int y_dim = 0;
  int u_dim = 0;
  int out_dim = 0;
  int width = 64;
  int blocks = 2;
  Activation act = Activation::Tanh;
  bool residual = true;
  bool zero_init_output = true;
  // Adds the u input to the output (requires out_dim == u_dim). Combined
  // with zero_init_output the network starts as the identity map in u.
  bool identity_skip = false;
};

/// Residual multilayer perceptron on concat(y, u). out_dim == state dim for
/// transport maps, 1 for potentials.
class Mlp {
 public:
  NetArch arch;
  ParamVector params;

  static Mlp make(const NetArch& arch, std::uint64_t init_seed) {
    detail::require(arch.y_dim >= 0 && arch.u_dim >= 1 && arch.out_dim >= 1, "bad net dims");
    detail::require(!arch.identity_skip || arch.out_dim == arch.u_dim, "identity_skip requires out_dim == u_dim");
    Mlp net;
    net.arch = arch;
    ParamLayout& L = net.params.layout;
    const int in = arch.y_dim + arch.u_dim;
    L.add("w_in", in, arch.width);
    L.add("b_in", 1, arch.width);
    for (int k = 0; k < arch.blocks; ++k) {
      L.add("w" + std::to_string(k), arch.width, arch.width);
      L.add("b" + std::to_string(k), 1, arch.width);
    }
    L.add("w_out", arch.width, arch.out_dim);
    L.add("b_out", 1, arch.out_dim);
    net.params.values = Vec::Zero(L.total);

    const RngStream rng = RngStream(init_seed).fold(Role::ParamInit);
    std::uint64_t ctr = 0;
    for (std::size_t s = 0; s < L.slices.size(); ++s) {
      const auto& sl = L.slices[s];
      const bool is_output = sl.name == "w_out" || sl.name == "b_out";
      if (is_output && arch.zero_init_output) continue;
      if (sl.name[0] == 'b') continue;  // biases start at zero
      const double scale = 1.0 / std::sqrt(static_cast<double>(sl.rows));
      auto blk = net.params.block(static_cast<int>(s));
      for (int j = 0; j < sl.cols; ++j)
        for (int i = 0; i < sl.rows; ++i) blk(i, j) = scale * rng.normal(ctr++);
    }
    return net;
  }

  int param_count() const { return params.layout.total; }

  /// Registers one tape input node per layout slice; returns the node ids.
  std::vector<Tape::Id> bind(Tape& tape, bool wants_grad) const {
    std::vector<Tape::Id> ids;
    ids.reserve(params.layout.slices.size());
    for (std::size_t s = 0; s < params.layout.slices.size(); ++s)
      ids.push_back(tape.input(params.block(static_cast<int>(s)), wants_grad));
    return ids;
  }

  /// Builds the forward graph for batch inputs y (N x y_dim) and u (N x u_dim)
  /// given bound parameter nodes. y may be -1 when y_dim == 0.
  Tape::Id forward(Tape& tape, Tape::Id y, Tape::Id u, const std::vector<Tape::Id>& p) const {
    Tape::Id x = arch.y_dim > 0 ? tape.concat_cols(y, u) : u;
    std::size_t s = 0;
    Tape::Id h = tape.add_rowvec(tape.matmul(x, p[s]), p[s + 1]);
    s += 2;
    for (int k = 0; k < arch.blocks; ++k, s += 2) {
      Tape::Id z = tape.tanh_(tape.add_rowvec(tape.matmul(h, p[s]), p[s + 1]));
      h = arch.residual ? tape.add(h, z) : z;
    }
    Tape::Id out = tape.add_rowvec(tape.matmul(h, p[s]), p[s + 1]);
    if (arch.identity_skip) out = tape.add(out, u);
    return out;
  }

  /// Plain data-path forward (no gradients). Must agree with the tape path;
  /// the test suite checks this.
  Mat eval(const Mat& y, const Mat& u) const {
    detail::require(u.cols() == arch.u_dim, "eval: u dimension mismatch");
    detail::require(arch.y_dim == 0 || y.cols() == arch.y_dim, "eval: y dimension mismatch");
    Mat x;
    if (arch.y_dim > 0) {
      detail::require(y.rows() == u.rows(), "eval: batch size mismatch");
      x.resize(u.rows(), arch.y_dim + arch.u_dim);
      x << y, u;
    } else {
      x = u;
    }
    std::size_t s = 0;
    Mat h = x * params.block(static_cast<int>(s));
    h.rowwise() += params.block(static_cast<int>(s + 1)).row(0);
    s += 2;
    for (int k = 0; k < arch.blocks; ++k, s += 2) {
      Mat z = h * params.block(static_cast<int>(s));
      z.rowwise() += params.block(static_cast<int>(s + 1)).row(0);
      z = z.array().tanh().matrix();
      h = arch.residual ? Mat(h + z) : z;
    }
    Mat out = h * params.block(static_cast<int>(s));
    out.rowwise() += params.block(static_cast<int>(s + 1)).row(0);
    if (arch.identity_skip) out += u;
    return out;
  }

  Vec eval_vec(const Vec& y, const Vec& u) const {
    const Mat out = eval(y.transpose(), u.transpose());
    return out.row(0).transpose();
  }
};

/// Gradient of a scalar-output network with respect to its u input, one row
/// per batch sample. Exact reverse mode.
inline Mat grad_u(const Mlp& psi, const Mat& y, const Mat& u) {
  detail::require(psi.arch.out_dim == 1, "grad_u expects a scalar-output network");
  Tape tape;
  Tape::Id yid = psi.arch.y_dim > 0 ? tape.input(y) : -1;
  Tape::Id uid = tape.input(u, /*wants_grad=*/true);
  const auto pids = psi.bind(tape, /*wants_grad=*/false);
  Tape::Id out = tape.sum(psi.forward(tape, yid, uid, pids));
  tape.backward(out);
  return tape.grad(uid);
}

// ---------------------------------------------------------------------------
// Quadratic-in-u potential class
// ---------------------------------------------------------------------------

/// phi(y, u) = 1/2 u^T Q(y) u + u^T b(y) with Q symmetric and affine in y,
/// b affine in y. The convex conjugate in u is available in closed form when
/// Q(y) is positive definite.
struct QuadraticPotential {
  Mat q0;               // n x n symmetric
  std::vector<Mat> qy;  // optional per-obs-coordinate symmetric terms
  Vec b0;               // n
  Mat by;               // n x m (zero columns when b is constant)
  std::optional<std::pair<double, double>> eig_bounds;  // constrained flag

  int dim() const { return static_cast<int>(q0.rows()); }

  Mat q(const Vec& y) const {
    Mat out = q0;
    for (std::size_t k = 0; k < qy.size(); ++k) out += y[static_cast<Eigen::Index>(k)] * qy[k];
    return out;
  }
  Vec b(const Vec& y) const { return by.size() > 0 ? Vec(b0 + by * y) : b0; }

  double eval(const Vec& y, const Vec& u) const {
    const Mat qm = q(y);
    return 0.5 * u.dot(qm * u) + u.dot(b(y));
  }
  Vec grad_u(const Vec& y, const Vec& u) const { return q(y) * u + b(y); }

  /// Convex conjugate in u: phi*(y, u) = 1/2 (u - b(y))^T Q(y)^{-1} (u - b(y)).
  double conjugate(const Vec& y, const Vec& u) const {
    const Mat qm = q(y);
    Eigen::LLT<Mat> llt(qm);
    if (llt.info() != Eigen::Success) throw NumericError("quadratic conjugate undefined: Q(y) not positive definite");
    const Vec r = u - b(y);
    return 0.5 * r.dot(llt.solve(r));
  }

  void check_eig_bounds(const Vec& y) const {
    if (!eig_bounds) return;
    Eigen::SelfAdjointEigenSolver<Mat> es(q(y));
    detail::require(es.eigenvalues().minCoeff() >= eig_bounds->first - 1e-12 &&
                        es.eigenvalues().maxCoeff() <= eig_bounds->second + 1e-12,
                    "Q(y) eigenvalues outside configured bounds");
  }
};

inline double eval_potential(const QuadraticPotential& p, const Vec& y, const Vec& u) { return p.eval(y, u); }
inline double eval_potential(const Mlp& net, const Vec& y, const Vec& u) {
  detail::require(net.arch.out_dim == 1, "eval_potential expects scalar output");
  return net.eval_vec(y, u)[0];
}
inline Vec grad_u(const QuadraticPotential& p, const Vec& y, const Vec& u) { return p.grad_u(y, u); }
inline Vec grad_u_point(const Mlp& psi, const Vec& y, const Vec& u) {
  return grad_u(psi, Mat(y.transpose()), Mat(u.transpose())).row(0).transpose();
}

/// Laplacian in u by central differences of exact u-gradients,
/// sum_i [d_i(u + h e_i) - d_i(u - h e_i)] / (2h). Second-order autodiff is
/// avoided on purpose; error is O(h^2).
template <class Potential>
double laplacian_u(const Potential& psi, const Vec& y, const Vec& u, double h) {
  detail::require(h > 0.0, "laplacian_u: h must be > 0");
  const int n = static_cast<int>(u.size());
  double lap = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec up = u, um = u;
    up[i] += h;
    um[i] -= h;
    Vec gp, gm;
    if constexpr (std::is_same_v<Potential, Mlp>) {
      gp = grad_u_point(psi, y, up);
      gm = grad_u_point(psi, y, um);
    } else {
      gp = psi.grad_u(y, up);
      gm = psi.grad_u(y, um);
    }
    lap += (gp[i] - gm[i]) / (2.0 * h);
  }
  return lap;
}

inline double default_laplacian_step(const Vec& u) { return 1e-3 * (1.0 + u.norm()); }

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

enum class StepSign { Descent, Ascent };

struct AdamState {
  Vec m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr = 1e-3;

  static AdamState make(int dim, double lr) {
    AdamState s;
    s.m = Vec::Zero(dim);
    s.v = Vec::Zero(dim);
    s.lr = lr;
    return s;
  }
};

/// Standard Adam with bias correction; Ascent negates the step.
inline void adam_update(AdamState& st, Vec& params, const Vec& grad, StepSign sign) {
  detail::require(st.m.size() == params.size() && grad.size() == params.size(), "adam_update: shape mismatch");
  st.step += 1;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const Vec mhat = st.m / c1;
  const Vec vhat = st.v / c2;
  const Vec delta = (st.lr * mhat.array() / (vhat.array().sqrt() + st.eps)).matrix();
  params += (sign == StepSign::Descent) ? Vec(-delta) : delta;
}

}  // namespace otf::ad
