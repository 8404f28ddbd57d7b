#pragma once

#include "otf/autodiff.hpp"
#include "otf/common.hpp"
#include "otf/rng.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

namespace otf::oracle {

// ---------------------------------------------------------------------------
// 1D densities with cached CDF tables
// ---------------------------------------------------------------------------

/// A 1D density tabulated on a uniform grid: normalization by trapezoid
/// quadrature, CDF by cumulative trapezoid, quantiles by monotone
/// interpolation. Where the CDF is flat at the requested level (a zero-density
/// stretch between modes), the quantile returns the midpoint of the flat
/// region, so symmetric bimodal densities map the median to the symmetry
/// point.
class Density1D {
 public:
  static Density1D from_log_density(const std::function<double(double)>& log_density, double lo, double hi,
                                    int n_points = 4096) {
    detail::require(hi > lo, "Density1D: empty support");
    detail::require(n_points >= 16, "Density1D: too few grid points");
    Density1D d;
    d.grid_.resize(n_points);
    d.pdf_.resize(n_points);
    const double h = (hi - lo) / (n_points - 1);
    double max_log = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_points; ++i) {
      d.grid_[i] = lo + h * i;
      d.pdf_[i] = log_density(d.grid_[i]);
      max_log = std::max(max_log, d.pdf_[i]);
    }
    detail::require(std::isfinite(max_log), "Density1D: log-density has no finite values on the grid");
    for (int i = 0; i < n_points; ++i) d.pdf_[i] = std::exp(d.pdf_[i] - max_log);
    d.cdf_.resize(n_points);
    d.cdf_[0] = 0.0;
    for (int i = 1; i < n_points; ++i) d.cdf_[i] = d.cdf_[i - 1] + 0.5 * h * (d.pdf_[i - 1] + d.pdf_[i]);
    const double z = d.cdf_[n_points - 1];
    detail::require(z > 0.0, "Density1D: density integrates to zero on the grid");
    d.pdf_ /= z;
    d.cdf_ /= z;
    return d;
  }

  static Density1D gaussian(double mean, double std, int n_points = 4096) {
    detail::require(std > 0.0, "Density1D: std must be > 0");
    return from_log_density([mean, std](double u) { return -0.5 * (u - mean) * (u - mean) / (std * std); },
                            mean - 8.0 * std, mean + 8.0 * std, n_points);
  }

  double lo() const { return grid_[0]; }
  double hi() const { return grid_[grid_.size() - 1]; }
  const Vec& grid() const { return grid_; }
  const Vec& pdf() const { return pdf_; }

  double cdf(double u) const {
    if (u < lo() || u > hi()) throw ContractError("Density1D: point outside the quadrature grid");
    const int i = cell(u);
    const double h = grid_[i + 1] - grid_[i];
    const double w = (u - grid_[i]) / h;
    // trapezoid-consistent quadratic interpolation of the CDF inside a cell
    const double f0 = pdf_[i], f1 = pdf_[i + 1];
    return cdf_[i] + h * (f0 * w + 0.5 * (f1 - f0) * w * w);
  }

  double quantile(double p) const {
    detail::require(p >= 0.0 && p <= 1.0, "quantile level outside [0, 1]");
    const auto n = static_cast<int>(grid_.size());
    const double tol = 1e-12;  // CDF plateau detection at the requested level
    const double* begin = cdf_.data();
    const double* end = begin + n;
    const int il = static_cast<int>(std::lower_bound(begin, end, p - tol) - begin);
    const int ir = static_cast<int>(std::upper_bound(begin, end, p + tol) - begin) - 1;
    const double left = invert_in_cell(std::clamp(il - 1, 0, n - 2), p);
    const double right = invert_in_cell(std::clamp(ir, 0, n - 2), p);
    return 0.5 * (left + right);
  }

  /// Draws via the inverse CDF.
  double sample(double uniform01) const { return quantile(uniform01); }

 private:
  int cell(double u) const {
    const auto n = static_cast<int>(grid_.size());
    const double h = (hi() - lo()) / (n - 1);
    int i = static_cast<int>((u - lo()) / h);
    return std::clamp(i, 0, n - 2);
  }

  // Solves cdf(u) = p inside cell i (clamped to the cell).
  double invert_in_cell(int i, double p) const {
    const double h = grid_[i + 1] - grid_[i];
    const double f0 = pdf_[i], f1 = pdf_[i + 1];
    const double target = p - cdf_[i];
    double w;
    const double slope = f1 - f0;
    if (std::abs(slope) * h < 1e-14 * (f0 + 1e-300)) {
      w = f0 > 0.0 ? target / (h * f0) : 0.5;
    } else {
      // solve 0.5*slope*w^2 + f0*w - target/h = 0 for w in [0, 1]
      const double disc = f0 * f0 + 2.0 * slope * target / h;
      w = disc >= 0.0 ? (-f0 + std::sqrt(disc)) / slope : 0.5;
    }
    return grid_[i] + h * std::clamp(w, 0.0, 1.0);
  }

  Vec grid_, pdf_, cdf_;
};

/// Composition-of-CDFs conditional map: T(u) = Q_posterior(F_prior(u)).
inline double cdf_map_1d(const Density1D& prior, const Density1D& posterior, double u) {
  return posterior.quantile(prior.cdf(u));
}

/// Kantorovich potential for the 1D map: psi(u) = int_{lo}^{u} (s - T^{-1}(s)) ds
/// with T^{-1}(s) = Q_prior(F_posterior(s)), by trapezoid quadrature on the
/// posterior grid.
inline double potential_1d(const Density1D& prior, const Density1D& posterior, double u) {
  if (u < posterior.lo() || u > posterior.hi()) throw ContractError("potential_1d: point outside the quadrature grid");
  const Vec& g = posterior.grid();
  auto integrand = [&](double s) { return s - prior.quantile(posterior.cdf(s)); };
  double acc = 0.0;
  double prev_s = g[0];
  double prev_f = integrand(prev_s);
  for (int i = 1; i < g.size() && g[i] <= u; ++i) {
    const double f = integrand(g[i]);
    acc += 0.5 * (g[i] - prev_s) * (prev_f + f);
    prev_s = g[i];
    prev_f = f;
  }
  if (u > prev_s) acc += 0.5 * (u - prev_s) * (prev_f + integrand(u));
  return acc;
}

/// Exact posterior for the elementwise-square observation model
/// y = u^2/2 + sigma*w with a standard normal prior:
/// log density -u^2/2 - (y - u^2/2)^2 / (2 sigma^2), tabulated over [-6, 6].
inline Density1D posterior_squared_model(double y, double sigma, int n_points = 8192) {
  detail::require(sigma > 0.0, "posterior_squared_model: sigma must be > 0");
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  return Density1D::from_log_density(
      [y, inv2s2](double u) {
        const double r = y - 0.5 * u * u;
        return -0.5 * u * u - r * r * inv2s2;
      },
      -6.0, 6.0, n_points);
}

// ---------------------------------------------------------------------------
// Gaussian transport
// ---------------------------------------------------------------------------

struct AffineMap {
  Mat a;
  Vec c;
  Vec operator()(const Vec& u) const { return a * u + c; }
};

/// Optimal transport map between Gaussians N(m0, P0) -> N(m1, P1):
/// A = P0^{-1/2} (P0^{1/2} P1 P0^{1/2})^{1/2} P0^{-1/2}, c = m1 - A m0.
inline AffineMap gaussian_brenier(const Vec& m0, const Mat& p0, const Vec& m1, const Mat& p1) {
  detail::require(m0.size() == p0.rows() && m1.size() == p1.rows() && m0.size() == m1.size(),
                  "gaussian_brenier: dimension mismatch");
  Eigen::SelfAdjointEigenSolver<Mat> es0(p0);
  detail::require(es0.info() == Eigen::Success && es0.eigenvalues().minCoeff() > 0.0,
                  "gaussian_brenier: P0 must be positive definite");
  Eigen::SelfAdjointEigenSolver<Mat> es1(p1);
  detail::require(es1.info() == Eigen::Success && es1.eigenvalues().minCoeff() > 0.0,
                  "gaussian_brenier: P1 must be positive definite");
  const Mat p0_half = es0.eigenvectors() * es0.eigenvalues().cwiseSqrt().asDiagonal() * es0.eigenvectors().transpose();
  const Mat p0_half_inv =
      es0.eigenvectors() * es0.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * es0.eigenvectors().transpose();
  const Mat inner = psd_sqrt(p0_half * p1 * p0_half);
  AffineMap map;
  map.a = p0_half_inv * inner * p0_half_inv;
  map.a = 0.5 * (map.a + map.a.transpose());
  map.c = m1 - map.a * m0;
  return map;
}

// ---------------------------------------------------------------------------
// Hessian-bound recursion for the quadratic hypothesis class
// ---------------------------------------------------------------------------

/// Curvature bounds of the filtering system: Hessian bounds of the dynamic
/// kernel in each block (u, u', mixed), likelihood curvature, eigenvalue
/// range of the quadratic class, and the initial-law curvature range.
struct HessianBounds {
  double a_u_min = 0, a_u_max = 0;
  double a_up_min = 0, a_up_max = 0;    // u' block
  double a_uup_min = 0, a_uup_max = 0;  // mixed block
  double theta_min = 0, theta_max = 0;
  double q_min = 1, q_max = 1;  // eigenvalue range of Q(y)
  double gamma0 = 0, Gamma0 = 0;

  void validate() const {
    detail::require(a_u_min > 0 && a_up_min > 0 && theta_min > 0 && q_min > 0, "Hessian bounds must be positive");
    detail::require(a_u_max >= a_u_min && a_up_max >= a_up_min && a_uup_max >= a_uup_min && theta_max >= theta_min &&
                        q_max >= q_min && a_uup_min >= 0,
                    "Hessian bound ordering violated");
    detail::require(gamma0 > 0 && Gamma0 >= gamma0, "initial curvature range invalid");
  }

  double m(double x) const {
    const double den = a_up_min + x;
    if (den <= 0.0) throw NumericError("hessian recursion left the valid regime (m denominator <= 0)");
    return a_u_min - a_uup_max * a_uup_max / den;
  }
  double M(double x) const {
    const double den = a_up_max + x;
    if (den <= 0.0) throw NumericError("hessian recursion left the valid regime (M denominator <= 0)");
    return a_u_max - a_uup_min * a_uup_min / den;
  }

  /// Contraction conditions under which both update maps have positive fixed
  /// points and the curvature bounds stay bounded in time.
  bool fixed_point_conditions() const {
    return a_uup_max * a_uup_max < a_u_min * a_up_min &&
           a_uup_max * a_uup_max < a_up_min * a_up_min * q_max * q_max &&
           a_uup_min * a_uup_min < a_up_max * a_up_max * q_min * q_min;
  }
};

struct HessianSeq {
  Vec gamma, Gamma;  // gamma[t], Gamma[t] for t = 0..t_max
  std::optional<double> gamma_star, Gamma_star;
};

inline HessianSeq hessian_recursion(const HessianBounds& b, int t_max) {
  b.validate();
  detail::require(t_max >= 1, "hessian_recursion: t_max must be >= 1");
  HessianSeq seq;
  seq.gamma.resize(t_max + 1);
  seq.Gamma.resize(t_max + 1);
  seq.gamma[0] = b.gamma0;
  seq.Gamma[0] = b.Gamma0;
  for (int t = 1; t <= t_max; ++t) {
    seq.gamma[t] = b.m(seq.gamma[t - 1] / (b.q_max * b.q_max));
    seq.Gamma[t] = b.M(seq.Gamma[t - 1] / (b.q_min * b.q_min));
    if (seq.gamma[t] <= 0.0) throw NumericError("hessian recursion lost positivity of the lower bound");
  }
  if (b.fixed_point_conditions()) {
    // closed-form positive roots of gamma = m(gamma / q_max^2) and
    // Gamma = M(Gamma / q_min^2)
    const double qM2 = b.q_max * b.q_max;
    const double qm2 = b.q_min * b.q_min;
    {
      const double bb = qM2 * b.a_up_min - b.a_u_min;
      const double disc = bb * bb + 4.0 * qM2 * (b.a_u_min * b.a_up_min - b.a_uup_max * b.a_uup_max);
      seq.gamma_star = 0.5 * (-bb + std::sqrt(disc));
    }
    {
      const double bb = qm2 * b.a_up_max - b.a_u_max;
      const double disc = bb * bb + 4.0 * qm2 * (b.a_u_max * b.a_up_max - b.a_uup_min * b.a_uup_min);
      seq.Gamma_star = 0.5 * (-bb + std::sqrt(disc));
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Gaussian conditional instances; semidual gap and its sandwich bounds
// ---------------------------------------------------------------------------

/// A linear-Gaussian conditional family: reference eta_U = N(eta_mean, eta_cov),
/// observation marginal y ~ N(y_mean, y_cov), conditionals
/// nu(.|y) = N(G y + g, cond_cov). The optimal potential is quadratic.
struct GaussianInstance {
  Vec eta_mean;
  Mat eta_cov;
  Vec y_mean;
  Mat y_cov;
  Mat cond_g;  // n x m
  Vec cond_c;  // n
  Mat cond_cov;

  int state_dim() const { return static_cast<int>(eta_mean.size()); }
  int obs_dim() const { return static_cast<int>(y_mean.size()); }

  /// The optimal quadratic potential: grad_u phi(y, u) = A u + (m1(y) - A m0).
  ad::QuadraticPotential brenier_potential() const {
    const AffineMap map = gaussian_brenier(eta_mean, eta_cov, Vec::Zero(state_dim()), cond_cov);
    ad::QuadraticPotential phi;
    phi.q0 = map.a;
    phi.b0 = cond_c - map.a * eta_mean;
    phi.by = cond_g;
    return phi;
  }
};

/// Population semidual value S(phi) = E_eta phi(y, v) + E_nu phi*(y, u) for a
/// quadratic potential on a Gaussian instance, in closed form.
inline double semidual_value_closed_form(const ad::QuadraticPotential& phi, const GaussianInstance& inst) {
  detail::require(phi.qy.empty(), "closed form requires Q constant in y");
  const Mat q = phi.q0;
  Eigen::LLT<Mat> llt(q);
  detail::require(llt.info() == Eigen::Success, "closed form requires positive definite Q");
  const Mat qinv = llt.solve(Mat::Identity(q.rows(), q.cols()));

  // E phi(y, v) with v ~ N(eta_mean, eta_cov) independent of y
  const double term_ref = 0.5 * ((q * inst.eta_cov).trace() + inst.eta_mean.dot(q * inst.eta_mean)) +
                          inst.eta_mean.dot(phi.b0 + phi.by * inst.y_mean);

  // E phi*(y, u) with u | y ~ N(G y + g, cond_cov):
  // residual r(y, u) = u - b(y); r | y ~ N((G - By) y + g - b0, cond_cov)
  const Mat dg = inst.cond_g - phi.by;
  const Vec dc = inst.cond_c - phi.b0;
  const Vec rmean = dg * inst.y_mean + dc;
  const Mat rcov = inst.cond_cov + dg * inst.y_cov * dg.transpose();
  const double term_tgt = 0.5 * ((qinv * rcov).trace() + rmean.dot(qinv * rmean));
  return term_ref + term_tgt;
}

struct StabilityGapResult {
  double gap = 0, gap_se = 0;       // Monte-Carlo estimate of S(phi) - S(phi_opt)
  double map_err = 0, map_se = 0;   // |grad phi - grad phi_opt|^2 in L2(eta)
  double lower = 0, lower_se = 0;   // map_err / (2 beta_max)
  double upper = 0, upper_se = 0;   // map_err / (2 alpha_min)
};

/// Monte-Carlo check of the excess-semidual sandwich
///   map_err / (2 beta) <= S(phi) - S(phi_opt) <= map_err / (2 alpha)
/// with alpha/beta the eigenvalue range of the tested quadratic potential.
inline StabilityGapResult stability_gap(const ad::QuadraticPotential& phi, const GaussianInstance& inst, int n_mc,
                                        const RngStream& rng) {
  detail::require(n_mc >= 100, "stability_gap: need at least 100 Monte-Carlo samples");
  const ad::QuadraticPotential opt = inst.brenier_potential();
  Eigen::SelfAdjointEigenSolver<Mat> es(phi.q0);
  const double alpha = es.eigenvalues().minCoeff();
  const double beta = es.eigenvalues().maxCoeff();
  detail::require(alpha > 0.0, "stability_gap: tested potential must be strongly convex");

  const Mat eta_half = psd_sqrt(inst.eta_cov);
  const Mat y_half = psd_sqrt(inst.y_cov);
  const Mat cond_half = psd_sqrt(inst.cond_cov);

  double acc_gap = 0, acc_gap2 = 0, acc_err = 0, acc_err2 = 0;
  for (int i = 0; i < n_mc; ++i) {
    const RngStream si = rng.fold(static_cast<std::uint64_t>(i));
    const Vec y = inst.y_mean + y_half * si.fold(1).normal_vec(inst.obs_dim());
    const Vec v = inst.eta_mean + eta_half * si.fold(2).normal_vec(inst.state_dim());
    const Vec u = inst.cond_g * y + inst.cond_c + cond_half * si.fold(3).normal_vec(inst.state_dim());
    const double g = (phi.eval(y, v) - opt.eval(y, v)) + (phi.conjugate(y, u) - opt.conjugate(y, u));
    const double e = (phi.grad_u(y, v) - opt.grad_u(y, v)).squaredNorm();
    acc_gap += g;
    acc_gap2 += g * g;
    acc_err += e;
    acc_err2 += e * e;
  }
  const double n = n_mc;
  StabilityGapResult out;
  out.gap = acc_gap / n;
  out.gap_se = std::sqrt(std::max(0.0, (acc_gap2 / n - out.gap * out.gap) / (n - 1)));
  out.map_err = acc_err / n;
  out.map_se = std::sqrt(std::max(0.0, (acc_err2 / n - out.map_err * out.map_err) / (n - 1)));
  out.lower = out.map_err / (2.0 * beta);
  out.lower_se = out.map_se / (2.0 * beta);
  out.upper = out.map_err / (2.0 * alpha);
  out.upper_se = out.map_se / (2.0 * alpha);
  return out;
}

struct CaffarelliResult {
  bool pass = false;
  double bound_lo = 0, bound_hi = 0;
  double eig_min = 0, eig_max = 0;
};

/// Eigenvalues of the Gaussian Brenier map Hessian against the contraction
/// bounds sqrt(alpha_F / beta_G) and sqrt(beta_F / alpha_G) given by the
/// log-density curvature ranges of the two Gaussians.
inline CaffarelliResult caffarelli_check(const Mat& p0, const Mat& p1, double tol = 1e-9) {
  const int n = static_cast<int>(p0.rows());
  const AffineMap map = gaussian_brenier(Vec::Zero(n), p0, Vec::Zero(n), p1);
  Eigen::SelfAdjointEigenSolver<Mat> ea(map.a);
  Eigen::SelfAdjointEigenSolver<Mat> e0(p0);
  Eigen::SelfAdjointEigenSolver<Mat> e1(p1);
  CaffarelliResult r;
  r.eig_min = ea.eigenvalues().minCoeff();
  r.eig_max = ea.eigenvalues().maxCoeff();
  // alpha_F = 1/lmax(P0), beta_F = 1/lmin(P0); same for G with P1
  r.bound_lo = std::sqrt(e1.eigenvalues().minCoeff() / e0.eigenvalues().maxCoeff());
  r.bound_hi = std::sqrt(e1.eigenvalues().maxCoeff() / e0.eigenvalues().minCoeff());
  r.pass = r.eig_min >= r.bound_lo - tol && r.eig_max <= r.bound_hi + tol;
  return r;
}

// ---------------------------------------------------------------------------
// Exact Kalman recursion (reference for linear-Gaussian filters)
// ---------------------------------------------------------------------------

struct KalmanResult {
  std::vector<Vec> filtered_means;
  std::vector<Mat> filtered_covs;
};

inline KalmanResult kalman_filter(const Mat& a, const Mat& q, const Mat& h, const Mat& r, const Vec& m0,
                                  const Mat& p0, const Mat& observations) {
  KalmanResult out;
  Vec m = m0;
  Mat p = p0;
  for (int t = 0; t < observations.rows(); ++t) {
    // predict
    m = a * m;
    p = a * p * a.transpose() + q;
    // update
    const Mat s = h * p * h.transpose() + r;
    const Mat k = p * h.transpose() * s.inverse();
    m = m + k * (observations.row(t).transpose() - h * m);
    p = p - k * h * p;
    out.filtered_means.push_back(m);
    out.filtered_covs.push_back(p);
  }
  return out;
}

}  // namespace otf::oracle
