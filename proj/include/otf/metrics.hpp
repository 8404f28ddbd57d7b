#pragma once

#include "otf/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace otf::metrics {

struct DivergenceSpec {
  enum class Kind { W1, W2, Mmd, Mse };
  Kind kind = Kind::W2;
  double bandwidth = -1.0;  // MMD only; <= 0 means median-distance heuristic
  int size_cap = 512;       // exact-assignment solver refusal threshold
};

/// Exact 1D p-Wasserstein distance between empirical measures. Equal sample
/// counts reduce to sorted pairing; unequal counts integrate the piecewise-
/// constant quantile functions over the merged probability grid, which is
/// still exact for empirical measures.
inline double wasserstein_1d(Vec a, Vec b, int p) {
  detail::require(a.size() > 0 && b.size() > 0, "wasserstein_1d: empty input");
  detail::require(p == 1 || p == 2, "wasserstein_1d: p must be 1 or 2");
  std::sort(a.data(), a.data() + a.size());
  std::sort(b.data(), b.data() + b.size());
  const auto na = static_cast<int>(a.size());
  const auto nb = static_cast<int>(b.size());
  double acc = 0.0;
  if (na == nb) {
    for (int i = 0; i < na; ++i) acc += std::pow(std::abs(a[i] - b[i]), p);
    acc /= na;
  } else {
    // Integrate |Qa(t) - Qb(t)|^p dt; breakpoints at i/na and j/nb.
    int i = 0, j = 0;
    double t = 0.0;
    while (i < na && j < nb) {
      const double ta = static_cast<double>(i + 1) / na;
      const double tb = static_cast<double>(j + 1) / nb;
      const double tn = std::min(ta, tb);
      acc += (tn - t) * std::pow(std::abs(a[i] - b[j]), p);
      t = tn;
      if (ta <= tn) ++i;
      if (tb <= tn) ++j;
    }
  }
  return std::pow(acc, 1.0 / p);
}

namespace detail_assign {

/// Jonker-Volgenant style shortest augmenting path assignment; returns the
/// minimal total cost of a perfect matching on a square cost matrix.
inline double solve(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += cost(p[static_cast<std::size_t>(j)] - 1, j - 1);
  return total;
}

}  // namespace detail_assign

/// Exact p-Wasserstein distance between equal-size point clouds via optimal
/// assignment on the |a_i - b_j|^p cost matrix.
inline double wasserstein_exact(const Mat& a, const Mat& b, int p, int size_cap = 512) {
  detail::require(a.rows() > 0 && b.rows() > 0, "wasserstein_exact: empty input");
  detail::require(a.rows() == b.rows(), "wasserstein_exact: sample counts must match");
  detail::require(a.cols() == b.cols(), "wasserstein_exact: dimension mismatch");
  detail::require(p == 1 || p == 2, "wasserstein_exact: p must be 1 or 2");
  const int n = static_cast<int>(a.rows());
  if (n > size_cap) {
    std::ostringstream os;
    os << "wasserstein_exact: N=" << n << " exceeds the size cap " << size_cap
       << "; subsample the clouds or raise the cap";
    throw ContractError(os.str());
  }
  Mat cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double d = (a.row(i) - b.row(j)).norm();
      cost(i, j) = p == 1 ? d : d * d;
    }
  const double total = detail_assign::solve(cost);
  return std::pow(total / n, 1.0 / p);
}

inline double median_pairwise_distance(const Mat& a, const Mat& b) {
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(a.rows()) * static_cast<std::size_t>(b.rows()));
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j) d.push_back((a.row(i) - b.row(j)).norm());
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double med = d[d.size() / 2];
  return med > 0.0 ? med : 1.0;
}

/// Gaussian-kernel MMD (biased V-statistic), K(x, x') = exp(-|x-x'|^2 / (2 bw^2)).
inline double mmd(const Mat& a, const Mat& b, double bandwidth) {
  detail::require(bandwidth > 0.0, "mmd: bandwidth must be > 0");
  detail::require(a.cols() == b.cols(), "mmd: dimension mismatch");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel_mean = [inv](const Mat& x, const Mat& y) {
    double acc = 0.0;
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < y.rows(); ++j) acc += std::exp(-(x.row(i) - y.row(j)).squaredNorm() * inv);
    return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
  };
  const double m2 = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b);
  return std::sqrt(std::max(0.0, m2));
}

/// Per-step squared estimation error |mean_t - truth_t|^2 / n.
inline Vec mse_series(const Mat& estimate_means, const Mat& truth) {
  detail::require(estimate_means.rows() == truth.rows(), "mse: length mismatch");
  detail::require(estimate_means.cols() == truth.cols(), "mse: dimension mismatch");
  const auto n = static_cast<double>(truth.cols());
  Vec out(truth.rows());
  for (int t = 0; t < truth.rows(); ++t) out[t] = (estimate_means.row(t) - truth.row(t)).squaredNorm() / n;
  return out;
}

inline double divergence(const Mat& a, const Mat& b, const DivergenceSpec& spec) {
  switch (spec.kind) {
    case DivergenceSpec::Kind::W1:
      if (a.cols() == 1) return wasserstein_1d(a.col(0), b.col(0), 1);
      return wasserstein_exact(a, b, 1, spec.size_cap);
    case DivergenceSpec::Kind::W2:
      if (a.cols() == 1) return wasserstein_1d(a.col(0), b.col(0), 2);
      return wasserstein_exact(a, b, 2, spec.size_cap);
    case DivergenceSpec::Kind::Mmd: {
      const double bw = spec.bandwidth > 0.0 ? spec.bandwidth : median_pairwise_distance(a, b);
      return mmd(a, b, bw);
    }
    case DivergenceSpec::Kind::Mse:
      throw ContractError("divergence: MSE compares means to a truth trajectory, not sample sets");
  }
  throw ContractError("divergence: unknown kind");
}

struct SeriesWithError {
  Vec mean;
  Vec stderr_;
};

/// Per-step divergence between each run's posterior samples and a reference
/// sample set, averaged over runs, with standard errors across runs.
inline SeriesWithError mean_filtering_error(const std::vector<std::vector<Mat>>& runs,
                                            const std::vector<Mat>& reference, const DivergenceSpec& spec) {
  detail::require(!runs.empty(), "mean_filtering_error: no runs");
  const std::size_t steps = reference.size();
  for (const auto& r : runs) detail::require(r.size() == steps, "mean_filtering_error: step count mismatch");
  SeriesWithError out;
  out.mean = Vec::Zero(static_cast<Eigen::Index>(steps));
  out.stderr_ = Vec::Zero(static_cast<Eigen::Index>(steps));
  const auto n_runs = static_cast<double>(runs.size());
  for (std::size_t t = 0; t < steps; ++t) {
    double acc = 0.0, acc2 = 0.0;
    for (const auto& r : runs) {
      const double d = divergence(r[t], reference[t], spec);
      acc += d;
      acc2 += d * d;
    }
    const double m = acc / n_runs;
    out.mean[static_cast<Eigen::Index>(t)] = m;
    out.stderr_[static_cast<Eigen::Index>(t)] =
        runs.size() > 1 ? std::sqrt(std::max(0.0, (acc2 / n_runs - m * m) / (n_runs - 1.0))) : 0.0;
  }
  return out;
}

}  // namespace otf::metrics
