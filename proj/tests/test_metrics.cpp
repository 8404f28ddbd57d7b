#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "otf/metrics.hpp"
#include "otf/rng.hpp"

#include <algorithm>
#include <numeric>

using namespace otf;
using namespace otf::metrics;

namespace {

Mat random_cloud(const RngStream& rng, int n, int d) {
  Mat out(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = rng.normal(static_cast<std::uint64_t>(i * d + j));
  return out;
}

// Brute-force optimal assignment by permutation enumeration, for small n.
double brute_force_w(const Mat& a, const Mat& b, int p) {
  const int n = static_cast<int>(a.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::pow((a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).norm(), p);
    best = std::min(best, acc);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::pow(best / n, 1.0 / p);
}

}  // namespace

TEST_CASE("wasserstein_1d basics") {
  Vec a(3), b(3);
  a << 0.5, -1.0, 2.0;
  b = a;
  CHECK(wasserstein_1d(a, b, 2) == doctest::Approx(0.0));

  Vec a1(1), b1(1);
  a1 << 0.0;
  b1 << 2.0;
  CHECK(wasserstein_1d(a1, b1, 2) == doctest::Approx(2.0));

  Vec a2(2), b2(2);
  a2 << 0, 1;
  b2 << 1, 2;
  CHECK(wasserstein_1d(a2, b2, 1) == doctest::Approx(1.0));
}

TEST_CASE("wasserstein_1d handles unequal sample counts exactly") {
  Vec a(1), b(2);
  a << 0.0;
  b << 0.0, 1.0;
  CHECK(wasserstein_1d(a, b, 1) == doctest::Approx(0.5));
  // Duplicating samples must not change the distance.
  Vec a4(4), b2(2);
  a4 << 0, 0, 1, 1;
  b2 << 0, 1;
  CHECK(wasserstein_1d(a4, b2, 2) == doctest::Approx(0.0));
}

TEST_CASE("wasserstein_1d rejects empty input") {
  CHECK_THROWS_AS(wasserstein_1d(Vec(), Vec::Ones(2), 1), ContractError);
}

TEST_CASE("wasserstein_exact basics") {
  Mat a(1, 2), b(1, 2);
  a << 0, 0;
  b << 3, 4;
  CHECK(wasserstein_exact(a, b, 2) == doctest::Approx(5.0));

  const Mat cloud = random_cloud(RngStream(2), 16, 3);
  Mat shuffled = cloud;
  const auto perm = RngStream(3).permutation(16);
  for (int i = 0; i < 16; ++i) shuffled.row(i) = cloud.row(perm[static_cast<std::size_t>(i)]);
  CHECK(wasserstein_exact(cloud, shuffled, 2) == doctest::Approx(0.0));
}

TEST_CASE("wasserstein_exact refuses N beyond the cap") {
  const Mat a = Mat::Zero(9, 1), b = Mat::Zero(9, 1);
  CHECK_THROWS_AS(wasserstein_exact(a, b, 2, 8), ContractError);
}

TEST_CASE("wasserstein_exact matches brute force on small clouds") {
  for (int trial = 0; trial < 10; ++trial) {
    const Mat a = random_cloud(RngStream(100 + trial), 6, 2);
    const Mat b = random_cloud(RngStream(200 + trial), 6, 2);
    CHECK(wasserstein_exact(a, b, 2) == doctest::Approx(brute_force_w(a, b, 2)).epsilon(1e-10));
    CHECK(wasserstein_exact(a, b, 1) == doctest::Approx(brute_force_w(a, b, 1)).epsilon(1e-10));
  }
}

TEST_CASE("wasserstein_exact equals wasserstein_1d on 100 random 1D instances") {
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(RngStream(trial).below(0, 30));
    const Mat a = random_cloud(RngStream(300 + trial), n, 1);
    const Mat b = random_cloud(RngStream(400 + trial), n, 1);
    const double exact = wasserstein_exact(a, b, 2);
    const double sorted = wasserstein_1d(a.col(0), b.col(0), 2);
    CHECK(std::abs(exact - sorted) < 1e-10);
  }
}

TEST_CASE("W2 satisfies symmetry and the triangle inequality on random triples") {
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(RngStream(trial).below(1, 31));
    const Mat a = random_cloud(RngStream(500 + trial), n, 2);
    const Mat b = random_cloud(RngStream(600 + trial), n, 2);
    const Mat c = random_cloud(RngStream(700 + trial), n, 2);
    const double ab = wasserstein_exact(a, b, 2);
    const double ba = wasserstein_exact(b, a, 2);
    const double ac = wasserstein_exact(a, c, 2);
    const double cb = wasserstein_exact(c, b, 2);
    CHECK(std::abs(ab - ba) < 1e-10);
    CHECK(ab <= ac + cb + 1e-9);
  }
  const Mat a = random_cloud(RngStream(1), 8, 2);
  CHECK(wasserstein_exact(a, a, 2) == doctest::Approx(0.0));
}

TEST_CASE("mmd basics and singleton closed form") {
  Mat a(1, 1), b(1, 1);
  a << 0;
  b << 0;
  CHECK(mmd(a, b, 1.0) == doctest::Approx(0.0));

  b << 1;
  // singleton clouds: MMD^2 = 2 - 2 exp(-1/2)
  CHECK(mmd(a, b, 1.0) == doctest::Approx(std::sqrt(2.0 - 2.0 * std::exp(-0.5))));

  const Mat cloud = random_cloud(RngStream(4), 12, 2);
  CHECK(mmd(cloud, cloud, 0.7) == doctest::Approx(0.0));
}

TEST_CASE("mmd is nonnegative on random inputs") {
  for (int trial = 0; trial < 50; ++trial) {
    const Mat a = random_cloud(RngStream(800 + trial), 5, 2);
    const Mat b = random_cloud(RngStream(900 + trial), 7, 2);
    CHECK(mmd(a, b, 0.5 + 0.1 * trial) >= 0.0);
  }
}

TEST_CASE("mmd rejects nonpositive bandwidth") {
  CHECK_THROWS_AS(mmd(Mat::Zero(1, 1), Mat::Zero(1, 1), 0.0), ContractError);
}

TEST_CASE("mse series") {
  Mat truth(2, 1), est(2, 1);
  truth << 0, 0;
  est << 1, 3;
  const Vec s = mse_series(est, truth);
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == doctest::Approx(9.0));
  CHECK(s.mean() == doctest::Approx(5.0));

  CHECK(mse_series(truth, truth).norm() == 0.0);

  Mat est2 = truth;
  est2.array() += 2.0;
  CHECK((mse_series(est2, truth).array() == 4.0).all());

  CHECK_THROWS_AS(mse_series(Mat::Zero(3, 1), Mat::Zero(2, 1)), ContractError);
}

TEST_CASE("mean_filtering_error of a run against itself is zero") {
  std::vector<Mat> steps;
  for (int t = 0; t < 4; ++t) steps.push_back(random_cloud(RngStream(t), 8, 2));
  const SeriesWithError s = mean_filtering_error({steps}, steps, DivergenceSpec{});
  CHECK(s.mean.norm() == 0.0);
}

TEST_CASE("mean_filtering_error with one run equals per-step distances") {
  std::vector<Mat> run, ref;
  DivergenceSpec spec;
  for (int t = 0; t < 3; ++t) {
    run.push_back(random_cloud(RngStream(10 + t), 6, 2));
    ref.push_back(random_cloud(RngStream(20 + t), 6, 2));
  }
  const SeriesWithError s = mean_filtering_error({run}, ref, spec);
  for (int t = 0; t < 3; ++t)
    CHECK(s.mean[t] == doctest::Approx(wasserstein_exact(run[static_cast<std::size_t>(t)], ref[static_cast<std::size_t>(t)], 2)));
}

TEST_CASE("mean_filtering_error rejects mismatched step counts") {
  std::vector<Mat> run(3, Mat::Zero(4, 1)), ref(2, Mat::Zero(4, 1));
  CHECK_THROWS_AS(mean_filtering_error({run}, ref, DivergenceSpec{}), ContractError);
}
