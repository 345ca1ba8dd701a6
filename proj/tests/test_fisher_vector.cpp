#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fvscore/fisher_vector.hpp"
#include "fvscore/gmm.hpp"
#include "fvscore/types.hpp"
#include "test_util.hpp"

using namespace fvscore;

namespace {

// Naive two-loop reference: full posterior per frame, then separate passes
// per statistic.
SufficientStats naive_stats(const Matrix& frames, const GaussianMixture& gmm,
                            double threshold) {
  SufficientStats stats;
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  stats.s0.assign(k_count, 0.0);
  stats.s1 = Matrix(k_count, n);
  stats.s2 = Matrix(k_count, n);
  stats.frame_count = frames.rows();
  std::vector<std::vector<double>> gammas;
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    gammas.push_back(sparsify_posteriors(posteriors(gmm, frames.row(t)), threshold));
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t t = 0; t < frames.rows(); ++t) stats.s0[k] += gammas[t][k];
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < frames.rows(); ++t) {
        stats.s1(k, j) += gammas[t][k] * frames(t, j);
        stats.s2(k, j) += gammas[t][k] * frames(t, j) * frames(t, j);
      }
    }
  }
  return stats;
}

ExpressionSequence wrap(const Matrix& frames) {
  ExpressionSequence seq;
  seq.video_id = "w";
  seq.frames = frames;
  for (std::size_t j = 0; j < frames.cols(); ++j) {
    seq.expression_names.push_back("e" + std::to_string(j));
  }
  return seq;
}

}  // namespace

TEST_CASE("accumulate_stats on a single frame with one component") {
  GaussianMixture gmm;
  gmm.weights = {1.0};
  gmm.means = Matrix(1, 2, 0.0);
  gmm.variances = Matrix(1, 2, 1.0);
  Matrix frames(1, 2);
  frames(0, 0) = 0.3;
  frames(0, 1) = -0.8;
  const SufficientStats stats = accumulate_stats(frames, gmm, 0.0);
  CHECK(stats.s0[0] == doctest::Approx(1.0));
  CHECK(stats.s1(0, 0) == doctest::Approx(0.3));
  CHECK(stats.s1(0, 1) == doctest::Approx(-0.8));
  CHECK(stats.s2(0, 0) == doctest::Approx(0.09));
  CHECK(stats.s2(0, 1) == doctest::Approx(0.64));
  CHECK(stats.frame_count == 1);
}

TEST_CASE("accumulate_stats without threshold conserves total mass") {
  std::mt19937_64 rng(404);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 4, 3);
  const Matrix frames = fvtest::random_matrix(rng, 77, 3, -1.5, 1.5);
  const SufficientStats stats = accumulate_stats(frames, gmm, 0.0);
  double total = 0.0;
  for (double s : stats.s0) total += s;
  CHECK(std::fabs(total - 77.0) < 1e-9);
}

TEST_CASE("accumulate_stats matches the naive two-loop reference") {
  std::mt19937_64 rng(2525);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 2, 4);
  const Matrix frames = fvtest::random_matrix(rng, 50, 4, -1.0, 1.0);
  for (double threshold : {0.0, 1e-4, 0.05}) {
    const SufficientStats got = accumulate_stats(frames, gmm, threshold);
    const SufficientStats want = naive_stats(frames, gmm, threshold);
    CHECK(fvtest::max_abs_diff(got.s0, want.s0) < 1e-12);
    CHECK(fvtest::max_abs_diff(got.s1.storage(), want.s1.storage()) < 1e-12);
    CHECK(fvtest::max_abs_diff(got.s2.storage(), want.s2.storage()) < 1e-12);
  }
}

TEST_CASE("accumulate_stats rejects dimension mismatch") {
  std::mt19937_64 rng(1);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 2, 3);
  const Matrix frames = fvtest::random_matrix(rng, 5, 2);
  CHECK_THROWS_AS(accumulate_stats(frames, gmm, 0.0), std::invalid_argument);
}

TEST_CASE("fv_unnormalized hand-computed single-component case") {
  // One standard-normal component, one frame at x = 1:
  // weight block (1-1)/1 = 0, mean block (1-0)/1 = 1,
  // deviation block (1 - 0 + (0-1)*1)/sqrt(2) = 0.
  GaussianMixture gmm;
  gmm.weights = {1.0};
  gmm.means = Matrix(1, 1, 0.0);
  gmm.variances = Matrix(1, 1, 1.0);
  Matrix frames(1, 1, 1.0);
  const FisherVector fv = fv_unnormalized(accumulate_stats(frames, gmm, 0.0), gmm);
  REQUIRE(fv.values.size() == 3);
  CHECK(fv.values[0] == doctest::Approx(0.0));
  CHECK(fv.values[1] == doctest::Approx(1.0));
  CHECK(fv.values[2] == doctest::Approx(0.0));
  CHECK_FALSE(fv.normalized);
}

TEST_CASE("fv_unnormalized vanishes at the fixed-point statistics") {
  std::mt19937_64 rng(808);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 3, 2);
  SufficientStats stats;
  stats.frame_count = 120;
  stats.s0.resize(3);
  stats.s1 = Matrix(3, 2);
  stats.s2 = Matrix(3, 2);
  for (std::size_t k = 0; k < 3; ++k) {
    stats.s0[k] = 120.0 * gmm.weights[k];
    for (std::size_t j = 0; j < 2; ++j) {
      stats.s1(k, j) = gmm.means(k, j) * stats.s0[k];
      stats.s2(k, j) =
          (gmm.means(k, j) * gmm.means(k, j) + gmm.variances(k, j)) * stats.s0[k];
    }
  }
  const FisherVector fv = fv_unnormalized(stats, gmm);
  for (double v : fv.values) CHECK(std::fabs(v) < 1e-12);
}

TEST_CASE("fisher vector length is K(2N+1)") {
  std::mt19937_64 rng(11);
  for (const auto& [k, n] : std::vector<std::pair<std::size_t, std::size_t>>{
           {1, 1}, {3, 5}, {16, 11}, {12, 8}}) {
    const GaussianMixture gmm = fvtest::random_gmm(rng, k, n);
    const Matrix frames = fvtest::random_matrix(rng, 10, n, -1.0, 1.0);
    const FisherVector fv = fv_unnormalized(accumulate_stats(frames, gmm, 0.0), gmm);
    CHECK(fv.values.size() == k * (2 * n + 1));
  }
}

TEST_CASE("power_normalize spot values") {
  const std::vector<double> out = power_normalize({4.0, -9.0, 0.0});
  CHECK(out[0] == doctest::Approx(2.0));
  CHECK(out[1] == doctest::Approx(-3.0));
  CHECK(out[2] == doctest::Approx(0.0));
}

TEST_CASE("l2_normalize spot values and guards") {
  const std::vector<double> out = l2_normalize({3.0, 4.0});
  CHECK(out[0] == doctest::Approx(0.6));
  CHECK(out[1] == doctest::Approx(0.8));

  const std::vector<double> unit = l2_normalize({1.0, 0.0});
  CHECK(std::fabs(unit[0] - 1.0) < 1e-12);

  const std::vector<double> zero = l2_normalize({0.0, 0.0});
  CHECK(zero == std::vector<double>{0.0, 0.0});
}

TEST_CASE("encode output length matches the pinned sizes") {
  std::mt19937_64 rng(1977);
  {
    const GaussianMixture gmm = fvtest::random_gmm(rng, 16, 11);
    const ExpressionSequence seq = wrap(fvtest::random_matrix(rng, 40, 11, -0.5, 0.5));
    const FisherVector fv = encode(seq, gmm);
    CHECK(fv.values.size() == 368);
    CHECK(fv.normalized);
  }
  {
    const GaussianMixture gmm = fvtest::random_gmm(rng, 12, 8);
    const ExpressionSequence seq = wrap(fvtest::random_matrix(rng, 40, 8, -0.5, 0.5));
    CHECK(encode(seq, gmm).values.size() == 204);
  }
}

TEST_CASE("encode length does not depend on the frame count") {
  std::mt19937_64 rng(31);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 4, 3);
  const FisherVector short_fv = encode(wrap(fvtest::random_matrix(rng, 100, 3)), gmm);
  const FisherVector long_fv = encode(wrap(fvtest::random_matrix(rng, 10000, 3)), gmm);
  CHECK(short_fv.values.size() == long_fv.values.size());
}

TEST_CASE("encode yields a unit vector") {
  std::mt19937_64 rng(6);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 3, 4);
  const FisherVector fv = encode(wrap(fvtest::random_matrix(rng, 64, 4, -1.0, 1.0)), gmm);
  double sq = 0.0;
  for (double v : fv.values) sq += v * v;
  CHECK(std::fabs(std::sqrt(sq) - 1.0) < 1e-10);
}

TEST_CASE("statistics are additive over concatenated sequences") {
  std::mt19937_64 rng(12);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 3, 3);
  const Matrix a = fvtest::random_matrix(rng, 30, 3, -1.0, 1.0);
  const Matrix b = fvtest::random_matrix(rng, 45, 3, -1.0, 1.0);
  Matrix both(75, 3);
  std::copy(a.storage().begin(), a.storage().end(), both.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), both.storage().begin() + 90);

  const SufficientStats sa = accumulate_stats(a, gmm, 0.0);
  const SufficientStats sb = accumulate_stats(b, gmm, 0.0);
  const SufficientStats sum = accumulate_stats(both, gmm, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(std::fabs(sa.s0[k] + sb.s0[k] - sum.s0[k]) < 1e-12);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::fabs(sa.s1(k, j) + sb.s1(k, j) - sum.s1(k, j)) < 1e-12);
      CHECK(std::fabs(sa.s2(k, j) + sb.s2(k, j) - sum.s2(k, j)) < 1e-12);
    }
  }
}

TEST_CASE("encoding is invariant to frame order") {
  std::mt19937_64 rng(123);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 3, 2);
  Matrix frames = fvtest::random_matrix(rng, 40, 2, -1.0, 1.0);
  Matrix shuffled = frames;
  std::vector<std::size_t> order(frames.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy(frames.row(order[i]).begin(), frames.row(order[i]).end(),
              shuffled.row(i).begin());
  }
  const FisherVector a = encode(wrap(frames), gmm);
  const FisherVector b = encode(wrap(shuffled), gmm);
  CHECK(fvtest::max_abs_diff(a.values, b.values) < 1e-12);
}

TEST_CASE("power + L2 composition is not idempotent") {
  // Running the normalization tail twice must not be assumed to be a no-op.
  std::vector<double> v{0.9, 0.1, -0.3};
  const std::vector<double> once = l2_normalize(power_normalize(v));
  const std::vector<double> twice = l2_normalize(power_normalize(once));
  CHECK(fvtest::max_abs_diff(once, twice) > 1e-3);
}

TEST_CASE("fisher vector of pooled training data vanishes at the EM optimum") {
  std::mt19937_64 rng(2718);
  std::normal_distribution<double> noise(0.0, 1.0);
  Matrix data(600, 2);
  for (std::size_t t = 0; t < data.rows(); ++t) {
    const double shift = t % 2 == 0 ? -4.0 : 4.0;
    data(t, 0) = shift + noise(rng);
    data(t, 1) = 0.5 * noise(rng);
  }
  EmConfig config;
  config.seed = 500;
  config.tol = 0.0;  // run to the improvement noise floor
  config.max_iters = 3000;
  const EmResult result = fit_em(data, 2, config);
  REQUIRE_FALSE(result.floored_last_iteration);
  const FisherVector fv =
      fv_unnormalized(accumulate_stats(data, result.model, 0.0), result.model);
  double worst = 0.0;
  for (double v : fv.values) worst = std::max(worst, std::fabs(v));
  CHECK(worst <= 1e-6);
}
