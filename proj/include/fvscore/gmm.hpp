#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fvscore/matrix.hpp"

namespace fvscore {

inline constexpr double kDefaultVarianceFloor = 0.001;
inline constexpr double kDefaultPosteriorThreshold = 1e-4;

// Diagonal-covariance Gaussian mixture. Weights are positive and sum to 1;
// every variance is at or above the floor.
struct GaussianMixture {
  std::vector<double> weights;  // K
  Matrix means;                 // K x N
  Matrix variances;             // K x N (diagonal of the covariance)
  double variance_floor = kDefaultVarianceFloor;

  std::size_t component_count() const { return weights.size(); }
  std::size_t dim() const { return means.cols(); }
};

// log of one component's density at x.
double component_log_density(const GaussianMixture& gmm, std::size_t k,
                             std::span<const double> x);

// log of the full mixture density at x (log-sum-exp over components).
double mixture_log_density(const GaussianMixture& gmm, std::span<const double> x);

// Component responsibilities for one point, computed in the log domain with
// a max shift. Sums to 1 within 1e-10.
std::vector<double> posteriors(const GaussianMixture& gmm, std::span<const double> x);

// Entries below threshold are set to exactly zero; the rest are left
// untouched (no renormalization).
std::vector<double> sparsify_posteriors(std::vector<double> row,
                                        double threshold = kDefaultPosteriorThreshold);

// Sum of mixture log densities over all rows of data.
double log_likelihood(const GaussianMixture& gmm, const Matrix& data);

struct EmConfig {
  std::size_t max_iters = 300;
  double tol = 1e-6;  // absolute log-likelihood improvement per point
  double variance_floor = kDefaultVarianceFloor;
  std::uint64_t seed = 0;
};

struct EmResult {
  GaussianMixture model;
  // Log likelihood under the parameters entering each iteration, plus a
  // final entry for the returned parameters. Nondecreasing within 1e-9
  // when the floor does not bind.
  std::vector<double> log_likelihood_trace;
  std::size_t iterations = 0;
  bool converged = false;
  // True when the last M-step clamped at least one variance; the Fisher
  // vector of the training data is exactly zero at the fixed point only
  // when this is false.
  bool floored_last_iteration = false;
};

// Greedy farthest-point seeding: the first mean is a random data point, each
// following mean is the point farthest from the chosen set. Variances start
// at the global per-dimension data variance (floored), weights uniform.
GaussianMixture init_gmm(const Matrix& data, std::size_t k_components, std::uint64_t seed,
                         double variance_floor = kDefaultVarianceFloor);

// Expectation-maximization with closed-form M-step and variance flooring.
// Components whose responsibility mass collapses are re-seeded at the
// lowest-likelihood data point. Deterministic for a fixed seed.
EmResult fit_em(const Matrix& data, std::size_t k_components, const EmConfig& config = {});

}  // namespace fvscore
