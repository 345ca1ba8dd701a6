#include "fvscore/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "fvscore/random.hpp"

namespace fvscore {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void check_dim(const GaussianMixture& gmm, std::span<const double> x) {
  if (x.size() != gmm.dim()) {
    throw std::invalid_argument("point dimensionality does not match the mixture");
  }
}

// Per-point log of (weight * component density), written into lp; returns
// the log mixture density via a shifted log-sum-exp.
double weighted_log_densities(const GaussianMixture& gmm, std::span<const double> x,
                              std::span<double> lp) {
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  for (std::size_t k = 0; k < k_count; ++k) {
    double quad = 0.0;
    double log_det = 0.0;
    const auto mu = gmm.means.row(k);
    const auto var = gmm.variances.row(k);
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[j] - mu[j];
      quad += d * d / var[j];
      log_det += std::log(var[j]);
    }
    lp[k] = std::log(gmm.weights[k]) -
            0.5 * (static_cast<double>(n) * kLog2Pi + log_det + quad);
  }
  double max_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < k_count; ++k) max_lp = std::max(max_lp, lp[k]);
  double sum = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) sum += std::exp(lp[k] - max_lp);
  return max_lp + std::log(sum);
}

}  // namespace

double component_log_density(const GaussianMixture& gmm, std::size_t k,
                             std::span<const double> x) {
  check_dim(gmm, x);
  if (k >= gmm.component_count()) {
    throw std::invalid_argument("component index out of range");
  }
  const std::size_t n = gmm.dim();
  const auto mu = gmm.means.row(k);
  const auto var = gmm.variances.row(k);
  double quad = 0.0;
  double log_det = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = x[j] - mu[j];
    quad += d * d / var[j];
    log_det += std::log(var[j]);
  }
  return -0.5 * (static_cast<double>(n) * kLog2Pi + log_det + quad);
}

double mixture_log_density(const GaussianMixture& gmm, std::span<const double> x) {
  check_dim(gmm, x);
  std::vector<double> lp(gmm.component_count());
  return weighted_log_densities(gmm, x, lp);
}

std::vector<double> posteriors(const GaussianMixture& gmm, std::span<const double> x) {
  check_dim(gmm, x);
  const std::size_t k_count = gmm.component_count();
  std::vector<double> lp(k_count);
  weighted_log_densities(gmm, x, lp);
  double max_lp = -std::numeric_limits<double>::infinity();
  for (double v : lp) max_lp = std::max(max_lp, v);
  double sum = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) {
    lp[k] = std::exp(lp[k] - max_lp);
    sum += lp[k];
  }
  for (double& v : lp) v /= sum;
  return lp;
}

std::vector<double> sparsify_posteriors(std::vector<double> row, double threshold) {
  for (double& v : row) {
    if (v < threshold) v = 0.0;
  }
  return row;
}

double log_likelihood(const GaussianMixture& gmm, const Matrix& data) {
  if (data.rows() == 0) throw std::invalid_argument("log_likelihood: empty data");
  if (data.cols() != gmm.dim()) {
    throw std::invalid_argument("data dimensionality does not match the mixture");
  }
  std::vector<double> lp(gmm.component_count());
  double total = 0.0;
  for (std::size_t t = 0; t < data.rows(); ++t) {
    total += weighted_log_densities(gmm, data.row(t), lp);
  }
  return total;
}

GaussianMixture init_gmm(const Matrix& data, std::size_t k_components, std::uint64_t seed,
                         double variance_floor) {
  const std::size_t t_count = data.rows();
  const std::size_t n = data.cols();
  if (k_components == 0) throw std::invalid_argument("need at least one component");
  if (t_count < k_components) {
    throw std::invalid_argument("fewer data points than mixture components");
  }

  GaussianMixture gmm;
  gmm.variance_floor = variance_floor;
  gmm.weights.assign(k_components, 1.0 / static_cast<double>(k_components));
  gmm.means = Matrix(k_components, n);
  gmm.variances = Matrix(k_components, n);

  // Greedy farthest-point seeding: random first pick, then repeatedly the
  // unchosen point with the largest distance to the chosen set.
  Rng rng(seed);
  std::vector<char> chosen(t_count, 0);
  std::vector<double> dist2(t_count, std::numeric_limits<double>::infinity());
  std::size_t current = rng.index(t_count);
  for (std::size_t c = 0; c < k_components; ++c) {
    chosen[current] = 1;
    const auto mean_row = gmm.means.row(c);
    std::copy(data.row(current).begin(), data.row(current).end(), mean_row.begin());
    if (c + 1 == k_components) break;
    std::size_t best = t_count;
    double best_d2 = -1.0;
    for (std::size_t t = 0; t < t_count; ++t) {
      if (chosen[t]) continue;
      double d2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = data(t, j) - data(current, j);
        d2 += d * d;
      }
      dist2[t] = std::min(dist2[t], d2);
      if (dist2[t] > best_d2) {
        best_d2 = dist2[t];
        best = t;
      }
    }
    current = best;
  }

  // Global per-dimension variance (biased), shared by all components.
  std::vector<double> mean(n, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t j = 0; j < n; ++j) mean[j] += data(t, j);
  }
  for (double& m : mean) m /= static_cast<double>(t_count);
  std::vector<double> var(n, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = data(t, j) - mean[j];
      var[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    var[j] = std::max(var[j] / static_cast<double>(t_count), variance_floor);
  }
  for (std::size_t k = 0; k < k_components; ++k) {
    std::copy(var.begin(), var.end(), gmm.variances.row(k).begin());
  }
  return gmm;
}

EmResult fit_em(const Matrix& data, std::size_t k_components, const EmConfig& config) {
  const std::size_t t_count = data.rows();
  const std::size_t n = data.cols();
  if (k_components == 0) throw std::invalid_argument("need at least one component");
  if (t_count < k_components) {
    throw std::invalid_argument("fewer data points than mixture components");
  }

  EmResult result;
  result.model = init_gmm(data, k_components, config.seed, config.variance_floor);
  GaussianMixture& gmm = result.model;

  const double degenerate_mass = 1e-8 * static_cast<double>(t_count);
  std::vector<double> lp(k_components);
  std::vector<double> gamma(k_components);
  std::vector<double> s0(k_components);
  Matrix s1(k_components, n);
  Matrix s2(k_components, n);

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
    // E-step: responsibilities and statistics in frame order.
    std::fill(s0.begin(), s0.end(), 0.0);
    std::fill(s1.storage().begin(), s1.storage().end(), 0.0);
    std::fill(s2.storage().begin(), s2.storage().end(), 0.0);
    double ll = 0.0;
    double worst_point_ll = std::numeric_limits<double>::infinity();
    std::size_t worst_point = 0;
    for (std::size_t t = 0; t < t_count; ++t) {
      const auto x = data.row(t);
      const double point_ll = weighted_log_densities(gmm, x, lp);
      ll += point_ll;
      if (point_ll < worst_point_ll) {
        worst_point_ll = point_ll;
        worst_point = t;
      }
      double max_lp = -std::numeric_limits<double>::infinity();
      for (double v : lp) max_lp = std::max(max_lp, v);
      double sum = 0.0;
      for (std::size_t k = 0; k < k_components; ++k) {
        gamma[k] = std::exp(lp[k] - max_lp);
        sum += gamma[k];
      }
      for (std::size_t k = 0; k < k_components; ++k) {
        const double g = gamma[k] / sum;
        s0[k] += g;
        auto s1_row = s1.row(k);
        auto s2_row = s2.row(k);
        for (std::size_t j = 0; j < n; ++j) {
          s1_row[j] += g * x[j];
          s2_row[j] += g * x[j] * x[j];
        }
      }
    }
    result.log_likelihood_trace.push_back(ll);
    result.iterations = iter + 1;

    // Global variance for re-seeded components.
    auto global_variance = [&](std::size_t j) {
      double mean = 0.0;
      for (std::size_t t = 0; t < t_count; ++t) mean += data(t, j);
      mean /= static_cast<double>(t_count);
      double v = 0.0;
      for (std::size_t t = 0; t < t_count; ++t) {
        const double d = data(t, j) - mean;
        v += d * d;
      }
      return v / static_cast<double>(t_count);
    };

    // M-step.
    result.floored_last_iteration = false;
    bool any_degenerate = false;
    for (std::size_t k = 0; k < k_components; ++k) {
      if (s0[k] < degenerate_mass) {
        // Re-seed a collapsed component at the worst-explained point.
        any_degenerate = true;
        gmm.weights[k] = 1.0 / static_cast<double>(k_components);
        for (std::size_t j = 0; j < n; ++j) {
          gmm.means(k, j) = data(worst_point, j);
          gmm.variances(k, j) = std::max(global_variance(j), config.variance_floor);
        }
        continue;
      }
      gmm.weights[k] = s0[k] / static_cast<double>(t_count);
      for (std::size_t j = 0; j < n; ++j) {
        const double mu = s1(k, j) / s0[k];
        gmm.means(k, j) = mu;
        double v = s2(k, j) / s0[k] - mu * mu;
        if (v < config.variance_floor) {
          v = config.variance_floor;
          result.floored_last_iteration = true;
        }
        gmm.variances(k, j) = v;
      }
    }
    if (any_degenerate) {
      double w_sum = 0.0;
      for (double w : gmm.weights) w_sum += w;
      for (double& w : gmm.weights) w /= w_sum;
    }

    if (iter > 0 && ll - prev_ll < config.tol * static_cast<double>(t_count)) {
      result.converged = true;
      prev_ll = ll;
      break;
    }
    prev_ll = ll;
  }

  // Log likelihood of the parameters actually returned.
  result.log_likelihood_trace.push_back(log_likelihood(gmm, data));
  return result;
}

}  // namespace fvscore
