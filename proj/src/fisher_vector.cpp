#include "fvscore/fisher_vector.hpp"

#include <cmath>
#include <stdexcept>

namespace fvscore {

SufficientStats accumulate_stats(const Matrix& frames, const GaussianMixture& gmm,
                                 double posterior_threshold) {
  if (frames.cols() != gmm.dim()) {
    throw std::invalid_argument("sequence dimensionality does not match the mixture");
  }
  if (frames.rows() == 0) throw std::invalid_argument("accumulate_stats: empty sequence");

  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  SufficientStats stats;
  stats.s0.assign(k_count, 0.0);
  stats.s1 = Matrix(k_count, n);
  stats.s2 = Matrix(k_count, n);
  stats.frame_count = frames.rows();

  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const auto x = frames.row(t);
    const std::vector<double> gamma =
        sparsify_posteriors(posteriors(gmm, x), posterior_threshold);
    for (std::size_t k = 0; k < k_count; ++k) {
      const double g = gamma[k];
      if (g == 0.0) continue;
      stats.s0[k] += g;
      auto s1_row = stats.s1.row(k);
      auto s2_row = stats.s2.row(k);
      for (std::size_t j = 0; j < n; ++j) {
        s1_row[j] += g * x[j];
        s2_row[j] += g * x[j] * x[j];
      }
    }
  }
  return stats;
}

SufficientStats accumulate_stats(const ExpressionSequence& seq, const GaussianMixture& gmm,
                                 double posterior_threshold) {
  return accumulate_stats(seq.frames, gmm, posterior_threshold);
}

FisherVector fv_unnormalized(const SufficientStats& stats, const GaussianMixture& gmm) {
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  if (stats.s0.size() != k_count || stats.s1.cols() != n) {
    throw std::invalid_argument("statistics do not match the mixture");
  }

  FisherVector fv;
  fv.values.assign(fisher_vector_length(k_count, n), 0.0);
  fv.normalized = false;
  const double t_frames = static_cast<double>(stats.frame_count);

  for (std::size_t k = 0; k < k_count; ++k) {
    const double w = gmm.weights[k];
    const double sqrt_w = std::sqrt(w);
    const double s0 = stats.s0[k];
    fv.values[k] = (s0 - t_frames * w) / sqrt_w;

    const auto mu = gmm.means.row(k);
    const auto var = gmm.variances.row(k);
    double* mu_block = fv.values.data() + k_count + k * n;
    double* sigma_block = fv.values.data() + k_count + k_count * n + k * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double sigma = std::sqrt(var[j]);
      mu_block[j] = (stats.s1(k, j) - mu[j] * s0) / (sqrt_w * sigma);
      sigma_block[j] = (stats.s2(k, j) - 2.0 * mu[j] * stats.s1(k, j) +
                        (mu[j] * mu[j] - var[j]) * s0) /
                       (std::sqrt(2.0 * w) * var[j]);
    }
  }
  return fv;
}

std::vector<double> power_normalize(std::vector<double> v) {
  for (double& z : v) {
    z = z < 0.0 ? -std::sqrt(-z) : std::sqrt(z);
  }
  return v;
}

std::vector<double> l2_normalize(std::vector<double> v) {
  double sq = 0.0;
  for (double z : v) sq += z * z;
  if (sq == 0.0) return v;
  const double inv = 1.0 / std::sqrt(sq);
  for (double& z : v) z *= inv;
  return v;
}

FisherVector encode(const ExpressionSequence& seq, const GaussianMixture& gmm,
                    const EncodeConfig& config) {
  const SufficientStats stats = accumulate_stats(seq, gmm, config.posterior_threshold);
  FisherVector fv = fv_unnormalized(stats, gmm);
  fv.values = l2_normalize(power_normalize(std::move(fv.values)));
  fv.normalized = true;
  return fv;
}

}  // namespace fvscore
