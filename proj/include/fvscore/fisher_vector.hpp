#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fvscore/gmm.hpp"
#include "fvscore/matrix.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

// Posterior-weighted sums over the frames of one sequence: counts (order 0),
// first moments and second moments per component.
struct SufficientStats {
  std::vector<double> s0;  // K
  Matrix s1;               // K x N
  Matrix s2;               // K x N
  std::size_t frame_count = 0;
};

// Fixed-length video descriptor of length K(2N+1), stacked as
// [weight blocks | mean blocks | deviation blocks].
struct FisherVector {
  std::vector<double> values;
  bool normalized = false;
};

inline std::size_t fisher_vector_length(std::size_t k_components, std::size_t dim) {
  return k_components * (2 * dim + 1);
}

// Accumulates statistics over frames in row order; posteriors are sparsified
// at the given threshold before accumulation.
SufficientStats accumulate_stats(const Matrix& frames, const GaussianMixture& gmm,
                                 double posterior_threshold = kDefaultPosteriorThreshold);
SufficientStats accumulate_stats(const ExpressionSequence& seq, const GaussianMixture& gmm,
                                 double posterior_threshold = kDefaultPosteriorThreshold);

// Gradient blocks of the sequence log likelihood with respect to the mixture
// parameters, computed from the statistics. No normalization applied.
FisherVector fv_unnormalized(const SufficientStats& stats, const GaussianMixture& gmm);

// Elementwise signed square root.
std::vector<double> power_normalize(std::vector<double> v);

// v / ||v||; the zero vector is returned unchanged.
std::vector<double> l2_normalize(std::vector<double> v);

struct EncodeConfig {
  double posterior_threshold = kDefaultPosteriorThreshold;
};

// Full encoding: statistics -> gradient blocks -> power norm -> L2 norm.
// Expects a normalized sequence (see normalize_sequence). Output length is
// K(2N+1) regardless of frame count.
FisherVector encode(const ExpressionSequence& seq, const GaussianMixture& gmm,
                    const EncodeConfig& config = {});

}  // namespace fvscore
