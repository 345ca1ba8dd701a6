#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fvscore/fisher_vector.hpp"
#include "fvscore/gmm.hpp"
#include "fvscore/matrix.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

enum class Activation { kRelu, kIdentity };

struct DenseLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Matrix weights;              // out x in
  std::vector<double> biases;  // out
  Activation activation = Activation::kRelu;
};

// Fan-based uniform init in [-sqrt(6/(in+out)), +sqrt(6/(in+out))], zero
// biases, deterministic for a fixed seed.
DenseLayer make_dense_layer(std::size_t in_dim, std::size_t out_dim, Activation activation,
                            std::uint64_t seed);

// Mean binary cross-entropy over the batch; predictions are clamped to
// [1e-12, 1 - 1e-12]. Rejects empty batches.
double bce_cost(std::span<const double> targets, std::span<const double> predictions);

// Mean over videos of the mean squared per-symptom error (V x W inputs).
double mse_cost(const Matrix& predictions, const Matrix& targets);

std::vector<double> forward(const DenseLayer& layer, std::span<const double> x);

// velocity <- m * velocity - lr * grads;  params <- params + velocity
void sgd_momentum_step(std::span<double> params, std::span<const double> grads,
                       std::span<double> velocity, double learning_rate, double momentum);

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  bool cains_scaling = false;
};

// The jointly refinable mixture + first regression head. The mixture is
// stored reparameterized so that gradient steps cannot leave the weight
// simplex or make a variance negative: weights as unconstrained logits,
// variances as logs (floored on materialization).
struct RefinableStack {
  std::vector<double> weight_logits;  // K
  Matrix means;                       // K x N
  Matrix log_variances;               // K x N
  double variance_floor = kDefaultVarianceFloor;
  DenseLayer fc1;
  SymptomScaleSpec scale;

  std::size_t component_count() const { return weight_logits.size(); }
  std::size_t dim() const { return means.cols(); }

  // Constrained mixture: softmax of the logits, exp of the log variances
  // clamped to the floor.
  GaussianMixture mixture() const;

  static RefinableStack from_mixture(const GaussianMixture& gmm, DenseLayer fc1,
                                     SymptomScaleSpec scale);
};

// FC1 raw outputs for one sequence of normalized frames:
// posteriors -> statistics -> gradient blocks -> power/L2 norm -> dense layer.
std::vector<double> stack_forward(const RefinableStack& stack, const Matrix& frames,
                                  double posterior_threshold = kDefaultPosteriorThreshold);

// Full-batch discriminative cost of the stack over a dataset.
double stack_cost(const RefinableStack& stack, const std::vector<Matrix>& sequences,
                  const Matrix& targets,
                  double posterior_threshold = kDefaultPosteriorThreshold);

// Analytic full-batch gradients of stack_cost for every parameter group.
struct StackGradients {
  std::vector<double> weight_logits;
  Matrix means;
  Matrix log_variances;
  Matrix fc1_weights;
  std::vector<double> fc1_biases;
};

StackGradients stack_gradients(const RefinableStack& stack,
                               const std::vector<Matrix>& sequences, const Matrix& targets,
                               double posterior_threshold = kDefaultPosteriorThreshold);

struct RefineResult {
  RefinableStack stack;
  // Full-batch cost at the start of each epoch, plus one final entry for
  // the returned parameters (length epochs + 1).
  std::vector<double> loss_trace;
};

// Joint SGD-with-momentum refinement of mixture and FC1 parameters against
// the mean-square-error cost. Aborts with a diagnostic naming the first
// non-finite tensor if the loss leaves the reals.
RefineResult refine_end_to_end(RefinableStack stack, const std::vector<Matrix>& sequences,
                               const Matrix& targets, const TrainConfig& config,
                               double posterior_threshold = kDefaultPosteriorThreshold);

// Single-output head trained on (per-symptom predictions -> total score)
// with the earlier layers frozen.
DenseLayer train_fc2(const Matrix& symptom_predictions, std::span<const double> totals,
                     const TrainConfig& config);

// Affine output map learned on training predictions (see
// learn_output_scaling); identity when disabled.
struct OutputScaling {
  bool enabled = false;
  double offset = 0.0;
  double slope = 1.0;

  double apply(double x) const { return enabled ? offset + slope * x : x; }
};

// Half-away-from-zero rounding followed by clamping to [lo, hi].
int round_clamp(double raw, int lo, int hi);

struct Prediction {
  std::vector<double> raw_symptoms;  // FC1 outputs before scaling/rounding
  double raw_total = 0.0;            // FC2 output before scaling/rounding
  std::vector<int> symptom_scores;
  int total = 0;
};

// Inference for one already-normalized sequence: FC1 raw outputs pass
// through their per-symptom scalings, FC2 consumes the raw (unscaled) FC1
// outputs and its own output passes through fc2_scaling; everything is then
// rounded and clamped to the scale.
Prediction predict(const RefinableStack& stack, const DenseLayer& fc2, const Matrix& frames,
                   double posterior_threshold,
                   const std::vector<OutputScaling>& fc1_scaling = {},
                   const OutputScaling& fc2_scaling = {});

}  // namespace fvscore
