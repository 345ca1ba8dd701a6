#include "fvscore/regression.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fvscore/random.hpp"

namespace fvscore {

DenseLayer make_dense_layer(std::size_t in_dim, std::size_t out_dim, Activation activation,
                            std::uint64_t seed) {
  if (in_dim == 0 || out_dim == 0) {
    throw std::invalid_argument("dense layer dimensions must be positive");
  }
  DenseLayer layer;
  layer.in_dim = in_dim;
  layer.out_dim = out_dim;
  layer.activation = activation;
  layer.weights = Matrix(out_dim, in_dim);
  layer.biases.assign(out_dim, 0.0);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  Rng rng(seed);
  for (double& w : layer.weights.storage()) w = rng.uniform(-bound, bound);
  return layer;
}

double bce_cost(std::span<const double> targets, std::span<const double> predictions) {
  if (targets.size() != predictions.size()) {
    throw std::invalid_argument("bce_cost: length mismatch");
  }
  if (targets.empty()) throw std::invalid_argument("bce_cost: empty batch");
  constexpr double kEps = 1e-12;
  double sum = 0.0;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const double q = std::clamp(predictions[b], kEps, 1.0 - kEps);
    sum += targets[b] * std::log(q) + (1.0 - targets[b]) * std::log(1.0 - q);
  }
  return -sum / static_cast<double>(targets.size());
}

double mse_cost(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw std::invalid_argument("mse_cost: shape mismatch");
  }
  if (predictions.rows() == 0 || predictions.cols() == 0) {
    throw std::invalid_argument("mse_cost: empty input");
  }
  const double v = static_cast<double>(predictions.rows());
  const double w = static_cast<double>(predictions.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.rows(); ++i) {
    for (std::size_t j = 0; j < predictions.cols(); ++j) {
      const double d = predictions(i, j) - targets(i, j);
      total += d * d;
    }
  }
  return total / (v * w);
}

std::vector<double> forward(const DenseLayer& layer, std::span<const double> x) {
  if (x.size() != layer.in_dim) {
    throw std::invalid_argument("forward: input length does not match layer");
  }
  std::vector<double> out(layer.out_dim, 0.0);
  for (std::size_t o = 0; o < layer.out_dim; ++o) {
    const auto row = layer.weights.row(o);
    double acc = layer.biases[o];
    for (std::size_t i = 0; i < layer.in_dim; ++i) acc += row[i] * x[i];
    out[o] = layer.activation == Activation::kRelu ? std::max(0.0, acc) : acc;
  }
  return out;
}

void sgd_momentum_step(std::span<double> params, std::span<const double> grads,
                       std::span<double> velocity, double learning_rate, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw std::invalid_argument("sgd_momentum_step: size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] - learning_rate * grads[i];
    params[i] += velocity[i];
  }
}

GaussianMixture RefinableStack::mixture() const {
  const std::size_t k_count = component_count();
  const std::size_t n = dim();
  GaussianMixture gmm;
  gmm.variance_floor = variance_floor;
  gmm.weights.assign(k_count, 0.0);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double a : weight_logits) max_logit = std::max(max_logit, a);
  double sum = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) {
    gmm.weights[k] = std::exp(weight_logits[k] - max_logit);
    sum += gmm.weights[k];
  }
  for (double& w : gmm.weights) w /= sum;
  gmm.means = means;
  gmm.variances = Matrix(k_count, n);
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      gmm.variances(k, j) = std::max(std::exp(log_variances(k, j)), variance_floor);
    }
  }
  return gmm;
}

RefinableStack RefinableStack::from_mixture(const GaussianMixture& gmm, DenseLayer fc1,
                                            SymptomScaleSpec scale) {
  if (fc1.in_dim != fisher_vector_length(gmm.component_count(), gmm.dim())) {
    throw std::invalid_argument("fc1 input does not match the encoding length K(2N+1)");
  }
  if (fc1.out_dim != scale.symptom_count()) {
    throw std::invalid_argument("fc1 output does not match the symptom count");
  }
  RefinableStack stack;
  stack.variance_floor = gmm.variance_floor;
  stack.weight_logits.resize(gmm.component_count());
  for (std::size_t k = 0; k < gmm.component_count(); ++k) {
    stack.weight_logits[k] = std::log(gmm.weights[k]);
  }
  stack.means = gmm.means;
  stack.log_variances = Matrix(gmm.component_count(), gmm.dim());
  for (std::size_t k = 0; k < gmm.component_count(); ++k) {
    for (std::size_t j = 0; j < gmm.dim(); ++j) {
      stack.log_variances(k, j) = std::log(gmm.variances(k, j));
    }
  }
  stack.fc1 = std::move(fc1);
  stack.scale = std::move(scale);
  return stack;
}

DenseLayer train_fc2(const Matrix& symptom_predictions, std::span<const double> totals,
                     const TrainConfig& config) {
  const std::size_t v_count = symptom_predictions.rows();
  const std::size_t w_count = symptom_predictions.cols();
  if (v_count == 0 || w_count == 0) throw std::invalid_argument("train_fc2: empty input");
  if (totals.size() != v_count) {
    throw std::invalid_argument("train_fc2: totals do not match predictions");
  }

  // A dead start (no video activates the output) never recovers under the
  // relu subgradient; re-draw the init deterministically until one does.
  DenseLayer layer = make_dense_layer(w_count, 1, Activation::kRelu, config.seed);
  for (std::uint64_t attempt = 1; attempt <= 16; ++attempt) {
    bool alive = false;
    for (std::size_t v = 0; v < v_count && !alive; ++v) {
      const auto x = symptom_predictions.row(v);
      double preact = layer.biases[0];
      for (std::size_t w = 0; w < w_count; ++w) preact += layer.weights(0, w) * x[w];
      alive = preact > 0.0;
    }
    if (alive) break;
    if (attempt == 16) {
      throw std::runtime_error("train_fc2: no activating initialization found");
    }
    layer = make_dense_layer(w_count, 1, Activation::kRelu, config.seed + attempt);
  }

  std::vector<double> grad_w(w_count, 0.0);
  std::vector<double> vel_w(w_count, 0.0);
  double grad_b = 0.0;
  double vel_b = 0.0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    grad_b = 0.0;
    for (std::size_t v = 0; v < v_count; ++v) {
      const auto x = symptom_predictions.row(v);
      double preact = layer.biases[0];
      for (std::size_t w = 0; w < w_count; ++w) preact += layer.weights(0, w) * x[w];
      const double out = std::max(0.0, preact);
      const double delta =
          (preact > 0.0) ? 2.0 * (out - totals[v]) / static_cast<double>(v_count) : 0.0;
      for (std::size_t w = 0; w < w_count; ++w) grad_w[w] += delta * x[w];
      grad_b += delta;
    }
    sgd_momentum_step(layer.weights.storage(), grad_w, vel_w, config.learning_rate,
                      config.momentum);
    sgd_momentum_step(std::span<double>(&layer.biases[0], 1),
                      std::span<const double>(&grad_b, 1), std::span<double>(&vel_b, 1),
                      config.learning_rate, config.momentum);
    for (double w : layer.weights.storage()) {
      if (!std::isfinite(w)) {
        throw std::runtime_error("train_fc2: non-finite parameters at epoch " +
                                 std::to_string(epoch) +
                                 " (first non-finite tensor: fc2_weights)");
      }
    }
    if (!std::isfinite(layer.biases[0])) {
      throw std::runtime_error("train_fc2: non-finite parameters at epoch " +
                               std::to_string(epoch) +
                               " (first non-finite tensor: fc2_biases)");
    }
  }
  return layer;
}

int round_clamp(double raw, int lo, int hi) {
  const double rounded = std::round(raw);  // half away from zero
  const double clamped = std::clamp(rounded, static_cast<double>(lo), static_cast<double>(hi));
  return static_cast<int>(clamped);
}

Prediction predict(const RefinableStack& stack, const DenseLayer& fc2, const Matrix& frames,
                   double posterior_threshold, const std::vector<OutputScaling>& fc1_scaling,
                   const OutputScaling& fc2_scaling) {
  const std::size_t w_count = stack.fc1.out_dim;
  if (!fc1_scaling.empty() && fc1_scaling.size() != w_count) {
    throw std::invalid_argument("predict: scaling count does not match symptom count");
  }

  Prediction pred;
  pred.raw_symptoms = stack_forward(stack, frames, posterior_threshold);
  pred.symptom_scores.resize(w_count);
  for (std::size_t w = 0; w < w_count; ++w) {
    const double scaled =
        fc1_scaling.empty() ? pred.raw_symptoms[w] : fc1_scaling[w].apply(pred.raw_symptoms[w]);
    pred.symptom_scores[w] = round_clamp(scaled, stack.scale.min_score, stack.scale.max_score);
  }
  pred.raw_total = forward(fc2, pred.raw_symptoms)[0];
  pred.total = round_clamp(fc2_scaling.apply(pred.raw_total), stack.scale.total_min,
                           stack.scale.total_max);
  return pred;
}

}  // namespace fvscore
