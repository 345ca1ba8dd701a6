#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fvscore/fisher_vector.hpp"
#include "fvscore/gmm.hpp"
#include "fvscore/regression.hpp"

// End-to-end refinement: the discriminative cost is differentiated through
// the dense head, both normalizations, the gradient blocks, the statistics
// and the posteriors, down to the unconstrained mixture parameters.

namespace fvscore {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Everything the backward pass needs from one video's forward pass.
struct VideoTape {
  Matrix gamma;  // T x K, full posteriors (before sparsification)
  SufficientStats stats;
  std::vector<double> fv_raw;    // gradient blocks, z
  std::vector<double> fv_power;  // after signed square root, p
  double l2_norm = 0.0;          // ||p||
  std::vector<double> fv_final;  // after L2, y
  std::vector<double> preact;    // fc1 pre-activation
  std::vector<double> output;    // fc1 output
};

void forward_video(const RefinableStack& stack, const GaussianMixture& gmm,
                   const Matrix& frames, double threshold, VideoTape& tape) {
  const std::size_t t_count = frames.rows();
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  if (frames.cols() != n) {
    throw std::invalid_argument("sequence dimensionality does not match the stack");
  }
  if (t_count == 0) throw std::invalid_argument("empty sequence");

  tape.gamma = Matrix(t_count, k_count);
  tape.stats.s0.assign(k_count, 0.0);
  tape.stats.s1 = Matrix(k_count, n);
  tape.stats.s2 = Matrix(k_count, n);
  tape.stats.frame_count = t_count;

  // Per-component constants of the log density.
  std::vector<double> log_const(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    double log_det = 0.0;
    for (std::size_t j = 0; j < n; ++j) log_det += std::log(gmm.variances(k, j));
    log_const[k] = std::log(gmm.weights[k]) -
                   0.5 * (static_cast<double>(n) * kLog2Pi + log_det);
  }

  std::vector<double> lp(k_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto x = frames.row(t);
    for (std::size_t k = 0; k < k_count; ++k) {
      double quad = 0.0;
      const auto mu = gmm.means.row(k);
      const auto var = gmm.variances.row(k);
      for (std::size_t j = 0; j < n; ++j) {
        const double d = x[j] - mu[j];
        quad += d * d / var[j];
      }
      lp[k] = log_const[k] - 0.5 * quad;
    }
    double max_lp = -std::numeric_limits<double>::infinity();
    for (double v : lp) max_lp = std::max(max_lp, v);
    double sum = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      lp[k] = std::exp(lp[k] - max_lp);
      sum += lp[k];
    }
    auto gamma_row = tape.gamma.row(t);
    for (std::size_t k = 0; k < k_count; ++k) {
      const double g = lp[k] / sum;
      gamma_row[k] = g;
      if (g < threshold) continue;  // sparsified away
      tape.stats.s0[k] += g;
      auto s1_row = tape.stats.s1.row(k);
      auto s2_row = tape.stats.s2.row(k);
      for (std::size_t j = 0; j < n; ++j) {
        s1_row[j] += g * x[j];
        s2_row[j] += g * x[j] * x[j];
      }
    }
  }

  tape.fv_raw = fv_unnormalized(tape.stats, gmm).values;
  tape.fv_power = power_normalize(tape.fv_raw);
  double sq = 0.0;
  for (double p : tape.fv_power) sq += p * p;
  tape.l2_norm = std::sqrt(sq);
  tape.fv_final = tape.fv_power;
  if (tape.l2_norm > 0.0) {
    for (double& y : tape.fv_final) y /= tape.l2_norm;
  }

  const DenseLayer& fc1 = stack.fc1;
  tape.preact.assign(fc1.out_dim, 0.0);
  tape.output.assign(fc1.out_dim, 0.0);
  for (std::size_t o = 0; o < fc1.out_dim; ++o) {
    double acc = fc1.biases[o];
    const auto row = fc1.weights.row(o);
    for (std::size_t i = 0; i < fc1.in_dim; ++i) acc += row[i] * tape.fv_final[i];
    tape.preact[o] = acc;
    tape.output[o] =
        fc1.activation == Activation::kRelu ? std::max(0.0, acc) : acc;
  }
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Name of the first non-finite tensor along the forward pass, or nullptr.
const char* first_non_finite(const VideoTape& tape) {
  if (!all_finite(tape.gamma.storage())) return "posteriors";
  if (!all_finite(tape.stats.s0) || !all_finite(tape.stats.s1.storage()) ||
      !all_finite(tape.stats.s2.storage())) {
    return "statistics";
  }
  if (!all_finite(tape.fv_raw)) return "fisher_vector";
  if (!all_finite(tape.fv_power)) return "power_normalized";
  if (!all_finite(tape.fv_final)) return "l2_normalized";
  if (!all_finite(tape.preact)) return "fc1_preactivation";
  if (!all_finite(tape.output)) return "fc1_output";
  return nullptr;
}

// Backward pass for one video. d_output is dCost/d(fc1 output); gradients
// accumulate into grads. Mixture-parameter gradients are first taken with
// respect to the constrained weights/variances and mapped to logits and
// log-variances at the end of the batch.
struct ConstrainedGrads {
  std::vector<double> weights;  // dCost/dw (constrained)
  Matrix means;
  Matrix variances;  // dCost/dv (constrained)
};

void backward_video(const RefinableStack& stack, const GaussianMixture& gmm,
                    const Matrix& frames, double threshold, const VideoTape& tape,
                    std::span<const double> d_output, ConstrainedGrads& cg,
                    StackGradients& grads) {
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  const std::size_t t_count = frames.rows();
  const DenseLayer& fc1 = stack.fc1;
  const std::size_t fv_len = tape.fv_final.size();

  // Dense head.
  std::vector<double> delta(fc1.out_dim);
  for (std::size_t o = 0; o < fc1.out_dim; ++o) {
    const double gate =
        fc1.activation == Activation::kRelu ? (tape.preact[o] > 0.0 ? 1.0 : 0.0) : 1.0;
    delta[o] = d_output[o] * gate;
  }
  std::vector<double> d_y(fv_len, 0.0);
  for (std::size_t o = 0; o < fc1.out_dim; ++o) {
    const double d = delta[o];
    grads.fc1_biases[o] += d;
    auto w_row = fc1.weights.row(o);
    auto g_row = grads.fc1_weights.row(o);
    for (std::size_t i = 0; i < fv_len; ++i) {
      g_row[i] += d * tape.fv_final[i];
      d_y[i] += d * w_row[i];
    }
  }

  // L2 normalization: y = p / r.
  std::vector<double> d_p(fv_len);
  if (tape.l2_norm > 0.0) {
    double dot = 0.0;
    for (std::size_t i = 0; i < fv_len; ++i) dot += tape.fv_final[i] * d_y[i];
    for (std::size_t i = 0; i < fv_len; ++i) {
      d_p[i] = (d_y[i] - tape.fv_final[i] * dot) / tape.l2_norm;
    }
  } else {
    std::copy(d_y.begin(), d_y.end(), d_p.begin());
  }

  // Signed square root: subgradient 0 at exactly zero.
  std::vector<double> d_z(fv_len);
  for (std::size_t i = 0; i < fv_len; ++i) {
    const double z = tape.fv_raw[i];
    d_z[i] = z == 0.0 ? 0.0 : d_p[i] * 0.5 / std::sqrt(std::fabs(z));
  }

  // Gradient blocks into statistics and direct parameter terms.
  std::vector<double> d_s0(k_count, 0.0);
  Matrix d_s1(k_count, n);
  Matrix d_s2(k_count, n);
  const double t_frames = static_cast<double>(tape.stats.frame_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double w = gmm.weights[k];
    const double inv_sqrt_w = 1.0 / std::sqrt(w);
    const double s0 = tape.stats.s0[k];
    const double d_fw = d_z[k];
    d_s0[k] += d_fw * inv_sqrt_w;
    cg.weights[k] += d_fw * (-0.5 * s0 * inv_sqrt_w / w - 0.5 * t_frames * inv_sqrt_w);

    const double* d_fmu = d_z.data() + k_count + k * n;
    const double* d_fsig = d_z.data() + k_count + k_count * n + k * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double mu = gmm.means(k, j);
      const double v = gmm.variances(k, j);
      const double s1 = tape.stats.s1(k, j);
      const double s2 = tape.stats.s2(k, j);

      // mean block: (s1 - mu s0) / (sqrt(w) sigma)
      const double c1 = inv_sqrt_w / std::sqrt(v);
      const double num_mu = s1 - mu * s0;
      d_s1(k, j) += d_fmu[j] * c1;
      d_s0[k] += d_fmu[j] * (-mu * c1);
      cg.means(k, j) += d_fmu[j] * (-s0 * c1);
      cg.weights[k] += d_fmu[j] * (-0.5 / w) * num_mu * c1;
      cg.variances(k, j) += d_fmu[j] * (-0.5 / v) * num_mu * c1;

      // deviation block: A / (sqrt(2w) v), A = s2 - 2 mu s1 + (mu^2 - v) s0
      const double c2 = 1.0 / (std::sqrt(2.0 * w) * v);
      const double a = s2 - 2.0 * mu * s1 + (mu * mu - v) * s0;
      d_s2(k, j) += d_fsig[j] * c2;
      d_s1(k, j) += d_fsig[j] * (-2.0 * mu) * c2;
      d_s0[k] += d_fsig[j] * (mu * mu - v) * c2;
      cg.means(k, j) += d_fsig[j] * (-2.0 * s1 + 2.0 * mu * s0) * c2;
      cg.variances(k, j) += d_fsig[j] * (-s0 * c2 - a * c2 / v);
      cg.weights[k] += d_fsig[j] * (-0.5 / w) * a * c2;
    }
  }

  // Statistics into posteriors, then through the softmax into the
  // log-density arguments. Sparsified entries pass no gradient.
  std::vector<double> d_gamma(k_count);
  std::vector<double> d_eta(k_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto x = frames.row(t);
    const auto gamma_row = tape.gamma.row(t);
    double dot = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      double u = d_s0[k];
      const auto d_s1_row = d_s1.row(k);
      const auto d_s2_row = d_s2.row(k);
      for (std::size_t j = 0; j < n; ++j) {
        u += d_s1_row[j] * x[j] + d_s2_row[j] * x[j] * x[j];
      }
      d_gamma[k] = gamma_row[k] >= threshold ? u : 0.0;
      dot += gamma_row[k] * d_gamma[k];
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      d_eta[k] = gamma_row[k] * (d_gamma[k] - dot);
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      const double de = d_eta[k];
      if (de == 0.0) continue;
      cg.weights[k] += de / gmm.weights[k];  // d(log w)/dw
      const auto mu = gmm.means.row(k);
      const auto var = gmm.variances.row(k);
      for (std::size_t j = 0; j < n; ++j) {
        const double d = x[j] - mu[j];
        cg.means(k, j) += de * d / var[j];
        cg.variances(k, j) += de * 0.5 * (d * d / (var[j] * var[j]) - 1.0 / var[j]);
      }
    }
  }
}

void map_constrained_to_unconstrained(const RefinableStack& stack,
                                      const GaussianMixture& gmm,
                                      const ConstrainedGrads& cg, StackGradients& grads) {
  const std::size_t k_count = gmm.component_count();
  const std::size_t n = gmm.dim();
  // Softmax Jacobian for the weight logits.
  double weighted_sum = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) weighted_sum += gmm.weights[k] * cg.weights[k];
  for (std::size_t k = 0; k < k_count; ++k) {
    grads.weight_logits[k] = gmm.weights[k] * (cg.weights[k] - weighted_sum);
  }
  grads.means = cg.means;
  // v = max(exp(rho), floor): identity (times v) where the floor is
  // inactive, zero where it clamps.
  grads.log_variances = Matrix(k_count, n);
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = gmm.variances(k, j);
      const bool floored = std::exp(stack.log_variances(k, j)) < stack.variance_floor;
      grads.log_variances(k, j) = floored ? 0.0 : cg.variances(k, j) * v;
    }
  }
}

// Shared forward(+backward) over the full batch; returns the cost.
double evaluate(const RefinableStack& stack, const std::vector<Matrix>& sequences,
                const Matrix& targets, double threshold, StackGradients* grads) {
  const std::size_t v_count = sequences.size();
  const std::size_t w_count = stack.fc1.out_dim;
  if (targets.rows() != v_count || targets.cols() != w_count) {
    throw std::invalid_argument("targets must be V x W");
  }
  if (v_count == 0) throw std::invalid_argument("empty training set");

  const GaussianMixture gmm = stack.mixture();
  ConstrainedGrads cg;
  if (grads != nullptr) {
    grads->weight_logits.assign(stack.component_count(), 0.0);
    grads->means = Matrix(stack.component_count(), stack.dim());
    grads->log_variances = Matrix(stack.component_count(), stack.dim());
    grads->fc1_weights = Matrix(stack.fc1.out_dim, stack.fc1.in_dim);
    grads->fc1_biases.assign(stack.fc1.out_dim, 0.0);
    cg.weights.assign(stack.component_count(), 0.0);
    cg.means = Matrix(stack.component_count(), stack.dim());
    cg.variances = Matrix(stack.component_count(), stack.dim());
  }

  VideoTape tape;
  std::vector<double> d_output(w_count);
  double cost = 0.0;
  const double scale = 1.0 / (static_cast<double>(v_count) * static_cast<double>(w_count));
  for (std::size_t v = 0; v < v_count; ++v) {
    forward_video(stack, gmm, sequences[v], threshold, tape);
    bool finite = true;
    for (std::size_t w = 0; w < w_count; ++w) {
      const double r = tape.output[w] - targets(v, w);
      cost += scale * r * r;
      d_output[w] = 2.0 * scale * r;
      finite = finite && std::isfinite(tape.output[w]);
    }
    if (!finite || !std::isfinite(cost)) {
      const char* tensor = first_non_finite(tape);
      throw std::runtime_error(std::string("non-finite loss at video index ") +
                               std::to_string(v) + " (first non-finite tensor: " +
                               (tensor != nullptr ? tensor : "cost") + ")");
    }
    if (grads != nullptr) {
      backward_video(stack, gmm, sequences[v], threshold, tape, d_output, cg, *grads);
    }
  }
  if (grads != nullptr) {
    map_constrained_to_unconstrained(stack, gmm, cg, *grads);
  }
  return cost;
}

}  // namespace

std::vector<double> stack_forward(const RefinableStack& stack, const Matrix& frames,
                                  double posterior_threshold) {
  const GaussianMixture gmm = stack.mixture();
  VideoTape tape;
  forward_video(stack, gmm, frames, posterior_threshold, tape);
  return tape.output;
}

double stack_cost(const RefinableStack& stack, const std::vector<Matrix>& sequences,
                  const Matrix& targets, double posterior_threshold) {
  return evaluate(stack, sequences, targets, posterior_threshold, nullptr);
}

StackGradients stack_gradients(const RefinableStack& stack,
                               const std::vector<Matrix>& sequences, const Matrix& targets,
                               double posterior_threshold) {
  StackGradients grads;
  evaluate(stack, sequences, targets, posterior_threshold, &grads);
  return grads;
}

RefineResult refine_end_to_end(RefinableStack stack, const std::vector<Matrix>& sequences,
                               const Matrix& targets, const TrainConfig& config,
                               double posterior_threshold) {
  RefineResult result;
  StackGradients grads;

  std::vector<double> vel_logits(stack.component_count(), 0.0);
  std::vector<double> vel_means(stack.means.storage().size(), 0.0);
  std::vector<double> vel_logvars(stack.log_variances.storage().size(), 0.0);
  std::vector<double> vel_w(stack.fc1.weights.storage().size(), 0.0);
  std::vector<double> vel_b(stack.fc1.biases.size(), 0.0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double cost;
    try {
      cost = evaluate(stack, sequences, targets, posterior_threshold, &grads);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("refine_end_to_end epoch " + std::to_string(epoch) + ": " +
                               e.what());
    }
    result.loss_trace.push_back(cost);
    sgd_momentum_step(stack.weight_logits, grads.weight_logits, vel_logits,
                      config.learning_rate, config.momentum);
    sgd_momentum_step(stack.means.storage(), grads.means.storage(), vel_means,
                      config.learning_rate, config.momentum);
    sgd_momentum_step(stack.log_variances.storage(), grads.log_variances.storage(),
                      vel_logvars, config.learning_rate, config.momentum);
    sgd_momentum_step(stack.fc1.weights.storage(), grads.fc1_weights.storage(), vel_w,
                      config.learning_rate, config.momentum);
    sgd_momentum_step(stack.fc1.biases, grads.fc1_biases, vel_b, config.learning_rate,
                      config.momentum);
  }

  // Cost of the parameters actually returned.
  result.loss_trace.push_back(
      evaluate(stack, sequences, targets, posterior_threshold, nullptr));
  result.stack = std::move(stack);
  return result;
}

}  // namespace fvscore
