#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fvscore/gmm.hpp"
#include "fvscore/regression.hpp"
#include "test_util.hpp"

using namespace fvscore;

namespace {

RefinableStack random_stack(std::mt19937_64& rng, std::size_t k, std::size_t n,
                            std::size_t w, std::uint64_t layer_seed) {
  const GaussianMixture gmm = fvtest::random_gmm(rng, k, n);
  DenseLayer fc1 = make_dense_layer(fisher_vector_length(k, n), w, Activation::kRelu,
                                    layer_seed);
  SymptomScaleSpec scale = SymptomScaleSpec::panss_neg();
  scale.symptom_names.resize(w, "s");
  for (std::size_t i = 0; i < w; ++i) scale.symptom_names[i] = "s" + std::to_string(i);
  return RefinableStack::from_mixture(gmm, std::move(fc1), scale);
}

struct Instance {
  RefinableStack stack;
  std::vector<Matrix> sequences;
  Matrix targets;
};

Instance random_instance(std::uint64_t seed, std::size_t k = 3, std::size_t n = 4,
                         std::size_t t = 20, std::size_t w = 2, std::size_t v = 3) {
  std::mt19937_64 rng(seed);
  Instance inst{random_stack(rng, k, n, w, seed * 31 + 7), {}, Matrix(v, w)};
  std::uniform_real_distribution<double> target(0.0, 3.0);
  for (std::size_t i = 0; i < v; ++i) {
    inst.sequences.push_back(fvtest::random_matrix(rng, t, n, -1.0, 1.0));
    for (std::size_t j = 0; j < w; ++j) inst.targets(i, j) = target(rng);
  }
  return inst;
}

// Central finite difference of the full-batch cost for one parameter slot.
double fd_slot(Instance& inst, double* slot, double h = 1e-5) {
  const double saved = *slot;
  *slot = saved + h;
  const double up = stack_cost(inst.stack, inst.sequences, inst.targets, 0.0);
  *slot = saved - h;
  const double down = stack_cost(inst.stack, inst.sequences, inst.targets, 0.0);
  *slot = saved;
  return (up - down) / (2.0 * h);
}

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

}  // namespace

TEST_CASE("bce_cost spot values") {
  const std::vector<double> one{1.0};
  CHECK(bce_cost(one, std::vector<double>{1.0 - 1e-12}) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::fabs(bce_cost(one, std::vector<double>{0.5}) - std::log(2.0)) < 1e-12);
  const std::vector<double> both{1.0, 0.0};
  const std::vector<double> half{0.5, 0.5};
  CHECK(std::fabs(bce_cost(both, half) - std::log(2.0)) < 1e-12);
  CHECK_THROWS_AS(bce_cost({}, {}), std::invalid_argument);
}

TEST_CASE("mse_cost spot values") {
  Matrix p(1, 1, 2.0);
  Matrix t(1, 1, 4.0);
  CHECK(mse_cost(p, p) == doctest::Approx(0.0));
  CHECK(mse_cost(p, t) == doctest::Approx(4.0));

  Matrix p2(2, 1);
  Matrix t2(2, 1);
  p2(0, 0) = 1.0;
  p2(1, 0) = 3.0;
  t2(0, 0) = 2.0;
  t2(1, 0) = 1.0;
  CHECK(mse_cost(p2, t2) == doctest::Approx(2.5));
  CHECK_THROWS_AS(mse_cost(p, p2), std::invalid_argument);
}

TEST_CASE("forward applies the relu gate") {
  DenseLayer layer;
  layer.in_dim = 2;
  layer.out_dim = 2;
  layer.weights = Matrix(2, 2);
  layer.weights(0, 0) = 1.0;
  layer.weights(1, 1) = 1.0;
  layer.biases = {0.0, 0.0};
  layer.activation = Activation::kRelu;
  const std::vector<double> out = forward(layer, std::vector<double>{-1.0, 2.0});
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(2.0));
}

TEST_CASE("forward with zero weights returns relu of the bias") {
  DenseLayer layer;
  layer.in_dim = 3;
  layer.out_dim = 2;
  layer.weights = Matrix(2, 3, 0.0);
  layer.biases = {0.7, -0.4};
  layer.activation = Activation::kRelu;
  const std::vector<double> out = forward(layer, std::vector<double>{5.0, 5.0, 5.0});
  CHECK(out[0] == doctest::Approx(0.7));
  CHECK(out[1] == doctest::Approx(0.0));
}

TEST_CASE("forward matches a naive dot-product oracle") {
  std::mt19937_64 rng(3);
  DenseLayer layer = make_dense_layer(7, 4, Activation::kIdentity, 55);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& b : layer.biases) b = dist(rng);
  std::vector<double> x(7);
  for (double& v : x) v = dist(rng);
  const std::vector<double> got = forward(layer, x);
  for (std::size_t o = 0; o < 4; ++o) {
    double want = layer.biases[o];
    for (std::size_t i = 0; i < 7; ++i) want += layer.weights(o, i) * x[i];
    CHECK(std::fabs(got[o] - want) < 1e-12);
  }
  CHECK_THROWS_AS(forward(layer, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("sgd_momentum_step algebra") {
  // m = 0 reduces to plain gradient descent.
  std::vector<double> params{1.0};
  std::vector<double> grads{0.25};
  std::vector<double> velocity{0.0};
  sgd_momentum_step(params, grads, velocity, 1.0, 0.0);
  CHECK(params[0] == doctest::Approx(0.75));

  // Zero gradient coasts by m * v0.
  params = {0.0};
  velocity = {2.0};
  grads = {0.0};
  sgd_momentum_step(params, grads, velocity, 0.1, 0.9);
  CHECK(params[0] == doctest::Approx(1.8));

  // Two steps with constant gradient: -lr*g then -(m+1)*lr*g more.
  params = {0.0};
  velocity = {0.0};
  grads = {1.0};
  sgd_momentum_step(params, grads, velocity, 0.1, 0.9);
  CHECK(params[0] == doctest::Approx(-0.1));
  sgd_momentum_step(params, grads, velocity, 0.1, 0.9);
  CHECK(params[0] == doctest::Approx(-0.1 - 0.19));
}

TEST_CASE("make_dense_layer honors the fan bound and is deterministic") {
  const DenseLayer a = make_dense_layer(10, 5, Activation::kRelu, 42);
  const DenseLayer b = make_dense_layer(10, 5, Activation::kRelu, 42);
  CHECK(a.weights == b.weights);
  const double bound = std::sqrt(6.0 / 15.0);
  for (double w : a.weights.storage()) {
    CHECK(std::fabs(w) <= bound);
  }
  for (double bias : a.biases) CHECK(bias == 0.0);
}

TEST_CASE("stack round-trips through its constrained mixture") {
  std::mt19937_64 rng(17);
  const GaussianMixture gmm = fvtest::random_gmm(rng, 4, 3);
  const RefinableStack stack = RefinableStack::from_mixture(
      gmm, make_dense_layer(fisher_vector_length(4, 3), 3, Activation::kRelu, 5),
      SymptomScaleSpec::panss_neg());
  const GaussianMixture back = stack.mixture();
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(back.weights[k] == doctest::Approx(gmm.weights[k]).epsilon(1e-12));
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(back.means(k, j) == gmm.means(k, j));
      CHECK(back.variances(k, j) == doctest::Approx(gmm.variances(k, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Instance inst = random_instance(seed);
    const StackGradients grads = stack_gradients(inst.stack, inst.sequences, inst.targets, 0.0);

    double worst = 0.0;
    for (std::size_t k = 0; k < inst.stack.weight_logits.size(); ++k) {
      worst = std::max(worst, rel_err(grads.weight_logits[k],
                                      fd_slot(inst, &inst.stack.weight_logits[k])));
    }
    for (std::size_t i = 0; i < inst.stack.means.storage().size(); ++i) {
      worst = std::max(worst, rel_err(grads.means.storage()[i],
                                      fd_slot(inst, &inst.stack.means.storage()[i])));
    }
    for (std::size_t i = 0; i < inst.stack.log_variances.storage().size(); ++i) {
      worst = std::max(worst, rel_err(grads.log_variances.storage()[i],
                                      fd_slot(inst, &inst.stack.log_variances.storage()[i])));
    }
    for (std::size_t i = 0; i < inst.stack.fc1.weights.storage().size(); ++i) {
      worst = std::max(worst, rel_err(grads.fc1_weights.storage()[i],
                                      fd_slot(inst, &inst.stack.fc1.weights.storage()[i])));
    }
    for (std::size_t i = 0; i < inst.stack.fc1.biases.size(); ++i) {
      worst = std::max(worst, rel_err(grads.fc1_biases[i],
                                      fd_slot(inst, &inst.stack.fc1.biases[i])));
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("refine_end_to_end with zero learning rate is a bit-exact no-op") {
  Instance inst = random_instance(99);
  TrainConfig config;
  config.learning_rate = 0.0;
  config.momentum = 0.9;
  config.epochs = 5;
  const RefineResult result =
      refine_end_to_end(inst.stack, inst.sequences, inst.targets, config, 1e-4);
  CHECK(result.stack.weight_logits == inst.stack.weight_logits);
  CHECK(result.stack.means == inst.stack.means);
  CHECK(result.stack.log_variances == inst.stack.log_variances);
  CHECK(result.stack.fc1.weights == inst.stack.fc1.weights);
  CHECK(result.stack.fc1.biases == inst.stack.fc1.biases);
  REQUIRE(result.loss_trace.size() == 6);
  for (double loss : result.loss_trace) CHECK(loss == result.loss_trace.front());
}

TEST_CASE("refine_end_to_end descends on realizable targets") {
  // Targets produced by a frozen reference stack; training a perturbed copy
  // must reduce the cost monotonically over the first epochs.
  std::mt19937_64 rng(123);
  Instance inst = random_instance(123, 3, 4, 25, 2, 4);
  Matrix realizable(inst.sequences.size(), 2);
  for (std::size_t v = 0; v < inst.sequences.size(); ++v) {
    const std::vector<double> out = stack_forward(inst.stack, inst.sequences[v], 0.0);
    for (std::size_t w = 0; w < 2; ++w) realizable(v, w) = out[w];
  }
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (double& w : inst.stack.fc1.weights.storage()) w += jitter(rng);

  TrainConfig config;
  config.learning_rate = 1e-3;
  config.momentum = 0.9;
  config.epochs = 10;
  const RefineResult result =
      refine_end_to_end(inst.stack, inst.sequences, realizable, config, 0.0);
  REQUIRE(result.loss_trace.size() == 11);
  CHECK(result.loss_trace.front() > 0.0);
  for (std::size_t e = 1; e < result.loss_trace.size(); ++e) {
    CHECK(result.loss_trace[e] < result.loss_trace[e - 1]);
  }
}

TEST_CASE("refine_end_to_end names the first non-finite tensor when it diverges") {
  // An identity head has no relu gate to freeze a runaway loss at zero, so
  // an absurd learning rate overflows the cost within a few epochs.
  Instance inst = random_instance(7);
  inst.stack.fc1.activation = Activation::kIdentity;
  TrainConfig config;
  config.learning_rate = 1e9;
  config.momentum = 0.9;
  config.epochs = 200;
  CHECK_THROWS_WITH_AS(
      refine_end_to_end(inst.stack, inst.sequences, inst.targets, config, 0.0),
      doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("train_fc2 learns a realizable total") {
  std::mt19937_64 rng(2000);
  const std::size_t v_count = 24;
  Matrix preds(v_count, 3);
  std::vector<double> totals(v_count, 0.0);
  std::uniform_real_distribution<double> score(0.0, 4.0);
  for (std::size_t v = 0; v < v_count; ++v) {
    for (std::size_t w = 0; w < 3; ++w) {
      preds(v, w) = score(rng);
      totals[v] += preds(v, w);
    }
  }
  TrainConfig config;
  config.learning_rate = 0.005;
  config.momentum = 0.9;
  config.epochs = 2000;
  config.seed = 4;
  const DenseLayer fc2 = train_fc2(preds, totals, config);
  Matrix out(v_count, 1);
  Matrix want(v_count, 1);
  for (std::size_t v = 0; v < v_count; ++v) {
    out(v, 0) = forward(fc2, preds.row(v))[0];
    want(v, 0) = totals[v];
  }
  CHECK(mse_cost(out, want) <= 1e-3);
}

TEST_CASE("train_fc2 scalar identity case") {
  std::mt19937_64 rng(2001);
  const std::size_t v_count = 16;
  Matrix preds(v_count, 1);
  std::vector<double> totals(v_count);
  std::uniform_real_distribution<double> score(1.0, 7.0);
  for (std::size_t v = 0; v < v_count; ++v) {
    preds(v, 0) = score(rng);
    totals[v] = preds(v, 0);
  }
  TrainConfig config;
  config.learning_rate = 0.01;
  config.momentum = 0.9;
  config.epochs = 2000;
  config.seed = 12;
  const DenseLayer fc2 = train_fc2(preds, totals, config);
  Matrix out(v_count, 1);
  Matrix want(v_count, 1);
  for (std::size_t v = 0; v < v_count; ++v) {
    out(v, 0) = forward(fc2, preds.row(v))[0];
    want(v, 0) = totals[v];
  }
  CHECK(mse_cost(out, want) <= 1e-3);
}

TEST_CASE("train_fc2 with zero epochs returns the initialized layer") {
  Matrix preds(4, 2, 1.0);
  std::vector<double> totals{2.0, 2.0, 2.0, 2.0};
  TrainConfig config;
  config.epochs = 0;
  config.seed = 9;
  const DenseLayer trained = train_fc2(preds, totals, config);
  const DenseLayer fresh = make_dense_layer(2, 1, Activation::kRelu, 9);
  CHECK(trained.weights == fresh.weights);
  CHECK(trained.biases == fresh.biases);
}

TEST_CASE("round_clamp follows half-away-from-zero and the scale bounds") {
  CHECK(round_clamp(2.4, 1, 7) == 2);
  CHECK(round_clamp(7.8, 1, 7) == 7);
  CHECK(round_clamp(-0.2, 0, 4) == 0);
  CHECK(round_clamp(2.5, 1, 7) == 3);
  CHECK(round_clamp(-2.5, -7, 7) == -3);
}

TEST_CASE("predict rounds, scales and clamps") {
  std::mt19937_64 rng(31337);
  Instance inst = random_instance(31337, 2, 3, 10, 2, 1);
  const DenseLayer fc2 = make_dense_layer(2, 1, Activation::kRelu, 3);

  const Prediction plain = predict(inst.stack, fc2, inst.sequences[0], 1e-4);
  for (std::size_t w = 0; w < 2; ++w) {
    CHECK(plain.symptom_scores[w] >= inst.stack.scale.min_score);
    CHECK(plain.symptom_scores[w] <= inst.stack.scale.max_score);
    CHECK(plain.symptom_scores[w] ==
          round_clamp(plain.raw_symptoms[w], inst.stack.scale.min_score,
                      inst.stack.scale.max_score));
  }
  CHECK(plain.total >= inst.stack.scale.total_min);
  CHECK(plain.total <= inst.stack.scale.total_max);

  // Scaling applies to the raw symptom outputs before rounding.
  std::vector<OutputScaling> scalings(2);
  scalings[0] = {true, 1.0, 2.0};
  scalings[1] = {true, 0.0, 1.0};
  const Prediction scaled = predict(inst.stack, fc2, inst.sequences[0], 1e-4, scalings);
  CHECK(scaled.symptom_scores[0] ==
        round_clamp(1.0 + 2.0 * scaled.raw_symptoms[0], inst.stack.scale.min_score,
                    inst.stack.scale.max_score));
}
