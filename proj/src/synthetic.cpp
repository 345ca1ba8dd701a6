#include "fvscore/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

#include "fvscore/pipeline.hpp"
#include "fvscore/random.hpp"
#include "fvscore/regression.hpp"

namespace fvscore {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_spec(const SyntheticSpec& spec) {
  if (spec.video_count < 2) throw std::invalid_argument("synthetic: need at least 2 videos");
  if (spec.min_frames == 0 || spec.max_frames < spec.min_frames) {
    throw std::invalid_argument("synthetic: bad frame range");
  }
  if (spec.dim == 0) throw std::invalid_argument("synthetic: need at least one expression");
  if (spec.true_components == 0) {
    throw std::invalid_argument("synthetic: need at least one generating component");
  }
  if (spec.noise_sd < 0.0) throw std::invalid_argument("synthetic: negative noise");
  if (spec.binarize_threshold <= 0.0 || spec.binarize_threshold >= 1.0) {
    throw std::invalid_argument("synthetic: binarize threshold must lie in (0,1)");
  }
}

std::string video_name(std::size_t index) {
  std::string digits = std::to_string(index);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  return "v" + digits;
}

// One driving expression per symptom; the slope is set so raw scores span
// the scale over the observed frequency range.
ScoreMap calibrate_map(const Matrix& frequencies, const SymptomScaleSpec& scale) {
  const std::size_t n = frequencies.cols();
  const std::size_t v_count = frequencies.rows();
  const std::size_t w_count = scale.symptom_count();
  ScoreMap map;
  map.weights = Matrix(w_count, n);
  map.offsets.assign(w_count, 0.0);

  std::vector<double> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = hi[i] = frequencies(0, i);
    for (std::size_t v = 1; v < v_count; ++v) {
      lo[i] = std::min(lo[i], frequencies(v, i));
      hi[i] = std::max(hi[i], frequencies(v, i));
    }
  }
  for (std::size_t w = 0; w < w_count; ++w) {
    std::size_t driver = w % n;
    if (hi[driver] - lo[driver] < 0.02) {
      // Fall back to the widest column when the natural driver is flat.
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (hi[i] - lo[i] > best) {
          best = hi[i] - lo[i];
          driver = i;
        }
      }
    }
    const double spread = std::max(hi[driver] - lo[driver], 1e-9);
    const double slope = static_cast<double>(scale.max_score - scale.min_score) / spread;
    map.weights(w, driver) = slope;
    map.offsets[w] = static_cast<double>(scale.min_score) - slope * lo[driver];
  }
  return map;
}

}  // namespace

SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  const SymptomScaleSpec scale = SymptomScaleSpec::preset(spec.scale_preset);
  const std::size_t v_count = spec.video_count;
  const std::size_t n = spec.dim;
  const std::size_t k_true = spec.true_components;
  const std::size_t w_count = scale.symptom_count();

  constexpr std::size_t kMaxAttempts = 5;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    SyntheticResult result;
    SyntheticManifest& manifest = result.manifest;
    manifest.spec = spec;

    // Shared generating components in pre-squash (logit) space.
    Rng comp_rng(mix_seed(spec.seed, 0xC0 + attempt));
    manifest.component_logit_means = Matrix(k_true, n);
    manifest.component_logit_sds = Matrix(k_true, n);
    for (std::size_t k = 0; k < k_true; ++k) {
      for (std::size_t j = 0; j < n; ++j) {
        manifest.component_logit_means(k, j) = comp_rng.uniform(-2.5, 2.5);
        manifest.component_logit_sds(k, j) = comp_rng.uniform(0.6, 1.2);
      }
    }

    // Per-video mixture weights and frames.
    manifest.video_mixture_weights = Matrix(v_count, k_true);
    result.dataset.scale = scale;
    result.dataset.sequences.resize(v_count);
    const std::size_t frame_span = spec.max_frames - spec.min_frames + 1;
    for (std::size_t v = 0; v < v_count; ++v) {
      Rng rng(mix_seed(spec.seed, 0xB000 + attempt * v_count + v));
      double pi_sum = 0.0;
      for (std::size_t k = 0; k < k_true; ++k) {
        const double g = -std::log(1.0 - rng.uniform());  // exponential draw
        manifest.video_mixture_weights(v, k) = g;
        pi_sum += g;
      }
      for (std::size_t k = 0; k < k_true; ++k) manifest.video_mixture_weights(v, k) /= pi_sum;

      ExpressionSequence& seq = result.dataset.sequences[v];
      seq.video_id = video_name(v);
      seq.expression_names.resize(n);
      for (std::size_t j = 0; j < n; ++j) seq.expression_names[j] = "expr" + std::to_string(j);
      const std::size_t t_count = spec.min_frames + rng.index(frame_span);
      seq.frames = Matrix(t_count, n);
      for (std::size_t t = 0; t < t_count; ++t) {
        const double pick = rng.uniform();
        std::size_t k = 0;
        double acc = 0.0;
        for (; k + 1 < k_true; ++k) {
          acc += manifest.video_mixture_weights(v, k);
          if (pick < acc) break;
        }
        for (std::size_t j = 0; j < n; ++j) {
          seq.frames(t, j) = sigmoid(manifest.component_logit_means(k, j) +
                                     manifest.component_logit_sds(k, j) * rng.normal());
        }
      }
    }

    manifest.true_frequencies =
        frequency_matrix(result.dataset.sequences, spec.binarize_threshold);
    manifest.score_map =
        spec.score_map ? *spec.score_map : calibrate_map(manifest.true_frequencies, scale);
    manifest.spec.score_map = manifest.score_map;

    // Scores: mapped frequencies plus noise, rounded and clamped. Totals are
    // the sums of the final integer scores.
    Rng noise_rng(mix_seed(spec.seed, 0xD0 + attempt));
    manifest.noise = Matrix(v_count, w_count);
    result.dataset.records.resize(v_count);
    for (std::size_t v = 0; v < v_count; ++v) {
      SymptomRecord& rec = result.dataset.records[v];
      rec.video_id = result.dataset.sequences[v].video_id;
      rec.symptom_scores.resize(w_count);
      int total = 0;
      for (std::size_t w = 0; w < w_count; ++w) {
        double raw = manifest.score_map.offsets[w];
        for (std::size_t j = 0; j < n; ++j) {
          raw += manifest.score_map.weights(w, j) * manifest.true_frequencies(v, j);
        }
        manifest.noise(v, w) = spec.noise_sd * noise_rng.normal();
        rec.symptom_scores[w] =
            round_clamp(raw + manifest.noise(v, w), scale.min_score, scale.max_score);
        total += rec.symptom_scores[w];
      }
      rec.total_score = total;
    }

    // Scores must be estimable: at least three distinct values per symptom.
    bool distinct_enough = true;
    for (std::size_t w = 0; w < w_count && distinct_enough; ++w) {
      std::set<int> values;
      for (std::size_t v = 0; v < v_count; ++v) {
        values.insert(result.dataset.records[v].symptom_scores[w]);
      }
      distinct_enough = values.size() >= 3;
    }
    if (distinct_enough) return result;
  }
  throw std::runtime_error(
      "generate_synthetic: could not reach 3 distinct values per symptom after retries; "
      "widen the frame range or the cohort");
}

std::vector<std::size_t> undersample_balanced(std::span<const int> labels,
                                              std::uint64_t seed) {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] != 0 ? positives : negatives).push_back(i);
  }
  auto& majority = positives.size() > negatives.size() ? positives : negatives;
  const std::size_t keep = std::min(positives.size(), negatives.size());
  // Seeded Fisher-Yates prefix, then restore index order.
  Rng rng(seed);
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + rng.index(majority.size() - i);
    std::swap(majority[i], majority[j]);
  }
  majority.resize(keep);
  std::vector<std::size_t> selected;
  selected.reserve(2 * keep);
  selected.insert(selected.end(), positives.begin(), positives.end());
  selected.insert(selected.end(), negatives.begin(), negatives.end());
  std::sort(selected.begin(), selected.end());
  return selected;
}

double classifier_score(const FrameClassifier& clf, std::span<const double> x) {
  if (x.size() != clf.weights.size()) {
    throw std::invalid_argument("classifier_score: feature length mismatch");
  }
  double z = clf.bias;
  for (std::size_t i = 0; i < x.size(); ++i) z += clf.weights[i] * x[i];
  return sigmoid(z);
}

ClassifierMetrics evaluate_classifier(const FrameClassifier& clf, const Matrix& features,
                                      std::span<const int> labels) {
  if (features.rows() != labels.size() || features.rows() == 0) {
    throw std::invalid_argument("evaluate_classifier: bad inputs");
  }
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const bool predicted = classifier_score(clf, features.row(i)) >= 0.5;
    const bool actual = labels[i] != 0;
    if (predicted && actual) ++tp;
    if (predicted && !actual) ++fp;
    if (!predicted && !actual) ++tn;
    if (!predicted && actual) ++fn;
  }
  ClassifierMetrics metrics;
  metrics.accuracy = static_cast<double>(tp + tn) / static_cast<double>(features.rows());
  const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  metrics.f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return metrics;
}

FrameClassifierResult train_frame_classifier(const Matrix& features,
                                             std::span<const int> labels,
                                             const FrameClassifierConfig& config) {
  if (features.rows() != labels.size() || features.rows() == 0 || features.cols() == 0) {
    throw std::invalid_argument("train_frame_classifier: bad inputs");
  }
  std::size_t positives = 0;
  for (int y : labels) positives += (y != 0) ? 1 : 0;
  if (positives == 0 || positives == labels.size()) {
    throw std::invalid_argument("train_frame_classifier: single-class data");
  }

  std::vector<std::size_t> rows(features.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  if (config.undersample_to_balance) {
    rows = undersample_balanced(labels, mix_seed(config.seed, 0xF));
  }

  FrameClassifierResult result;
  result.model.weights.assign(features.cols(), 0.0);
  result.model.bias = 0.0;
  for (std::size_t i : rows) result.trained_positives += (labels[i] != 0) ? 1 : 0;
  result.trained_negatives = rows.size() - result.trained_positives;

  const std::size_t d = features.cols();
  const double batch = static_cast<double>(rows.size());
  std::vector<double> grad_w(d, 0.0);
  std::vector<double> vel_w(d, 0.0);
  double grad_b = 0.0;
  double vel_b = 0.0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    grad_b = 0.0;
    for (std::size_t i : rows) {
      const auto x = features.row(i);
      const double q = classifier_score(result.model, x);
      // d(bce)/d(logit) = (q - t) / B
      const double delta = (q - (labels[i] != 0 ? 1.0 : 0.0)) / batch;
      for (std::size_t j = 0; j < d; ++j) grad_w[j] += delta * x[j];
      grad_b += delta;
    }
    sgd_momentum_step(result.model.weights, grad_w, vel_w, config.learning_rate,
                      config.momentum);
    sgd_momentum_step(std::span<double>(&result.model.bias, 1),
                      std::span<const double>(&grad_b, 1), std::span<double>(&vel_b, 1),
                      config.learning_rate, config.momentum);
  }

  Matrix trained(rows.size(), d);
  std::vector<int> trained_labels(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(features.row(rows[i]).begin(), features.row(rows[i]).end(),
              trained.row(i).begin());
    trained_labels[i] = labels[rows[i]];
  }
  result.training_metrics = evaluate_classifier(result.model, trained, trained_labels);
  return result;
}

}  // namespace fvscore
