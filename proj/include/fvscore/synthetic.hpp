#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvscore/matrix.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

// Linear map from per-video activation frequencies to raw symptom scores:
// raw_w = offsets[w] + sum_i weights(w, i) * f_i.
struct ScoreMap {
  Matrix weights;               // W x N
  std::vector<double> offsets;  // W
};

struct SyntheticSpec {
  std::size_t video_count = 40;
  std::size_t min_frames = 300;
  std::size_t max_frames = 800;
  std::size_t dim = 6;              // expressions
  std::size_t true_components = 3;  // generating mixture size
  double noise_sd = 0.15;
  std::string scale_preset = "PANSS-NEG";
  double binarize_threshold = 0.5;
  // When absent, a map is auto-calibrated per symptom so raw scores span the
  // scale over the generated cohort (one driving expression per symptom).
  std::optional<ScoreMap> score_map;
  std::uint64_t seed = 0;
};

// Everything needed to recompute every score and regenerate the dataset:
// the resolved spec, the map, the generating mixture, the per-video mixture
// weights, the true frequencies and the noise draws.
struct SyntheticManifest {
  SyntheticSpec spec;
  ScoreMap score_map;
  Matrix component_logit_means;  // K_true x N (pre-squash space)
  Matrix component_logit_sds;    // K_true x N
  Matrix video_mixture_weights;  // V x K_true
  Matrix true_frequencies;       // V x N
  Matrix noise;                  // V x W
};

struct SyntheticResult {
  LabeledDataset dataset;
  SyntheticManifest manifest;
};

// Frames are logistic-squashed Gaussian mixture draws (so raw values stay in
// [0, 1]); each video has its own mixture weights over shared components.
// Scores are the mapped frequencies plus Gaussian noise, rounded and clamped
// to the scale. Regenerates (bounded retries) until every symptom column has
// at least three distinct values. Deterministic for a fixed seed.
SyntheticResult generate_synthetic(const SyntheticSpec& spec);

// Frame-level binary classifier exercising the cross-entropy cost at desk
// scale: a linear-logistic model trained with SGD + momentum.
struct FrameClassifierConfig {
  double learning_rate = 0.5;
  double momentum = 0.9;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;
  bool undersample_to_balance = false;
};

struct FrameClassifier {
  std::vector<double> weights;
  double bias = 0.0;
};

struct ClassifierMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;  // positive class = expression present
};

struct FrameClassifierResult {
  FrameClassifier model;
  ClassifierMetrics training_metrics;
  std::size_t trained_positives = 0;  // class counts actually trained on
  std::size_t trained_negatives = 0;
};

// Indices of a class-balanced subset: the majority class is undersampled to
// the minority count (seeded selection), order preserved otherwise.
std::vector<std::size_t> undersample_balanced(std::span<const int> labels,
                                              std::uint64_t seed);

double classifier_score(const FrameClassifier& clf, std::span<const double> x);

ClassifierMetrics evaluate_classifier(const FrameClassifier& clf, const Matrix& features,
                                      std::span<const int> labels);

// Rejects single-class data.
FrameClassifierResult train_frame_classifier(const Matrix& features,
                                             std::span<const int> labels,
                                             const FrameClassifierConfig& config = {});

}  // namespace fvscore
