#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fvscore/gmm.hpp"
#include "fvscore/regression.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

struct PipelineConfig {
  std::size_t gmm_components = 16;
  double variance_floor = kDefaultVarianceFloor;
  double posterior_threshold = kDefaultPosteriorThreshold;
  double binarize_threshold = 0.5;
  std::string scale_preset = "PANSS-NEG";
  EmConfig em;
  TrainConfig stage3;  // mixture + FV + FC1 refinement
  TrainConfig stage4;  // FC2
  bool learn_scaling = false;
  std::uint64_t seed = 0;
  std::size_t frame_subsample_stride = 1;  // pooled-frame stride for EM
  std::size_t threads = 1;                 // fold-level parallelism only

  // Preset defaults: learning rates 0.005 (CAINS) / 0.001 (PANSS) for the
  // refinement stage, 0.01 for FC2, momentum 0.9; output scaling enabled
  // for CAINS.
  static PipelineConfig defaults_for(const std::string& scale_preset);
};

struct StageLogEntry {
  std::string stage;
  std::size_t iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

struct ModelBundle {
  RefinableStack stack;
  DenseLayer fc2;
  std::vector<OutputScaling> fc1_scaling;  // one per symptom when enabled
  OutputScaling fc2_scaling;
  std::vector<std::string> expression_names;
  PipelineConfig config;
  std::vector<StageLogEntry> stage_log;
};

// Stage 2 (EM over pooled normalized frames), stage 3 (end-to-end
// refinement on symptom targets), stage 4 (FC2 on totals, earlier
// parameters frozen). Frame-level detector training happens upstream and is
// not part of this pipeline.
ModelBundle run_training_stages(const LabeledDataset& dataset, const PipelineConfig& config);

// Normalizes the raw sequence and runs the trained heads; scores are rounded
// and clamped to the bundle's scale.
SymptomRecord predict(const ModelBundle& bundle, const ExpressionSequence& raw_seq);

struct FoldResult {
  std::string held_out_id;
  SymptomRecord predicted;
  SymptomRecord truth;
  std::vector<std::string> training_ids;
};

struct MetricSummary {
  double pcc = 0.0;  // NaN when undefined (constant predictions or truths)
  double mae = 0.0;
  double rmse = 0.0;
};

struct LoocvResult {
  std::vector<FoldResult> folds;
  std::vector<MetricSummary> per_symptom;  // W entries
  MetricSummary total;
};

// Leave-one-subject-out: one fold per video in sorted-id order, each trained
// on the remaining V-1 videos with the same config. Folds may run in
// parallel (config.threads); results are identical for any thread count.
LoocvResult loocv(const LabeledDataset& dataset, const PipelineConfig& config);

// Metric aggregation over fold results, exposed for oracle tests.
LoocvResult aggregate_folds(std::vector<FoldResult> folds, const SymptomScaleSpec& scale);

// Fraction of frames whose probability is at or above the threshold, per
// expression. Operates on raw (unnormalized) sequences.
std::vector<double> activation_frequency(const ExpressionSequence& raw_seq,
                                         double binarize_threshold = 0.5);

// V x N matrix of activation frequencies over a cohort.
Matrix frequency_matrix(const std::vector<ExpressionSequence>& sequences,
                        double binarize_threshold = 0.5);

// Indices of videos whose frequency deviates from the cohort mean by at most
// 1.5 population standard deviations. Statistical-analysis aid only; never
// part of symptom estimation. Needs at least two videos.
std::vector<std::size_t> outlier_band_filter(std::span<const double> frequencies);

// Affine map sending [min(predictions), max(predictions)] onto [lo, hi];
// constant predictions map to the midpoint.
OutputScaling learn_output_scaling(std::span<const double> training_predictions, double lo,
                                   double hi);
OutputScaling learn_output_scaling(std::span<const double> training_predictions,
                                   const SymptomScaleSpec& scale);

}  // namespace fvscore
