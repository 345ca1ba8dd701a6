#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fvscore/matrix.hpp"

namespace fvscore {

// Per-frame expression probabilities for one video. Raw entries lie in
// [0, 1]; after per-video normalization (mean subtraction per column) they
// are signed and each column sums to zero.
struct ExpressionSequence {
  std::string video_id;
  Matrix frames;                              // T x N, row = frame
  std::vector<std::string> expression_names;  // N labels
  double frame_rate_hz = 25.0;                // metadata only
  // Fraction of frames with a successful upstream face detection; metadata
  // used only by the optional completeness check in validate_dataset.
  double detected_frame_ratio = 1.0;

  std::size_t frame_count() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
};

// Clinical rating scale: W symptom items sharing one integer score range,
// plus the range of the scale total.
struct SymptomScaleSpec {
  std::string scale_name;
  std::vector<std::string> symptom_names;
  int min_score = 0;
  int max_score = 0;
  int total_min = 0;
  int total_max = 0;

  std::size_t symptom_count() const { return symptom_names.size(); }

  // PANSS negative subscale, per-symptom range [1, 7]; the three
  // expression-related items.
  static SymptomScaleSpec panss_neg();
  // CAINS expression subscale, per-symptom range [0, 4], four items.
  static SymptomScaleSpec cains_exp();
  // Preset lookup by name ("PANSS-NEG" or "CAINS-EXP"); throws on unknown.
  static SymptomScaleSpec preset(const std::string& name);
  // Preset with custom item names (item count may differ from the default;
  // score ranges come from the preset).
  static SymptomScaleSpec preset_with_symptoms(const std::string& name,
                                               std::vector<std::string> symptom_names);
};

// Ground-truth ratings for one video.
struct SymptomRecord {
  std::string video_id;
  std::vector<int> symptom_scores;
  int total_score = 0;
};

struct LabeledDataset {
  std::vector<ExpressionSequence> sequences;
  std::vector<SymptomRecord> records;
  SymptomScaleSpec scale;
};

struct ValidationIssue {
  std::string video_id;  // empty for dataset-level issues
  std::string message;
};

// Report-only invariant check: range errors, id mismatches, NaN entries.
// Empty result iff all dataset invariants hold. A positive
// min_detection_ratio additionally flags videos whose upstream face
// detection covered too few frames (disabled by default).
std::vector<ValidationIssue> validate_dataset(const LabeledDataset& dataset,
                                              double min_detection_ratio = 0.0);

// Subtracts the per-column (per-expression) mean from every frame. Output
// column means are zero within 1e-9. Rejects empty sequences.
ExpressionSequence normalize_sequence(const ExpressionSequence& seq);

// Canonical dataset order: video ids sorted lexicographically. Applied at
// load so fold assignment is reproducible.
void sort_by_video_id(LabeledDataset& dataset);

}  // namespace fvscore
