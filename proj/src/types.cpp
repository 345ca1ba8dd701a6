#include "fvscore/types.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace fvscore {

namespace {

SymptomScaleSpec make_scale(std::string name, std::vector<std::string> symptoms,
                            int min_score, int max_score) {
  SymptomScaleSpec spec;
  spec.scale_name = std::move(name);
  spec.symptom_names = std::move(symptoms);
  spec.min_score = min_score;
  spec.max_score = max_score;
  const int w = static_cast<int>(spec.symptom_names.size());
  spec.total_min = w * min_score;
  spec.total_max = w * max_score;
  return spec;
}

}  // namespace

SymptomScaleSpec SymptomScaleSpec::panss_neg() {
  return make_scale("PANSS-NEG",
                    {"flat_affect", "poor_rapport", "lack_of_spontaneity"}, 1, 7);
}

SymptomScaleSpec SymptomScaleSpec::cains_exp() {
  return make_scale("CAINS-EXP",
                    {"facial_expression", "vocal_expression", "expressive_gestures",
                     "quantity_of_speech"},
                    0, 4);
}

SymptomScaleSpec SymptomScaleSpec::preset(const std::string& name) {
  if (name == "PANSS-NEG") return panss_neg();
  if (name == "CAINS-EXP") return cains_exp();
  throw std::invalid_argument("unknown scale preset: " + name);
}

SymptomScaleSpec SymptomScaleSpec::preset_with_symptoms(
    const std::string& name, std::vector<std::string> symptom_names) {
  SymptomScaleSpec spec = preset(name);
  if (symptom_names.empty()) {
    throw std::invalid_argument("scale needs at least one symptom");
  }
  return make_scale(spec.scale_name, std::move(symptom_names), spec.min_score,
                    spec.max_score);
}

std::vector<ValidationIssue> validate_dataset(const LabeledDataset& dataset,
                                              double min_detection_ratio) {
  std::vector<ValidationIssue> issues;
  const auto add = [&issues](std::string id, std::string message) {
    issues.push_back({std::move(id), std::move(message)});
  };

  const SymptomScaleSpec& scale = dataset.scale;
  if (scale.symptom_names.empty()) add("", "scale has no symptoms");
  if (scale.min_score >= scale.max_score) add("", "scale min_score must be below max_score");

  // Sequences: shape, shared dimensionality, probability range.
  const std::vector<std::string>* reference_names = nullptr;
  std::size_t reference_dim = 0;
  for (const ExpressionSequence& seq : dataset.sequences) {
    if (seq.frame_count() == 0 || seq.dim() == 0) {
      add(seq.video_id, "sequence is empty");
      continue;
    }
    if (seq.expression_names.size() != seq.dim()) {
      add(seq.video_id, "expression name count does not match columns");
    }
    if (reference_names == nullptr) {
      reference_names = &seq.expression_names;
      reference_dim = seq.dim();
    } else {
      if (seq.dim() != reference_dim) {
        add(seq.video_id, "sequence dimensionality differs from the rest of the dataset");
      } else if (seq.expression_names != *reference_names) {
        add(seq.video_id, "expression names differ from the rest of the dataset");
      }
    }
    if (min_detection_ratio > 0.0 && seq.detected_frame_ratio < min_detection_ratio) {
      add(seq.video_id, "detected-frame ratio " + std::to_string(seq.detected_frame_ratio) +
                            " below required " + std::to_string(min_detection_ratio));
    }
    for (std::size_t t = 0; t < seq.frame_count(); ++t) {
      for (std::size_t j = 0; j < seq.dim(); ++j) {
        const double v = seq.frames(t, j);
        if (std::isnan(v)) {
          add(seq.video_id, "NaN probability at frame " + std::to_string(t) +
                                ", expression " + std::to_string(j));
        } else if (v < 0.0 || v > 1.0) {
          add(seq.video_id, "probability outside [0,1] at frame " + std::to_string(t) +
                                ", expression " + std::to_string(j));
        }
      }
    }
  }

  // Records: score ranges and symptom counts.
  for (const SymptomRecord& rec : dataset.records) {
    if (rec.symptom_scores.size() != scale.symptom_count()) {
      add(rec.video_id, "record has " + std::to_string(rec.symptom_scores.size()) +
                            " scores, scale has " + std::to_string(scale.symptom_count()) +
                            " symptoms");
    }
    const std::size_t w_max = std::min(rec.symptom_scores.size(), scale.symptom_count());
    for (std::size_t w = 0; w < w_max; ++w) {
      const int s = rec.symptom_scores[w];
      if (s < scale.min_score || s > scale.max_score) {
        add(rec.video_id, "symptom '" + scale.symptom_names[w] + "' score " +
                              std::to_string(s) + " outside [" +
                              std::to_string(scale.min_score) + "," +
                              std::to_string(scale.max_score) + "]");
      }
    }
    if (rec.total_score < scale.total_min || rec.total_score > scale.total_max) {
      add(rec.video_id, "total score " + std::to_string(rec.total_score) + " outside [" +
                            std::to_string(scale.total_min) + "," +
                            std::to_string(scale.total_max) + "]");
    }
  }

  // One-to-one correspondence by video id.
  std::map<std::string, int> seq_ids;
  std::map<std::string, int> rec_ids;
  for (const ExpressionSequence& seq : dataset.sequences) ++seq_ids[seq.video_id];
  for (const SymptomRecord& rec : dataset.records) ++rec_ids[rec.video_id];
  for (const auto& [id, count] : seq_ids) {
    if (count > 1) add(id, "duplicate sequence id");
    if (!rec_ids.contains(id)) add(id, "sequence has no matching record");
  }
  for (const auto& [id, count] : rec_ids) {
    if (count > 1) add(id, "duplicate record id");
    if (!seq_ids.contains(id)) add(id, "record has no matching sequence");
  }

  return issues;
}

ExpressionSequence normalize_sequence(const ExpressionSequence& seq) {
  const std::size_t t_count = seq.frame_count();
  const std::size_t n = seq.dim();
  if (t_count == 0 || n == 0) {
    throw std::invalid_argument("normalize_sequence: empty sequence");
  }
  ExpressionSequence out = seq;
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) sum += seq.frames(t, j);
    const double mean = sum / static_cast<double>(t_count);
    for (std::size_t t = 0; t < t_count; ++t) out.frames(t, j) = seq.frames(t, j) - mean;
  }
  return out;
}

void sort_by_video_id(LabeledDataset& dataset) {
  std::sort(dataset.sequences.begin(), dataset.sequences.end(),
            [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  std::sort(dataset.records.begin(), dataset.records.end(),
            [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
}

}  // namespace fvscore
