#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fvscore/types.hpp"
#include "test_util.hpp"

using namespace fvscore;

namespace {

LabeledDataset two_video_dataset() {
  LabeledDataset ds;
  ds.scale = SymptomScaleSpec::panss_neg();
  std::mt19937_64 rng(11);
  for (int v = 0; v < 2; ++v) {
    ExpressionSequence seq = fvtest::random_sequence(rng, 20, 3, "vid" + std::to_string(v));
    ds.sequences.push_back(seq);
    SymptomRecord rec;
    rec.video_id = seq.video_id;
    rec.symptom_scores = {2, 3, 4};
    rec.total_score = 9;
    ds.records.push_back(rec);
  }
  return ds;
}

}  // namespace

TEST_CASE("scale presets") {
  const SymptomScaleSpec panss = SymptomScaleSpec::panss_neg();
  CHECK(panss.symptom_count() == 3);
  CHECK(panss.min_score == 1);
  CHECK(panss.max_score == 7);
  CHECK(panss.total_min == 3);
  CHECK(panss.total_max == 21);

  const SymptomScaleSpec cains = SymptomScaleSpec::cains_exp();
  CHECK(cains.symptom_count() == 4);
  CHECK(cains.min_score == 0);
  CHECK(cains.max_score == 4);
  CHECK(cains.total_max == 16);

  CHECK_THROWS_AS(SymptomScaleSpec::preset("BPRS"), std::invalid_argument);
}

TEST_CASE("validate_dataset accepts a well-formed dataset") {
  CHECK(validate_dataset(two_video_dataset()).empty());
}

TEST_CASE("validate_dataset flags out-of-range scores naming the symptom") {
  LabeledDataset ds = two_video_dataset();
  ds.records[1].symptom_scores[1] = 9;  // PANSS items top out at 7
  const auto issues = validate_dataset(ds);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].video_id == "vid1");
  CHECK(issues[0].message.find("poor_rapport") != std::string::npos);
}

TEST_CASE("validate_dataset flags broken correspondence") {
  LabeledDataset ds = two_video_dataset();
  ds.records.pop_back();
  const auto issues = validate_dataset(ds);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].video_id == "vid1");
  CHECK(issues[0].message.find("no matching record") != std::string::npos);
}

TEST_CASE("validate_dataset flags NaN and out-of-range probabilities") {
  LabeledDataset ds = two_video_dataset();
  ds.sequences[0].frames(3, 1) = std::numeric_limits<double>::quiet_NaN();
  ds.sequences[1].frames(0, 0) = 1.25;
  const auto issues = validate_dataset(ds);
  REQUIRE(issues.size() == 2);
  CHECK(issues[0].message.find("NaN") != std::string::npos);
  CHECK(issues[1].message.find("outside [0,1]") != std::string::npos);
}

TEST_CASE("normalize_sequence zeroes a constant column") {
  ExpressionSequence seq;
  seq.video_id = "c";
  seq.expression_names = {"e0"};
  seq.frames = Matrix(3, 1, 0.3);
  const ExpressionSequence out = normalize_sequence(seq);
  for (std::size_t t = 0; t < 3; ++t) CHECK(out.frames(t, 0) == doctest::Approx(0.0));
}

TEST_CASE("normalize_sequence subtracts the column mean") {
  ExpressionSequence seq;
  seq.video_id = "p";
  seq.expression_names = {"e0"};
  seq.frames = Matrix(2, 1);
  seq.frames(0, 0) = 0.0;
  seq.frames(1, 0) = 1.0;
  const ExpressionSequence out = normalize_sequence(seq);
  CHECK(out.frames(0, 0) == doctest::Approx(-0.5));
  CHECK(out.frames(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("normalize_sequence makes every column sum to zero") {
  std::mt19937_64 rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t t = 1 + rng() % 200;
    const std::size_t n = 1 + rng() % 12;
    const ExpressionSequence seq = fvtest::random_sequence(rng, t, n);
    const ExpressionSequence out = normalize_sequence(seq);
    REQUIRE(out.frames.rows() == t);
    REQUIRE(out.frames.cols() == n);
    CHECK(out.expression_names == seq.expression_names);
    // Oracle: independent column sums over the output.
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t i = 0; i < t; ++i) sum += out.frames(i, j);
      CHECK(std::fabs(sum) <= 1e-9 * static_cast<double>(t));
    }
  }
}

TEST_CASE("normalize_sequence is idempotent within 1e-9") {
  std::mt19937_64 rng(7);
  const ExpressionSequence seq = fvtest::random_sequence(rng, 64, 5);
  const ExpressionSequence once = normalize_sequence(seq);
  const ExpressionSequence twice = normalize_sequence(once);
  for (std::size_t t = 0; t < seq.frame_count(); ++t) {
    for (std::size_t j = 0; j < seq.dim(); ++j) {
      CHECK(std::fabs(once.frames(t, j) - twice.frames(t, j)) < 1e-9);
    }
  }
}

TEST_CASE("normalize_sequence rejects an empty sequence") {
  ExpressionSequence seq;
  CHECK_THROWS_AS(normalize_sequence(seq), std::invalid_argument);
}

TEST_CASE("detection completeness check is off by default and opt-in") {
  LabeledDataset ds = two_video_dataset();
  ds.sequences[0].detected_frame_ratio = 0.6;
  CHECK(validate_dataset(ds).empty());
  const auto issues = validate_dataset(ds, 0.9);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].video_id == "vid0");
  CHECK(issues[0].message.find("detected-frame ratio") != std::string::npos);
}

TEST_CASE("sort_by_video_id orders both sides") {
  LabeledDataset ds = two_video_dataset();
  std::swap(ds.sequences[0], ds.sequences[1]);
  sort_by_video_id(ds);
  CHECK(ds.sequences[0].video_id == "vid0");
  CHECK(ds.records[0].video_id == "vid0");
}
