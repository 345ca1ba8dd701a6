#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fvscore/matrix.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

enum class Significance { kNone, kP01, kP001 };

// kP001 iff p <= 0.001, kP01 iff 0.001 < p <= 0.01.
Significance classify_significance(double p_value);

struct CorrelationCell {
  double rho = 0.0;
  double p_value = 1.0;
  Significance significance = Significance::kNone;
};

// 1-based ranks with ties assigned the average of the ranks they span.
std::vector<double> average_ranks(std::span<const double> x);

// Rank correlation with average ranks for ties. The p-value uses the
// two-sided t approximation with n - 2 degrees of freedom; |rho| = 1 gives
// p = 0. Needs n >= 3; throws on constant input (undefined correlation).
CorrelationCell spearman(std::span<const double> x, std::span<const double> y);

// Product-moment correlation. Needs n >= 2; throws on constant input.
double pearson(std::span<const double> x, std::span<const double> y);

double mae(std::span<const double> predictions, std::span<const double> targets);
double rmse(std::span<const double> predictions, std::span<const double> targets);

// Expression-by-symptom correlation grid; the last column correlates against
// the scale total.
struct CorrelationTable {
  std::vector<std::string> expression_names;        // rows
  std::vector<std::string> column_names;            // symptoms, then "total"
  std::vector<std::vector<CorrelationCell>> cells;  // N x (W + 1)
};

// frequencies is V x N (videos by expressions), aligned with records.
// retained_per_expression holds, for each expression, the video indices that
// survived the outlier band filter; an empty outer vector keeps everything.
// The same retained cohort is used for that expression's symptom and total
// cells.
CorrelationTable correlation_table(
    const Matrix& frequencies, const std::vector<SymptomRecord>& records,
    const SymptomScaleSpec& scale, const std::vector<std::string>& expression_names,
    const std::vector<std::vector<std::size_t>>& retained_per_expression = {});

}  // namespace fvscore
