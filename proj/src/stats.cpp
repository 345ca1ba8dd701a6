#include "fvscore/stats.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fvscore {

Significance classify_significance(double p_value) {
  if (p_value <= 0.001) return Significance::kP001;
  if (p_value <= 0.01) return Significance::kP01;
  return Significance::kNone;
}

std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });

  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Equal values share the mean of the 1-based ranks they occupy.
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = rank;
    i = j + 1;
  }
  return ranks;
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, std::size_t min_n,
                const char* name) {
  if (x.size() != y.size()) {
    throw std::invalid_argument(std::string(name) + ": length mismatch");
  }
  if (x.size() < min_n) {
    throw std::invalid_argument(std::string(name) + ": needs at least " +
                                std::to_string(min_n) + " observations");
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) {
      throw std::invalid_argument(std::string(name) + ": NaN input");
    }
  }
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 2, "pearson");
  const double n = static_cast<double>(x.size());
  double mean_x = 0.0;
  double mean_y = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mean_x += x[i];
    mean_y += y[i];
  }
  mean_x /= n;
  mean_y /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mean_x;
    const double dy = y[i] - mean_y;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw std::domain_error("pearson: correlation undefined for constant input");
  }
  return sxy / std::sqrt(sxx * syy);
}

CorrelationCell spearman(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 3, "spearman");
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);

  double rho;
  try {
    rho = pearson(rx, ry);
  } catch (const std::domain_error&) {
    throw std::domain_error("spearman: correlation undefined for constant input");
  }
  rho = std::clamp(rho, -1.0, 1.0);

  CorrelationCell cell;
  cell.rho = rho;
  const double dof = static_cast<double>(x.size()) - 2.0;
  const double denom = 1.0 - rho * rho;
  if (denom <= 0.0) {
    cell.p_value = 0.0;
  } else {
    // Two-sided t approximation with n - 2 degrees of freedom.
    const double t = rho * std::sqrt(dof / denom);
    const boost::math::students_t_distribution<double> dist(dof);
    cell.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
  }
  cell.significance = classify_significance(cell.p_value);
  return cell;
}

double mae(std::span<const double> predictions, std::span<const double> targets) {
  check_pair(predictions, targets, 1, "mae");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    sum += std::fabs(predictions[i] - targets[i]);
  }
  return sum / static_cast<double>(predictions.size());
}

double rmse(std::span<const double> predictions, std::span<const double> targets) {
  check_pair(predictions, targets, 1, "rmse");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(predictions.size()));
}

CorrelationTable correlation_table(
    const Matrix& frequencies, const std::vector<SymptomRecord>& records,
    const SymptomScaleSpec& scale, const std::vector<std::string>& expression_names,
    const std::vector<std::vector<std::size_t>>& retained_per_expression) {
  const std::size_t v_count = frequencies.rows();
  const std::size_t n = frequencies.cols();
  const std::size_t w_count = scale.symptom_count();
  if (records.size() != v_count) {
    throw std::invalid_argument("correlation_table: record count does not match frequencies");
  }
  if (expression_names.size() != n) {
    throw std::invalid_argument("correlation_table: expression name count mismatch");
  }
  if (!retained_per_expression.empty() && retained_per_expression.size() != n) {
    throw std::invalid_argument("correlation_table: retained cohort count mismatch");
  }

  CorrelationTable table;
  table.expression_names = expression_names;
  table.column_names = scale.symptom_names;
  table.column_names.push_back("total");
  table.cells.resize(n);

  std::vector<std::size_t> everyone(v_count);
  std::iota(everyone.begin(), everyone.end(), 0);

  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<std::size_t>& retained =
        retained_per_expression.empty() ? everyone : retained_per_expression[i];
    std::vector<double> freq;
    freq.reserve(retained.size());
    for (std::size_t v : retained) freq.push_back(frequencies(v, i));

    table.cells[i].resize(w_count + 1);
    std::vector<double> scores(retained.size());
    for (std::size_t w = 0; w < w_count; ++w) {
      for (std::size_t m = 0; m < retained.size(); ++m) {
        scores[m] = static_cast<double>(records[retained[m]].symptom_scores[w]);
      }
      table.cells[i][w] = spearman(freq, scores);
    }
    for (std::size_t m = 0; m < retained.size(); ++m) {
      scores[m] = static_cast<double>(records[retained[m]].total_score);
    }
    table.cells[i][w_count] = spearman(freq, scores);
  }
  return table;
}

}  // namespace fvscore
