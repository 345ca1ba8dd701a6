#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fvscore/stats.hpp"
#include "test_util.hpp"

using namespace fvscore;

namespace {

// Brute-force average ranks: for each element, 1 + count(smaller) plus half
// the remaining tied block.
std::vector<double> brute_force_ranks(const std::vector<double>& x) {
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t smaller = 0;
    std::size_t equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++smaller;
      if (x[j] == x[i]) ++equal;
    }
    ranks[i] = static_cast<double>(smaller) + 0.5 * static_cast<double>(equal - 1) + 1.0;
  }
  return ranks;
}

double two_pass_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0.0L;
  long double my = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0.0L, sxx = 0.0L, syy = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / sqrtl(sxx * syy));
}

}  // namespace

TEST_CASE("significance bands match the star convention") {
  CHECK(classify_significance(0.0005) == Significance::kP001);
  CHECK(classify_significance(0.001) == Significance::kP001);
  CHECK(classify_significance(0.0011) == Significance::kP01);
  CHECK(classify_significance(0.01) == Significance::kP01);
  CHECK(classify_significance(0.011) == Significance::kNone);
  CHECK(classify_significance(0.9) == Significance::kNone);
}

TEST_CASE("spearman is exact on the rank-difference oracle case") {
  // d = (-1, 1, -1, 1, 0), sum d^2 = 4, rho = 1 - 6*4/(5*24) = 0.8.
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{2, 1, 4, 3, 5};
  const CorrelationCell cell = spearman(x, y);
  CHECK(std::fabs(cell.rho - 0.8) < 1e-12);
}

TEST_CASE("spearman on monotone data") {
  const std::vector<double> x{0.1, 0.7, 1.4, 3.0, 9.2};
  std::vector<double> y;
  for (double v : x) y.push_back(std::exp(v));  // strictly monotone transform
  const CorrelationCell up = spearman(x, y);
  CHECK(up.rho == doctest::Approx(1.0));
  CHECK(up.p_value == doctest::Approx(0.0));
  CHECK(up.significance == Significance::kP001);

  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(spearman(x, neg).rho == doctest::Approx(-1.0));
}

TEST_CASE("spearman matches the average-rank brute force on every small tied input") {
  // Exhaustive: all vectors of length 3..6 over {1,2,3}, paired against a
  // fixed second vector pattern, skipping undefined (constant) inputs.
  for (std::size_t len = 3; len <= 6; ++len) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < len; ++i) total *= 3;
    std::vector<double> y(len);
    for (std::size_t i = 0; i < len; ++i) y[i] = static_cast<double>((7 * i + 3) % 5);
    for (std::size_t code = 0; code < total; ++code) {
      std::vector<double> x(len);
      std::size_t c = code;
      for (std::size_t i = 0; i < len; ++i) {
        x[i] = static_cast<double>(c % 3 + 1);
        c /= 3;
      }
      const bool constant = std::all_of(x.begin(), x.end(),
                                        [&x](double v) { return v == x[0]; });
      if (constant) {
        CHECK_THROWS_AS(spearman(x, y), std::domain_error);
        continue;
      }
      const double want = two_pass_pearson(brute_force_ranks(x), brute_force_ranks(y));
      CHECK(std::fabs(spearman(x, y).rho - want) < 1e-12);
    }
  }
}

TEST_CASE("spearman is invariant under strictly monotone transforms") {
  std::mt19937_64 rng(64);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 5 + rng() % 30;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = dist(rng);
      y[i] = dist(rng);
    }
    const double base = spearman(x, y).rho;
    std::vector<double> tx(n), ty(n);
    for (std::size_t i = 0; i < n; ++i) {
      tx[i] = std::exp(0.5 * x[i]);          // strictly increasing
      ty[i] = std::atan(y[i]) * 3.0 + 11.0;  // strictly increasing
    }
    CHECK(std::fabs(spearman(tx, ty).rho - base) < 1e-12);
  }
}

TEST_CASE("spearman preconditions") {
  const std::vector<double> tiny{1.0, 2.0};
  CHECK_THROWS_AS(spearman(tiny, tiny), std::invalid_argument);
  const std::vector<double> flat{2.0, 2.0, 2.0};
  const std::vector<double> vary{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(spearman(flat, vary), std::domain_error);
}

TEST_CASE("pearson affine behaviour and oracle equivalence") {
  const std::vector<double> x{0.0, 1.0, 2.0, 5.0};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 1.0);
  CHECK(pearson(x, y) == doctest::Approx(1.0));
  std::vector<double> z;
  for (double v : x) z.push_back(-3.0 * v);
  CHECK(pearson(x, z) == doctest::Approx(-1.0));

  std::mt19937_64 rng(525);
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a(20), b(20);
    for (std::size_t i = 0; i < 20; ++i) {
      a[i] = dist(rng);
      b[i] = dist(rng);
    }
    CHECK(std::fabs(pearson(a, b) - two_pass_pearson(a, b)) < 1e-12);
  }

  const std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
  CHECK_THROWS_AS(pearson(flat, x), std::domain_error);
}

TEST_CASE("mae and rmse spot values") {
  const std::vector<double> p{1.0, 3.0};
  const std::vector<double> t{2.0, 1.0};
  CHECK(mae(p, p) == doctest::Approx(0.0));
  CHECK(rmse(p, p) == doctest::Approx(0.0));
  CHECK(mae(p, t) == doctest::Approx(1.5));
  CHECK(rmse(p, t) == doctest::Approx(std::sqrt(2.5)));
  const std::vector<double> bad{1.0};
  CHECK_THROWS_AS(mae(p, bad), std::invalid_argument);
}

TEST_CASE("rmse dominates mae") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> dist(-5.0, 5.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = dist(rng);
      t[i] = dist(rng);
    }
    CHECK(rmse(p, t) >= mae(p, t) - 1e-12);
  }
}

TEST_CASE("correlation_table structure and self-correlation") {
  const std::size_t v_count = 24;
  const std::size_t n = 3;
  const SymptomScaleSpec scale = SymptomScaleSpec::panss_neg();
  std::mt19937_64 rng(9001);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix freq(v_count, n);
  for (double& f : freq.storage()) f = unit(rng);

  std::vector<SymptomRecord> records(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    records[v].video_id = "v" + std::to_string(v);
    // First symptom tracks the first expression frequency exactly.
    records[v].symptom_scores = {
        1 + static_cast<int>(freq(v, 0) * 6.0),
        1 + static_cast<int>(rng() % 7),
        1 + static_cast<int>(rng() % 7),
    };
    records[v].total_score = records[v].symptom_scores[0] +
                             records[v].symptom_scores[1] + records[v].symptom_scores[2];
  }
  // Make the tracked column collision-free so ranks agree exactly.
  std::vector<double> column(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    records[v].symptom_scores[0] = static_cast<int>(v);
    column[v] = static_cast<double>(v) * 0.01;
    freq(v, 0) = column[v];
  }

  const CorrelationTable table =
      correlation_table(freq, records, scale, {"e0", "e1", "e2"});
  REQUIRE(table.cells.size() == n);
  for (const auto& row : table.cells) REQUIRE(row.size() == scale.symptom_count() + 1);
  CHECK(table.column_names.back() == "total");
  CHECK(table.cells[0][0].rho == doctest::Approx(1.0));
  CHECK(table.cells[0][0].significance == Significance::kP001);
}

TEST_CASE("correlation_table on independent random columns stays weak") {
  const std::size_t v_count = 50;
  const SymptomScaleSpec scale = SymptomScaleSpec::cains_exp();
  std::mt19937_64 rng(515);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix freq(v_count, 2);
  for (double& f : freq.storage()) f = unit(rng);
  std::vector<SymptomRecord> records(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    records[v].video_id = "v" + std::to_string(v);
    for (std::size_t w = 0; w < 4; ++w) {
      records[v].symptom_scores.push_back(static_cast<int>(rng() % 5));
    }
    records[v].total_score = 0;
    for (int s : records[v].symptom_scores) records[v].total_score += s;
  }
  const CorrelationTable table = correlation_table(freq, records, scale, {"e0", "e1"});
  for (const auto& row : table.cells) {
    for (const CorrelationCell& cell : row) CHECK(std::fabs(cell.rho) < 0.5);
  }
}

TEST_CASE("correlation_table honors per-expression retained cohorts") {
  const SymptomScaleSpec scale = SymptomScaleSpec::panss_neg();
  Matrix freq(6, 1);
  std::vector<SymptomRecord> records(6);
  for (std::size_t v = 0; v < 6; ++v) {
    freq(v, 0) = static_cast<double>(v);
    records[v].video_id = "v" + std::to_string(v);
    records[v].symptom_scores = {static_cast<int>(v + 1), static_cast<int>(6 - v),
                                 static_cast<int>(v % 3 + 1)};
    records[v].total_score = records[v].symptom_scores[0] + records[v].symptom_scores[1] +
                             records[v].symptom_scores[2];
  }
  // Drop the last video; correlation must still be perfect on the subset.
  const std::vector<std::vector<std::size_t>> retained{{0, 1, 2, 3, 4}};
  const CorrelationTable table = correlation_table(freq, records, scale, {"e0"}, retained);
  CHECK(table.cells[0][0].rho == doctest::Approx(1.0));
}
