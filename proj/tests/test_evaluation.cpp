#include <cmath>
#include <numeric>
#include <vector>

#include "catch_amalgamated.hpp"
#include "sure/evaluation.hpp"
#include "sure/random.hpp"

using sure::Rng;
using sure::Task;
using sure::TaskMetrics;
using sure::Tensor;

namespace {

Tensor one_hot(const std::vector<std::size_t>& ids, std::size_t k) {
  Tensor t(ids.size(), k);
  for (std::size_t i = 0; i < ids.size(); ++i) t(i, ids[i]) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("task metrics") {
  SECTION("perfect regression") {
    Tensor y = Tensor::column({0.5, -1.0, 2.0, 0.0});
    TaskMetrics m = sure::task_metrics(Task::regression, y, y);
    CHECK(m.mae == 0.0);
    CHECK_THAT(m.corr, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("constant shift keeps the correlation") {
    Tensor y = Tensor::column({0.5, -1.0, 2.0, 0.0});
    Tensor p = y;
    for (double& v : p.values()) v += 0.7;
    TaskMetrics m = sure::task_metrics(Task::regression, p, y);
    CHECK_THAT(m.mae, Catch::Matchers::WithinAbs(0.7, 1e-12));
    CHECK_THAT(m.corr, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("perfect classification") {
    Tensor labels = one_hot({0, 1, 2, 1}, 3);
    TaskMetrics m = sure::task_metrics(Task::classification, labels, labels);
    CHECK(m.accuracy == 1.0);
    CHECK(m.macro_f1 == 1.0);
  }
  SECTION("two-class confusion example") {
    Tensor labels = one_hot({0, 0, 1, 1}, 2);
    Tensor preds = one_hot({0, 1, 1, 1}, 2);
    TaskMetrics m = sure::task_metrics(Task::classification, preds, labels);
    CHECK_THAT(m.accuracy, Catch::Matchers::WithinAbs(0.75, 1e-12));
    CHECK_THAT(m.macro_f1,
               Catch::Matchers::WithinAbs((2.0 / 3.0 + 4.0 / 5.0) / 2.0,
                                          1e-12));
  }
  SECTION("empty class contributes zero f1") {
    Tensor labels = one_hot({0, 0, 1}, 3);  // class 2 never appears
    Tensor preds = one_hot({0, 0, 1}, 3);
    TaskMetrics m = sure::task_metrics(Task::classification, preds, labels);
    CHECK_THAT(m.macro_f1, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  }
  SECTION("length mismatch rejected") {
    CHECK_THROWS_AS(
        sure::task_metrics(Task::regression, Tensor(3, 1), Tensor(4, 1)),
        std::invalid_argument);
  }
}

TEST_CASE("uncertainty correlation") {
  std::vector<double> e{0.1, 0.5, 0.9, 0.3};
  SECTION("identical vectors") {
    CHECK_THAT(sure::uncertainty_corr(e, e).r,
               Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("negated relation") {
    std::vector<double> s(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) s[i] = 1.0 - e[i];
    CHECK_THAT(sure::uncertainty_corr(s, e).r,
               Catch::Matchers::WithinAbs(-1.0, 1e-12));
  }
  SECTION("independent draws are near zero") {
    Rng rng(4);
    std::vector<double> a(10000);
    std::vector<double> b(10000);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.uniform(0.0, 1.0);
      b[i] = rng.uniform(0.0, 1.0);
    }
    CHECK(std::abs(sure::uncertainty_corr(a, b).r) < 0.05);
  }
  SECTION("degenerate flagged") {
    std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
    CHECK(sure::uncertainty_corr(flat, e).degenerate);
  }
}

TEST_CASE("calibration") {
  Rng rng(9);
  std::vector<double> sigma2(50);
  std::vector<double> errors(50);
  for (std::size_t i = 0; i < 50; ++i) {
    sigma2[i] = rng.uniform(0.1, 2.0);
    errors[i] = rng.uniform(0.0, 3.0);
  }
  sure::CalibrationStats stats = sure::calibration_stats(errors, sigma2);

  SECTION("already standardized input is unchanged") {
    std::vector<double> rescaled = sure::calibrate(sigma2, stats);
    sure::CalibrationStats self = stats;
    self.mean_err = stats.mean_sigma;
    self.sd_err = stats.sd_sigma;
    std::vector<double> same = sure::calibrate(sigma2, self);
    for (std::size_t i = 0; i < sigma2.size(); ++i) {
      CHECK_THAT(same[i], Catch::Matchers::WithinAbs(sigma2[i], 1e-12));
    }
    CHECK(rescaled.size() == sigma2.size());
  }
  SECTION("ordering is preserved") {
    std::vector<double> rescaled = sure::calibrate(sigma2, stats);
    std::vector<std::size_t> order_a(50);
    std::vector<std::size_t> order_b(50);
    std::iota(order_a.begin(), order_a.end(), 0);
    std::iota(order_b.begin(), order_b.end(), 0);
    std::sort(order_a.begin(), order_a.end(),
              [&](std::size_t i, std::size_t j) {
                return sigma2[i] < sigma2[j];
              });
    std::sort(order_b.begin(), order_b.end(),
              [&](std::size_t i, std::size_t j) {
                return rescaled[i] < rescaled[j];
              });
    CHECK(order_a == order_b);
  }
  SECTION("never negative") {
    sure::CalibrationStats harsh = stats;
    harsh.mean_err = -10.0;  // forces the affine map below zero
    std::vector<double> rescaled = sure::calibrate(sigma2, harsh);
    for (double v : rescaled) CHECK(v >= 0.0);
  }
  SECTION("correlation metrics unchanged by calibration") {
    // Stats chosen so the affine map stays positive; clipping would break
    // pure affine invariance.
    std::vector<double> hi_err(50);
    for (std::size_t i = 0; i < 50; ++i) hi_err[i] = errors[i] + 3.0;
    sure::CalibrationStats safe = sure::calibration_stats(hi_err, sigma2);
    std::vector<double> rescaled = sure::calibrate(sigma2, safe);
    for (double v : rescaled) REQUIRE(v > 0.0);
    const double before = sure::uncertainty_corr(sigma2, hi_err).r;
    const double after = sure::uncertainty_corr(rescaled, hi_err).r;
    CHECK(std::abs(before - after) <= 1e-12);
  }
  SECTION("zero spread rejected") {
    sure::CalibrationStats bad = stats;
    bad.sd_sigma = 0.0;
    CHECK_THROWS_AS(sure::calibrate(sigma2, bad), std::invalid_argument);
  }
}

TEST_CASE("uncertainty calibration error") {
  SECTION("perfect calibration scores zero") {
    Rng rng(2);
    std::vector<double> v(40);
    for (double& x : v) x = rng.uniform(0.0, 2.0);
    CHECK(sure::uce(v, v) == 0.0);
  }
  SECTION("constant offset is reported exactly") {
    Rng rng(3);
    std::vector<double> sigma2(60);
    std::vector<double> errors(60);
    for (std::size_t i = 0; i < 60; ++i) {
      sigma2[i] = rng.uniform(0.0, 2.0);
      errors[i] = sigma2[i] + 0.25;
    }
    CHECK_THAT(sure::uce(sigma2, errors),
               Catch::Matchers::WithinAbs(0.25, 1e-12));
  }
  SECTION("always non-negative") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> sigma2(30);
      std::vector<double> errors(30);
      for (std::size_t i = 0; i < 30; ++i) {
        sigma2[i] = rng.uniform(0.0, 2.0);
        errors[i] = rng.uniform(0.0, 2.0);
      }
      CHECK(sure::uce(sigma2, errors) >= 0.0);
    }
  }
  SECTION("fewer samples than bins rejected") {
    std::vector<double> v{1.0, 2.0};
    CHECK_THROWS_AS(sure::uce(v, v, 10), std::invalid_argument);
  }
}

TEST_CASE("deferral analysis") {
  SECTION("oracle uncertainty separates perfectly") {
    // 60% correct with uncertainty 0, 40% incorrect with uncertainty 1.
    std::vector<double> sigma2;
    std::vector<bool> correct;
    for (int i = 0; i < 60; ++i) {
      sigma2.push_back(0.0);
      correct.push_back(true);
    }
    for (int i = 0; i < 40; ++i) {
      sigma2.push_back(1.0);
      correct.push_back(false);
    }
    std::vector<double> qs{0.5};  // threshold lands at 0, separating
    auto rows = sure::deferral_analysis(sigma2, correct, qs);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].threshold == 0.0);
    CHECK(rows[0].tdr_recall.value() == 1.0);
    CHECK(rows[0].fdr_recall.value() == 0.0);
    CHECK(rows[0].retained_accuracy.value() == 1.0);
    CHECK(rows[0].tdr_precision.value() == 1.0);
    CHECK(rows[0].fdr_precision.value() == 0.0);
  }
  SECTION("uniform uncertainty defers the expected fraction") {
    Rng rng(5);
    const std::size_t n = 10000;
    std::vector<double> sigma2(n);
    std::vector<bool> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      sigma2[i] = rng.uniform(0.0, 1.0);
      correct[i] = rng.uniform() < 0.7;
    }
    std::vector<double> qs{0.65};
    auto rows = sure::deferral_analysis(sigma2, correct, qs);
    CHECK(std::abs(rows[0].deferred_fraction - 0.35) < 0.02);
    CHECK(std::abs(rows[0].tdr_recall.value() - rows[0].fdr_recall.value()) <
          0.05);
  }
  SECTION("constant uncertainty defers nothing") {
    std::vector<double> sigma2(50, 0.5);
    std::vector<bool> correct(50, true);
    std::vector<double> qs{0.2, 0.5, 0.9};
    auto rows = sure::deferral_analysis(sigma2, correct, qs);
    for (const auto& row : rows) {
      CHECK(row.deferred_fraction == 0.0);
      CHECK_FALSE(row.tdr_precision.has_value());
      CHECK_FALSE(row.fdr_precision.has_value());
      CHECK(row.retained_accuracy.value() == 1.0);
    }
  }
  SECTION("deferred fraction is non-increasing in the quantile") {
    Rng rng(6);
    std::vector<double> sigma2(500);
    std::vector<bool> correct(500);
    for (std::size_t i = 0; i < 500; ++i) {
      sigma2[i] = rng.uniform(0.0, 2.0);
      correct[i] = rng.uniform() < 0.5;
    }
    std::vector<double> qs;
    for (double q = 0.05; q < 0.99; q += 0.05) qs.push_back(q);
    auto rows = sure::deferral_analysis(sigma2, correct, qs);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i].deferred_fraction <= rows[i - 1].deferred_fraction);
    }
  }
  SECTION("oracle tdr dominates fdr at every threshold") {
    Rng rng(7);
    std::vector<double> sigma2;
    std::vector<bool> correct;
    for (int i = 0; i < 200; ++i) {
      const bool ok = rng.uniform() < 0.6;
      correct.push_back(ok);
      sigma2.push_back(ok ? rng.uniform(0.0, 0.4) : rng.uniform(0.6, 1.0));
    }
    std::vector<double> qs{0.1, 0.3, 0.5, 0.7, 0.9};
    auto rows = sure::deferral_analysis(sigma2, correct, qs);
    for (const auto& row : rows) {
      if (row.tdr_recall && row.fdr_recall) {
        CHECK(*row.tdr_recall >= *row.fdr_recall);
      }
    }
  }
  SECTION("quantiles outside (0,1) rejected") {
    std::vector<double> sigma2{1.0, 2.0};
    std::vector<bool> correct{true, false};
    std::vector<double> qs{1.0};
    CHECK_THROWS_AS(sure::deferral_analysis(sigma2, correct, qs),
                    std::invalid_argument);
  }
}
