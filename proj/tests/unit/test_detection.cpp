#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pairguard/detection.hpp"
#include "pairguard/rng.hpp"
#include "test_util.hpp"

using namespace pairguard;

namespace {

ScoreSet genuine(std::vector<double> v) { return ScoreSet(Population::Genuine, std::move(v)); }

std::vector<double> tenths() {
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(i / 10.0);
  return v;
}

double fraction_below(const std::vector<double>& v, double theta) {
  return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double s) { return s < theta; })) /
         static_cast<double>(v.size());
}

std::vector<double> random_scores(Stream& s, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = std::clamp(0.7 + 0.1 * s.normal(), -1.0, 1.0);
  return v;
}

}  // namespace

TEST(Calibrate, Examples) {
  const auto p = calibrate(genuine(tenths()), {0.1, 0.25, 0.05});
  EXPECT_DOUBLE_EQ(p.threshold(0.1), 0.2);
  EXPECT_DOUBLE_EQ(p.threshold(0.25), 0.3);
  // Below 1/n nothing may be flagged; the largest such threshold is the
  // minimum score, which flags exactly what -1 would.
  EXPECT_DOUBLE_EQ(p.threshold(0.05), 0.1);
  EXPECT_EQ(fraction_below(tenths(), p.threshold(0.05)), fraction_below(tenths(), -1.0));
  EXPECT_EQ(p.source().count, 10u);
}

TEST(Calibrate, TiedScores) {
  const auto p = calibrate(genuine({0.9, 0.9, 0.9, 0.9}), {0.01, 0.5});
  EXPECT_DOUBLE_EQ(p.threshold(0.01), 0.9);
  EXPECT_DOUBLE_EQ(p.threshold(0.5), 0.9);
  const auto q = calibrate(genuine({0.1, 0.5, 0.5, 0.5}), {0.3});
  EXPECT_DOUBLE_EQ(q.threshold(0.3), 0.5);
}

TEST(Calibrate, Errors) {
  EXPECT_PG_ERROR(calibrate(genuine({}), {0.1}), ErrorCode::EmptyScores);
  EXPECT_PG_ERROR(calibrate(genuine({0.5}), {0.0}), ErrorCode::BadTarget);
  EXPECT_PG_ERROR(calibrate(genuine({0.5}), {1.0}), ErrorCode::BadTarget);
  const auto p = calibrate(genuine({0.5}), {0.1});
  EXPECT_PG_ERROR(p.threshold(0.2), ErrorCode::UnknownTarget);
}

TEST(Calibrate, EmpiricalFnrNeverExceedsTargetAndIsMonotone) {
  Stream s(1);
  const std::vector<double> targets{0.001, 0.01, 0.05, 0.1, 0.3};
  for (int t = 0; t < 50; ++t) {
    const auto v = random_scores(s, 1 + s.below(500));
    const auto p = calibrate(genuine(v), targets);
    double prev = -2.0;
    for (double target : targets) {
      const double theta = p.threshold(target);
      EXPECT_LE(fraction_below(v, theta), target);
      EXPECT_GE(theta, prev);
      prev = theta;
      // Maximality: the next score above theta would overshoot.
      for (double x : v) {
        if (x > theta) EXPECT_GT(fraction_below(v, x), target);
      }
    }
  }
}

TEST(Calibrate, InvariantUnderMonotoneTransform) {
  Stream s(2);
  const auto v = random_scores(s, 300);
  std::vector<double> w;
  for (double x : v) w.push_back(std::tanh(x));
  const std::vector<double> targets{0.01, 0.05, 0.2};
  const auto p = calibrate(genuine(v), targets);
  const auto q = calibrate(genuine(w), targets);
  for (double t : targets) {
    EXPECT_EQ(fraction_below(v, p.threshold(t)), fraction_below(w, q.threshold(t)));
  }
}

TEST(Calibrate, DigestTracksScores) {
  const auto a = calibrate(genuine({0.1, 0.2}), {0.5});
  const auto b = calibrate(genuine({0.1, 0.2}), {0.5});
  const auto c = calibrate(genuine({0.1, 0.3}), {0.5});
  EXPECT_EQ(a.source().digest, b.source().digest);
  EXPECT_NE(a.source().digest, c.source().digest);
  EXPECT_EQ(a.source().digest.size(), 16u);
}

TEST(Judge, StrictlyBelowIsFlagged) {
  const auto p = calibrate(genuine(tenths()), {0.1});
  EXPECT_TRUE(judge(0.15, p, 0.1).flagged);
  EXPECT_FALSE(judge(0.2, p, 0.1).flagged);
  EXPECT_FALSE(judge(0.9, p, 0.1).flagged);
  EXPECT_DOUBLE_EQ(judge(0.9, p, 0.1).threshold, 0.2);
}

TEST(EvaluatePair, CleanAndBackdooredRates) {
  const auto p = calibrate(genuine(tenths()), {0.1});
  const ScoreSet poisoned(Population::Poisoned, {0.1, 0.15, 0.5, 0.9});
  const auto clean = evaluate_pair(poisoned, p, false);
  ASSERT_EQ(clean.rows.size(), 1u);
  EXPECT_EQ(clean.rows[0].flagged, 2u);
  EXPECT_DOUBLE_EQ(clean.rows[0].rate, 0.5);
  EXPECT_EQ(clean.rate_name(), "fnr_poison");
  const auto bd = evaluate_pair(poisoned, p, true);
  EXPECT_DOUBLE_EQ(bd.rows[0].rate, 0.5);
  EXPECT_EQ(bd.rate_name(), "fpr_poison");
  const ScoreSet low(Population::Poisoned, {0.0, 0.1});
  EXPECT_DOUBLE_EQ(evaluate_pair(low, p, true).rows[0].rate, 0.0);
  EXPECT_DOUBLE_EQ(evaluate_pair(low, p, false).rows[0].rate, 1.0);
  EXPECT_PG_ERROR(evaluate_pair(ScoreSet(Population::Poisoned, {}), p, true), ErrorCode::EmptyScores);
}

TEST(EvaluatePair, RowsFollowTargetOrder) {
  const auto p = calibrate(genuine(tenths()), {0.3, 0.1});
  const auto r = evaluate_pair(ScoreSet(Population::Poisoned, {0.5}), p, false);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(r.rows[0].target, 0.1);
  EXPECT_DOUBLE_EQ(r.rows[1].target, 0.3);
}

TEST(VerificationRates, Examples) {
  const auto g = genuine({0.9, 0.8, 0.3});
  const ScoreSet z(Population::ZEI, {0.1, 0.5, 0.2, 0.6});
  const auto r = verification_rates(g, z, 0.5);
  EXPECT_DOUBLE_EQ(r.fnmr, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.fmr, 0.5);
  EXPECT_PG_ERROR(verification_rates(genuine({}), z, 0.5), ErrorCode::EmptyScores);
}

TEST(KsDistance, Examples) {
  EXPECT_DOUBLE_EQ(ks_distance({0.1, 0.2}, {0.1, 0.2}), 0.0);
  EXPECT_DOUBLE_EQ(ks_distance({0.1, 0.2}, {0.5, 0.6}), 1.0);
  EXPECT_DOUBLE_EQ(ks_distance({0.1, 0.3}, {0.2, 0.4}), 0.5);
  EXPECT_PG_ERROR(ks_distance({}, {0.1}), ErrorCode::EmptyScores);
}

TEST(KsDistance, MatchesBruteForce) {
  Stream s(3);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> a(1 + s.below(40));
    std::vector<double> b(1 + s.below(40));
    // Coarse grid so ties occur.
    for (auto& x : a) x = static_cast<double>(s.below(10)) / 10.0;
    for (auto& x : b) x = static_cast<double>(s.below(10)) / 10.0;
    double brute = 0.0;
    for (int k = 0; k < 10; ++k) {
      const double x = k / 10.0;
      const auto cdf = [x](const std::vector<double>& v) {
        return static_cast<double>(std::count_if(v.begin(), v.end(), [x](double y) { return y <= x; })) /
               static_cast<double>(v.size());
      };
      brute = std::max(brute, std::abs(cdf(a) - cdf(b)));
    }
    EXPECT_NEAR(ks_distance(a, b), brute, 1e-15);
  }
}

TEST(ProfileJson, RoundTrip) {
  const auto p = calibrate(genuine(tenths()), {0.001, 0.01, 0.05, 0.5});
  const auto back = calibration_profile_from_json(nlohmann::json::parse(to_json(p).dump()));
  EXPECT_EQ(back.thresholds(), p.thresholds());
  EXPECT_EQ(back.source().digest, p.source().digest);
  EXPECT_EQ(back.source().count, p.source().count);
  EXPECT_PG_ERROR(calibration_profile_from_json(nlohmann::json::parse(R"({"thresholds": []})")),
                  ErrorCode::ConfigError);
}

TEST(ProfileJson, RejectsNonMonotoneThresholds) {
  const auto j = nlohmann::json::parse(R"({"thresholds": [
      {"target_fnr": 0.01, "threshold": 0.8}, {"target_fnr": 0.05, "threshold": 0.7}],
      "source": {"description": "x", "count": 3, "digest": "0"}})");
  EXPECT_PG_ERROR(calibration_profile_from_json(j), ErrorCode::InvalidArgument);
}

TEST(DetectionCsv, Layout) {
  const auto p = calibrate(genuine(tenths()), {0.01, 0.1});
  const auto r = evaluate_pair(ScoreSet(Population::Poisoned, {0.1, 0.9}), p, true,
                               {"ref", "prb", "large"});
  EXPECT_EQ(detection_csv({r}),
            "trigger,reference_model,probe_model,pair_is_backdoored,rate,samples,at_1pct,at_10pct\n"
            "large,ref,prb,true,fpr_poison,2,100,50\n");
}
