#pragma once

// Threshold calibration on clean genuine scores and the poisoned-sample
// detection rates reported per model pair.
//
// Convention: a score strictly below the threshold is flagged as a
// suspected backdoor activation; a score equal to the threshold passes.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <limits>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "pairguard/errors.hpp"
#include "pairguard/rng.hpp"
#include "pairguard/scoring.hpp"

namespace pairguard {

struct ScoreSource {
  std::string description;
  std::size_t count = 0;
  std::string digest;  // FNV-1a over the little-endian score bytes, hex
};

class CalibrationProfile {
 public:
  CalibrationProfile(std::map<double, double> thresholds, ScoreSource source)
      : thresholds_(std::move(thresholds)), source_(std::move(source)) {
    double prev = -std::numeric_limits<double>::infinity();
    for (const auto& [target, theta] : thresholds_) {
      if (!(target > 0.0 && target < 1.0)) {
        fail(ErrorCode::BadTarget, "target FNR " + format_real(target) + " not in (0, 1)");
      }
      if (theta < prev) {
        fail(ErrorCode::InvalidArgument, "thresholds must be monotone in the target FNR");
      }
      prev = theta;
    }
  }

  const std::map<double, double>& thresholds() const noexcept { return thresholds_; }
  const ScoreSource& source() const noexcept { return source_; }

  double threshold(double target) const {
    const auto it = thresholds_.find(target);
    if (it == thresholds_.end()) {
      fail(ErrorCode::UnknownTarget, "no threshold calibrated for target " + format_real(target));
    }
    return it->second;
  }

 private:
  std::map<double, double> thresholds_;
  ScoreSource source_;
};

inline std::string score_digest(const std::vector<double>& scores) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double s : scores) {
    const auto bits = std::bit_cast<std::uint64_t>(s);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// For each target t the threshold is the largest candidate in
/// {-1} U scores whose strictly-below fraction does not exceed t. No
/// interpolation: the empirical FNR on the calibration set never exceeds t.
inline CalibrationProfile calibrate(const ScoreSet& genuine, const std::vector<double>& targets,
                                    std::string description = "genuine") {
  if (genuine.empty()) fail(ErrorCode::EmptyScores, "cannot calibrate on an empty score set");
  std::vector<double> sorted = genuine.scores();
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();

  std::map<double, double> thresholds;
  for (double t : targets) {
    if (!(t > 0.0 && t < 1.0)) {
      fail(ErrorCode::BadTarget, "target FNR " + format_real(t) + " not in (0, 1)");
    }
    double theta = -1.0;
    // sorted[i] has exactly i scores strictly below it when it is the first
    // occurrence of its value.
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && sorted[i] == sorted[i - 1]) continue;
      if (static_cast<double>(i) / static_cast<double>(n) <= t) {
        theta = std::max(theta, sorted[i]);
      } else {
        break;
      }
    }
    thresholds[t] = theta;
  }
  return CalibrationProfile(std::move(thresholds),
                            {std::move(description), n, score_digest(genuine.scores())});
}

struct Verdict {
  double score = 0.0;
  double threshold = 0.0;
  bool flagged = false;  // suspected backdoor activation
};

inline Verdict judge(double score, const CalibrationProfile& profile, double target) {
  const double theta = profile.threshold(target);
  return {score, theta, score < theta};
}

struct RateRow {
  double target = 0.0;
  double threshold = 0.0;
  std::size_t flagged = 0;
  std::size_t total = 0;
  /// Clean pair: fraction flagged (false alarms, "FNR (poison)").
  /// Backdoored pair: fraction passed (missed activations, "FPR (poison)").
  double rate = 0.0;
};

struct PairDescriptor {
  std::string reference_model;
  std::string probe_model;
  std::string trigger;
};

struct DetectionReport {
  PairDescriptor pair;
  bool backdoored = false;
  std::vector<RateRow> rows;

  /// Column name used in the tables: fnr_poison for clean pairs, fpr_poison
  /// for backdoored ones (aliases fnmr / fmr).
  std::string rate_name() const { return backdoored ? "fpr_poison" : "fnr_poison"; }
  std::string rate_alias() const { return backdoored ? "fmr" : "fnmr"; }
};

inline DetectionReport evaluate_pair(const ScoreSet& poisoned, const CalibrationProfile& profile,
                                     bool pair_is_backdoored, PairDescriptor pair = {}) {
  if (poisoned.empty()) fail(ErrorCode::EmptyScores, "no poisoned scores to evaluate");
  DetectionReport report{std::move(pair), pair_is_backdoored, {}};
  const auto n = poisoned.size();
  for (const auto& [target, theta] : profile.thresholds()) {
    std::size_t flagged = 0;
    for (double s : poisoned.scores()) flagged += s < theta;
    const std::size_t wrong = pair_is_backdoored ? n - flagged : flagged;
    report.rows.push_back({target, theta, flagged, n,
                           static_cast<double>(wrong) / static_cast<double>(n)});
  }
  return report;
}

struct VerificationRates {
  double fnmr = 0.0;
  double fmr = 0.0;
};

/// fnmr: genuine scores below theta; fmr: zero-effort impostor scores at or
/// above theta.
inline VerificationRates verification_rates(const ScoreSet& genuine, const ScoreSet& zei,
                                            double theta) {
  if (genuine.empty() || zei.empty()) {
    fail(ErrorCode::EmptyScores, "verification rates need genuine and impostor scores");
  }
  std::size_t below = 0;
  for (double s : genuine.scores()) below += s < theta;
  std::size_t above = 0;
  for (double s : zei.scores()) above += s >= theta;
  return {static_cast<double>(below) / static_cast<double>(genuine.size()),
          static_cast<double>(above) / static_cast<double>(zei.size())};
}

/// Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|.
inline double ks_distance(const std::vector<double>& a_in, const std::vector<double>& b_in) {
  if (a_in.empty() || b_in.empty()) fail(ErrorCode::EmptyScores, "KS distance of an empty sample");
  std::vector<double> a = a_in;
  std::vector<double> b = b_in;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0;
  std::size_t j = 0;
  double d = 0.0;
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const CalibrationProfile& p) {
  nlohmann::json thresholds = nlohmann::json::array();
  for (const auto& [target, theta] : p.thresholds()) {
    thresholds.push_back({{"target_fnr", target}, {"threshold", theta}});
  }
  return {{"thresholds", thresholds},
          {"source",
           {{"description", p.source().description},
            {"count", p.source().count},
            {"digest", p.source().digest}}}};
}

inline CalibrationProfile calibration_profile_from_json(const nlohmann::json& j) {
  try {
    std::map<double, double> thresholds;
    for (const auto& row : j.at("thresholds")) {
      thresholds[row.at("target_fnr").get<double>()] = row.at("threshold").get<double>();
    }
    const auto& src = j.at("source");
    return CalibrationProfile(std::move(thresholds),
                              {src.at("description").get<std::string>(),
                               src.at("count").get<std::size_t>(),
                               src.at("digest").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("calibration profile: ") + e.what());
  }
}

inline nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"target_fnr", row.target},
                    {"threshold", row.threshold},
                    {"flagged", row.flagged},
                    {"total", row.total},
                    {r.rate_name(), row.rate},
                    {r.rate_alias(), row.rate}});
  }
  return {{"reference_model", r.pair.reference_model},
          {"probe_model", r.pair.probe_model},
          {"trigger", r.pair.trigger},
          {"pair_is_backdoored", r.backdoored},
          {"rate", r.rate_name()},
          {"rows", rows}};
}

/// Table layout: one line per pair, one rate column per target (percent).
inline std::string detection_csv_header(const std::vector<double>& targets) {
  std::string out = "trigger,reference_model,probe_model,pair_is_backdoored,rate,samples";
  for (double t : targets) out += ",at_" + format_real(100.0 * t) + "pct";
  return out + "\n";
}

inline std::string detection_csv_row(const DetectionReport& r) {
  std::string out = r.pair.trigger + "," + r.pair.reference_model + "," + r.pair.probe_model +
                    "," + (r.backdoored ? "true" : "false") + "," + r.rate_name() + "," +
                    std::to_string(r.rows.empty() ? 0 : r.rows.front().total);
  for (const auto& row : r.rows) out += "," + format_real(100.0 * row.rate);
  return out + "\n";
}

inline std::string detection_csv(const std::vector<DetectionReport>& reports) {
  if (reports.empty()) return "";
  std::vector<double> targets;
  for (const auto& row : reports.front().rows) targets.push_back(row.target);
  std::string out = detection_csv_header(targets);
  for (const auto& r : reports) out += detection_csv_row(r);
  return out;
}

}  // namespace pairguard
