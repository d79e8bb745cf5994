#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pairguard/embedding.hpp"
#include "pairguard/errors.hpp"
#include "pairguard/translator.hpp"

namespace pairguard {

/// Cosine similarity, clamped to [-1, 1] so downstream quantiles never see
/// 1 + eps.
inline double cos_sim(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::DimMismatch, "cos_sim of dimensions " + std::to_string(a.size()) +
                                     " and " + std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na >= kZeroNormTolerance) || !(nb >= kZeroNormTolerance)) {
    fail(ErrorCode::ZeroNorm, "cos_sim of a zero vector");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline double cos_dist(const Embedding& a, const Embedding& b) {
  return 1.0 - cos_sim(a, b);
}

/// Agreement of a model pair on one sample: the probe embedding translated
/// into reference space, compared to the reference embedding.
inline double pair_score(const TranslationMap& map, const Embedding& e_prb, const Embedding& e_ref) {
  return cos_sim(apply(map, e_prb), e_ref);
}

/// pair_score over row-aligned batches.
inline std::vector<double> pair_scores(const TranslationMap& map, const EmbeddingBatch& probe,
                                       const EmbeddingBatch& reference) {
  if (probe.size() != reference.size()) {
    fail(ErrorCode::RowCountMismatch, "probe has " + std::to_string(probe.size()) +
                                          " rows, reference has " +
                                          std::to_string(reference.size()));
  }
  std::vector<double> out;
  out.reserve(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    out.push_back(pair_score(map, probe.row(i), reference.row(i)));
  }
  return out;
}

enum class Population { Genuine, ZEI, Poisoned };

inline constexpr std::string_view to_string(Population p) noexcept {
  switch (p) {
    case Population::Genuine: return "genuine";
    case Population::ZEI: return "zei";
    case Population::Poisoned: return "poisoned";
  }
  return "unknown";
}

inline constexpr double kScoreSlack = 1e-9;

/// Scores of one population (genuine, zero-effort impostor, poisoned).
class ScoreSet {
 public:
  ScoreSet(Population population, std::vector<double> scores)
      : population_(population), scores_(std::move(scores)) {
    for (double s : scores_) {
      if (!(s >= -1.0 - kScoreSlack && s <= 1.0 + kScoreSlack)) {
        fail(ErrorCode::InvalidArgument, "score " + std::to_string(s) + " outside [-1, 1]");
      }
    }
  }

  Population population() const noexcept { return population_; }
  const std::vector<double>& scores() const noexcept { return scores_; }
  std::size_t size() const noexcept { return scores_.size(); }
  bool empty() const noexcept { return scores_.empty(); }

 private:
  Population population_;
  std::vector<double> scores_;
};

/// Shortest round-trip decimal for a double; stable across runs.
inline std::string format_real(double v) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// CSV with a "population,score" header, one row per score.
inline std::string score_sets_csv(const std::vector<ScoreSet>& sets) {
  std::string out = "population,score\n";
  for (const auto& set : sets) {
    for (double s : set.scores()) {
      out += to_string(set.population());
      out += ',';
      out += format_real(s);
      out += '\n';
    }
  }
  return out;
}

inline void write_score_sets(const std::vector<ScoreSet>& sets,
                             const std::filesystem::path& path) {
  detail::write_text(path, score_sets_csv(sets));
}

}  // namespace pairguard
