#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pairguard/rng.hpp"
#include "pairguard/scoring.hpp"
#include "test_util.hpp"

using namespace pairguard;

namespace {

Embedding vec(std::initializer_list<double> v) {
  Embedding e(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) e(i++) = x;
  return e;
}

Embedding random_vec(Stream& s, Eigen::Index m) {
  Embedding e(m);
  for (Eigen::Index i = 0; i < m; ++i) e(i) = s.normal();
  return e;
}

}  // namespace

TEST(CosSim, Examples) {
  EXPECT_DOUBLE_EQ(cos_sim(vec({1, 0}), vec({1, 0})), 1.0);
  EXPECT_DOUBLE_EQ(cos_sim(vec({1, 0}), vec({0, 1})), 0.0);
  EXPECT_DOUBLE_EQ(cos_sim(vec({1, 0}), vec({-1, 0})), -1.0);
  EXPECT_NEAR(cos_sim(vec({1, 1}), vec({1, 0})), std::sqrt(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(cos_dist(vec({1, 0}), vec({-1, 0})), 2.0);
  EXPECT_DOUBLE_EQ(cos_dist(vec({3, 4}), vec({6, 8})), 0.0);
}

TEST(CosSim, Errors) {
  EXPECT_PG_ERROR(cos_sim(vec({0, 0}), vec({1, 0})), ErrorCode::ZeroNorm);
  EXPECT_PG_ERROR(cos_sim(vec({1, 0, 0}), vec({1, 0})), ErrorCode::DimMismatch);
}

TEST(CosSim, SymmetricScaleInvariantAndBounded) {
  Stream s(1);
  for (int t = 0; t < 500; ++t) {
    const auto m = static_cast<Eigen::Index>(1 + s.below(32));
    const Embedding a = random_vec(s, m);
    const Embedding b = random_vec(s, m);
    const double c = cos_sim(a, b);
    EXPECT_EQ(c, cos_sim(b, a));
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    const double k = 0.01 + 100.0 * s.uniform();
    EXPECT_NEAR(cos_sim(k * a, b), c, 1e-12);
    EXPECT_NEAR(cos_dist(a, b) + cos_sim(a, b), 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(cos_sim(a, a), 1.0);
  }
}

TEST(PairScore, ComposesApplyAndCosine) {
  Stream s(2);
  Matrix w(3, 4);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = s.normal();
  const auto map = TranslationMap::affine(w, random_vec(s, 3));
  for (int t = 0; t < 50; ++t) {
    const Embedding p = random_vec(s, 4);
    const Embedding r = random_vec(s, 3);
    EXPECT_EQ(pair_score(map, p, r), cos_sim(apply(map, p), r));
  }
}

TEST(PairScore, IdentityMapOnEqualInputsIsOne) {
  const Embedding e = vec({0.6, 0.8});
  EXPECT_DOUBLE_EQ(pair_score(TranslationMap::identity(2), e, e), 1.0);
}

TEST(PairScores, BatchMatchesRows) {
  Stream s(3);
  Matrix p(5, 2);
  Matrix r(5, 2);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    p.data()[i] = s.normal();
    r.data()[i] = s.normal();
  }
  const auto map = TranslationMap::identity(2);
  const auto scores = pair_scores(map, EmbeddingBatch(p), EmbeddingBatch(r));
  ASSERT_EQ(scores.size(), 5u);
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_EQ(scores[static_cast<std::size_t>(i)],
              cos_sim(p.row(i).transpose(), r.row(i).transpose()));
  }
  EXPECT_PG_ERROR(pair_scores(map, EmbeddingBatch(p), EmbeddingBatch(Matrix(r.topRows(4)))),
                  ErrorCode::RowCountMismatch);
}

TEST(ScoreSet, RejectsOutOfRange) {
  EXPECT_NO_THROW(ScoreSet(Population::Genuine, {-1.0, 0.0, 1.0}));
  EXPECT_PG_ERROR(ScoreSet(Population::Genuine, {1.5}), ErrorCode::InvalidArgument);
  EXPECT_PG_ERROR(ScoreSet(Population::ZEI, {std::nan("")}), ErrorCode::InvalidArgument);
}

TEST(ScoreSet, CsvLayout) {
  const std::vector<ScoreSet> sets{ScoreSet(Population::Genuine, {0.5, 1.0}),
                                   ScoreSet(Population::Poisoned, {-0.25})};
  EXPECT_EQ(score_sets_csv(sets), "population,score\ngenuine,0.5\ngenuine,1\npoisoned,-0.25\n");
}

TEST(FormatReal, RoundTrips) {
  Stream s(4);
  for (int t = 0; t < 1000; ++t) {
    const double v = s.normal();
    EXPECT_EQ(std::strtod(format_real(v).c_str(), nullptr), v);
  }
  EXPECT_EQ(format_real(0.1), "0.1");
  EXPECT_EQ(format_real(1.0 / 3.0), "0.3333333333333333");
}
