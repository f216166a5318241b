// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/regmask.hpp"

using rmlora::Matrix;

TEST(RegValue, Examples) {
  rmlora::Rng rng(31);
  const Matrix q = rmlora::svd(rng.gaussian_matrix(5, 3)).u;  // 5x3, orthonormal columns
  EXPECT_NEAR(rmlora::reg_value(oracle::naive_transpose(q), q), 0.0, 1e-12);
  EXPECT_EQ(rmlora::reg_value(Matrix(2, 3), Matrix(4, 2)), 4.0);
  EXPECT_EQ(rmlora::reg_value(Matrix::from_rows({{2, 0}, {0, 1}}), Matrix::identity(2)), 9.0);
  EXPECT_THROW(rmlora::reg_value(Matrix(2, 3), Matrix(4, 3)), rmlora::InvalidArgument);
}

TEST(RegGrads, StationaryPoints) {
  rmlora::Rng rng(32);
  const Matrix q = oracle::naive_transpose(rmlora::svd(rng.gaussian_matrix(6, 3)).u);
  const auto g = rmlora::reg_grads(q, Matrix(4, 3));
  EXPECT_LE(oracle::max_abs(g.a), 1e-12);
  EXPECT_EQ(oracle::max_abs(g.b), 0.0);  // zero b is a critical point
  EXPECT_EQ(oracle::max_abs(rmlora::reg_grads(Matrix(3, 5), Matrix(4, 3)).a), 0.0);
}

TEST(RegGrads, FiniteDifferences) {
  rmlora::Rng rng(33);
  for (int t = 0; t < 20; ++t) {
    Matrix a = rng.gaussian_matrix(3, 5, 0.6);
    Matrix b = rng.gaussian_matrix(4, 3, 0.6);
    const auto g = rmlora::reg_grads(a, b);
    auto f = [&] { return rmlora::reg_value(a, b); };
    EXPECT_LE(oracle::max_relative_error(g.a, oracle::central_difference_5pt(a, f), 1e-8), 1e-7);
    EXPECT_LE(oracle::max_relative_error(g.b, oracle::central_difference_5pt(b, f), 1e-8), 1e-7);
  }
}

TEST(RegGrads, SmallStepDecreasesPenalty) {
  rmlora::Rng rng(34);
  for (int t = 0; t < 100; ++t) {
    const std::size_t r = 1 + rng.below(4);
    const Matrix a = rng.gaussian_matrix(r, r + rng.below(5));
    const Matrix b = rng.gaussian_matrix(r + rng.below(5), r);
    const auto g = rmlora::reg_grads(a, b);
    const double before = rmlora::reg_value(a, b);
    const double after = rmlora::reg_value(a - 1e-4 * g.a, b - 1e-4 * g.b);
    EXPECT_LT(after, before);
  }
}

TEST(RegGrads, RankOfProductRespectsSylvesterBound) {
  rmlora::Rng rng(35);
  for (int t = 0; t < 500; ++t) {
    const std::size_t big_r = 2 + rng.below(5);
    const std::size_t d1 = big_r + rng.below(4), d2 = big_r + rng.below(4);
    const std::size_t ra = 1 + rng.below(big_r), rb = 1 + rng.below(big_r);
    const Matrix a = rmlora::matmul(rng.gaussian_matrix(big_r, ra), rng.gaussian_matrix(ra, d2));
    const Matrix b = rmlora::matmul(rng.gaussian_matrix(d1, rb), rng.gaussian_matrix(rb, big_r));
    const std::size_t rank_a = rmlora::numerical_rank(a, 1e-9);
    const std::size_t rank_b = rmlora::numerical_rank(b, 1e-9);
    const std::size_t rank_ba = rmlora::numerical_rank(rmlora::matmul(b, a), 1e-9);
    const long lower = std::max<long>(long(rank_a) + long(rank_b) - long(big_r), 0);
    EXPECT_GE(long(rank_ba), lower);
  }
}

TEST(Mask, FullAndEmptySelections) {
  rmlora::Rng rng(36);
  const auto full = rmlora::sample_mask(4, 4, 6, 5, rng);
  for (double v : full.mask_a.data()) EXPECT_EQ(v, 1.0);
  for (double v : full.mask_b.data()) EXPECT_EQ(v, 1.0);
  const auto none = rmlora::sample_mask(4, 0, 6, 5, rng);
  for (double v : none.mask_a.data()) EXPECT_EQ(v, 0.0);
  for (double v : none.mask_b.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(rmlora::sample_mask(4, 5, 6, 5, rng), rmlora::InvalidArgument);
}

TEST(Mask, SingleDirectionSelectsRowAndColumn) {
  const auto m = rmlora::build_mask(3, {2}, 4, 5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.mask_a(i, j), i == 2 ? 1.0 : 0.0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.mask_b(r, i), i == 2 ? 1.0 : 0.0);
  EXPECT_THROW(rmlora::build_mask(3, {1, 1}, 4, 5), rmlora::InvalidArgument);
  EXPECT_THROW(rmlora::build_mask(3, {3}, 4, 5), rmlora::InvalidArgument);
}

TEST(Mask, ApplyExtractsSelectedDirections) {
  rmlora::Rng rng(37);
  const Matrix ga = rng.gaussian_matrix(3, 4), gb = rng.gaussian_matrix(5, 3);
  const auto ones = rmlora::build_mask(3, {0, 1, 2}, 4, 5);
  const auto [fa, fb] = rmlora::apply_mask(ga, gb, ones);
  EXPECT_EQ(fa, ga);
  EXPECT_EQ(fb, gb);

  const auto zeros = rmlora::build_mask(3, {}, 4, 5);
  const auto [za, zb] = rmlora::apply_mask(ga, gb, zeros);
  EXPECT_EQ(za, Matrix(3, 4));
  EXPECT_EQ(zb, Matrix(5, 3));

  const auto one = rmlora::build_mask(3, {1}, 4, 5);
  const auto [oa, ob] = rmlora::apply_mask(ga, gb, one);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(oa(i, j), i == 1 ? ga(i, j) : 0.0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ob(r, i), i == 1 ? gb(r, i) : 0.0);
  EXPECT_THROW(rmlora::apply_mask(ga, gb, rmlora::build_mask(2, {0}, 4, 5)), rmlora::InvalidArgument);
}

TEST(Mask, ApplyIsIdempotent) {
  rmlora::Rng rng(38);
  for (int t = 0; t < 100; ++t) {
    const std::size_t r = 1 + rng.below(6);
    const Matrix ga = rng.gaussian_matrix(r, 7), gb = rng.gaussian_matrix(5, r);
    const auto m = rmlora::sample_mask(r, rng.below(r + 1), 7, 5, rng);
    const auto once = rmlora::apply_mask(ga, gb, m);
    const auto twice = rmlora::apply_mask(once.first, once.second, m);
    EXPECT_EQ(once.first, twice.first);
    EXPECT_EQ(once.second, twice.second);
  }
}

TEST(Mask, SelectionFrequencyIsUniform) {
  rmlora::Rng rng(39);
  std::vector<int> hits(8, 0);
  constexpr int kDraws = 10000;
  for (int t = 0; t < kDraws; ++t) {
    const auto m = rmlora::sample_mask(8, 2, 1, 1, rng);
    ASSERT_EQ(m.selected.size(), 2u);
    ASSERT_NE(m.selected[0], m.selected[1]);
    for (std::size_t i : m.selected) ++hits[i];
  }
  for (int h : hits) EXPECT_NEAR(double(h) / kDraws, 0.25, 0.02);
}

TEST(Mask, DeterministicInRngState) {
  rmlora::Rng r1(40), r2(40);
  for (int t = 0; t < 20; ++t) {
    EXPECT_EQ(rmlora::sample_mask(6, 3, 2, 2, r1).selected, rmlora::sample_mask(6, 3, 2, 2, r2).selected);
  }
}
