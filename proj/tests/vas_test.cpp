#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "cntlora/vas.hpp"

namespace cntlora {
namespace {

std::vector<SingularProfile> random_profiles(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n_points(1, 6), len(1, 12);
  std::exponential_distribution<double> mag(1.0);
  std::vector<SingularProfile> out;
  const std::size_t n = n_points(rng);
  for (std::size_t p = 0; p < n; ++p) {
    SingularProfile prof{"p" + std::to_string(p), {}};
    prof.S.resize(len(rng));
    for (double& s : prof.S) s = mag(rng);
    std::sort(prof.S.rbegin(), prof.S.rend());
    out.push_back(std::move(prof));
  }
  return out;
}

std::size_t capacity(const std::vector<SingularProfile>& ps) {
  std::size_t c = 0;
  for (const auto& p : ps) c += p.S.size();
  return c;
}

TEST(RelativeVariance, Examples) {
  const auto v = relative_variance({3.0, 1.0});
  EXPECT_DOUBLE_EQ(v[0], 0.9);
  EXPECT_DOUBLE_EQ(v[1], 0.1);
  EXPECT_EQ(relative_variance({2.0, 2.0}), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(relative_variance({0.0, 0.0}), (std::vector<double>{0.0, 0.0}));
}

TEST(RelativeVariance, SumsToOne) {
  std::mt19937_64 rng(1);
  for (const auto& p : random_profiles(rng)) {
    double sum = 0.0;
    for (double v : relative_variance(p.S)) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-14);
  }
}

TEST(RelativeVariance, RejectsNegative) { EXPECT_THROW(relative_variance({1.0, -1.0}), Error); }

TEST(AllocateRanks, HandExample) {
  const RankAllocation a = allocate_ranks({{"P1", {3.0, 1.0}}, {"P2", {2.0, 2.0}}}, 2);
  EXPECT_EQ(a.rank_of("P1"), 1u);
  EXPECT_EQ(a.rank_of("P2"), 1u);
  EXPECT_EQ(a.budget, 2u);
}

TEST(AllocateRanks, TieBreakPrefersEarlierPoint) {
  // Both P2 entries tie at 0.5 with each other; K=3 takes 0.9, 0.5, 0.5.
  const RankAllocation a = allocate_ranks({{"P1", {3.0, 1.0}}, {"P2", {2.0, 2.0}}}, 3);
  EXPECT_EQ(a.rank_of("P1"), 1u);
  EXPECT_EQ(a.rank_of("P2"), 2u);
  const RankAllocation b = allocate_ranks({{"A", {1.0, 1.0}}, {"B", {1.0, 1.0}}}, 1);
  EXPECT_EQ(b.rank_of("A"), 1u);
  EXPECT_EQ(b.rank_of("B"), 0u);
}

TEST(AllocateRanks, SingleProfileFullBudget) {
  const RankAllocation a = allocate_ranks({{"only", {5.0, 2.0, 1.0, 0.0}}}, 4);
  EXPECT_EQ(a.rank_of("only"), 4u);
}

TEST(AllocateRanks, IdenticalProfilesShareEqually) {
  std::vector<SingularProfile> ps;
  for (int i = 0; i < 4; ++i) ps.push_back({"p" + std::to_string(i), {4.0, 2.0, 1.0, 0.5, 0.1}});
  for (std::size_t per = 1; per <= 5; ++per) {
    const RankAllocation a = allocate_ranks(ps, per * 4);
    for (const auto& [_, r] : a.ranks) EXPECT_EQ(r, per);
  }
}

TEST(AllocateRanks, BudgetExactAndBoundedOnRandomSets) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto ps = random_profiles(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, capacity(ps))(rng);
    const RankAllocation a = allocate_ranks(ps, k);
    EXPECT_EQ(a.total(), k);
    for (const auto& p : ps) EXPECT_LE(a.rank_of(p.point_id), p.S.size());
  }
}

TEST(AllocateRanks, PerPointScaleInvariance) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int t = 0; t < 100; ++t) {
    auto ps = random_profiles(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, capacity(ps))(rng);
    const RankAllocation before = allocate_ranks(ps, k);
    auto scaled = ps;
    const std::size_t which = std::uniform_int_distribution<std::size_t>(0, ps.size() - 1)(rng);
    const double c = scale(rng);
    for (double& s : scaled[which].S) s *= c;
    EXPECT_EQ(allocate_ranks(scaled, k), before);
  }
}

TEST(AllocateRanks, DefaultBudgetIsRankTimesPoints) {
  EXPECT_EQ(default_budget(4, 3), 12u);
  std::mt19937_64 rng(4);
  std::vector<SingularProfile> ps;
  for (int i = 0; i < 3; ++i) {
    SingularProfile p{"p" + std::to_string(i), {}};
    for (int j = 0; j < 8; ++j) p.S.push_back(std::exponential_distribution<double>(1.0)(rng));
    std::sort(p.S.rbegin(), p.S.rend());
    ps.push_back(p);
  }
  EXPECT_EQ(allocate_ranks(ps, default_budget(4, ps.size())).total(), 12u);
}

TEST(AllocateRanks, MinRankTopsUpByEvictingSmallest) {
  // v(P1) = [0.9, 0.1], v(P2) = [1, 0], v(P3) = [0.5, 0.5].
  const std::vector<SingularProfile> ps{{"P1", {3.0, 1.0}}, {"P2", {1.0, 0.0}}, {"P3", {1.0, 1.0}}};
  const RankAllocation free_alloc = allocate_ranks(ps, 3);
  EXPECT_EQ(free_alloc.rank_of("P1"), 1u);
  EXPECT_EQ(free_alloc.rank_of("P2"), 1u);
  EXPECT_EQ(free_alloc.rank_of("P3"), 1u);

  // v: sharp = [1, 0], pair = [0.9, 0.1], flat = ten entries of 0.1. With K=3
  // the 0.1 tie goes to `pair` (earlier point), leaving `flat` empty.
  const std::vector<SingularProfile> tied{
      {"sharp", {1.0, 0.0}}, {"pair", {3.0, 1.0}}, {"flat", std::vector<double>(10, 1.0)}};
  const RankAllocation top_k = allocate_ranks(tied, 3);
  EXPECT_EQ(top_k.rank_of("pair"), 2u);
  EXPECT_EQ(top_k.rank_of("flat"), 0u);
  const RankAllocation floored = allocate_ranks(tied, 3, 1);
  EXPECT_EQ(floored.rank_of("sharp"), 1u);
  EXPECT_EQ(floored.rank_of("pair"), 1u);
  EXPECT_EQ(floored.rank_of("flat"), 1u);
}

TEST(AllocateRanks, MinRankOnRandomSets) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto ps = random_profiles(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(ps.size(), capacity(ps))(rng);
    const RankAllocation a = allocate_ranks(ps, k, 1);
    EXPECT_EQ(a.total(), k);
    for (const auto& p : ps) {
      EXPECT_GE(a.rank_of(p.point_id), 1u);
      EXPECT_LE(a.rank_of(p.point_id), p.S.size());
    }
  }
}

TEST(AllocateRanks, InfeasibleBudgets) {
  const std::vector<SingularProfile> ps{{"a", {1.0, 0.5}}, {"b", {1.0}}};
  auto code = [&](std::size_t k, std::size_t min_rank) {
    try {
      allocate_ranks(ps, k, min_rank);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::BadConfig;
  };
  EXPECT_EQ(code(4, 0), ErrorCode::BudgetInfeasible);
  EXPECT_EQ(code(1, 1), ErrorCode::BudgetInfeasible);
  EXPECT_EQ(code(3, 2), ErrorCode::BudgetInfeasible);
}

}  // namespace
}  // namespace cntlora
