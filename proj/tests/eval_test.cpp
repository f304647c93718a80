// Copyright 2026 The NBPO Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "nbpo/eval.hpp"
#include "test_util.hpp"

namespace nbpo {
namespace {

TEST(Metrics, HandDerivedValues) {
  // One hit in the top 2 with 3 relevant: P = 1/2, R = 1/3, F1 = 2/5.
  const std::vector<Index> rec{7, 1};
  const std::vector<Index> rel{1, 4, 9};
  EXPECT_NEAR(f1_at_k(rec, rel, 2), 0.4, 1e-15);

  // Single relevant item at rank 2: DCG = 1/log2(3), IDCG = 1.
  const std::vector<Index> one{1};
  EXPECT_NEAR(ndcg_at_k(rec, one, 2), 0.63092975357145743710, 1e-15);
  EXPECT_NEAR(ndcg_at_k(rec, one, 2), 0.63093, 5e-6);

  EXPECT_EQ(f1_at_k(rec, std::vector<Index>{3}, 2), 0.0);
  EXPECT_EQ(ndcg_at_k(rec, std::vector<Index>{3}, 2), 0.0);
  // Both recommended relevant out of 2: perfect.
  EXPECT_DOUBLE_EQ(f1_at_k(rec, std::vector<Index>{1, 7}, 2), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(rec, std::vector<Index>{1, 7}, 2), 1.0);
}

TEST(Metrics, IdealDcgUsesMinOfKAndRelevant) {
  // 1 relevant, k = 5, ranked first: NDCG = 1 even though k > |relevant|.
  const std::vector<Index> rec{3, 0, 1, 2, 4};
  EXPECT_DOUBLE_EQ(ndcg_at_k(rec, std::vector<Index>{3}, 5), 1.0);
  // 6 relevant, k = 2, both hit: NDCG = 1, F1 uses precision hits / k.
  const std::vector<Index> rel{0, 1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(ndcg_at_k(rec, rel, 2), 1.0);
  EXPECT_NEAR(f1_at_k(rec, rel, 2), 2.0 * 1.0 * (2.0 / 6.0) / (1.0 + 2.0 / 6.0), 1e-15);
}

// Ranks items by an explicit score table.
struct TableScorer {
  std::vector<std::vector<double>> s;
  void operator()(Index u, std::span<double> out) const {
    std::copy(s[u].begin(), s[u].end(), out.begin());
  }
};

TEST(Evaluate, IdealScorerGivesOne) {
  const auto held = testing::random_table(40, 30, 0.1, 3);
  TableScorer ideal;
  for (Index u = 0; u < 40; ++u) {
    ideal.s.emplace_back(30, 0.0);
    for (Index i : held.items_of(u)) ideal.s[u][i] = 1.0;
  }
  const auto r = evaluate(ideal, held, nullptr);
  for (double v : r.ndcg) EXPECT_DOUBLE_EQ(v, 1.0);
  std::size_t users = 0;
  for (Index u = 0; u < 40; ++u) users += held.items_of(u).empty() ? 0 : 1;
  EXPECT_EQ(r.n_users_evaluated, users);
}

TEST(Evaluate, SkipsEmptyUsersAndExcludesTrain) {
  const auto held = InteractionTable::from_pairs(3, 4, {{0, 1}, {2, 3}});
  const auto train = InteractionTable::from_pairs(3, 4, {{0, 0}, {2, 2}});
  // Scores prefer low indices; train positive 0 would otherwise occupy rank 1.
  TableScorer s{{{4, 3, 2, 1}, {4, 3, 2, 1}, {4, 3, 2, 1}}};
  const auto with = evaluate(s, held, &train, {1});
  EXPECT_EQ(with.n_users_evaluated, 2u);
  EXPECT_DOUBLE_EQ(with.f1_at(1), 0.5);  // user 0 hits at 1, user 2 does not
  const auto without = evaluate(s, held, nullptr, {1});
  EXPECT_DOUBLE_EQ(without.f1_at(1), 0.0);
  EXPECT_THROW(with.f1_at(7), Error);
}

TEST(Evaluate, BoundedAndInvariantUnderMonotoneTransform) {
  const auto held = testing::random_table(30, 50, 0.08, 8);
  const auto train = testing::random_table(30, 50, 0.1, 9);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  TableScorer a, b;
  for (Index u = 0; u < 30; ++u) {
    a.s.emplace_back();
    b.s.emplace_back();
    for (Index i = 0; i < 50; ++i) {
      const double x = d(rng);
      a.s[u].push_back(x);
      b.s[u].push_back(std::exp(3.0 * x) + 1.0);
    }
  }
  const auto ra = evaluate(a, held, &train);
  EXPECT_EQ(ra, evaluate(b, held, &train));
  for (double v : ra.f1) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (double v : ra.ndcg) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Evaluate, PermutingItemsPreservesMetrics) {
  const std::size_t m = 20, n = 40;
  const auto held = testing::random_table(m, n, 0.1, 12);
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(2));
  std::vector<Interaction> moved;
  for (const auto& p : held.pairs()) moved.push_back({p.user, perm[p.item]});
  const auto held_perm = InteractionTable::from_pairs(m, n, moved);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  TableScorer a, b;
  for (Index u = 0; u < m; ++u) {
    a.s.emplace_back(n);
    b.s.emplace_back(n);
    for (Index i = 0; i < n; ++i) {
      a.s[u][i] = d(rng);
      b.s[u][perm[i]] = a.s[u][i];
    }
  }
  const auto ra = evaluate(a, held, nullptr), rb = evaluate(b, held_perm, nullptr);
  for (std::size_t j = 0; j < ra.ks.size(); ++j) {
    EXPECT_NEAR(ra.f1[j], rb.f1[j], 1e-15);
    EXPECT_NEAR(ra.ndcg[j], rb.ndcg[j], 1e-15);
  }
}

TEST(Evaluate, WorkerCountDoesNotChangeResult) {
  const auto held = testing::random_table(101, 60, 0.07, 21);
  const auto p = init_params(101, 60, 4, 0, {3, 1.0});
  const FactorScorer s{&p.preference};
  const auto one = evaluate(s, held, nullptr, default_cutoffs(), 1);
  EXPECT_EQ(one, evaluate(s, held, nullptr, default_cutoffs(), 4));
  EXPECT_EQ(one, evaluate(s, held, nullptr, default_cutoffs(), 7));
}

}  // namespace
}  // namespace nbpo
