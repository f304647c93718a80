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

// Non-learned reference recommenders.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "nbpo/common.hpp"
#include "nbpo/corpus.hpp"

namespace nbpo {

// Non-personalized: every user sees items ordered by train popularity.
struct PopularityModel {
  std::vector<double> counts;

  void operator()(Index /*u*/, std::span<double> out) const {
    std::copy(counts.begin(), counts.end(), out.begin());
  }
};

inline PopularityModel fit_itempop(const InteractionTable& train) {
  const auto deg = train.item_degrees();
  return {std::vector<double>(deg.begin(), deg.end())};
}

struct Neighbor {
  Index item;
  double similarity;
};

// Item-based CF with cosine similarity over binary user vectors, keeping the
// top-S neighbors of each item.
class ItemKnnModel {
 public:
  ItemKnnModel(const InteractionTable* train, std::vector<std::vector<Neighbor>> neighbors,
               std::size_t s)
      : train_(train), neighbors_(std::move(neighbors)), s_(s) {}

  std::span<const Neighbor> neighbors(Index i) const { return neighbors_[i]; }
  std::size_t neighborhood_size() const { return s_; }

  // Stored similarity of `other` within item i's neighborhood, or 0.
  double similarity(Index i, Index other) const {
    for (const auto& n : neighbors_[i]) {
      if (n.item == other) return n.similarity;
    }
    return 0.0;
  }

  // Score of every item for u: sum over u's train positives j of sim_j(i).
  void operator()(Index u, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (Index j : train_->items_of(u)) {
      for (const auto& n : neighbors_[j]) out[n.item] += n.similarity;
    }
  }

 private:
  const InteractionTable* train_;
  std::vector<std::vector<Neighbor>> neighbors_;
  std::size_t s_;
};

// Untruncated cosine similarity |users(i) & users(j)| / sqrt(|users(i)||users(j)|).
inline double cosine_similarity(std::span<const Index> users_i, std::span<const Index> users_j) {
  if (users_i.empty() || users_j.empty()) return 0.0;
  std::size_t common = 0;
  auto a = users_i.begin(), b = users_j.begin();
  while (a != users_i.end() && b != users_j.end()) {
    if (*a < *b) {
      ++a;
    } else if (*b < *a) {
      ++b;
    } else {
      ++common;
      ++a;
      ++b;
    }
  }
  return static_cast<double>(common) /
         std::sqrt(static_cast<double>(users_i.size()) * static_cast<double>(users_j.size()));
}

// `train` must outlive the returned model.
inline ItemKnnModel fit_itemknn(const InteractionTable& train, std::size_t s = 50) {
  if (s < 1) throw ConfigError("neighborhood size S must be >= 1");
  const std::size_t n = train.num_items();
  const auto degree = train.item_degrees();
  std::vector<std::vector<Index>> users_of(n);
  for (Index u = 0; u < train.num_users(); ++u) {
    for (Index i : train.items_of(u)) users_of[i].push_back(u);
  }

  std::vector<std::vector<Neighbor>> neighbors(n);
  std::vector<std::size_t> co(n, 0);
  std::vector<Index> seen;
  for (Index i = 0; i < n; ++i) {
    seen.clear();
    for (Index u : users_of[i]) {
      for (Index j : train.items_of(u)) {
        if (j == i) continue;
        if (co[j]++ == 0) seen.push_back(j);
      }
    }
    auto& list = neighbors[i];
    list.reserve(seen.size());
    for (Index j : seen) {
      const double sim = static_cast<double>(co[j]) /
                         std::sqrt(static_cast<double>(degree[i]) * static_cast<double>(degree[j]));
      list.push_back({j, sim});
      co[j] = 0;
    }
    auto before = [](const Neighbor& a, const Neighbor& b) {
      return a.similarity > b.similarity || (a.similarity == b.similarity && a.item < b.item);
    };
    if (list.size() > s) {
      std::partial_sort(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(s), list.end(),
                        before);
      list.resize(s);
    } else {
      std::sort(list.begin(), list.end(), before);
    }
  }
  return ItemKnnModel(&train, std::move(neighbors), s);
}

inline double knn_score(const ItemKnnModel& model, const InteractionTable& train, Index u,
                        Index i) {
  double sum = 0.0;
  for (Index j : train.items_of(u)) sum += model.similarity(j, i);
  return sum;
}

}  // namespace nbpo
