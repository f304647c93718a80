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

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nbpo/common.hpp"
#include "nbpo/corpus.hpp"
#include "nbpo/model.hpp"

namespace nbpo {

inline const std::vector<std::size_t>& default_cutoffs() {
  static const std::vector<std::size_t> ks{2, 5, 10, 20};
  return ks;
}

namespace detail {
inline std::size_t count_hits(std::span<const Index> recommended,
                              std::span<const Index> relevant_sorted, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t p = 0; p < std::min(k, recommended.size()); ++p) {
    if (std::binary_search(relevant_sorted.begin(), relevant_sorted.end(), recommended[p])) {
      ++hits;
    }
  }
  return hits;
}
}  // namespace detail

// `relevant` must be sorted ascending and non-empty.
inline double f1_at_k(std::span<const Index> recommended, std::span<const Index> relevant,
                      std::size_t k) {
  const std::size_t hits = detail::count_hits(recommended, relevant, k);
  if (hits == 0) return 0.0;
  const double precision = static_cast<double>(hits) / static_cast<double>(k);
  const double recall = static_cast<double>(hits) / static_cast<double>(relevant.size());
  return 2.0 * precision * recall / (precision + recall);
}

// Binary-gain NDCG with discount log2(position + 1), positions from 1.
inline double ndcg_at_k(std::span<const Index> recommended, std::span<const Index> relevant,
                        std::size_t k) {
  double dcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, recommended.size()); ++p) {
    if (std::binary_search(relevant.begin(), relevant.end(), recommended[p])) {
      dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    }
  }
  if (dcg == 0.0) return 0.0;
  double idcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, relevant.size()); ++p) {
    idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  }
  return dcg / idcg;
}

struct MetricReport {
  std::vector<std::size_t> ks;
  std::vector<double> f1;    // mean F1@ks[j]
  std::vector<double> ndcg;  // mean NDCG@ks[j]
  std::size_t n_users_evaluated = 0;

  double f1_at(std::size_t k) const { return f1.at(slot(k)); }
  double ndcg_at(std::size_t k) const { return ndcg.at(slot(k)); }

  std::size_t slot(std::size_t k) const {
    auto it = std::find(ks.begin(), ks.end(), k);
    if (it == ks.end()) throw Error("cutoff @" + std::to_string(k) + " not evaluated");
    return static_cast<std::size_t>(it - ks.begin());
  }

  bool operator==(const MetricReport&) const = default;
};

// Fills `scores` (size N) with the score of every item for user u.
template <typename F>
concept Scorer = requires(const F& f, Index u, std::span<double> out) {
  { f(u, out) };
};

// Factorization-model scorer; reads the preference factors only.
struct FactorScorer {
  const PreferenceParams* params;
  void operator()(Index u, std::span<double> out) const { score_all(*params, u, out); }
};

// Ranks all items for every user with at least one positive in `held_out`,
// skipping items in `exclude` (typically the train positives) when given, and
// averages metrics uniformly over those users.
template <Scorer S>
MetricReport evaluate(const S& scorer, const InteractionTable& held_out,
                      const InteractionTable* exclude,
                      const std::vector<std::size_t>& ks = default_cutoffs(),
                      unsigned workers = worker_count()) {
  const std::size_t max_k = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
  std::vector<Index> users;
  for (Index u = 0; u < held_out.num_users(); ++u) {
    if (!held_out.items_of(u).empty()) users.push_back(u);
  }

  // Per-user rows of [f1 @ ks..., ndcg @ ks...], reduced in user order so the
  // result does not depend on the worker count.
  std::vector<double> per_user(users.size() * 2 * ks.size(), 0.0);
  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores(held_out.num_items());
    for (std::size_t idx = begin; idx < end; ++idx) {
      const Index u = users[idx];
      scorer(u, std::span<double>(scores));
      std::span<const Index> excluded;
      if (exclude != nullptr) excluded = exclude->items_of(u);
      const auto ranked = top_k(scores, max_k, excluded);
      const auto relevant = held_out.items_of(u);
      double* row = per_user.data() + idx * 2 * ks.size();
      for (std::size_t j = 0; j < ks.size(); ++j) {
        const auto head = std::span<const Index>(ranked).first(std::min(ks[j], ranked.size()));
        row[j] = f1_at_k(head, relevant, ks[j]);
        row[ks.size() + j] = ndcg_at_k(head, relevant, ks[j]);
      }
    }
  };

  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(users.size())));
  if (workers <= 1) {
    work(0, users.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (users.size() + workers - 1) / workers;
    for (std::size_t b = 0; b < users.size(); b += chunk) {
      pool.emplace_back(work, b, std::min(users.size(), b + chunk));
    }
  }

  MetricReport report;
  report.ks = ks;
  report.f1.assign(ks.size(), 0.0);
  report.ndcg.assign(ks.size(), 0.0);
  report.n_users_evaluated = users.size();
  for (std::size_t idx = 0; idx < users.size(); ++idx) {
    const double* row = per_user.data() + idx * 2 * ks.size();
    for (std::size_t j = 0; j < ks.size(); ++j) {
      report.f1[j] += row[j];
      report.ndcg[j] += row[ks.size() + j];
    }
  }
  if (!users.empty()) {
    for (std::size_t j = 0; j < ks.size(); ++j) {
      report.f1[j] /= static_cast<double>(users.size());
      report.ndcg[j] /= static_cast<double>(users.size());
    }
  }
  return report;
}

}  // namespace nbpo
