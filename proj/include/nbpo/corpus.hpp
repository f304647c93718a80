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

// Implicit-feedback corpora: raw rating ingestion, binarization, k-core
// filtering, random 80/10/10 splitting and the canonical split file format.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nbpo/common.hpp"

namespace nbpo {

struct RawInteraction {
  std::string user_key;
  std::string item_key;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

// Dense bijection between opaque string keys and [0, size).
class KeyIndex {
 public:
  Index add(const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, static_cast<Index>(keys_.size()));
    if (inserted) keys_.push_back(key);
    return it->second;
  }

  std::optional<Index> find(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& key(Index i) const { return keys_.at(i); }
  std::size_t size() const { return keys_.size(); }
  const std::vector<std::string>& keys() const { return keys_; }

  // Keeps only the listed indices, renumbered in the given order.
  KeyIndex select(const std::vector<Index>& kept) const {
    KeyIndex out;
    for (Index i : kept) out.add(keys_[i]);
    return out;
  }

  bool operator==(const KeyIndex& other) const { return keys_ == other.keys_; }

 private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, Index> index_;
};

struct IdMap {
  KeyIndex users;
  KeyIndex items;

  bool operator==(const IdMap&) const = default;
};

struct Interaction {
  Index user;
  Index item;

  auto operator<=>(const Interaction&) const = default;
};

// Sparse binary user-item matrix. Per-user item lists are kept sorted and
// duplicate-free.
class InteractionTable {
 public:
  InteractionTable() = default;
  InteractionTable(std::size_t num_users, std::size_t num_items)
      : num_items_(num_items), per_user_(num_users) {}

  // Builds a table from arbitrary pairs; duplicates collapse.
  static InteractionTable from_pairs(std::size_t num_users, std::size_t num_items,
                                     const std::vector<Interaction>& pairs) {
    InteractionTable table(num_users, num_items);
    for (const auto& p : pairs) {
      if (p.user >= num_users || p.item >= num_items) {
        throw Error("interaction (" + std::to_string(p.user) + ", " +
                    std::to_string(p.item) + ") outside " + std::to_string(num_users) +
                    "x" + std::to_string(num_items));
      }
      table.per_user_[p.user].push_back(p.item);
    }
    for (auto& items : table.per_user_) {
      std::sort(items.begin(), items.end());
      items.erase(std::unique(items.begin(), items.end()), items.end());
      table.size_ += items.size();
    }
    return table;
  }

  std::size_t num_users() const { return per_user_.size(); }
  std::size_t num_items() const { return num_items_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  std::span<const Index> items_of(Index u) const { return per_user_[u]; }

  bool contains(Index u, Index i) const {
    const auto& items = per_user_[u];
    return std::binary_search(items.begin(), items.end(), i);
  }

  // All positives in (user, item) lexicographic order.
  std::vector<Interaction> pairs() const {
    std::vector<Interaction> out;
    out.reserve(size_);
    for (Index u = 0; u < per_user_.size(); ++u) {
      for (Index i : per_user_[u]) out.push_back({u, i});
    }
    return out;
  }

  std::vector<std::size_t> item_degrees() const {
    std::vector<std::size_t> deg(num_items_, 0);
    for (const auto& items : per_user_) {
      for (Index i : items) ++deg[i];
    }
    return deg;
  }

  // Fraction of the M x N matrix that is unobserved.
  double sparsity() const {
    const double cells = static_cast<double>(num_users()) * static_cast<double>(num_items_);
    return cells == 0.0 ? 1.0 : 1.0 - static_cast<double>(size_) / cells;
  }

  bool operator==(const InteractionTable&) const = default;

 private:
  std::size_t num_items_ = 0;
  std::size_t size_ = 0;
  std::vector<std::vector<Index>> per_user_;
};

struct SplitDataset {
  InteractionTable train;
  InteractionTable validation;
  InteractionTable test;
  std::uint64_t seed = 0;

  std::size_t num_users() const { return train.num_users(); }
  std::size_t num_items() const { return train.num_items(); }

  bool operator==(const SplitDataset&) const = default;
};

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

// MovieLens ratings: "user::item::rating::timestamp" per line.
inline std::vector<RawInteraction> load_movielens(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<RawInteraction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;

    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (auto pos = rest.find("::"); pos != std::string_view::npos; pos = rest.find("::")) {
      fields.push_back(rest.substr(0, pos));
      rest.remove_prefix(pos + 2);
    }
    fields.push_back(rest);
    if (fields.size() != 4) throw ParseError("expected 4 '::'-separated fields", line_no);
    RawInteraction r;
    r.user_key = std::string(fields[0]);
    r.item_key = std::string(fields[1]);
    if (r.user_key.empty() || r.item_key.empty()) {
      throw ParseError("empty user or item identifier", line_no);
    }
    if (!parse_number(fields[2], r.rating)) throw ParseError("bad rating", line_no);
    if (!parse_number(fields[3], r.timestamp)) throw ParseError("bad timestamp", line_no);
    out.push_back(std::move(r));
  }
  return out;
}

// Amazon review dumps: one JSON object per line with reviewerID, asin and
// overall fields.
inline std::vector<RawInteraction> load_amazon_reviews(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<RawInteraction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", line_no);
    auto user = obj.find("reviewerID");
    auto item = obj.find("asin");
    auto rating = obj.find("overall");
    if (user == obj.end() || !user->is_string()) {
      throw ParseError("missing string field reviewerID", line_no);
    }
    if (item == obj.end() || !item->is_string()) {
      throw ParseError("missing string field asin", line_no);
    }
    if (rating == obj.end() || !rating->is_number()) {
      throw ParseError("missing numeric field overall", line_no);
    }
    RawInteraction r;
    r.user_key = user->get<std::string>();
    r.item_key = item->get<std::string>();
    if (r.user_key.empty() || r.item_key.empty()) {
      throw ParseError("empty user or item identifier", line_no);
    }
    r.rating = rating->get<double>();
    if (auto ts = obj.find("unixReviewTime"); ts != obj.end() && ts->is_number_integer()) {
      r.timestamp = ts->get<std::int64_t>();
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct IndexedCorpus {
  IdMap ids;
  InteractionTable table;
};

// Every rating becomes a positive; keys are numbered in first-appearance order.
inline IndexedCorpus binarize_and_index(const std::vector<RawInteraction>& raw) {
  IndexedCorpus out;
  std::vector<Interaction> pairs;
  pairs.reserve(raw.size());
  for (const auto& r : raw) {
    pairs.push_back({out.ids.users.add(r.user_key), out.ids.items.add(r.item_key)});
  }
  out.table = InteractionTable::from_pairs(out.ids.users.size(), out.ids.items.size(), pairs);
  return out;
}

// Iteratively removes users and items with fewer than k positives until every
// survivor has degree >= k. Survivors are renumbered densely in their original
// order; when `ids` is given it is renumbered the same way.
inline InteractionTable kcore_filter(const InteractionTable& table, std::size_t k,
                                     IdMap* ids = nullptr) {
  if (k < 1) throw ConfigError("k-core level must be >= 1");
  const std::size_t num_users = table.num_users();
  const std::size_t num_items = table.num_items();

  std::vector<std::vector<Index>> users_of(num_items);
  for (Index u = 0; u < num_users; ++u) {
    for (Index i : table.items_of(u)) users_of[i].push_back(u);
  }
  std::vector<std::size_t> user_deg(num_users), item_deg(num_items);
  for (Index u = 0; u < num_users; ++u) user_deg[u] = table.items_of(u).size();
  for (Index i = 0; i < num_items; ++i) item_deg[i] = users_of[i].size();

  std::vector<bool> user_alive(num_users, true), item_alive(num_items, true);
  // Worklist entries: (is_item, index).
  std::vector<std::pair<bool, Index>> work;
  for (Index u = 0; u < num_users; ++u) {
    if (user_deg[u] < k) work.push_back({false, u});
  }
  for (Index i = 0; i < num_items; ++i) {
    if (item_deg[i] < k) work.push_back({true, i});
  }
  while (!work.empty()) {
    auto [is_item, idx] = work.back();
    work.pop_back();
    if (is_item) {
      if (!item_alive[idx]) continue;
      item_alive[idx] = false;
      for (Index u : users_of[idx]) {
        if (user_alive[u] && user_deg[u]-- == k) work.push_back({false, u});
      }
    } else {
      if (!user_alive[idx]) continue;
      user_alive[idx] = false;
      for (Index i : table.items_of(idx)) {
        if (item_alive[i] && item_deg[i]-- == k) work.push_back({true, i});
      }
    }
  }

  constexpr Index kDropped = static_cast<Index>(-1);
  std::vector<Index> user_new(num_users, kDropped), item_new(num_items, kDropped);
  std::vector<Index> kept_users, kept_items;
  for (Index u = 0; u < num_users; ++u) {
    if (user_alive[u] && user_deg[u] > 0) {
      user_new[u] = static_cast<Index>(kept_users.size());
      kept_users.push_back(u);
    }
  }
  for (Index i = 0; i < num_items; ++i) {
    if (item_alive[i] && item_deg[i] > 0) {
      item_new[i] = static_cast<Index>(kept_items.size());
      kept_items.push_back(i);
    }
  }

  std::vector<Interaction> pairs;
  for (Index u : kept_users) {
    for (Index i : table.items_of(u)) {
      if (item_new[i] != kDropped) pairs.push_back({user_new[u], item_new[i]});
    }
  }
  if (ids != nullptr) {
    ids->users = ids->users.select(kept_users);
    ids->items = ids->items.select(kept_items);
  }
  return InteractionTable::from_pairs(kept_users.size(), kept_items.size(), pairs);
}

// Uniform random partition of the positives. Validation and test receive
// floor(ratio * n) pairs each and train takes the remainder; validation/test
// pairs whose user or item has no train positive are then dropped.
inline SplitDataset split(const InteractionTable& table, const SplitRatios& ratios,
                          std::uint64_t seed) {
  if (ratios.train < 0 || ratios.validation < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  auto pairs = table.pairs();
  Rng rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);

  const auto n = static_cast<double>(pairs.size());
  const auto n_valid = static_cast<std::size_t>(std::floor(ratios.validation * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios.test * n + 1e-9));
  const std::size_t n_train = pairs.size() - n_valid - n_test;

  const auto first = pairs.begin();
  std::vector<Interaction> train(first, first + n_train);
  std::vector<Interaction> valid(first + n_train, first + n_train + n_valid);
  std::vector<Interaction> test(first + n_train + n_valid, pairs.end());

  std::vector<bool> warm_user(table.num_users(), false), warm_item(table.num_items(), false);
  for (const auto& p : train) {
    warm_user[p.user] = true;
    warm_item[p.item] = true;
  }
  auto prune = [&](std::vector<Interaction>& held_out) {
    std::erase_if(held_out, [&](const Interaction& p) {
      return !warm_user[p.user] || !warm_item[p.item];
    });
  };
  prune(valid);
  prune(test);

  SplitDataset out;
  out.train = InteractionTable::from_pairs(table.num_users(), table.num_items(), train);
  out.validation = InteractionTable::from_pairs(table.num_users(), table.num_items(), valid);
  out.test = InteractionTable::from_pairs(table.num_users(), table.num_items(), test);
  out.seed = seed;
  return out;
}

// Canonical split files: header "M N seed", then one "u<TAB>i" line per
// positive.
inline void write_table(std::ostream& out, const InteractionTable& table, std::uint64_t seed) {
  out << table.num_users() << ' ' << table.num_items() << ' ' << seed << '\n';
  for (Index u = 0; u < table.num_users(); ++u) {
    for (Index i : table.items_of(u)) out << u << '\t' << i << '\n';
  }
}

struct TableFile {
  InteractionTable table;
  std::uint64_t seed = 0;
};

inline TableFile read_table(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header", line_no);
  detail::strip_cr(line);
  std::size_t num_users = 0, num_items = 0;
  std::uint64_t seed = 0;
  {
    std::istringstream header(line);
    std::string a, b, c, extra;
    header >> a >> b >> c;
    if (!parse_number(a, num_users) || !parse_number(b, num_items) ||
        !parse_number(c, seed) || (header >> extra)) {
      throw ParseError("header must be 'M N seed'", line_no);
    }
  }
  std::vector<Interaction> pairs;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto tab = line.find('\t');
    Interaction p{};
    if (tab == std::string::npos ||
        !parse_number(std::string_view(line).substr(0, tab), p.user) ||
        !parse_number(std::string_view(line).substr(tab + 1), p.item)) {
      throw ParseError("expected 'u<TAB>i'", line_no);
    }
    if (p.user >= num_users || p.item >= num_items) {
      throw ParseError("index outside header dimensions", line_no);
    }
    pairs.push_back(p);
  }
  return {InteractionTable::from_pairs(num_users, num_items, pairs), seed};
}

inline void write_keys(const std::filesystem::path& path, const KeyIndex& keys) {
  auto out = detail::open_output(path);
  for (const auto& k : keys.keys()) out << k << '\n';
}

inline KeyIndex read_keys(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  KeyIndex keys;
  std::string line;
  while (std::getline(in, line)) {
    detail::strip_cr(line);
    keys.add(line);
  }
  return keys;
}

namespace split_files {
inline constexpr const char* kTrain = "train.tsv";
inline constexpr const char* kValidation = "valid.tsv";
inline constexpr const char* kTest = "test.tsv";
inline constexpr const char* kUsers = "users.txt";
inline constexpr const char* kItems = "items.txt";
}  // namespace split_files

inline void save_split(const std::filesystem::path& dir, const SplitDataset& data,
                       const IdMap* ids = nullptr) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const InteractionTable& t) {
    auto out = detail::open_output(dir / name);
    write_table(out, t, data.seed);
    if (!out) throw IoError("failed writing " + (dir / name).string());
  };
  write(split_files::kTrain, data.train);
  write(split_files::kValidation, data.validation);
  write(split_files::kTest, data.test);
  if (ids != nullptr) {
    write_keys(dir / split_files::kUsers, ids->users);
    write_keys(dir / split_files::kItems, ids->items);
  }
}

inline SplitDataset load_split(const std::filesystem::path& dir) {
  auto read = [&](const char* name) {
    auto in = detail::open_input(dir / name);
    try {
      return read_table(in);
    } catch (const ParseError& e) {
      throw ParseError((dir / name).string() + ": " + e.what(), e.line());
    }
  };
  auto train = read(split_files::kTrain);
  auto valid = read(split_files::kValidation);
  auto test = read(split_files::kTest);
  if (valid.table.num_users() != train.table.num_users() ||
      test.table.num_users() != train.table.num_users() ||
      valid.table.num_items() != train.table.num_items() ||
      test.table.num_items() != train.table.num_items()) {
    throw Error("split files in " + dir.string() + " disagree on dimensions");
  }
  return {std::move(train.table), std::move(valid.table), std::move(test.table), train.seed};
}

}  // namespace nbpo
