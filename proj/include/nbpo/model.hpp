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
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbpo/common.hpp"

namespace nbpo {

// Preference factors: predicted score R_ui = U_u . V_i.
struct PreferenceParams {
  Matrix users;  // M x K
  Matrix items;  // N x K

  std::size_t dim() const { return users.cols(); }
  bool operator==(const PreferenceParams&) const = default;
};

// Label-noise factors: flip logit G_ui = P_u . Q_i, where sigmoid(G_ui) is the
// probability that a true positive was observed as 0. dim() == 0 means G == 0.
struct NoiseParams {
  Matrix users;  // M x L
  Matrix items;  // N x L

  std::size_t dim() const { return users.cols(); }
  bool operator==(const NoiseParams&) const = default;
};

struct ModelParams {
  PreferenceParams preference;
  NoiseParams noise;

  bool operator==(const ModelParams&) const = default;
};

struct InitSpec {
  std::uint64_t seed = 0;
  double scale = 0.01;  // stddev of the zero-mean Gaussian entries
};

inline ModelParams init_params(std::size_t num_users, std::size_t num_items, std::size_t k,
                               std::size_t l, const InitSpec& spec) {
  if (num_users < 1 || num_items < 1) throw ConfigError("need at least one user and item");
  if (k < 1) throw ConfigError("latent dimension K must be >= 1");
  if (!(spec.scale > 0.0)) throw ConfigError("init scale must be > 0");

  Rng rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, spec.scale);
  auto fill = [&](Matrix& m) {
    for (double& v : m.data()) v = gauss(rng);
  };
  ModelParams p{{Matrix(num_users, k), Matrix(num_items, k)},
                {Matrix(num_users, l), Matrix(num_items, l)}};
  fill(p.preference.users);
  fill(p.preference.items);
  fill(p.noise.users);
  fill(p.noise.items);
  return p;
}

namespace detail {
inline void check_index(const Matrix& users, const Matrix& items, Index u, Index i) {
  if (u >= users.rows() || i >= items.rows()) {
    throw std::out_of_range("index (" + std::to_string(u) + ", " + std::to_string(i) +
                            ") out of range");
  }
}
}  // namespace detail

inline double score(const PreferenceParams& params, Index u, Index i) {
  detail::check_index(params.users, params.items, u, i);
  return dot(params.users.row(u), params.items.row(i));
}

inline double noise_logit(const NoiseParams& params, Index u, Index i) {
  detail::check_index(params.users, params.items, u, i);
  if (params.dim() == 0) return 0.0;
  return dot(params.users.row(u), params.items.row(i));
}

// Scores of every item for user u.
inline void score_all(const PreferenceParams& params, Index u, std::span<double> out) {
  const auto user_row = params.users.row(u);
  for (std::size_t i = 0; i < params.items.rows(); ++i) {
    out[i] = dot(user_row, params.items.row(i));
  }
}

// Top-k items by descending score, ties broken by ascending item index.
// `excluded` must be sorted ascending. Returns fewer than k items when fewer
// candidates exist.
inline std::vector<Index> top_k(std::span<const double> scores, std::size_t k,
                                std::span<const Index> excluded = {}) {
  std::vector<Index> candidates;
  candidates.reserve(scores.size());
  auto ex = excluded.begin();
  for (Index i = 0; i < scores.size(); ++i) {
    while (ex != excluded.end() && *ex < i) ++ex;
    if (ex != excluded.end() && *ex == i) continue;
    candidates.push_back(i);
  }
  const std::size_t n = std::min(k, candidates.size());
  auto before = [&](Index a, Index b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n),
                    candidates.end(), before);
  candidates.resize(n);
  return candidates;
}

// Ranking depends on the preference factors only; the noise factors never
// influence predictions.
inline std::vector<Index> rank_topk(const PreferenceParams& params, Index u, std::size_t k,
                                    std::span<const Index> excluded = {}) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (u >= params.users.rows()) throw std::out_of_range("user index out of range");
  std::vector<double> scores(params.items.rows());
  score_all(params, u, scores);
  return top_k(scores, k, excluded);
}

// Checkpoint text format: header "M N K L", then the rows of U, V, P and Q in
// that order, one row per line, values in shortest round-trip form.
inline void save_checkpoint(std::ostream& out, const ModelParams& p) {
  out << p.preference.users.rows() << ' ' << p.preference.items.rows() << ' '
      << p.preference.dim() << ' ' << p.noise.dim() << '\n';
  auto write = [&](const Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto row = m.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c) out << ' ';
        out << format_double(row[c]);
      }
      out << '\n';
    }
  };
  write(p.preference.users);
  write(p.preference.items);
  write(p.noise.users);
  write(p.noise.items);
}

inline ModelParams load_checkpoint(std::istream& in) {
  std::size_t line_no = 0;
  std::string line;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw ParseError("unexpected end of checkpoint", line_no + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };
  next_line();
  std::size_t m = 0, n = 0, k = 0, l = 0;
  {
    std::istringstream header(line);
    std::string f[4];
    header >> f[0] >> f[1] >> f[2] >> f[3];
    if (!parse_number(f[0], m) || !parse_number(f[1], n) || !parse_number(f[2], k) ||
        !parse_number(f[3], l)) {
      throw ParseError("checkpoint header must be 'M N K L'", line_no);
    }
  }
  ModelParams p{{Matrix(m, k), Matrix(n, k)}, {Matrix(m, l), Matrix(n, l)}};
  auto read = [&](Matrix& mat) {
    for (std::size_t r = 0; r < mat.rows(); ++r) {
      next_line();
      std::istringstream row(line);
      std::string tok;
      auto dst = mat.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) {
        if (!(row >> tok) || !parse_number(tok, dst[c])) {
          throw ParseError("bad checkpoint value", line_no);
        }
      }
      if (row >> tok) throw ParseError("too many values in checkpoint row", line_no);
    }
  };
  read(p.preference.users);
  read(p.preference.items);
  read(p.noise.users);
  read(p.noise.items);
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  save_checkpoint(out, p);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace nbpo
