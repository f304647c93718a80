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

// Mini-batch SGD for matrix factorization under pairwise (BPR, WBPR) and
// point-wise (BPO and the noisy-label robust NBPO family) objectives, with
// rho sampled unvoted items per positive per epoch.
//
// A step accumulates the gradient of the whole batch at the batch-start
// parameters, then applies it once. Regularization decays only the rows the
// batch touched, once per batch.

#pragma once

#include <algorithm>
#include <cassert>
#include <cctype>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nbpo/common.hpp"
#include "nbpo/corpus.hpp"
#include "nbpo/eval.hpp"
#include "nbpo/model.hpp"
#include "nbpo/objective.hpp"

namespace nbpo {

enum class Optimizer { kBpr, kWbpr, kBpo, kNbpoO, kNbpoS, kNbpoSs };

inline std::string_view to_string(Optimizer opt) {
  switch (opt) {
    case Optimizer::kBpr: return "BPR";
    case Optimizer::kWbpr: return "WBPR";
    case Optimizer::kBpo: return "BPO";
    case Optimizer::kNbpoO: return "NBPO_O";
    case Optimizer::kNbpoS: return "NBPO_S";
    case Optimizer::kNbpoSs: return "NBPO_SS";
  }
  return "?";
}

// Accepts the canonical names case-insensitively, with '-' or '_'.
inline std::optional<Optimizer> parse_optimizer(std::string_view name) {
  std::string norm;
  for (char c : name) {
    norm.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  for (auto opt : {Optimizer::kBpr, Optimizer::kWbpr, Optimizer::kBpo, Optimizer::kNbpoO,
                   Optimizer::kNbpoS, Optimizer::kNbpoSs}) {
    if (norm == to_string(opt)) return opt;
  }
  if (norm == "NBPO") return Optimizer::kNbpoSs;
  return std::nullopt;
}

inline bool is_pairwise(Optimizer opt) {
  return opt == Optimizer::kBpr || opt == Optimizer::kWbpr;
}

inline bool uses_noise(Optimizer opt) {
  return opt == Optimizer::kNbpoO || opt == Optimizer::kNbpoS || opt == Optimizer::kNbpoSs;
}

struct TrainConfig {
  Optimizer optimizer = Optimizer::kNbpoSs;
  double eta = 0.005;
  double lambda_theta = 0.5;
  double lambda_phi = 0.5;
  std::size_t rho = 3;
  std::size_t batch_size = 2000;
  std::size_t k = 50;
  std::size_t l = 10;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  // Multiply positive-sample contributions by rho.
  bool balance_positives = false;
  double init_scale = 0.01;
  // Stop after this many epochs without a validation F1@2 improvement; 0 = off.
  std::size_t patience = 0;
  // Exclude each user's train positives when ranking for evaluation.
  bool exclude_train = true;

  // L and lambda_phi only matter for the noise-aware optimizers.
  std::size_t effective_l() const { return uses_noise(optimizer) ? l : 0; }

  void validate() const {
    if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
    if (lambda_theta < 0.0 || lambda_phi < 0.0) throw ConfigError("lambdas must be >= 0");
    if (rho < 1) throw ConfigError("rho must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (k < 1) throw ConfigError("K must be >= 1");
    if (!(init_scale > 0.0)) throw ConfigError("init_scale must be > 0");
  }

  RegSpec reg() const { return {lambda_theta, lambda_phi}; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"optimizer", std::string(to_string(c.optimizer))},
          {"eta", c.eta},
          {"lambda_theta", c.lambda_theta},
          {"lambda_phi", c.lambda_phi},
          {"rho", c.rho},
          {"batch_size", c.batch_size},
          {"k", c.k},
          {"l", c.l},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"balance_positives", c.balance_positives},
          {"init_scale", c.init_scale},
          {"patience", c.patience},
          {"exclude_train", c.exclude_train}};
}

// ---- negative sampling -----------------------------------------------------

namespace detail {
inline void require_unvoted(const InteractionTable& train, Index u) {
  if (train.items_of(u).size() >= train.num_items()) {
    throw Error("user " + std::to_string(u) + " has no unvoted items to sample");
  }
}
}  // namespace detail

// rho independent uniform draws from the items u has not voted in train.
inline std::vector<Index> sample_negatives(const InteractionTable& train, Index u,
                                           std::size_t rho, Rng& rng) {
  detail::require_unvoted(train, u);
  std::vector<Index> out;
  out.reserve(rho);
  while (out.size() < rho) {
    const auto j = static_cast<Index>(uniform_index(rng, train.num_items()));
    if (!train.contains(u, j)) out.push_back(j);
  }
  return out;
}

// Draws unvoted items with probability proportional to train popularity.
// Users whose unvoted items all have zero popularity fall back to uniform.
class PopularitySampler {
 public:
  explicit PopularitySampler(std::vector<double> popularity)
      : popularity_(std::move(popularity)),
        global_(popularity_.begin(), popularity_.end()) {
    for (double p : popularity_) {
      if (p < 0.0) throw ConfigError("popularity weights must be >= 0");
      total_ += p;
    }
  }

  static PopularitySampler from_train(const InteractionTable& train) {
    const auto deg = train.item_degrees();
    return PopularitySampler(std::vector<double>(deg.begin(), deg.end()));
  }

  std::vector<Index> draw(const InteractionTable& train, Index u, std::size_t rho,
                          Rng& rng) const {
    detail::require_unvoted(train, u);
    double voted_mass = 0.0;
    for (Index i : train.items_of(u)) voted_mass += popularity_[i];
    const double unvoted_mass = total_ - voted_mass;
    if (!(unvoted_mass > 0.0)) return sample_negatives(train, u, rho, rng);

    std::vector<Index> out;
    out.reserve(rho);
    if (unvoted_mass >= 0.1 * total_) {
      // Rejection from the global distribution is cheap here.
      while (out.size() < rho) {
        const auto j = static_cast<Index>(global_(rng));
        if (!train.contains(u, j)) out.push_back(j);
      }
      return out;
    }
    std::vector<double> weights(popularity_);
    for (Index i : train.items_of(u)) weights[i] = 0.0;
    std::discrete_distribution<std::size_t> local(weights.begin(), weights.end());
    while (out.size() < rho) out.push_back(static_cast<Index>(local(rng)));
    return out;
  }

 private:
  std::vector<double> popularity_;
  mutable std::discrete_distribution<std::size_t> global_;
  double total_ = 0.0;
};

inline std::vector<Index> sample_negatives_wbpr(const InteractionTable& train, Index u,
                                                std::size_t rho,
                                                std::span<const double> popularity, Rng& rng) {
  return PopularitySampler(std::vector<double>(popularity.begin(), popularity.end()))
      .draw(train, u, rho, rng);
}

// ---- batches and gradients -------------------------------------------------

// negatives[p * rho + r] belongs to positives[p].
struct Batch {
  std::vector<Interaction> positives;
  std::vector<Interaction> negatives;
  std::size_t rho = 1;
};

// Dense gradient storage reused across steps; only touched rows are non-zero.
class GradientBuffer {
 public:
  GradientBuffer() = default;
  GradientBuffer(std::size_t num_users, std::size_t num_items, std::size_t k, std::size_t l)
      : users_(num_users, k), items_(num_items, k), noise_users_(num_users, l),
        noise_items_(num_items, l), user_seen_(num_users, 0), item_seen_(num_items, 0) {}

  void clear() {
    for (Index u : touched_users_) {
      std::fill(users_.row(u).begin(), users_.row(u).end(), 0.0);
      std::fill(noise_users_.row(u).begin(), noise_users_.row(u).end(), 0.0);
      user_seen_[u] = 0;
    }
    for (Index i : touched_items_) {
      std::fill(items_.row(i).begin(), items_.row(i).end(), 0.0);
      std::fill(noise_items_.row(i).begin(), noise_items_.row(i).end(), 0.0);
      item_seen_[i] = 0;
    }
    touched_users_.clear();
    touched_items_.clear();
  }

  void touch(Index u, Index i) {
    if (!user_seen_[u]) {
      user_seen_[u] = 1;
      touched_users_.push_back(u);
    }
    if (!item_seen_[i]) {
      item_seen_[i] = 1;
      touched_items_.push_back(i);
    }
  }

  Matrix& users() { return users_; }
  Matrix& items() { return items_; }
  Matrix& noise_users() { return noise_users_; }
  Matrix& noise_items() { return noise_items_; }
  const Matrix& users() const { return users_; }
  const Matrix& items() const { return items_; }
  const Matrix& noise_users() const { return noise_users_; }
  const Matrix& noise_items() const { return noise_items_; }
  const std::vector<Index>& touched_users() const { return touched_users_; }
  const std::vector<Index>& touched_items() const { return touched_items_; }

 private:
  Matrix users_, items_, noise_users_, noise_items_;
  std::vector<char> user_seen_, item_seen_;
  std::vector<Index> touched_users_, touched_items_;
};

inline GradientBuffer make_gradient_buffer(const ModelParams& p) {
  return GradientBuffer(p.preference.users.rows(), p.preference.items.rows(),
                        p.preference.dim(), p.noise.dim());
}

namespace detail {

inline void add_theta(const ModelParams& p, GradientBuffer& g, Index u, Index i, double c) {
  axpy(c, p.preference.items.row(i), g.users().row(u));
  axpy(c, p.preference.users.row(u), g.items().row(i));
}

inline void add_phi(const ModelParams& p, GradientBuffer& g, Index u, Index i, double c) {
  if (p.noise.dim() == 0) return;
  axpy(c, p.noise.items.row(i), g.noise_users().row(u));
  axpy(c, p.noise.users.row(u), g.noise_items().row(i));
}

// Per-term value and (theta, phi) coefficients for a point-wise optimizer.
inline std::pair<double, Coefficients> pointwise_term(Optimizer opt, const SampleTerm& t) {
  switch (opt) {
    case Optimizer::kBpo: return {bpo_term(t), {bpo_coefficient(t), 0.0}};
    case Optimizer::kNbpoO: return {nbpo_log_observed_prob(t), nbpo_log_coefficients(t)};
    case Optimizer::kNbpoS: return {nbpo_observed_prob(t), nbpo_prob_coefficients(t)};
    case Optimizer::kNbpoSs: return {nbpo_observed_prob(t), surrogate_coefficients(t)};
    default: throw Error("not a point-wise optimizer");
  }
}

}  // namespace detail

// Accumulates the ascent direction of the batch objective into `grad`
// (cleared first), including -lambda * row for every touched row. Returns the
// batch's data-term objective value at the current parameters.
inline double compute_gradient(const ModelParams& params, const Batch& batch,
                               const TrainConfig& config, GradientBuffer& grad) {
  grad.clear();
  double objective = 0.0;
  const std::size_t rho = batch.rho;
  if (batch.negatives.size() != batch.positives.size() * rho) {
    throw Error("batch must hold rho negatives per positive");
  }

  if (is_pairwise(config.optimizer)) {
    for (std::size_t p = 0; p < batch.positives.size(); ++p) {
      const auto [u, i] = batch.positives[p];
      const auto user_row = params.preference.users.row(u);
      const auto item_row = params.preference.items.row(i);
      const double r_ui = dot(user_row, item_row);
      for (std::size_t r = 0; r < rho; ++r) {
        const Index j = batch.negatives[p * rho + r].item;
        const auto neg_row = params.preference.items.row(j);
        const double diff = r_ui - dot(user_row, neg_row);
        objective += bpr_pair_term(diff);
        const double c = bpr_coefficient(diff);
        grad.touch(u, i);
        grad.touch(u, j);
        axpy(c, item_row, grad.users().row(u));
        axpy(-c, neg_row, grad.users().row(u));
        axpy(c, user_row, grad.items().row(i));
        axpy(-c, user_row, grad.items().row(j));
      }
    }
  } else {
    const double pos_weight = config.balance_positives ? static_cast<double>(rho) : 1.0;
    const bool noise = params.noise.dim() > 0;
    auto visit = [&](const Interaction& x, int label, double weight) {
      const SampleTerm t = make_term(params, x.user, x.item, label);
      const auto [value, c] = detail::pointwise_term(config.optimizer, t);
      objective += weight * value;
      grad.touch(x.user, x.item);
      detail::add_theta(params, grad, x.user, x.item, weight * c.theta);
      if (noise) detail::add_phi(params, grad, x.user, x.item, weight * c.phi);
    };
    for (const auto& x : batch.positives) visit(x, 1, pos_weight);
    for (const auto& x : batch.negatives) visit(x, 0, 1.0);
  }

  const double lt = config.lambda_theta;
  const double lp = uses_noise(config.optimizer) ? config.lambda_phi : 0.0;
  for (Index u : grad.touched_users()) {
    axpy(-lt, params.preference.users.row(u), grad.users().row(u));
    axpy(-lp, params.noise.users.row(u), grad.noise_users().row(u));
  }
  for (Index i : grad.touched_items()) {
    axpy(-lt, params.preference.items.row(i), grad.items().row(i));
    axpy(-lp, params.noise.items.row(i), grad.noise_items().row(i));
  }
  return objective;
}

inline void apply_gradient(ModelParams& params, const GradientBuffer& grad, double eta) {
  for (Index u : grad.touched_users()) {
    axpy(eta, grad.users().row(u), params.preference.users.row(u));
    axpy(eta, grad.noise_users().row(u), params.noise.users.row(u));
  }
  for (Index i : grad.touched_items()) {
    axpy(eta, grad.items().row(i), params.preference.items.row(i));
    axpy(eta, grad.noise_items().row(i), params.noise.items.row(i));
  }
}

// One SGD ascent step with the configured optimizer. Returns the batch
// objective value before the update.
inline double sgd_step(ModelParams& params, const Batch& batch, const TrainConfig& config,
                       GradientBuffer& grad) {
  const double objective = compute_gradient(params, batch, config, grad);
  apply_gradient(params, grad, config.eta);
  return objective;
}

namespace detail {
inline double step_as(Optimizer opt, ModelParams& params, const Batch& batch,
                      TrainConfig config) {
  config.optimizer = opt;
  auto grad = make_gradient_buffer(params);
  return sgd_step(params, batch, config, grad);
}
}  // namespace detail

inline void bpr_step(PreferenceParams& theta, const Batch& batch, const TrainConfig& config) {
  ModelParams p{std::move(theta), {}};
  p.noise = {Matrix(p.preference.users.rows(), 0), Matrix(p.preference.items.rows(), 0)};
  detail::step_as(Optimizer::kBpr, p, batch, config);
  theta = std::move(p.preference);
}

inline void bpo_step(PreferenceParams& theta, const Batch& batch, const TrainConfig& config) {
  ModelParams p{std::move(theta), {}};
  p.noise = {Matrix(p.preference.users.rows(), 0), Matrix(p.preference.items.rows(), 0)};
  detail::step_as(Optimizer::kBpo, p, batch, config);
  theta = std::move(p.preference);
}

inline void nbpo_step_ss(ModelParams& params, const Batch& batch, const TrainConfig& config) {
  detail::step_as(Optimizer::kNbpoSs, params, batch, config);
}

inline void nbpo_step_o(ModelParams& params, const Batch& batch, const TrainConfig& config) {
  detail::step_as(Optimizer::kNbpoO, params, batch, config);
}

inline void nbpo_step_s(ModelParams& params, const Batch& batch, const TrainConfig& config) {
  detail::step_as(Optimizer::kNbpoS, params, batch, config);
}

// Objective of a batch as a function of the parameters (regularization over
// all rows), consistent with compute_gradient on batches that touch every row.
inline double batch_objective(const ModelParams& params, const Batch& batch,
                              const TrainConfig& config) {
  const RegSpec reg = config.reg();
  if (is_pairwise(config.optimizer)) {
    double sum = 0.0;
    for (std::size_t p = 0; p < batch.positives.size(); ++p) {
      const auto [u, i] = batch.positives[p];
      for (std::size_t r = 0; r < batch.rho; ++r) {
        const Index j = batch.negatives[p * batch.rho + r].item;
        sum += bpr_pair_term(score(params.preference, u, i) - score(params.preference, u, j));
      }
    }
    return sum - preference_penalty(params.preference, reg);
  }
  const double pos_weight = config.balance_positives ? static_cast<double>(batch.rho) : 1.0;
  std::vector<SampleTerm> pos, neg;
  for (const auto& x : batch.positives) pos.push_back(make_term(params, x.user, x.item, 1));
  for (const auto& x : batch.negatives) neg.push_back(make_term(params, x.user, x.item, 0));
  const auto& th = params.preference;
  const auto& ph = params.noise;
  const RegSpec none{};
  auto data = [&](auto&& fn) { return pos_weight * fn(pos) + fn(neg); };
  switch (config.optimizer) {
    case Optimizer::kBpo:
      return data([&](const auto& t) { return bpo_loglik(t, th, none); }) -
             preference_penalty(th, reg);
    case Optimizer::kNbpoO:
      return data([&](const auto& t) { return nbpo_loglik(t, th, ph, none); }) -
             preference_penalty(th, reg) - noise_penalty(ph, reg);
    case Optimizer::kNbpoS:
    case Optimizer::kNbpoSs:
      return data([&](const auto& t) { return nbpo_surrogate(t, th, ph, none); }) -
             preference_penalty(th, reg) - noise_penalty(ph, reg);
    default: throw Error("unknown optimizer");
  }
}

// ---- training loop ---------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double objective = 0.0;
  MetricReport validation;
};

struct TrainHistory {
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  ModelParams best_params;
};

inline constexpr std::size_t kSelectionCutoff = 2;

// Sampler of negatives for one positive, per optimizer.
class NegativeSampler {
 public:
  NegativeSampler(const InteractionTable& train, Optimizer opt) : train_(&train) {
    if (opt == Optimizer::kWbpr) popularity_.emplace(PopularitySampler::from_train(train));
  }

  void draw(Index u, std::size_t rho, Rng& rng, std::vector<Interaction>& out) const {
    const auto items = popularity_ ? popularity_->draw(*train_, u, rho, rng)
                                   : sample_negatives(*train_, u, rho, rng);
    for (Index j : items) {
      assert(!train_->contains(u, j));
      out.push_back({u, j});
    }
  }

 private:
  const InteractionTable* train_;
  std::optional<PopularitySampler> popularity_;
};

// Trains from a fresh initialization. Every epoch shuffles the train
// positives, cuts them into batches, draws rho fresh negatives per positive,
// steps once per batch, and then calls `evaluator(params)` (validation
// metrics). The best epoch maximizes validation F1@2; earlier epochs win ties.
template <typename Evaluator>
TrainHistory train(const SplitDataset& data, const TrainConfig& config, Evaluator&& evaluator) {
  config.validate();
  if (data.train.empty()) throw Error("training set is empty");

  ModelParams params = init_params(data.num_users(), data.num_items(), config.k,
                                   config.effective_l(), {config.seed, config.init_scale});
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  GradientBuffer grad = make_gradient_buffer(params);
  NegativeSampler sampler(data.train, config.optimizer);
  auto positives = data.train.pairs();

  TrainHistory history;
  history.config = config;
  history.best_params = params;
  double best_f1 = -1.0;
  std::size_t since_best = 0;

  Batch batch;
  batch.rho = config.rho;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(positives.begin(), positives.end(), rng);
    double objective = 0.0;
    for (std::size_t b = 0; b < positives.size(); b += config.batch_size) {
      const std::size_t e = std::min(positives.size(), b + config.batch_size);
      batch.positives.assign(positives.begin() + static_cast<std::ptrdiff_t>(b),
                             positives.begin() + static_cast<std::ptrdiff_t>(e));
      batch.negatives.clear();
      for (const auto& x : batch.positives) sampler.draw(x.user, config.rho, rng, batch.negatives);
      objective += sgd_step(params, batch, config, grad);
    }
    objective -= preference_penalty(params.preference, config.reg());
    if (params.noise.dim() > 0) objective -= noise_penalty(params.noise, config.reg());

    EpochRecord rec{epoch, objective, evaluator(static_cast<const ModelParams&>(params))};
    const double f1 = rec.validation.f1_at(kSelectionCutoff);
    history.epochs.push_back(std::move(rec));
    if (f1 > best_f1) {
      best_f1 = f1;
      history.best_epoch = epoch;
      history.best_params = params;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }
  return history;
}

inline TrainHistory train(const SplitDataset& data, const TrainConfig& config) {
  return train(data, config, [&](const ModelParams& p) {
    return evaluate(FactorScorer{&p.preference}, data.validation,
                    config.exclude_train ? &data.train : nullptr);
  });
}

// CSV: epoch,objective,f1@k...,ndcg@k... (validation), one line per epoch.
inline void write_history_csv(std::ostream& out, const TrainHistory& h) {
  out << "epoch,objective";
  const auto& ks = h.epochs.empty() ? default_cutoffs() : h.epochs.front().validation.ks;
  for (auto k : ks) out << ",f1@" << k;
  for (auto k : ks) out << ",ndcg@" << k;
  out << '\n';
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << format_double(e.objective);
    for (double v : e.validation.f1) out << ',' << format_double(v);
    for (double v : e.validation.ndcg) out << ',' << format_double(v);
    out << '\n';
  }
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["n_users_evaluated"] = r.n_users_evaluated;
  for (std::size_t s = 0; s < r.ks.size(); ++s) {
    j["f1@" + std::to_string(r.ks[s])] = r.f1[s];
    j["ndcg@" + std::to_string(r.ks[s])] = r.ndcg[s];
  }
  return j;
}

inline nlohmann::json history_summary(const TrainHistory& h) {
  nlohmann::json j;
  j["config"] = to_json(h.config);
  j["epochs_run"] = h.epochs.size();
  j["best_epoch"] = h.best_epoch;
  if (h.best_epoch > 0) j["best_validation"] = to_json(h.epochs[h.best_epoch - 1].validation);
  return j;
}

}  // namespace nbpo
