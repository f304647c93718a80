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

// Acceptance suite: one PASS / FAIL / SKIP line per criterion. Exit status is
// non-zero iff any criterion fails.
//
// MovieLens-1M criteria need the ratings file; point NBPO_MOVIELENS_RATINGS at
// ml-1m/ratings.dat (or place it at data/ml-1m/ratings.dat in the source
// tree). Without it those criteria are reported as SKIP.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_check.hpp"
#include "nbpo/nbpo.hpp"
#include "test_util.hpp"

namespace {

using namespace nbpo;
using Clock = std::chrono::steady_clock;

// ---- pinned tolerances -----------------------------------------------------
constexpr double kFdRelTol = 1e-5;
constexpr double kFdFloor = 1e-3;
constexpr double kFdBudgetSeconds = 10.0;
constexpr double kSurrogateTol = 1e-12;
constexpr double kZeroFlipTol = 1e-15;
constexpr double kComplementTol = 1e-15;
constexpr double kMetricTol = 1e-12;
constexpr double kNdcgRounded = 0.63093;
constexpr double kNdcgRoundedTol = 5e-6;
constexpr double kBpoMarginRel = 0.03;     // NBPO-ss over BPO on test F1@2
constexpr double kItemPopMarginRel = 0.50;  // BPO, NBPO-ss over ItemPop
constexpr std::size_t kMlInteractions = 1000209;
constexpr std::size_t kMlUsers = 6040;
constexpr std::size_t kMlItems = 3900;
constexpr double kMlSparsityPct = 95.7535;
constexpr double kMlSparsityTol = 5e-5;  // four decimals, in percent

enum class Status { kPass, kFail, kSkip };

struct Outcome {
  Status status;
  std::string detail;
};

Outcome pass(std::string d) { return {Status::kPass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::kFail, std::move(d)}; }
Outcome skip(std::string d) { return {Status::kSkip, std::move(d)}; }
Outcome check(bool ok, std::string d) { return {ok ? Status::kPass : Status::kFail, std::move(d)}; }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

std::string fix(double v, int digits = 5) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1 ----------------------------------------------------------------------
Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  for (auto opt : {Optimizer::kBpo, Optimizer::kNbpoO, Optimizer::kNbpoS}) {
    TrainConfig c;
    c.optimizer = opt;
    c.lambda_theta = 0.1;
    c.lambda_phi = 0.2;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto inst =
          testing::make_fd_instance(seed, 5, 5, 3, uses_noise(opt) ? 2 : 0, 6, 6);
      const double e = testing::max_fd_relative_error(inst, c, kFdFloor);
      if (e > worst) {
        worst = e;
        where = std::string(to_string(opt)) + " seed " + std::to_string(seed);
      }
    }
  }
  const double secs = seconds_since(t0);
  return check(worst <= kFdRelTol && secs < kFdBudgetSeconds,
               "BPO/NBPO_O/NBPO_S x 100 instances, max rel err " + sci(worst) + " (" + where +
                   ", limit " + sci(kFdRelTol) + "), " + fix(secs, 2) + " s (limit " +
                   fix(kFdBudgetSeconds, 0) + " s)");
}

// ---- 2 ----------------------------------------------------------------------
double plain_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Outcome surrogate_identity() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> d(-12.0, 12.0);
  double worst = 0.0;
  for (int n = 0; n < 10000; ++n) {
    const double g = d(rng), r = d(rng);
    const double sg = plain_sigmoid(g), sng = plain_sigmoid(-g);
    const double sr = plain_sigmoid(r), snr = plain_sigmoid(-r);
    const auto pos = surrogate_coefficients({0, 0, 1, r, g});
    const auto neg = surrogate_coefficients({0, 0, 0, r, g});
    for (double e : {pos.theta - sng * snr, pos.phi + sg * sr, neg.theta - (-sr + sg * snr),
                     neg.phi - sng * sr}) {
      worst = std::max(worst, std::abs(e));
    }
  }

  // The same coefficients drive nbpo_step_ss: a single-sample step with no
  // regularization moves U_u by eta * c * V_i.
  double step_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto p0 = init_params(2, 2, 3, 2, {seed, 0.8});
    TrainConfig c;
    c.eta = 0.5;
    c.lambda_theta = c.lambda_phi = 0.0;
    for (int label : {0, 1}) {
      ModelParams p = p0;
      Batch b;
      b.rho = 1;
      b.positives = {{0, 0}};
      b.negatives = {{1, 1}};
      nbpo_step_ss(p, b, c);
      const Index u = label == 1 ? 0 : 1;
      const double r = score(p0.preference, u, u), g = noise_logit(p0.noise, u, u);
      const double coef = label == 1 ? plain_sigmoid(-g) * plain_sigmoid(-r)
                                     : -plain_sigmoid(r) + plain_sigmoid(g) * plain_sigmoid(-r);
      for (std::size_t k = 0; k < 3; ++k) {
        const double moved = (p.preference.users(u, k) - p0.preference.users(u, k)) / c.eta;
        step_worst = std::max(step_worst, std::abs(moved - coef * p0.preference.items(u, k)));
      }
    }
  }

  double zero_worst = 0.0;
  for (double r = -30.0; r <= 30.0; r += 1.0 / 64) {
    const auto pos = surrogate_coefficients({0, 0, 1, r, 0.0});
    const auto neg = surrogate_coefficients({0, 0, 0, r, 0.0});
    zero_worst = std::max(zero_worst, std::abs(pos.theta - 0.5 * plain_sigmoid(-r)));
    zero_worst = std::max(zero_worst, std::abs(neg.theta - 0.5 * (1.0 - 3.0 * plain_sigmoid(r))));
  }
  const double root = -0.693147;
  const double at_root = surrogate_coefficients({0, 0, 0, -std::log(2.0), 0.0}).theta;
  const bool sign_change = surrogate_coefficients({0, 0, 0, root - 1e-4, 0.0}).theta > 0 &&
                           surrogate_coefficients({0, 0, 0, root + 1e-4, 0.0}).theta < 0;

  const bool ok = worst <= kSurrogateTol && step_worst <= 1e-12 && zero_worst <= kZeroFlipTol &&
                  std::abs(at_root) <= kZeroFlipTol && sign_change;
  return check(ok, "10^4 draws max |diff| " + sci(worst) + " (limit " + sci(kSurrogateTol) +
                       "); step-level " + sci(step_worst) + "; zero-flip-logit form " +
                       sci(zero_worst) + " (limit " + sci(kZeroFlipTol) +
                       "); negative coefficient at -ln 2 = " + sci(at_root) +
                       (sign_change ? ", sign change at -0.693147" : ", NO sign change"));
}

// ---- 3 ----------------------------------------------------------------------
Outcome jensen_bound() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> scale(0.05, 3.0);
  std::size_t violations = 0, strict_missing = 0, strict_cases = 0;
  double min_gap = HUGE_VAL;
  for (std::uint64_t n = 0; n < 10000; ++n) {
    const auto p = init_params(4, 4, 3, 2, {n, scale(rng)});
    std::vector<SampleTerm> terms;
    bool any_mixture = false;
    for (Index u = 0; u < 4; ++u) {
      for (Index i = 0; i < 4; ++i) {
        const int label = (u + i + n) % 3 == 0 ? 1 : 0;
        terms.push_back(make_term(p, u, i, label));
        if (label == 0) {
          const auto& t = terms.back();
          const double a = sigmoid(-t.score), b = sigmoid(t.noise_logit) * sigmoid(t.score);
          any_mixture = any_mixture || (a < 1.0 && b < 1.0);
        }
      }
    }
    const double lb = nbpo_lower_bound(terms, p.preference, p.noise, {});
    const double ll = nbpo_loglik(terms, p.preference, p.noise, {});
    if (lb > ll) ++violations;
    if (any_mixture) {
      ++strict_cases;
      if (!(lb < ll)) ++strict_missing;
    }
    min_gap = std::min(min_gap, ll - lb);
  }
  return check(violations == 0 && strict_missing == 0,
               "10^4 draws, " + std::to_string(violations) + " violations, " +
                   std::to_string(strict_missing) + "/" + std::to_string(strict_cases) +
                   " strict cases not strict, min gap " + sci(min_gap));
}

// ---- 4 ----------------------------------------------------------------------
Outcome numeric_kernels() {
  std::size_t non_finite = 0;
  for (double x = -1000.0; x <= 1000.0; x += 1.0 / 16) {
    if (!std::isfinite(log_sigmoid(x))) ++non_finite;
  }
  double worst = 0.0;
  for (double x = -50.0; x <= 50.0; x += 1.0 / 128) {
    worst = std::max(worst, std::abs(sigmoid(x) + sigmoid(-x) - 1.0));
  }
  return check(non_finite == 0 && worst <= kComplementTol,
               "log_sigmoid non-finite outputs on [-1000, 1000]: " + std::to_string(non_finite) +
                   "; max |s(x)+s(-x)-1| on [-50, 50]: " + sci(worst) + " (limit " +
                   sci(kComplementTol) + ")");
}

// ---- 5 ----------------------------------------------------------------------
Outcome corpus_invariants() {
  testing::TempDir dir("acc5");
  // Amazon-style JSON lines: a dense core plus a long tail that must peel off.
  const auto core = testing::clustered_table(150, 120, 3, 0.45, 0.05, 5);
  const auto tail = testing::random_table(400, 500, 0.01, 6);
  {
    std::ofstream out(dir.path() / "reviews.json");
    auto emit = [&](const std::string& u, const std::string& i, int stars) {
      out << "{\"reviewerID\": \"" << u << "\", \"asin\": \"" << i << "\", \"overall\": " << stars
          << ".0, \"unixReviewTime\": 1400000000, \"summary\": \"fixture\"}\n";
    };
    for (const auto& p : core.pairs()) {
      emit("C" + std::to_string(p.user), "B" + std::to_string(p.item), 1 + (p.user + p.item) % 5);
    }
    for (const auto& p : tail.pairs()) {
      emit("T" + std::to_string(p.user), "X" + std::to_string(p.item), 3);
    }
  }
  auto corpus = binarize_and_index(load_amazon_reviews(dir.path() / "reviews.json"));
  const auto filtered = kcore_filter(corpus.table, 14, &corpus.ids);
  std::size_t min_user = SIZE_MAX, min_item = SIZE_MAX;
  for (Index u = 0; u < filtered.num_users(); ++u) {
    min_user = std::min(min_user, filtered.items_of(u).size());
  }
  for (auto d : filtered.item_degrees()) min_item = std::min(min_item, d);
  const bool core_ok = !filtered.empty() && min_user >= 14 && min_item >= 14 &&
                       corpus.ids.users.size() == filtered.num_users() &&
                       kcore_filter(filtered, 14) == filtered;

  std::size_t bad_seeds = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t = testing::random_table(25 + seed % 7, 30 + seed % 11, 0.12, 500 + seed);
    const auto s = split(t, {}, seed);
    bool ok = s.train.size() + s.validation.size() + s.test.size() <= t.size();
    const auto deg = s.train.item_degrees();
    for (const auto* held : {&s.validation, &s.test}) {
      for (const auto& p : held->pairs()) {
        ok = ok && t.contains(p.user, p.item) && !s.train.contains(p.user, p.item) &&
             !s.train.items_of(p.user).empty() && deg[p.item] > 0;
      }
    }
    for (const auto& p : s.validation.pairs()) ok = ok && !s.test.contains(p.user, p.item);
    for (const auto& p : s.train.pairs()) ok = ok && t.contains(p.user, p.item);
    if (!ok) ++bad_seeds;
  }
  return check(core_ok && bad_seeds == 0,
               "14-core of " + std::to_string(corpus.table.size()) + " reviews -> " +
                   std::to_string(filtered.num_users()) + " users x " +
                   std::to_string(filtered.num_items()) + " items, min degrees " +
                   std::to_string(min_user) + "/" + std::to_string(min_item) +
                   "; split invariants violated on " + std::to_string(bad_seeds) + "/100 seeds");
}

// ---- 6 ----------------------------------------------------------------------
Outcome metric_suite() {
  // F1@2 with 1 hit and 3 relevant: P = 1/2, R = 1/3, F1 = 2PR/(P+R).
  const double p = 0.5, r = 1.0 / 3.0;
  const double f1_oracle = 2 * p * r / (p + r);
  const double ndcg_oracle = 1.0 / std::log2(3.0);
  const std::vector<Index> rec{8, 2};
  const double f1 = f1_at_k(rec, std::vector<Index>{2, 5, 9}, 2);
  const double ndcg = ndcg_at_k(rec, std::vector<Index>{2}, 2);

  // Ideal scorer over a random held-out table.
  const auto held = testing::random_table(60, 40, 0.1, 17);
  struct Ideal {
    const InteractionTable* t;
    void operator()(Index u, std::span<double> out) const {
      std::fill(out.begin(), out.end(), 0.0);
      for (Index i : t->items_of(u)) out[i] = 1.0;
    }
  };
  const auto report = evaluate(Ideal{&held}, held, nullptr);
  double min_ndcg = 1.0;
  for (double v : report.ndcg) min_ndcg = std::min(min_ndcg, v);

  // Per-user check, not only the mean.
  std::size_t below_one = 0;
  for (Index u = 0; u < held.num_users(); ++u) {
    if (held.items_of(u).empty()) continue;
    std::vector<double> s(held.num_items());
    Ideal{&held}(u, s);
    for (auto k : default_cutoffs()) {
      if (ndcg_at_k(top_k(s, k), held.items_of(u), k) != 1.0) ++below_one;
    }
  }
  const bool ok = std::abs(f1 - 0.4) <= kMetricTol && std::abs(f1 - f1_oracle) <= kMetricTol &&
                  std::abs(ndcg - ndcg_oracle) <= kMetricTol &&
                  std::abs(ndcg - kNdcgRounded) <= kNdcgRoundedTol && min_ndcg == 1.0 &&
                  below_one == 0;
  return check(ok, "F1@2 = " + fix(f1, 6) + ", NDCG@2 = " + fix(ndcg, 6) +
                       ", ideal scorer min NDCG = " + fix(min_ndcg, 6) + " over " +
                       std::to_string(report.n_users_evaluated) + " users (" +
                       std::to_string(below_one) + " user/cutoff pairs below 1)");
}

// ---- 7, 8, 10: MovieLens-1M ---------------------------------------------------
std::optional<fs::path> movielens_path() {
  if (const char* env = std::getenv("NBPO_MOVIELENS_RATINGS")) {
    if (fs::exists(env)) return fs::path(env);
  }
  const fs::path in_tree = fs::path(NBPO_SOURCE_DIR) / "data" / "ml-1m" / "ratings.dat";
  if (fs::exists(in_tree)) return in_tree;
  return std::nullopt;
}

struct DeskRuns {
  std::map<std::string, double> test_f1;  // method -> mean test F1@2
  double seconds = 0.0;
};

DeskRuns run_desk(const fs::path& ratings) {
  const auto t0 = Clock::now();
  const fs::path work = fs::path(NBPO_BINARY_DIR) / "acceptance_work" / "movielens";
  PrepSpec prep;
  prep.input = ratings;
  prep.split_seed = 0;
  prep.output_dir = work / "prepared";
  prepare(prep);
  const auto data = load_split(prep.output_dir);

  DeskRuns out;
  for (const std::string method : {"ITEMPOP", "BPO", "NBPO_O", "NBPO_S", "NBPO_SS"}) {
    auto spec = movielens_desk_preset();
    spec.data_dir = prep.output_dir;
    apply_setting(spec, "optimizer", method);
    spec.output_dir = work / "runs" / method;
    const auto r = run(spec, &data);
    out.test_f1[method] = r.test_mean.f1_at(2);
    std::cout << "  .. " << method << " mean test F1@2 " << fix(r.test_mean.f1_at(2)) << '\n'
              << std::flush;
  }
  out.seconds = seconds_since(t0);
  return out;
}

Outcome ordering_experiment(const std::optional<DeskRuns>& runs) {
  if (!runs) return skip("MovieLens-1M ratings not available (set NBPO_MOVIELENS_RATINGS)");
  const auto& f = runs->test_f1;
  const double ss = f.at("NBPO_SS"), bpo = f.at("BPO");
  const double rel = (ss - bpo) / bpo;
  const bool ok = rel >= kBpoMarginRel && ss >= f.at("NBPO_S") && ss >= f.at("NBPO_O");
  return check(ok, "test F1@2 NBPO_SS " + fix(ss) + ", BPO " + fix(bpo) + " (" +
                       fix(100 * rel, 2) + "% rel, need >= " + fix(100 * kBpoMarginRel, 0) +
                       "%), NBPO_S " + fix(f.at("NBPO_S")) + ", NBPO_O " + fix(f.at("NBPO_O")) +
                       "; " + fix(runs->seconds / 60, 1) + " min");
}

Outcome personalization(const std::optional<DeskRuns>& runs) {
  if (!runs) return skip("MovieLens-1M ratings not available (set NBPO_MOVIELENS_RATINGS)");
  const auto& f = runs->test_f1;
  const double pop = f.at("ITEMPOP");
  const double bpo_rel = (f.at("BPO") - pop) / pop, ss_rel = (f.at("NBPO_SS") - pop) / pop;
  return check(bpo_rel >= kItemPopMarginRel && ss_rel >= kItemPopMarginRel,
               "over ItemPop (" + fix(pop) + "): BPO +" + fix(100 * bpo_rel, 1) +
                   "%, NBPO_SS +" + fix(100 * ss_rel, 1) + "% (need >= " +
                   fix(100 * kItemPopMarginRel, 0) + "%)");
}

Outcome dataset_statistics(const std::optional<fs::path>& ratings) {
  if (!ratings) return skip("MovieLens-1M ratings not available (set NBPO_MOVIELENS_RATINGS)");
  const auto raw = load_movielens(*ratings);
  const auto c = binarize_and_index(raw);
  const double sparsity = 100.0 * c.table.sparsity();
  const bool ok = raw.size() == kMlInteractions && c.table.size() == kMlInteractions &&
                  c.table.num_users() == kMlUsers && c.table.num_items() == kMlItems &&
                  std::abs(sparsity - kMlSparsityPct) <= kMlSparsityTol;
  return check(ok, std::to_string(c.table.size()) + " / " + std::to_string(c.table.num_users()) +
                       " / " + std::to_string(c.table.num_items()) + " / " + fix(sparsity, 4) +
                       "% (expected 1000209 / 6040 / 3900 / 95.7535%)");
}

// ---- 9 ----------------------------------------------------------------------
Outcome determinism() {
  testing::TempDir dir("acc9");
  testing::write_movielens(dir.path() / "ratings.dat",
                           testing::clustered_table(150, 100, 4, 0.25, 0.03, 31));
  PrepSpec prep;
  prep.input = dir.path() / "ratings.dat";
  prep.split_seed = 7;
  prep.output_dir = dir.path() / "prepared";
  prepare(prep);

  auto spec = movielens_desk_preset();
  spec.data_dir = prep.output_dir;
  spec.train.k = 8;
  spec.train.l = 3;
  spec.train.batch_size = 256;
  spec.train.max_epochs = 5;
  spec.repeat_count = 2;

  std::vector<std::string> mismatched;
  for (const std::string method : {"NBPO_SS", "BPO", "BPR"}) {
    apply_setting(spec, "optimizer", method);
    std::vector<std::string> files;
    // Same spec and seed twice, the second time with a different worker count.
    for (const char* workers : {"1", "3"}) {
      setenv("NBPO_WORKERS", workers, 1);
      spec.output_dir = dir.path() / (method + "_" + workers);
      run(spec);
      files.push_back(testing::read_file(spec.output_dir / "metrics.csv") +
                      testing::read_file(spec.output_dir / "repeat_0" / "history.csv") +
                      testing::read_file(spec.output_dir / "repeat_1" / "history.csv"));
    }
    if (files[0] != files[1] || files[0].empty()) mismatched.push_back(method);
  }
  unsetenv("NBPO_WORKERS");
  std::string which;
  for (const auto& m : mismatched) which += " " + m;
  return check(mismatched.empty(), "metrics.csv + per-repeat history.csv compared byte-for-byte "
                                   "for NBPO_SS, BPO, BPR" +
                                       (which.empty() ? std::string(": identical")
                                                      : ": differ for" + which));
}

}  // namespace

int main() {
  std::cout << "NBPO acceptance suite\n" << std::flush;
  int failures = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kFail ? "FAIL" : "SKIP";
    if (o.status == Status::kFail) ++failures;
    std::cout << tag << "  [" << id << "] " << name << ": " << o.detail << '\n' << std::flush;
  };
  auto guarded = [&](auto&& fn) -> Outcome {
    try {
      return fn();
    } catch (const std::exception& e) {
      return fail(std::string("exception: ") + e.what());
    }
  };

  report(1, "gradient correctness", guarded(gradient_correctness));
  report(2, "surrogate-gradient identity", guarded(surrogate_identity));
  report(3, "Jensen bound", guarded(jensen_bound));
  report(4, "numeric kernels", guarded(numeric_kernels));
  report(5, "corpus invariants", guarded(corpus_invariants));
  report(6, "metric unit suite", guarded(metric_suite));

  const auto ratings = movielens_path();
  std::optional<DeskRuns> desk;
  Outcome desk_error{Status::kSkip, ""};
  if (ratings) {
    std::cout << "  .. running MovieLens-1M desk preset from " << ratings->string() << '\n';
    try {
      desk = run_desk(*ratings);
    } catch (const std::exception& e) {
      desk_error = fail(std::string("exception: ") + e.what());
    }
  }
  if (desk_error.status == Status::kFail) {
    report(7, "MovieLens-1M ordering experiment", desk_error);
    report(8, "personalization sanity", desk_error);
  } else {
    report(7, "MovieLens-1M ordering experiment", guarded([&] { return ordering_experiment(desk); }));
    report(8, "personalization sanity", guarded([&] { return personalization(desk); }));
  }
  report(9, "determinism", guarded(determinism));
  report(10, "dataset statistics", guarded([&] { return dataset_statistics(ratings); }));

  std::cout << (failures == 0 ? "acceptance: no failures\n"
                              : "acceptance: " + std::to_string(failures) + " failing\n");
  return failures == 0 ? 0 : 1;
}
