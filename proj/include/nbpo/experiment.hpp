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

// Experiment harness: dataset preparation with content-hash caching, repeated
// runs with mean/stddev summaries, staged grid search and plot-data emission.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "nbpo/baselines.hpp"
#include "nbpo/common.hpp"
#include "nbpo/corpus.hpp"
#include "nbpo/eval.hpp"
#include "nbpo/model.hpp"
#include "nbpo/trainer.hpp"

namespace nbpo {

namespace fs = std::filesystem;

inline constexpr int kSchemaVersion = 1;

// Runs fn(0..n-1) on up to `workers` threads; each index runs exactly once.
inline void parallel_for(std::size_t n, unsigned workers,
                         const std::function<void(std::size_t)>& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

// ---- preparation -----------------------------------------------------------

enum class DatasetFormat { kMovieLens, kAmazon };

struct PrepSpec {
  DatasetFormat format = DatasetFormat::kMovieLens;
  fs::path input;
  std::size_t kcore = 0;  // 0 disables k-core filtering
  std::uint64_t split_seed = 0;
  SplitRatios ratios;
  fs::path output_dir;
};

// 64-bit FNV-1a.
class ContentHash {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string prep_key(const PrepSpec& spec) {
  ContentHash h;
  auto in = detail::open_input(spec.input);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
  }
  std::ostringstream params;
  params << "v" << kSchemaVersion << ";format=" << static_cast<int>(spec.format)
         << ";kcore=" << spec.kcore << ";seed=" << spec.split_seed
         << ";ratios=" << format_double(spec.ratios.train) << ','
         << format_double(spec.ratios.validation) << ',' << format_double(spec.ratios.test);
  h.update(params.str());
  return h.hex();
}

struct PrepResult {
  fs::path dir;
  std::string key;
  bool cache_hit = false;
  nlohmann::json stats;
};

inline constexpr const char* kPrepManifest = "prep.json";
inline constexpr const char* kFullTable = "full.tsv";

// Load -> binarize -> optional k-core -> split, written to output_dir. Reruns
// with identical input bytes and parameters reuse the existing artifacts.
inline PrepResult prepare(const PrepSpec& spec) {
  PrepResult result{spec.output_dir, prep_key(spec), false, {}};
  const fs::path manifest = spec.output_dir / kPrepManifest;
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.value("key", "") == result.key &&
        fs::exists(spec.output_dir / split_files::kTrain) &&
        fs::exists(spec.output_dir / split_files::kValidation) &&
        fs::exists(spec.output_dir / split_files::kTest) &&
        fs::exists(spec.output_dir / kFullTable)) {
      result.cache_hit = true;
      result.stats = j.value("stats", nlohmann::json::object());
      return result;
    }
  }

  const auto raw = spec.format == DatasetFormat::kMovieLens ? load_movielens(spec.input)
                                                            : load_amazon_reviews(spec.input);
  auto corpus = binarize_and_index(raw);
  nlohmann::json stats;
  stats["raw_interactions"] = raw.size();
  stats["binarized"] = {{"users", corpus.table.num_users()},
                        {"items", corpus.table.num_items()},
                        {"positives", corpus.table.size()},
                        {"sparsity", corpus.table.sparsity()}};
  if (spec.kcore > 0) corpus.table = kcore_filter(corpus.table, spec.kcore, &corpus.ids);
  stats["filtered"] = {{"users", corpus.table.num_users()},
                       {"items", corpus.table.num_items()},
                       {"positives", corpus.table.size()},
                       {"sparsity", corpus.table.sparsity()}};
  const auto data = split(corpus.table, spec.ratios, spec.split_seed);
  stats["split"] = {{"train", data.train.size()},
                    {"validation", data.validation.size()},
                    {"test", data.test.size()}};

  save_split(spec.output_dir, data, &corpus.ids);
  {
    auto out = detail::open_output(spec.output_dir / kFullTable);
    write_table(out, corpus.table, spec.split_seed);
  }
  nlohmann::json j{{"schema_version", kSchemaVersion},
                   {"key", result.key},
                   {"input", spec.input.string()},
                   {"kcore", spec.kcore},
                   {"split_seed", spec.split_seed},
                   {"stats", stats}};
  auto out = detail::open_output(manifest);
  out << j.dump(2) << '\n';
  result.stats = stats;
  return result;
}

// ---- experiment specs ------------------------------------------------------

enum class Baseline { kNone, kItemPop, kItemKnn };

struct ExperimentSpec {
  fs::path data_dir;
  TrainConfig train;
  Baseline baseline = Baseline::kNone;
  std::size_t knn_neighbors = 50;
  std::size_t repeat_count = 10;
  // Re-draw the split (from data_dir/full.tsv) with split_seed + r for repeat
  // r instead of only re-initializing parameters.
  bool resplit = false;
  fs::path output_dir;

  std::string method() const {
    switch (baseline) {
      case Baseline::kItemPop: return "ITEMPOP";
      case Baseline::kItemKnn: return "ITEMKNN";
      case Baseline::kNone: break;
    }
    return std::string(to_string(train.optimizer));
  }

  void validate() const {
    if (repeat_count < 1) throw ConfigError("repeat_count must be >= 1");
    if (baseline == Baseline::kItemKnn && knn_neighbors < 1) {
      throw ConfigError("knn_neighbors must be >= 1");
    }
    if (baseline == Baseline::kNone) train.validate();
    if (!data_dir.empty() && !fs::exists(data_dir / split_files::kTrain)) {
      throw ConfigError("no prepared split in " + data_dir.string());
    }
  }
};

// Shipped MovieLens desk-scale configuration.
inline ExperimentSpec movielens_desk_preset(Optimizer opt = Optimizer::kNbpoSs) {
  ExperimentSpec spec;
  spec.train.optimizer = opt;
  spec.train.k = 50;
  spec.train.l = 10;
  spec.train.rho = 3;
  spec.train.eta = 0.005;
  spec.train.lambda_theta = 0.5;
  spec.train.lambda_phi = 0.5;
  spec.train.batch_size = 2000;
  spec.train.max_epochs = 30;
  spec.repeat_count = 3;
  return spec;
}

// Applies one key=value setting. Keys accept '-' or '_' separators.
inline void apply_setting(ExperimentSpec& spec, std::string key, const std::string& value) {
  for (char& c : key) {
    if (c == '-') c = '_';
  }
  auto bad = [&]() { return ConfigError("invalid value '" + value + "' for " + key); };
  auto num = [&](auto& field) {
    if (!parse_number(value, field)) throw bad();
  };
  auto flag = [&](bool& field) {
    if (value == "true" || value == "1" || value == "yes") {
      field = true;
    } else if (value == "false" || value == "0" || value == "no") {
      field = false;
    } else {
      throw bad();
    }
  };
  TrainConfig& t = spec.train;
  if (key == "optimizer" || key == "method") {
    std::string upper;
    for (char c : value) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (upper == "ITEMPOP") {
      spec.baseline = Baseline::kItemPop;
    } else if (upper == "ITEMKNN") {
      spec.baseline = Baseline::kItemKnn;
    } else if (auto opt = parse_optimizer(value)) {
      spec.baseline = Baseline::kNone;
      t.optimizer = *opt;
    } else {
      throw bad();
    }
  } else if (key == "eta") {
    num(t.eta);
  } else if (key == "lambda_theta") {
    num(t.lambda_theta);
  } else if (key == "lambda_phi") {
    num(t.lambda_phi);
  } else if (key == "rho") {
    num(t.rho);
  } else if (key == "batch_size") {
    num(t.batch_size);
  } else if (key == "k") {
    num(t.k);
  } else if (key == "l") {
    num(t.l);
  } else if (key == "epochs" || key == "max_epochs") {
    num(t.max_epochs);
  } else if (key == "seed") {
    num(t.seed);
  } else if (key == "init_scale") {
    num(t.init_scale);
  } else if (key == "patience") {
    num(t.patience);
  } else if (key == "balance_positives") {
    flag(t.balance_positives);
  } else if (key == "exclude_train") {
    flag(t.exclude_train);
  } else if (key == "no_exclude_train") {
    bool v = false;
    flag(v);
    t.exclude_train = !v;
  } else if (key == "repeats" || key == "repeat_count") {
    num(spec.repeat_count);
  } else if (key == "knn_neighbors") {
    num(spec.knn_neighbors);
  } else if (key == "resplit") {
    flag(spec.resplit);
  } else if (key == "data" || key == "data_dir") {
    spec.data_dir = value;
  } else if (key == "out" || key == "output_dir") {
    spec.output_dir = value;
  } else {
    throw ConfigError("unknown setting '" + key + "'");
  }
}

// Flat key=value file; '#' starts a comment, blank lines are ignored.
inline void apply_config_file(ExperimentSpec& spec, const fs::path& path) {
  auto in = detail::open_input(path);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", line_no);
    try {
      apply_setting(spec, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
}

// ---- runs ------------------------------------------------------------------

struct RepeatResult {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  MetricReport validation;
  MetricReport test;
};

struct RunResult {
  std::string method;
  std::vector<RepeatResult> repeats;
  MetricReport test_mean;
  MetricReport test_stddev;
  MetricReport validation_mean;
};

namespace detail {

inline MetricReport zero_like(const MetricReport& r) {
  MetricReport z = r;
  std::fill(z.f1.begin(), z.f1.end(), 0.0);
  std::fill(z.ndcg.begin(), z.ndcg.end(), 0.0);
  return z;
}

// Sample standard deviation (n - 1); zero for a single repeat.
inline std::pair<MetricReport, MetricReport> mean_stddev(const std::vector<MetricReport>& rs) {
  MetricReport mean = zero_like(rs.front());
  MetricReport sd = zero_like(rs.front());
  const double n = static_cast<double>(rs.size());
  for (const auto& r : rs) {
    for (std::size_t j = 0; j < r.ks.size(); ++j) {
      mean.f1[j] += r.f1[j] / n;
      mean.ndcg[j] += r.ndcg[j] / n;
    }
  }
  if (rs.size() > 1) {
    for (const auto& r : rs) {
      for (std::size_t j = 0; j < r.ks.size(); ++j) {
        sd.f1[j] += (r.f1[j] - mean.f1[j]) * (r.f1[j] - mean.f1[j]) / (n - 1);
        sd.ndcg[j] += (r.ndcg[j] - mean.ndcg[j]) * (r.ndcg[j] - mean.ndcg[j]) / (n - 1);
      }
    }
    for (std::size_t j = 0; j < sd.ks.size(); ++j) {
      sd.f1[j] = std::sqrt(sd.f1[j]);
      sd.ndcg[j] = std::sqrt(sd.ndcg[j]);
    }
  }
  return {mean, sd};
}

inline void write_metric_row(std::ostream& out, const MetricReport& r) {
  for (double v : r.f1) out << ',' << format_double(v);
  for (double v : r.ndcg) out << ',' << format_double(v);
}

inline void write_metric_header(std::ostream& out, const std::vector<std::size_t>& ks,
                                const std::string& prefix = "") {
  for (auto k : ks) out << ',' << prefix << "f1@" << k;
  for (auto k : ks) out << ',' << prefix << "ndcg@" << k;
}

}  // namespace detail

// One repeat: train (or fit a baseline), select by validation F1@2, evaluate
// the selected parameters on test. Writes history/checkpoint into `dir` when
// it is non-empty.
inline RepeatResult run_repeat(const ExperimentSpec& spec, const SplitDataset& data,
                               std::uint64_t seed, const fs::path& dir, unsigned eval_workers) {
  const InteractionTable* exclude = spec.train.exclude_train ? &data.train : nullptr;
  RepeatResult out;
  out.seed = seed;
  if (!dir.empty()) fs::create_directories(dir);

  auto eval_both = [&](const auto& scorer) {
    out.validation = evaluate(scorer, data.validation, exclude, default_cutoffs(), eval_workers);
    out.test = evaluate(scorer, data.test, exclude, default_cutoffs(), eval_workers);
  };

  switch (spec.baseline) {
    case Baseline::kItemPop:
      eval_both(fit_itempop(data.train));
      return out;
    case Baseline::kItemKnn:
      eval_both(fit_itemknn(data.train, spec.knn_neighbors));
      return out;
    case Baseline::kNone: break;
  }

  TrainConfig config = spec.train;
  config.seed = seed;
  auto history = train(data, config, [&](const ModelParams& p) {
    return evaluate(FactorScorer{&p.preference}, data.validation, exclude, default_cutoffs(),
                    eval_workers);
  });
  out.best_epoch = history.best_epoch;
  if (history.best_epoch > 0) out.validation = history.epochs[history.best_epoch - 1].validation;
  out.test = evaluate(FactorScorer{&history.best_params.preference}, data.test, exclude,
                      default_cutoffs(), eval_workers);
  if (!dir.empty()) {
    auto csv = detail::open_output(dir / "history.csv");
    write_history_csv(csv, history);
    save_checkpoint(dir / "best.ckpt", history.best_params);
    auto j = history_summary(history);
    j["schema_version"] = kSchemaVersion;
    j["test"] = to_json(out.test);
    auto js = detail::open_output(dir / "summary.json");
    js << j.dump(2) << '\n';
  }
  return out;
}

inline nlohmann::json to_json(const RunResult& r, const ExperimentSpec& spec) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = r.method;
  j["repeat_count"] = r.repeats.size();
  j["resplit"] = spec.resplit;
  if (spec.baseline == Baseline::kNone) {
    j["config"] = to_json(spec.train);
  } else if (spec.baseline == Baseline::kItemKnn) {
    j["knn_neighbors"] = spec.knn_neighbors;
  }
  j["test_mean"] = to_json(r.test_mean);
  j["test_stddev"] = to_json(r.test_stddev);
  j["validation_mean"] = to_json(r.validation_mean);
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& rep : r.repeats) {
    reps.push_back({{"seed", rep.seed},
                    {"best_epoch", rep.best_epoch},
                    {"validation", to_json(rep.validation)},
                    {"test", to_json(rep.test)}});
  }
  j["repeats"] = reps;
  return j;
}

// Repeat r uses seed train.seed + r. Outputs (when output_dir is set):
//   summary.json     mean/stddev over repeats plus per-repeat metrics
//   metrics.csv      one line per repeat and split
//   repeat_<r>/      history.csv, summary.json, best.ckpt
inline RunResult run(const ExperimentSpec& spec, const SplitDataset* preloaded = nullptr) {
  spec.validate();
  std::optional<SplitDataset> owned;
  std::optional<InteractionTable> full;
  if (preloaded == nullptr) {
    owned = load_split(spec.data_dir);
    preloaded = &*owned;
  }
  if (spec.resplit) {
    auto in = detail::open_input(spec.data_dir / kFullTable);
    full = read_table(in).table;
  }

  const unsigned workers = worker_count();
  const unsigned repeat_workers = std::min<unsigned>(workers, static_cast<unsigned>(spec.repeat_count));
  const unsigned eval_workers = std::max(1u, workers / std::max(1u, repeat_workers));

  RunResult result;
  result.method = spec.method();
  result.repeats.resize(spec.repeat_count);
  parallel_for(spec.repeat_count, repeat_workers, [&](std::size_t r) {
    const std::uint64_t seed = spec.train.seed + r;
    fs::path dir;
    if (!spec.output_dir.empty()) dir = spec.output_dir / ("repeat_" + std::to_string(r));
    if (spec.resplit) {
      const auto data = split(*full, SplitRatios{}, preloaded->seed + r);
      result.repeats[r] = run_repeat(spec, data, seed, dir, eval_workers);
    } else {
      result.repeats[r] = run_repeat(spec, *preloaded, seed, dir, eval_workers);
    }
  });

  std::vector<MetricReport> tests, valids;
  for (const auto& r : result.repeats) {
    tests.push_back(r.test);
    valids.push_back(r.validation.ks.empty() ? detail::zero_like(r.test) : r.validation);
  }
  std::tie(result.test_mean, result.test_stddev) = detail::mean_stddev(tests);
  result.validation_mean = detail::mean_stddev(valids).first;

  if (!spec.output_dir.empty()) {
    fs::create_directories(spec.output_dir);
    auto js = detail::open_output(spec.output_dir / "summary.json");
    js << to_json(result, spec).dump(2) << '\n';
    auto csv = detail::open_output(spec.output_dir / "metrics.csv");
    csv << "method,repeat,seed,best_epoch,split";
    detail::write_metric_header(csv, default_cutoffs());
    csv << '\n';
    for (std::size_t r = 0; r < result.repeats.size(); ++r) {
      const auto& rep = result.repeats[r];
      for (const auto& [name, report] :
           {std::pair<const char*, const MetricReport*>{"validation", &rep.validation},
            {"test", &rep.test}}) {
        if (report->ks.empty()) continue;
        csv << result.method << ',' << r << ',' << rep.seed << ',' << rep.best_epoch << ','
            << name;
        detail::write_metric_row(csv, *report);
        csv << '\n';
      }
    }
  }
  return result;
}

// ---- grid search -----------------------------------------------------------

enum class GridStage { kCoarse, kFine, kRegularizers, kBatch, kRho, kLatentK, kLatentL };

inline std::string_view to_string(GridStage s) {
  switch (s) {
    case GridStage::kCoarse: return "coarse";
    case GridStage::kFine: return "fine";
    case GridStage::kRegularizers: return "reg";
    case GridStage::kBatch: return "batch";
    case GridStage::kRho: return "rho";
    case GridStage::kLatentK: return "k";
    case GridStage::kLatentL: return "l";
  }
  return "?";
}

inline std::optional<GridStage> parse_grid_stage(std::string_view s) {
  for (auto st : {GridStage::kCoarse, GridStage::kFine, GridStage::kRegularizers,
                  GridStage::kBatch, GridStage::kRho, GridStage::kLatentK, GridStage::kLatentL}) {
    if (s == to_string(st)) return st;
  }
  return std::nullopt;
}

struct GridSpec {
  std::vector<double> coarse_eta{0.001, 0.01, 0.1};
  std::vector<double> coarse_lambda{0.01, 0.1, 1.0};
  std::vector<std::size_t> rho_range{1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> batch_range{1000, 2000, 3000, 4000, 5000};
  std::vector<std::size_t> k_range{10, 20, 50, 100, 200};
  std::vector<std::size_t> l_range{0, 1, 2, 5, 10, 20, 50, 100, 200, 500};
  // Stages to run, in order. Empty means all applicable stages.
  std::vector<GridStage> stages;

  void validate() const {
    if (coarse_eta.empty() || coarse_lambda.empty() || rho_range.empty() ||
        batch_range.empty() || k_range.empty() || l_range.empty()) {
      throw ConfigError("grid ranges must be non-empty");
    }
  }
};

// Rounds to 12 significant digits so derived grid values print cleanly.
inline double snap(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return std::strtod(buf, nullptr);
}

// Fine range around a coarse winner: v/5, v/2, v, 2v, 5v.
inline std::vector<double> fine_range(double v) {
  return {snap(v / 5), snap(v / 2), v, snap(v * 2), snap(v * 5)};
}

struct GridRow {
  std::string method;
  GridStage stage = GridStage::kCoarse;
  std::size_t cell = 0;  // global enumeration index across stages
  TrainConfig config;
  std::size_t best_epoch = 0;
  MetricReport validation;
};

struct GridResult {
  TrainConfig best;
  std::vector<GridRow> rows;
  MetricReport best_validation;
  MetricReport test;            // winner only
  std::size_t test_evaluations = 0;
};

inline std::vector<GridStage> default_stages(Optimizer opt) {
  std::vector<GridStage> s{GridStage::kCoarse, GridStage::kFine};
  if (uses_noise(opt)) s.push_back(GridStage::kRegularizers);
  s.insert(s.end(), {GridStage::kBatch, GridStage::kRho, GridStage::kLatentK});
  if (uses_noise(opt)) s.push_back(GridStage::kLatentL);
  return s;
}

// Cells of one stage, derived from the current best configuration. During the
// learning-rate/regularization stages lambda_phi is tied to lambda_theta.
inline std::vector<TrainConfig> stage_cells(GridStage stage, const TrainConfig& base,
                                            const GridSpec& grid) {
  std::vector<TrainConfig> cells;
  auto with = [&](auto&& mutate) {
    TrainConfig c = base;
    mutate(c);
    cells.push_back(c);
  };
  switch (stage) {
    case GridStage::kCoarse:
    case GridStage::kFine: {
      const auto etas = stage == GridStage::kCoarse ? grid.coarse_eta : fine_range(base.eta);
      const auto lambdas =
          stage == GridStage::kCoarse ? grid.coarse_lambda : fine_range(base.lambda_theta);
      for (double eta : etas) {
        for (double lambda : lambdas) {
          with([&](TrainConfig& c) {
            c.eta = eta;
            c.lambda_theta = lambda;
            c.lambda_phi = lambda;
          });
        }
      }
      break;
    }
    case GridStage::kRegularizers: {
      const auto lambdas = fine_range(base.lambda_theta);
      for (double lt : lambdas) {
        for (double lp : lambdas) {
          with([&](TrainConfig& c) {
            c.lambda_theta = lt;
            c.lambda_phi = lp;
          });
        }
      }
      break;
    }
    case GridStage::kBatch:
      for (auto b : grid.batch_range) with([&](TrainConfig& c) { c.batch_size = b; });
      break;
    case GridStage::kRho:
      for (auto r : grid.rho_range) with([&](TrainConfig& c) { c.rho = r; });
      break;
    case GridStage::kLatentK:
      for (auto k : grid.k_range) with([&](TrainConfig& c) { c.k = k; });
      break;
    case GridStage::kLatentL:
      for (auto l : grid.l_range) with([&](TrainConfig& c) { c.l = l; });
      break;
  }
  return cells;
}

// Runs the configured stages in order. Each cell trains once with seed
// base_seed + cell and is scored by its best validation F1@2; the earliest
// cell wins ties. Only the final winner is evaluated on test.
inline GridResult grid_search(const ExperimentSpec& spec, const GridSpec& grid,
                              const SplitDataset* preloaded = nullptr) {
  if (spec.baseline != Baseline::kNone) throw ConfigError("grid search needs an optimizer");
  spec.validate();
  grid.validate();
  std::optional<SplitDataset> owned;
  if (preloaded == nullptr) {
    owned = load_split(spec.data_dir);
    preloaded = &*owned;
  }
  const SplitDataset& data = *preloaded;
  const InteractionTable* exclude = spec.train.exclude_train ? &data.train : nullptr;
  const auto stages = grid.stages.empty() ? default_stages(spec.train.optimizer) : grid.stages;

  GridResult result;
  result.best = spec.train;
  std::optional<ModelParams> best_params;
  std::size_t next_cell = 0;
  const unsigned workers = worker_count();

  for (GridStage stage : stages) {
    const auto cells = stage_cells(stage, result.best, grid);
    std::vector<TrainHistory> histories(cells.size());
    parallel_for(cells.size(), workers, [&](std::size_t c) {
      TrainConfig config = cells[c];
      config.seed = spec.train.seed + next_cell + c;
      histories[c] = train(data, config, [&](const ModelParams& p) {
        return evaluate(FactorScorer{&p.preference}, data.validation, exclude, default_cutoffs(),
                        1);
      });
    });
    // Stage winner replaces the running best; the stage is searched around it.
    double stage_f1 = -1.0;
    std::size_t stage_best = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      GridRow row;
      row.method = std::string(to_string(spec.train.optimizer));
      row.stage = stage;
      row.cell = next_cell + c;
      row.config = histories[c].config;
      row.best_epoch = histories[c].best_epoch;
      if (row.best_epoch > 0) row.validation = histories[c].epochs[row.best_epoch - 1].validation;
      const double f1 = row.best_epoch > 0 ? row.validation.f1_at(kSelectionCutoff) : -1.0;
      if (f1 > stage_f1) {
        stage_f1 = f1;
        stage_best = c;
      }
      result.rows.push_back(std::move(row));
    }
    next_cell += cells.size();
    result.best = histories[stage_best].config;
    result.best.seed = spec.train.seed;
    best_params = std::move(histories[stage_best].best_params);
    result.best_validation = result.rows[result.rows.size() - cells.size() + stage_best].validation;
  }

  if (best_params) {
    result.test = evaluate(FactorScorer{&best_params->preference}, data.test, exclude,
                           default_cutoffs(), workers);
    ++result.test_evaluations;
  }
  return result;
}

inline void write_grid_csv(std::ostream& out, const std::vector<GridRow>& rows) {
  out << "method,stage,cell,eta,lambda_theta,lambda_phi,rho,batch_size,k,l,best_epoch";
  detail::write_metric_header(out, default_cutoffs(), "val_");
  out << '\n';
  for (const auto& r : rows) {
    const auto& c = r.config;
    out << r.method << ',' << to_string(r.stage) << ',' << r.cell << ',' << format_double(c.eta)
        << ',' << format_double(c.lambda_theta) << ',' << format_double(c.lambda_phi) << ','
        << c.rho << ',' << c.batch_size << ',' << c.k << ',' << c.effective_l() << ','
        << r.best_epoch;
    if (r.validation.ks.empty()) {
      for (std::size_t j = 0; j < 2 * default_cutoffs().size(); ++j) out << ',';
    } else {
      detail::write_metric_row(out, r.validation);
    }
    out << '\n';
  }
}

inline std::vector<GridRow> read_grid_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) return {};
  std::vector<GridRow> rows;
  const auto& ks = default_cutoffs();
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 11 + 2 * ks.size()) throw ParseError("wrong number of grid columns", line_no);
    GridRow r;
    r.method = f[0];
    auto stage = parse_grid_stage(f[1]);
    auto opt = parse_optimizer(f[0]);
    if (!stage || !opt) throw ParseError("bad method or stage", line_no);
    r.stage = *stage;
    r.config.optimizer = *opt;
    bool ok = parse_number(f[2], r.cell) && parse_number(f[3], r.config.eta) &&
              parse_number(f[4], r.config.lambda_theta) &&
              parse_number(f[5], r.config.lambda_phi) && parse_number(f[6], r.config.rho) &&
              parse_number(f[7], r.config.batch_size) && parse_number(f[8], r.config.k) &&
              parse_number(f[9], r.config.l) && parse_number(f[10], r.best_epoch);
    if (!ok) throw ParseError("bad grid value", line_no);
    if (!f[11].empty()) {
      r.validation.ks = ks;
      r.validation.f1.resize(ks.size());
      r.validation.ndcg.resize(ks.size());
      for (std::size_t j = 0; j < ks.size(); ++j) {
        if (!parse_number(f[11 + j], r.validation.f1[j]) ||
            !parse_number(f[11 + ks.size() + j], r.validation.ndcg[j])) {
          throw ParseError("bad metric value", line_no);
        }
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json to_json(const GridResult& g) {
  return {{"schema_version", kSchemaVersion},
          {"best_config", to_json(g.best)},
          {"best_validation", to_json(g.best_validation)},
          {"test", to_json(g.test)},
          {"cells", g.rows.size()}};
}

// ---- plot data -------------------------------------------------------------

// Mean test metrics of one method, as read back from a run summary.
struct RunSummary {
  std::string method;
  MetricReport test_mean;
};

inline RunSummary run_summary_from_json(const nlohmann::json& j) {
  RunSummary s;
  s.method = j.at("method").get<std::string>();
  const auto& t = j.at("test_mean");
  s.test_mean.ks = default_cutoffs();
  for (auto k : default_cutoffs()) {
    s.test_mean.f1.push_back(t.at("f1@" + std::to_string(k)).get<double>());
    s.test_mean.ndcg.push_back(t.at("ndcg@" + std::to_string(k)).get<double>());
  }
  s.test_mean.n_users_evaluated = t.value("n_users_evaluated", std::size_t{0});
  return s;
}

// One CSV per figure family; every row carries its series label (method).
//   metric_vs_k.csv        method,k,f1,ndcg          (test, all runs)
//   variants_vs_k.csv      same, BPO and NBPO variants only
//   eta_lambda.csv         method,stage,eta,lambda,val_f1@2
//   latent_k.csv           method,k,val_f1@2
//   rho.csv                method,rho,val_f1@2
//   lambda_theta_phi.csv   method,lambda_theta,lambda_phi,val_f1@2
//   latent_l.csv           method,l,val_f1@2
inline std::vector<fs::path> emit_plots(const std::vector<GridRow>& rows,
                                        const std::vector<RunSummary>& runs,
                                        const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  auto open = [&](const char* name) {
    written.push_back(out_dir / name);
    return detail::open_output(out_dir / name);
  };
  auto val_f1 = [](const GridRow& r) {
    return r.validation.ks.empty() ? std::string() : format_double(r.validation.f1_at(2));
  };

  {
    auto all = open("metric_vs_k.csv");
    auto variants = open("variants_vs_k.csv");
    all << "method,k,f1,ndcg\n";
    variants << "method,k,f1,ndcg\n";
    static const std::set<std::string> kVariants{"BPO", "NBPO_O", "NBPO_S", "NBPO_SS"};
    for (const auto& run : runs) {
      for (std::size_t j = 0; j < run.test_mean.ks.size(); ++j) {
        std::ostringstream line;
        line << run.method << ',' << run.test_mean.ks[j] << ','
             << format_double(run.test_mean.f1[j]) << ',' << format_double(run.test_mean.ndcg[j])
             << '\n';
        all << line.str();
        if (kVariants.count(run.method)) variants << line.str();
      }
    }
  }
  {
    auto out = open("eta_lambda.csv");
    out << "method,stage,eta,lambda,val_f1@2\n";
    for (const auto& r : rows) {
      if (r.stage != GridStage::kCoarse && r.stage != GridStage::kFine) continue;
      out << r.method << ',' << to_string(r.stage) << ',' << format_double(r.config.eta) << ','
          << format_double(r.config.lambda_theta) << ',' << val_f1(r) << '\n';
    }
  }
  auto sweep = [&](const char* name, const char* column, GridStage stage, auto&& field) {
    auto out = open(name);
    out << "method," << column << ",val_f1@2\n";
    for (const auto& r : rows) {
      if (r.stage == stage) out << r.method << ',' << field(r.config) << ',' << val_f1(r) << '\n';
    }
  };
  sweep("latent_k.csv", "k", GridStage::kLatentK, [](const TrainConfig& c) { return c.k; });
  sweep("rho.csv", "rho", GridStage::kRho, [](const TrainConfig& c) { return c.rho; });
  sweep("batch.csv", "batch_size", GridStage::kBatch,
        [](const TrainConfig& c) { return c.batch_size; });
  sweep("latent_l.csv", "l", GridStage::kLatentL, [](const TrainConfig& c) { return c.l; });
  {
    auto out = open("lambda_theta_phi.csv");
    out << "method,lambda_theta,lambda_phi,val_f1@2\n";
    for (const auto& r : rows) {
      if (r.stage != GridStage::kRegularizers) continue;
      out << r.method << ',' << format_double(r.config.lambda_theta) << ','
          << format_double(r.config.lambda_phi) << ',' << val_f1(r) << '\n';
    }
  }
  return written;
}

// Collects grid_results.csv and summary.json files under `root`.
inline std::pair<std::vector<GridRow>, std::vector<RunSummary>> collect_results(
    const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<GridRow> rows;
  std::vector<RunSummary> runs;
  for (const auto& path : files) {
    if (path.filename() == "grid_results.csv") {
      auto in = detail::open_input(path);
      auto more = read_grid_csv(in);
      rows.insert(rows.end(), more.begin(), more.end());
    } else if (path.filename() == "summary.json") {
      auto in = detail::open_input(path);
      auto j = nlohmann::json::parse(in, nullptr, false);
      // Per-repeat summaries have no method/test_mean and are skipped.
      if (!j.is_discarded() && j.contains("method") && j.contains("test_mean")) {
        runs.push_back(run_summary_from_json(j));
      }
    }
  }
  return {rows, runs};
}

}  // namespace nbpo
