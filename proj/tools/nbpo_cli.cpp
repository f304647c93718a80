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

// nbpo: prep / train / grid / eval / plots.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nbpo/nbpo.hpp"

namespace fs = std::filesystem;

namespace {

// Options shared by `train` and `grid`; values stay strings until they are
// applied on top of the preset and config file.
struct ExperimentFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, CLI::Option*> switches;
  std::string config_file;
  std::string preset;

  void attach(CLI::App* cmd) {
    auto opt = [&](const std::string& flag, const std::string& key, const std::string& help) {
      options[key] = cmd->add_option(flag, values[key], help);
    };
    opt("--data", "data", "prepared split directory (from `prep`)");
    opt("--out", "out", "output directory");
    opt("--optimizer", "optimizer",
        "BPR, WBPR, BPO, NBPO_O, NBPO_S, NBPO_SS, ITEMPOP or ITEMKNN");
    opt("--eta", "eta", "learning rate");
    opt("--lambda-theta", "lambda_theta", "preference regularizer");
    opt("--lambda-phi", "lambda_phi", "noise regularizer");
    opt("--rho", "rho", "sampled negatives per positive");
    opt("--batch-size", "batch_size", "positives per mini-batch");
    opt("--k", "k", "preference latent dimension");
    opt("--l", "l", "noise latent dimension");
    opt("--epochs", "epochs", "maximum epochs");
    opt("--seed", "seed", "base seed; repeat r uses seed + r");
    opt("--repeats", "repeats", "number of repeats");
    opt("--patience", "patience", "early-stop patience in epochs (0 = off)");
    opt("--init-scale", "init_scale", "stddev of initial factors");
    opt("--knn-neighbors", "knn_neighbors", "ItemKNN neighborhood size");
    switches["balance_positives"] =
        cmd->add_flag("--balance-positives", "multiply positive contributions by rho");
    switches["no_exclude_train"] =
        cmd->add_flag("--no-exclude-train", "rank train positives during evaluation");
    switches["resplit"] = cmd->add_flag("--resplit", "re-draw the split for every repeat");
    cmd->add_option("--config", config_file, "key=value config file; flags override it");
    cmd->add_option("--preset", preset, "named preset: movielens-desk");
  }

  nbpo::ExperimentSpec build() const {
    nbpo::ExperimentSpec spec;
    if (preset == "movielens-desk") {
      spec = nbpo::movielens_desk_preset();
    } else if (!preset.empty()) {
      throw nbpo::ConfigError("unknown preset '" + preset + "'");
    }
    if (!config_file.empty()) nbpo::apply_config_file(spec, config_file);
    for (const auto& [key, option] : options) {
      if (option->count() > 0) nbpo::apply_setting(spec, key, values.at(key));
    }
    for (const auto& [key, option] : switches) {
      if (option->count() > 0) nbpo::apply_setting(spec, key, "true");
    }
    return spec;
  }
};

void print_report(const std::string& label, const nbpo::MetricReport& r) {
  std::cerr << label << ":";
  for (std::size_t j = 0; j < r.ks.size(); ++j) {
    std::cerr << " F1@" << r.ks[j] << "=" << r.f1[j];
  }
  for (std::size_t j = 0; j < r.ks.size(); ++j) {
    std::cerr << " NDCG@" << r.ks[j] << "=" << r.ndcg[j];
  }
  std::cerr << " (" << r.n_users_evaluated << " users)\n";
}

int run_prep(const std::string& format, const std::string& input, std::size_t kcore,
             std::uint64_t seed, const std::string& out) {
  nbpo::PrepSpec spec;
  if (format == "movielens") {
    spec.format = nbpo::DatasetFormat::kMovieLens;
  } else if (format == "amazon") {
    spec.format = nbpo::DatasetFormat::kAmazon;
  } else {
    throw nbpo::ConfigError("unknown format '" + format + "'");
  }
  spec.input = input;
  spec.kcore = kcore;
  spec.split_seed = seed;
  spec.output_dir = out;
  const auto result = nbpo::prepare(spec);
  std::cerr << (result.cache_hit ? "cache hit " : "prepared ") << result.key << " -> "
            << result.dir.string() << '\n';
  std::cout << result.stats.dump(2) << '\n';
  return 0;
}

int run_train(const ExperimentFlags& flags) {
  auto spec = flags.build();
  if (spec.output_dir.empty()) throw nbpo::ConfigError("--out is required");
  spec.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto result = nbpo::run(spec);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  {
    std::ofstream timing(spec.output_dir / "timing.json");
    timing << nlohmann::json{{"elapsed_seconds", seconds}}.dump(2) << '\n';
  }
  print_report(result.method + " test mean", result.test_mean);
  return 0;
}

int run_grid(const ExperimentFlags& flags, const std::vector<std::string>& stage_names) {
  auto spec = flags.build();
  if (spec.output_dir.empty()) throw nbpo::ConfigError("--out is required");
  nbpo::GridSpec grid;
  for (const auto& name : stage_names) {
    auto stage = nbpo::parse_grid_stage(name);
    if (!stage) throw nbpo::ConfigError("unknown stage '" + name + "'");
    grid.stages.push_back(*stage);
  }
  const auto result = nbpo::grid_search(spec, grid);
  fs::create_directories(spec.output_dir);
  {
    std::ofstream csv(spec.output_dir / "grid_results.csv");
    nbpo::write_grid_csv(csv, result.rows);
  }
  {
    std::ofstream js(spec.output_dir / "grid_summary.json");
    js << nbpo::to_json(result).dump(2) << '\n';
  }
  std::cout << nbpo::to_json(result.best).dump(2) << '\n';
  print_report("winner test", result.test);
  return 0;
}

int run_eval(const std::string& data_dir, const std::string& checkpoint,
             const std::string& method, const std::string& split_name, bool no_exclude,
             std::size_t knn_neighbors) {
  const auto data = nbpo::load_split(data_dir);
  const nbpo::InteractionTable* held_out = nullptr;
  if (split_name == "test") {
    held_out = &data.test;
  } else if (split_name == "valid" || split_name == "validation") {
    held_out = &data.validation;
  } else {
    throw nbpo::ConfigError("--split must be valid or test");
  }
  const nbpo::InteractionTable* exclude = no_exclude ? nullptr : &data.train;
  nbpo::MetricReport report;
  if (!checkpoint.empty()) {
    const auto params = nbpo::load_checkpoint(fs::path(checkpoint));
    if (params.preference.users.rows() != data.num_users() ||
        params.preference.items.rows() != data.num_items()) {
      throw nbpo::ConfigError("checkpoint dimensions do not match the split");
    }
    report = nbpo::evaluate(nbpo::FactorScorer{&params.preference}, *held_out, exclude);
  } else if (method == "itempop" || method == "ITEMPOP") {
    report = nbpo::evaluate(nbpo::fit_itempop(data.train), *held_out, exclude);
  } else if (method == "itemknn" || method == "ITEMKNN") {
    report = nbpo::evaluate(nbpo::fit_itemknn(data.train, knn_neighbors), *held_out, exclude);
  } else {
    throw nbpo::ConfigError("give --checkpoint or --method itempop|itemknn");
  }
  std::cout << nbpo::to_json(report).dump(2) << '\n';
  return 0;
}

int run_plots(const std::string& results, const std::string& out) {
  const auto [rows, runs] = nbpo::collect_results(results);
  for (const auto& path : nbpo::emit_plots(rows, runs, out)) {
    std::cerr << "wrote " << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-label robust implicit-feedback MF: training and evaluation harness"};
  app.require_subcommand(1);

  auto* prep = app.add_subcommand("prep", "ingest, binarize, k-core filter and split a dataset");
  std::string format = "movielens", input, prep_out;
  std::size_t kcore = 0;
  std::uint64_t split_seed = 0;
  prep->add_option("--format", format, "movielens or amazon")->capture_default_str();
  prep->add_option("--input", input, "raw ratings file")->required();
  prep->add_option("--kcore", kcore, "k-core level (0 = none)")->capture_default_str();
  prep->add_option("--seed", split_seed, "split seed")->capture_default_str();
  prep->add_option("--out", prep_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train/fit a method, repeated over seeds");
  ExperimentFlags train_flags;
  train_flags.attach(train);

  auto* grid = app.add_subcommand("grid", "staged grid search selected by validation F1@2");
  ExperimentFlags grid_flags;
  grid_flags.attach(grid);
  std::vector<std::string> stages;
  grid->add_option("--stage", stages, "coarse, fine, reg, batch, rho, k, l (repeatable)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or baseline on a split");
  std::string eval_data, checkpoint, eval_method, split_name = "test";
  bool no_exclude = false;
  std::size_t eval_knn = 50;
  eval->add_option("--data", eval_data, "prepared split directory")->required();
  eval->add_option("--checkpoint", checkpoint, "model checkpoint");
  eval->add_option("--method", eval_method, "itempop or itemknn instead of a checkpoint");
  eval->add_option("--split", split_name, "valid or test")->capture_default_str();
  eval->add_flag("--no-exclude-train", no_exclude, "rank train positives too");
  eval->add_option("--knn-neighbors", eval_knn, "ItemKNN neighborhood size");

  auto* plots = app.add_subcommand("plots", "emit plot-data CSVs from result directories");
  std::string results_dir, plots_out;
  plots->add_option("--results", results_dir, "directory searched for results")->required();
  plots->add_option("--out", plots_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prep) return run_prep(format, input, kcore, split_seed, prep_out);
    if (*train) return run_train(train_flags);
    if (*grid) return run_grid(grid_flags, stages);
    if (*eval) {
      return run_eval(eval_data, checkpoint, eval_method, split_name, no_exclude, eval_knn);
    }
    if (*plots) return run_plots(results_dir, plots_out);
  } catch (const nbpo::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
