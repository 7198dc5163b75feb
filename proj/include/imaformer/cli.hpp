#pragma once

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imaformer/checkpoint.hpp"
#include "imaformer/eval.hpp"

namespace imaformer {

#ifndef IMAFORMER_BUILD_ID
#define IMAFORMER_BUILD_ID "unknown"
#endif

inline const char* build_id() { return IMAFORMER_BUILD_ID; }

// exit codes: 0 success, 2 usage, 3 invalid config, 4 unreadable/unwritable
// files, 1 any other runtime failure
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitBadConfig = 3,
  kExitIo = 4,
};

// Fully resolved run settings: config file values, then command-line
// overrides, then the IMAFORMER_SEED fallback. `resolved` is echoed into
// every artifact.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;
  std::size_t eval_tasks = 1000;
  std::size_t eval_queries = 10;
  std::uint64_t eval_seed = 2024;
  std::size_t threads = 1;
  std::vector<AblationCell> sweep;
  bool seed_explicit = false;
  nlohmann::json resolved;
};

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& cell : cfg.sweep) {
    nlohmann::json c = policy_to_json(cell.policy);
    c["variant"] = to_string(cell.variant);
    sweep.push_back(c);
  }
  return nlohmann::json{{"model", model_config_to_json(cfg.model)},
                        {"train", train_config_to_json(cfg.train)},
                        {"data", synthetic_spec_to_json(cfg.data)},
                        {"eval",
                         {{"tasks", cfg.eval_tasks},
                          {"queries_per_class", cfg.eval_queries},
                          {"seed", cfg.eval_seed}}},
                        {"threads", cfg.threads},
                        {"sweep", sweep}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    cfg.train = train_config_from_json(j.at("train"));
    cfg.seed_explicit = j.at("train").contains("seed");
  }
  if (j.contains("data")) cfg.data = synthetic_spec_from_json(j.at("data"));
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    cfg.eval_tasks = e.value("tasks", cfg.eval_tasks);
    cfg.eval_queries = e.value("queries_per_class", cfg.eval_queries);
    cfg.eval_seed = e.value("seed", cfg.eval_seed);
  }
  cfg.threads = j.value("threads", cfg.threads);
  if (j.contains("sweep")) {
    for (const auto& c : j.at("sweep")) {
      AblationCell cell;
      cell.policy = policy_from_json(c);
      if (c.contains("variant")) cell.variant = variant_from_string(c.at("variant"));
      cfg.sweep.push_back(cell);
    }
  }
  return cfg;
}

namespace detail {

inline RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline void finalize_seed(RunConfig& cfg) {
  if (cfg.seed_explicit) return;
  if (const char* env = std::getenv("IMAFORMER_SEED")) {
    cfg.train.seed = std::strtoull(env, nullptr, 10);
    cfg.data.seed = cfg.train.seed;
  }
}

// provenance wrapper shared by all JSON artifacts; the timestamp is the only
// field allowed to differ between identically configured runs
inline nlohmann::json artifact_envelope(const RunConfig& cfg) {
  return nlohmann::json{{"build", build_id()},
                        {"timestamp", static_cast<std::int64_t>(std::time(nullptr))},
                        {"config", cfg.resolved}};
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace detail

// Dispatches one subcommand. Never calls exit(); returns the process code.
inline int run(const std::vector<std::string>& args) {
  CLI::App app{"few-shot classification with intra-task mutual attention"};
  app.require_subcommand(0, 1);

  std::string config_path, out_path, data_path, val_path, test_path, checkpoint_path, log_path;
  std::string split, variant_name;
  std::uint64_t seed = 0, episode_seed = 0;
  std::size_t tasks = 0, queries = 0, way = 0, shot = 0, epochs = 0, threads = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--threads", threads, "worker threads for evaluation (default 1)");
    cmd->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      seed_given = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic FSDS dataset");
  add_common(gen);
  gen->add_option("--out", out_path, "output .fsds path")->required();
  gen->add_option("--split", split, "split tag (train/val/test)");

  CLI::App* train_cmd = app.add_subcommand("meta-train", "episodic meta-training");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_path, "training FSDS dataset")->required();
  train_cmd->add_option("--val-data", val_path, "validation FSDS dataset")->required();
  train_cmd->add_option("--out", checkpoint_path, "checkpoint output path")->required();
  train_cmd->add_option("--log", log_path, "JSONL training log path");
  train_cmd->add_option("--epochs", epochs, "epoch override");
  train_cmd->add_option("--variant", variant_name, "imaformer | vanilla");

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "episodic evaluation of a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "IMAC checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "test FSDS dataset")->required();
  eval_cmd->add_option("--out", out_path, "EvalReport JSON output");
  eval_cmd->add_option("--tasks", tasks, "number of tasks");
  eval_cmd->add_option("--query", queries, "query images per class");
  eval_cmd->add_option("--way", way, "classes per episode");
  eval_cmd->add_option("--shot", shot, "support images per class");
  eval_cmd->add_option("--variant", variant_name, "imaformer | vanilla");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a sweep of cells");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--train-data", data_path, "training FSDS dataset")->required();
  ablate_cmd->add_option("--val-data", val_path, "validation FSDS dataset")->required();
  ablate_cmd->add_option("--test-data", test_path, "test FSDS dataset")->required();
  ablate_cmd->add_option("--out", out_path, "ablation CSV output")->required();
  ablate_cmd->add_option("--tasks", tasks, "evaluation tasks per cell");

  CLI::App* export_cmd =
      app.add_subcommand("export-embeddings", "dump PCA-projected query embeddings");
  add_common(export_cmd);
  export_cmd->add_option("--checkpoint", checkpoint_path, "IMAC checkpoint")->required();
  export_cmd->add_option("--data", data_path, "FSDS dataset to sample the episode from");
  export_cmd->add_option("--out", out_path, "CSV output")->required();
  export_cmd->add_option("--episode-seed", episode_seed, "episode seed");
  export_cmd->add_option("--way", way, "classes in the episode");
  export_cmd->add_option("--shot", shot, "support images per class");
  export_cmd->add_option("--query", queries, "query images per class");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return kExitOk;
    }
    std::cerr << "error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return kExitUsage;
  }

  try {
    RunConfig cfg = detail::load_run_config(config_path);
    if (seed_given) {
      cfg.train.seed = seed;
      cfg.data.seed = seed;
      cfg.seed_explicit = true;
    }
    detail::finalize_seed(cfg);
    if (threads) cfg.threads = threads;
    if (tasks) cfg.eval_tasks = tasks;
    if (queries) cfg.eval_queries = queries;
    if (way) cfg.train.way = way;
    if (shot) cfg.train.shot = shot;
    if (epochs) cfg.train.epochs = epochs;
    if (!split.empty()) cfg.data.split = split;
    if (!variant_name.empty()) cfg.train.variant = variant_from_string(variant_name);
    cfg.model.validate();
    cfg.train.validate();
    cfg.data.validate();
    cfg.resolved = run_config_to_json(cfg);

    if (gen->parsed()) {
      Dataset ds = generate_synthetic(cfg.data);
      ds.metadata["run_config"] = cfg.resolved;
      ds.metadata["build"] = build_id();
      save_dataset(ds, out_path);
      std::cout << "wrote " << out_path << " (" << ds.class_count() << " classes x "
                << ds.images.front().size() << " images)\n";
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      Dataset train_ds = load_dataset(data_path);
      Dataset val_ds = load_dataset(val_path);
      ModelParams params = ModelParams::init(cfg.model, cfg.train.seed);
      TrainResult result = meta_train(train_ds, val_ds, std::move(params), cfg.model, cfg.train);
      save_checkpoint(checkpoint_path, cfg.model, result.best_params);
      if (!log_path.empty()) write_training_log(log_path, result.log);
      nlohmann::json summary = detail::artifact_envelope(cfg);
      summary["best_val_acc"] = result.best_val_acc;
      summary["best_epoch"] = result.best_epoch;
      summary["epochs_run"] = result.log.size();
      detail::write_json(checkpoint_path + ".meta.json", summary);
      std::cout << "best validation accuracy " << result.best_val_acc << " at epoch "
                << result.best_epoch << "; checkpoint " << checkpoint_path << '\n';
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      auto [model_cfg, params] = load_checkpoint(checkpoint_path);
      set_all_requires_grad(params, false);
      Dataset ds = load_dataset(data_path);
      EvalReport report =
          evaluate(params, model_cfg, ds, cfg.train.way, cfg.train.shot, cfg.eval_queries,
                   cfg.eval_tasks, cfg.eval_seed, cfg.train.variant, cfg.threads);
      nlohmann::json artifact = detail::artifact_envelope(cfg);
      artifact["report"] = eval_report_to_json(report);
      if (!out_path.empty()) detail::write_json(out_path, artifact);
      std::printf("%s: %zu tasks, accuracy %.4f +- %.4f\n",
                  to_string(report.variant).c_str(), report.tasks, report.mean_accuracy,
                  report.ci95);
      return kExitOk;
    }

    if (ablate_cmd->parsed()) {
      Dataset train_ds = load_dataset(data_path);
      Dataset val_ds = load_dataset(val_path);
      Dataset test_ds = load_dataset(test_path);
      std::vector<AblationCell> sweep = cfg.sweep;
      if (sweep.empty())
        sweep = {{Variant::Vanilla, FineTunePolicy::all(cfg.model.depth)},
                 {Variant::Imaformer, FineTunePolicy::all(cfg.model.depth)}};
      auto rows = ablate(train_ds, val_ds, test_ds, cfg.model, cfg.train, sweep, cfg.eval_tasks,
                         cfg.eval_seed, cfg.threads);
      std::string csv = ablation_csv(rows);
      imaformer::detail::write_file(out_path, csv);
      nlohmann::json meta = detail::artifact_envelope(cfg);
      meta["rows"] = rows.size();
      detail::write_json(out_path + ".meta.json", meta);
      std::cout << csv;
      return kExitOk;
    }

    if (export_cmd->parsed()) {
      auto [model_cfg, params] = load_checkpoint(checkpoint_path);
      set_all_requires_grad(params, false);
      Dataset ds = load_dataset(data_path);
      std::size_t ep_way = way ? way : 5;
      std::size_t ep_shot = shot ? shot : 1;
      std::size_t ep_queries = queries ? queries : 15;
      Episode ep = sample_episode(ds, ep_way, ep_shot, ep_queries, episode_seed);
      export_embeddings(params, model_cfg, ep, out_path);
      std::cout << "wrote " << out_path << " and " << out_path << ".json\n";
      return kExitOk;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kExitBadConfig;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    std::cerr << "error: " << msg << '\n';
    if (msg.find("cannot open") != std::string::npos ||
        msg.find("truncated") != std::string::npos ||
        msg.find("bad magic") != std::string::npos)
      return kExitIo;
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace imaformer
