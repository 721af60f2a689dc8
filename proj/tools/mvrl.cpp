// Command-line front end for the experiment harness.
//
//   mvrl train       --config exp.json [--seed N] [--out DIR]
//   mvrl eval        --run DIR [--trials N] [--out FILE] [--checkpoint NAME]
//   mvrl suite       --config exp.json --out DIR [--tasks t1,t2] [--methods m1,..]
//   mvrl robustness  --run DIR [--magnitudes 0,0.1,..] [--trials N] [--out FILE]
//   mvrl attention   --run DIR [--queries r:c,r:c] [--env-seed N] [--out DIR]
//   mvrl curves      --out FILE [--grid N] metrics.csv [metrics.csv ...]

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mvrl/harness.hpp"

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(std::stod(item));
  return out;
}

// "r:c,r:c" -> query positions
std::vector<std::pair<int, int>> split_queries(const std::string& s) {
  std::vector<std::pair<int, int>> out;
  for (const auto& item : split_list(s)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw mvrl::ConfigError("query must look like row:col, got: " + item);
    }
    out.emplace_back(std::stoi(item.substr(0, colon)),
                     std::stoi(item.substr(colon + 1)));
  }
  return out;
}

void print_eval(const mvrl::EvalReport& rep) {
  std::cout << "success " << rep.successes << "/" << rep.trials << " = "
            << rep.success_rate() << ", mean return " << rep.mean_return
            << "\n";
  for (const auto& [cause, n] : rep.cause_counts) {
    std::cout << "  " << cause << ": " << n << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view manipulation experiments"};
  app.require_subcommand(1);

  std::string config_path, run_dir, out_path, checkpoint_name = "checkpoint.bin";
  std::string tasks_csv, methods_csv, magnitudes_csv = "0,0.05,0.1,0.2,0.3";
  std::string queries_csv = "0:0";
  std::vector<std::string> metrics_files;
  std::uint64_t seed = 0, env_seed = 3;
  bool seed_given = false, f32 = false;
  int trials = -1;
  long grid_step = 1000;

  auto* train = app.add_subcommand("train", "train one seed of a config");
  train->add_option("--config", config_path, "experiment config JSON")
      ->required();
  train->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_given = true; });
  train->add_option("--out", out_path, "run directory (default: config out_dir)");
  train->add_flag("--f32", f32, "single-precision agent (~2x faster on one core)");

  auto* eval = app.add_subcommand("eval", "evaluate a trained run directory");
  eval->add_option("--run", run_dir, "run directory with config.json + checkpoint")
      ->required();
  eval->add_option("--trials", trials, "trial count (default: config eval_trials)");
  eval->add_option("--out", out_path, "per-trial report CSV path");
  eval->add_option("--checkpoint", checkpoint_name, "checkpoint file name");
  eval->add_flag("--f32", f32, "evaluate in single precision");

  auto* suite = app.add_subcommand("suite", "train a task x method x seed matrix");
  suite->add_option("--config", config_path, "base experiment config JSON")
      ->required();
  suite->add_option("--out", out_path, "suite output directory")->required();
  suite->add_option("--tasks", tasks_csv, "comma list (default: config task)");
  suite->add_option("--methods", methods_csv,
                    "comma list of third-only,ego-only,additive,bidirectional");
  suite->add_flag("--f32", f32, "single-precision agents (~2x faster on one core)");

  auto* robust = app.add_subcommand("robustness",
                                    "success under camera perturbations");
  robust->add_option("--run", run_dir, "trained run directory")->required();
  robust->add_option("--magnitudes", magnitudes_csv, "comma list of magnitudes");
  robust->add_option("--trials", trials, "trials per magnitude (default 30)");
  robust->add_option("--out", out_path, "output CSV (default run/robustness.csv)");
  robust->add_flag("--f32", f32, "evaluate in single precision");

  auto* attn = app.add_subcommand("attention", "export cross-view attention maps");
  attn->add_option("--run", run_dir, "trained run directory")->required();
  attn->add_option("--queries", queries_csv, "query positions r:c,r:c,...");
  attn->add_option("--env-seed", env_seed, "episode seed for the probe frame");
  attn->add_option("--out", out_path, "output directory (default run/attention)");

  auto* curves = app.add_subcommand("curves", "aggregate learning curves");
  curves->add_option("--out", out_path, "output CSV")->required();
  curves->add_option("--grid", grid_step, "resampling grid step (default 1000)");
  curves->add_option("files", metrics_files, "metrics.csv files, one per seed")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      auto cfg = mvrl::load_config(config_path);
      cfg.validate();
      const std::uint64_t s =
          seed_given ? seed : (cfg.seeds.empty() ? 1 : cfg.seeds[0]);
      const std::string dir = out_path.empty() ? cfg.out_dir : out_path;
      const auto res = f32 ? mvrl::train_run<float>(cfg, s, dir)
                           : mvrl::train_run(cfg, s, dir);
      std::cout << "run " << res.run_dir << ": " << res.steps_done
                << " steps, " << res.episodes << " episodes";
      if (res.final_success >= 0.0) {
        std::cout << ", last eval success " << res.final_success;
      }
      std::cout << "\n";
    } else if (*eval) {
      mvrl::ExperimentConfig cfg;
      const int n = trials;
      const auto rep = [&] {
        if (f32) {
          auto agent = mvrl::load_agent<float>(run_dir, &cfg, checkpoint_name);
          return mvrl::evaluate(agent, cfg, n > 0 ? n : cfg.eval_trials);
        }
        auto agent = mvrl::load_agent(run_dir, &cfg, checkpoint_name);
        return mvrl::evaluate(agent, cfg, n > 0 ? n : cfg.eval_trials);
      }();
      const std::string path =
          out_path.empty() ? run_dir + "/eval_report.csv" : out_path;
      mvrl::write_eval_csv(rep, path);
      print_eval(rep);
      std::cout << "wrote " << path << "\n";
    } else if (*suite) {
      auto cfg = mvrl::load_config(config_path);
      cfg.validate();
      const auto res =
          f32 ? mvrl::run_baseline_suite<float>(cfg, split_list(tasks_csv),
                                                split_list(methods_csv), out_path)
              : mvrl::run_baseline_suite(cfg, split_list(tasks_csv),
                                         split_list(methods_csv), out_path);
      std::cout << "wrote " << res.table_path << " and " << res.runs_path
                << "\n";
    } else if (*robust) {
      mvrl::ExperimentConfig cfg;
      const std::string path_default = run_dir + "/robustness.csv";
      const std::string path = out_path.empty() ? path_default : out_path;
      const auto rows = [&] {
        if (f32) {
          auto agent = mvrl::load_agent<float>(run_dir, &cfg);
          return mvrl::run_camera_robustness(agent, cfg,
                                             split_doubles(magnitudes_csv),
                                             path, trials > 0 ? trials : 30);
        }
        auto agent = mvrl::load_agent(run_dir, &cfg);
        return mvrl::run_camera_robustness(agent, cfg,
                                           split_doubles(magnitudes_csv), path,
                                           trials > 0 ? trials : 30);
      }();
      for (const auto& r : rows) {
        std::cout << "magnitude " << r.magnitude << ": " << r.successes << "/"
                  << r.trials << " (relative change " << r.relative_change
                  << ")\n";
      }
      std::cout << "wrote " << path << "\n";
    } else if (*attn) {
      mvrl::ExperimentConfig cfg;
      auto agent = mvrl::load_agent(run_dir, &cfg);
      mvrl::TabletopEnv env(mvrl::sim_config_for(cfg));
      const auto obs =
          env.reset(mvrl::task_from_name(cfg.task), env_seed);
      const std::string dir =
          out_path.empty() ? run_dir + "/attention" : out_path;
      const auto files =
          mvrl::export_attention(agent, obs, split_queries(queries_csv), dir);
      std::cout << "wrote " << files.size() << " maps to " << dir << "\n";
    } else if (*curves) {
      const auto res =
          mvrl::aggregate_learning_curves(metrics_files, out_path, grid_step);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "wrote " << res.csv_path << " (" << res.points.size()
                << " points)\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
