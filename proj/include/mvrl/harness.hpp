#pragma once

// Experiment harness: turns an ExperimentConfig into artifacts on disk.
//  - train_run: one seed of training with metrics CSV, periodic grid
//    evaluations, and checkpoints in a run directory
//  - evaluate: deterministic fixed-grid evaluation (optionally with camera
//    perturbations)
//  - run_baseline_suite: view/fusion ablation matrix -> mean-success table
//  - run_camera_robustness: success vs perturbation magnitude sweep
//  - export_attention: per-query cross-view attention heatmaps (CSV + PGM)
//  - aggregate_learning_curves: mean/std episode-return curves across seeds

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvrl/checkpoint.hpp"
#include "mvrl/config.hpp"
#include "mvrl/image_io.hpp"
#include "mvrl/replay.hpp"
#include "mvrl/sac.hpp"
#include "mvrl/sim.hpp"

namespace mvrl {

// Five canonical object locations; evaluation cycles through them so a
// 30-trial run sees each location six times with different companion draws.
inline const std::vector<Vec2>& eval_grid() {
  static const std::vector<Vec2> grid = {
      {0.2, 0.2}, {0.2, 0.8}, {0.8, 0.2}, {0.8, 0.8}, {0.5, 0.5}};
  return grid;
}

inline constexpr std::uint64_t kDefaultEvalSeed = 0xEA5EED;

inline SimConfig sim_config_for(const ExperimentConfig& cfg) {
  SimConfig sc;
  sc.image_hw = cfg.encoder.input_hw;
  return sc;
}

struct TrialResult {
  int trial = 0;
  int location = 0;  // index into eval_grid()
  Vec2 object{};
  int steps = 0;
  double episode_return = 0.0;
  Cause cause = Cause::none;
  bool success = false;
};

struct EvalReport {
  int trials = 0;
  int successes = 0;
  double mean_return = 0.0;
  std::map<std::string, int> cause_counts;
  std::vector<TrialResult> rows;
  std::uint64_t config_hash = 0;
  std::uint64_t eval_seed = 0;

  double success_rate() const {
    return trials == 0 ? 0.0 : static_cast<double>(successes) / trials;
  }
};

// Places the task object on the grid point. Reach pins the goal marker; push
// pins the cube and re-seeds until the random goal keeps the training
// separation margin, so no trial starts already solved.
inline ObservationPair reset_eval_trial(TabletopEnv& env, Task task,
                                        const Vec2& loc, std::uint64_t seed) {
  if (task == Task::reach) return env.reset(task, seed, loc);
  for (std::uint64_t k = 0;; ++k) {
    auto obs = env.reset(task, seed + k * 0x9e3779b9ull, std::nullopt, loc);
    if (dist(env.state().goal, env.state().cube) >=
            env.config().min_separation ||
        k >= 100) {
      return obs;
    }
  }
}

template <typename T>
EvalReport evaluate(SacAgent<T>& agent, const ExperimentConfig& cfg,
                    int trials, std::uint64_t eval_seed = kDefaultEvalSeed,
                    double perturb_magnitude = 0.0,
                    std::uint64_t perturb_seed = 0x7e57) {
  const Task task = task_from_name(cfg.task);
  TabletopEnv env(sim_config_for(cfg));
  Rng perturb_rng(perturb_seed, 31);

  EvalReport rep;
  rep.trials = trials;
  rep.config_hash = config_hash(cfg);
  rep.eval_seed = eval_seed;

  const auto& grid = eval_grid();
  double total_return = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int li = t % static_cast<int>(grid.size());
    auto obs = reset_eval_trial(env, task, grid[li], eval_seed + t);
    if (perturb_magnitude > 0.0) {
      env.perturb_cameras(perturb_rng, perturb_magnitude);
      obs = env.observe();
    }
    TrialResult row;
    row.trial = t;
    row.location = li;
    row.object = grid[li];
    while (true) {
      const auto a = agent.act(obs, /*deterministic=*/true);
      const auto res = env.step({a[0], a[1]});
      row.episode_return += res.reward;
      ++row.steps;
      if (res.done) {
        row.cause = res.cause;
        row.success = res.success;
        break;
      }
      obs = res.obs;
    }
    total_return += row.episode_return;
    rep.successes += row.success ? 1 : 0;
    ++rep.cause_counts[cause_name(row.cause)];
    rep.rows.push_back(row);
  }
  rep.mean_return = trials == 0 ? 0.0 : total_return / trials;
  return rep;
}

inline void write_eval_csv(const EvalReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write eval report: " + path);
  out.precision(17);
  out << "trial,location,object_x,object_y,steps,episode_return,cause,success\n";
  for (const auto& r : rep.rows) {
    out << r.trial << ',' << r.location << ',' << r.object.x << ','
        << r.object.y << ',' << r.steps << ',' << r.episode_return << ','
        << cause_name(r.cause) << ',' << (r.success ? 1 : 0) << '\n';
  }
}

template <typename T = double>
SacAgent<T> agent_from_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  // Single-view agents never construct the fusion module; the mode argument
  // is inert for them.
  const FusionMode mode =
      cfg.single_view() ? FusionMode::bidirectional : cfg.fusion_mode();
  return SacAgent<T>(cfg.encoder, cfg.view_mode(), mode, cfg.sac, seed);
}

// Rebuilds the agent recorded in a run directory (config.json + checkpoint).
template <typename T = double>
SacAgent<T> load_agent(const std::string& run_dir,
                       ExperimentConfig* out_cfg = nullptr,
                       const std::string& checkpoint_name = "checkpoint.bin") {
  auto cfg = load_config(run_dir + "/config.json");
  cfg.validate();
  auto agent = agent_from_config<T>(cfg, cfg.seeds.empty() ? 0 : cfg.seeds[0]);
  load_checkpoint(run_dir + "/" + checkpoint_name, agent, config_hash(cfg));
  if (out_cfg) *out_cfg = cfg;
  return agent;
}

struct TrainResult {
  std::string run_dir;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string eval_path;
  long steps_done = 0;
  long episodes = 0;
  double final_success = -1.0;  // last eval success rate; -1 if never evaluated
};

// One training run. Writes into run_dir: config.json (resolved, seeds=[seed]),
// metrics.csv (one row per finished episode), eval.csv (one row per periodic
// evaluation), eval_<step>.csv per-trial reports, checkpoint.bin (latest).
// Fully deterministic for a fixed (config, seed) pair.
template <typename T = double>
TrainResult train_run(ExperimentConfig cfg, std::uint64_t seed,
                      const std::string& run_dir) {
  namespace fs = std::filesystem;
  cfg.seeds = {seed};
  cfg.out_dir = run_dir;
  cfg.normalize();
  cfg.validate();
  fs::create_directories(run_dir);
  save_config(cfg, run_dir + "/config.json");
  const std::uint64_t hash = config_hash(cfg);

  const Task task = task_from_name(cfg.task);
  TabletopEnv env(sim_config_for(cfg));
  auto agent = agent_from_config<T>(cfg, seed);
  ReplayBuffer buffer(cfg.sac.buffer_capacity);
  Rng loop_rng(seed, 101);

  TrainResult result;
  result.run_dir = run_dir;
  result.checkpoint_path = run_dir + "/checkpoint.bin";
  result.metrics_path = run_dir + "/metrics.csv";
  result.eval_path = run_dir + "/eval.csv";

  std::ofstream metrics(result.metrics_path);
  if (!metrics) throw ConfigError("cannot write " + result.metrics_path);
  metrics.precision(17);
  metrics << "step,episode,episode_return,critic_loss,actor_loss,"
             "temperature_loss,temperature\n";
  std::ofstream evalcsv(result.eval_path);
  if (!evalcsv) throw ConfigError("cannot write " + result.eval_path);
  evalcsv.precision(17);
  evalcsv << "step,successes,trials,success_rate,mean_return\n";

  auto save_state = [&](long step) {
    save_checkpoint(result.checkpoint_path, agent, hash, step,
                    {loop_rng.state()});
  };
  save_state(0);

  auto episode_seed = [&](long ep) {
    return seed * 1000003ull + static_cast<std::uint64_t>(ep);
  };
  auto obs = env.reset(task, episode_seed(0));
  double ep_return = 0.0;
  UpdateMetrics last{};
  bool stop = false;
  long step = 0;
  while (step < cfg.total_steps && !stop) {
    ++step;
    std::array<double, 2> action;
    if (static_cast<int>(buffer.size()) < cfg.sac.warmup) {
      action = {loop_rng.uniform(-1.0, 1.0), loop_rng.uniform(-1.0, 1.0)};
    } else {
      const auto a = agent.act(obs, /*deterministic=*/false);
      action = {a[0], a[1]};
    }
    const auto res = env.step(action);
    // Only success is value-terminal. Timeouts are budget cuts, and a
    // collision stop already carries its penalty in the reward — letting
    // either truncate the Bellman target would make early termination an
    // escape from negative shaping (the policy learns to end episodes
    // instead of solving them), so both keep bootstrapping.
    buffer.push({obs, {action[0], action[1]}, res.reward, res.obs,
                 res.done && res.cause == Cause::success});
    ep_return += res.reward;

    if (step % cfg.sac.update_every == 0) {
      for (int k = 0; k < cfg.sac.updates_per_step; ++k) {
        const auto m = agent.update(buffer);
        if (m.updated) last = m;
      }
    }

    if (res.done) {
      metrics << step << ',' << result.episodes << ',' << ep_return << ','
              << last.critic_loss << ',' << last.actor_loss << ','
              << last.temperature_loss << ',' << last.temperature << '\n';
      ++result.episodes;
      obs = env.reset(task, episode_seed(result.episodes));
      ep_return = 0.0;
    } else {
      obs = res.obs;
    }

    if (step % cfg.eval_every == 0) {
      const auto rep = evaluate(agent, cfg, cfg.eval_trials);
      evalcsv << step << ',' << rep.successes << ',' << rep.trials << ','
              << rep.success_rate() << ',' << rep.mean_return << '\n';
      evalcsv.flush();
      metrics.flush();
      write_eval_csv(rep, run_dir + "/eval_" + std::to_string(step) + ".csv");
      save_state(step);
      result.final_success = rep.success_rate();
      if (cfg.stop_at_success >= 0.0 &&
          rep.success_rate() >= cfg.stop_at_success) {
        stop = true;
      }
    }
  }
  save_state(step);
  result.steps_done = step;
  return result;
}

// ---------------------------------------------------------------------------
// Baseline suite: view/fusion ablations over tasks x methods x seeds.

inline const std::vector<std::string>& baseline_methods() {
  static const std::vector<std::string> m = {"third-only", "ego-only",
                                             "additive", "bidirectional"};
  return m;
}

inline void apply_method(ExperimentConfig& cfg, const std::string& method) {
  if (method == "third-only" || method == "ego-only") {
    cfg.view = method;
  } else if (method == "additive" || method == "bidirectional") {
    cfg.view = "both";
    cfg.fusion = method;
  } else {
    throw ConfigError("unknown baseline method: " + method);
  }
  cfg.normalize();
}

struct SuiteCell {
  double mean_success = std::numeric_limits<double>::quiet_NaN();
  int ok_runs = 0;
  int failed_runs = 0;
};

struct SuiteResult {
  std::vector<std::string> tasks;    // row order
  std::vector<std::string> methods;  // column order
  std::map<std::string, std::map<std::string, SuiteCell>> cells;
  std::string table_path;
  std::string runs_path;
};

// Trains every (task, method, seed) cell and writes a task-by-method table of
// mean success rates. A failed run is recorded in suite_runs.csv and the
// remaining cells still run.
template <typename T = double>
SuiteResult run_baseline_suite(const ExperimentConfig& base,
                               std::vector<std::string> tasks,
                               std::vector<std::string> methods,
                               const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (tasks.empty()) tasks = {base.task};
  if (methods.empty()) methods = baseline_methods();

  SuiteResult result;
  result.tasks = tasks;
  result.methods = methods;
  result.runs_path = out_dir + "/suite_runs.csv";
  result.table_path = out_dir + "/suite.csv";

  std::ofstream runs(result.runs_path);
  if (!runs) throw ConfigError("cannot write " + result.runs_path);
  runs.precision(17);
  runs << "task,method,seed,success_rate,status\n";

  for (const auto& task : tasks) {
    for (const auto& method : methods) {
      SuiteCell cell;
      double sum = 0.0;
      for (const auto seed : base.seeds) {
        const std::string dir =
            out_dir + "/" + task + "_" + method + "_seed" + std::to_string(seed);
        try {
          ExperimentConfig cfg = base;
          cfg.task = task;
          apply_method(cfg, method);
          const auto tr = train_run<T>(cfg, seed, dir);
          double rate = tr.final_success;
          if (rate < 0.0) {
            // Short run that never hit the eval cadence: evaluate the final
            // checkpoint now.
            ExperimentConfig rc;
            auto agent = load_agent<T>(dir, &rc);
            const auto rep = evaluate(agent, rc, rc.eval_trials);
            write_eval_csv(rep, dir + "/eval_final.csv");
            rate = rep.success_rate();
          }
          sum += rate;
          ++cell.ok_runs;
          runs << task << ',' << method << ',' << seed << ',' << rate
               << ",ok\n";
        } catch (const std::exception& e) {
          ++cell.failed_runs;
          std::string why = e.what();
          std::replace(why.begin(), why.end(), ',', ';');
          std::replace(why.begin(), why.end(), '\n', ' ');
          runs << task << ',' << method << ',' << seed << ",nan,failed: "
               << why << '\n';
        }
        runs.flush();
      }
      if (cell.ok_runs > 0) cell.mean_success = sum / cell.ok_runs;
      result.cells[task][method] = cell;
    }
  }

  std::ofstream table(result.table_path);
  if (!table) throw ConfigError("cannot write " + result.table_path);
  table.precision(17);
  table << "task";
  for (const auto& m : methods) table << ',' << m;
  table << '\n';
  for (const auto& t : tasks) {
    table << t;
    for (const auto& m : methods) {
      const auto& cell = result.cells[t][m];
      table << ',';
      if (cell.ok_runs > 0) {
        table << cell.mean_success;
      } else {
        table << "nan";
      }
    }
    table << '\n';
  }
  return result;
}

// ---------------------------------------------------------------------------
// Camera-perturbation robustness sweep.

struct RobustnessRow {
  double magnitude = 0.0;
  int successes = 0;
  int trials = 0;
  double success_rate = 0.0;
  // (perturbed - clean) / clean; negative means performance dropped.
  double relative_change = 0.0;
};

template <typename T>
std::vector<RobustnessRow> run_camera_robustness(
    SacAgent<T>& agent, const ExperimentConfig& cfg,
    const std::vector<double>& magnitudes, const std::string& out_csv,
    int trials = 30) {
  const auto clean = evaluate(agent, cfg, trials);
  std::ofstream out(out_csv);
  if (!out) throw ConfigError("cannot write " + out_csv);
  out.precision(17);
  out << "magnitude,successes,trials,success_rate,relative_change\n";

  std::vector<RobustnessRow> rows;
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    const double mag = magnitudes[i];
    const EvalReport rep =
        mag > 0.0 ? evaluate(agent, cfg, trials, kDefaultEvalSeed, mag,
                             1000 + static_cast<std::uint64_t>(i))
                  : clean;
    RobustnessRow row;
    row.magnitude = mag;
    row.successes = rep.successes;
    row.trials = rep.trials;
    row.success_rate = rep.success_rate();
    if (mag > 0.0 && clean.success_rate() > 0.0) {
      row.relative_change =
          (rep.success_rate() - clean.success_rate()) / clean.success_rate();
    }
    rows.push_back(row);
    out << row.magnitude << ',' << row.successes << ',' << row.trials << ','
        << row.success_rate << ',' << row.relative_change << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Attention-map export.

struct AttentionExport {
  AttentionDirection dir;
  int query_h = 0;
  int query_w = 0;
  std::string csv_path;
  std::string pgm_path;
};

// Writes, for every query position and every attention direction the fusion
// mode actually uses, the key-side weight map as a raw CSV plus a PGM image
// scaled so the largest weight maps to 255. File names carry the query's
// source view and its position.
template <typename T>
std::vector<AttentionExport> export_attention(
    SacAgent<T>& agent, const ObservationPair& obs,
    const std::vector<std::pair<int, int>>& queries,
    const std::string& out_dir) {
  namespace fs = std::filesystem;
  auto& fusion = agent.fusion();  // ModeError for single-view agents
  std::vector<AttentionDirection> dirs;
  switch (fusion.mode()) {
    case FusionMode::bidirectional:
      dirs = {AttentionDirection::a12, AttentionDirection::a21};
      break;
    case FusionMode::a12_only:
      dirs = {AttentionDirection::a12};
      break;
    case FusionMode::a21_only:
      dirs = {AttentionDirection::a21};
      break;
    case FusionMode::additive:
      throw ModeError("additive fusion has no attention maps to export");
  }

  NoGradGuard ng;
  const auto z_ego =
      agent.encoder(ViewId::ego).encode_view(to_tensor<T>(obs.ego), ViewId::ego);
  const auto z_third = agent.encoder(ViewId::third)
                           .encode_view(to_tensor<T>(obs.third), ViewId::third);

  fs::create_directories(out_dir);
  std::vector<AttentionExport> exported;
  for (const auto& [qh, qw] : queries) {
    for (const auto dir : dirs) {
      const auto w = fusion.attention_map(z_ego, z_third, qh, qw, dir);
      const int h = w.dim(0), wd = w.dim(1);

      std::ostringstream base;
      base << (dir == AttentionDirection::a12 ? "from_ego" : "from_third")
           << "_q" << qh << "_" << qw;
      AttentionExport ex;
      ex.dir = dir;
      ex.query_h = qh;
      ex.query_w = qw;
      ex.csv_path = out_dir + "/" + base.str() + ".csv";
      ex.pgm_path = out_dir + "/" + base.str() + ".pgm";

      std::ofstream csv(ex.csv_path);
      if (!csv) throw ConfigError("cannot write " + ex.csv_path);
      csv.precision(17);
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < wd; ++c) {
          csv << (c ? "," : "") << w.at({r, c});
        }
        csv << '\n';
      }

      T wmax = 0;
      for (const auto v : w.data()) wmax = std::max(wmax, v);
      std::vector<std::uint8_t> gray(w.data().size());
      for (std::size_t i = 0; i < gray.size(); ++i) {
        gray[i] = static_cast<std::uint8_t>(
            std::lround(255.0 * static_cast<double>(w.data()[i]) / wmax));
      }
      write_pgm(ex.pgm_path, wd, h, gray);
      exported.push_back(std::move(ex));
    }
  }
  return exported;
}

// ---------------------------------------------------------------------------
// Learning-curve aggregation across seeds.

struct CurvePoint {
  long step = 0;
  double mean = 0.0;
  double stddev = 0.0;
  int seeds = 0;
};

struct CurveResult {
  std::vector<CurvePoint> points;
  std::vector<std::string> warnings;
  std::string csv_path;
};

namespace detail {

// (step, episode_return) pairs from a training metrics CSV.
inline std::vector<std::pair<long, double>> read_metrics_returns(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics file: " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw ConfigError("empty metrics file: " + path);
  }
  std::vector<std::pair<long, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string step_s, ep_s, ret_s;
    if (!std::getline(ss, step_s, ',') || !std::getline(ss, ep_s, ',') ||
        !std::getline(ss, ret_s, ',')) {
      throw ConfigError("malformed metrics row in " + path + ": " + line);
    }
    rows.emplace_back(std::stol(step_s), std::stod(ret_s));
  }
  return rows;
}

inline double interp_at(const std::vector<std::pair<long, double>>& pts,
                        long step) {
  if (step <= pts.front().first) return pts.front().second;
  if (step >= pts.back().first) return pts.back().second;
  const auto it = std::lower_bound(
      pts.begin(), pts.end(), step,
      [](const auto& p, long s) { return p.first < s; });
  if (it->first == step) return it->second;
  const auto prev = it - 1;
  const double f = static_cast<double>(step - prev->first) /
                   static_cast<double>(it->first - prev->first);
  return prev->second + f * (it->second - prev->second);
}

}  // namespace detail

// Aggregates per-seed episode returns onto a common step grid (episodes end
// on different steps per seed, so curves are linearly resampled; a warning is
// recorded when the source grids differ). With a single input the std column
// is exactly zero.
inline CurveResult aggregate_learning_curves(
    const std::vector<std::string>& metrics_csvs, const std::string& out_csv,
    long grid_step = 1000) {
  if (metrics_csvs.empty()) throw ConfigError("no metrics files given");
  if (grid_step <= 0) throw ConfigError("grid_step must be positive");

  CurveResult result;
  result.csv_path = out_csv;
  std::vector<std::vector<std::pair<long, double>>> seeds;
  for (const auto& path : metrics_csvs) {
    auto rows = detail::read_metrics_returns(path);
    if (rows.empty()) {
      result.warnings.push_back("no episodes in " + path + "; skipped");
      continue;
    }
    seeds.push_back(std::move(rows));
  }
  if (seeds.empty()) throw ConfigError("no usable metrics files");

  bool same_grid = true;
  for (std::size_t i = 1; i < seeds.size(); ++i) {
    if (seeds[i].size() != seeds[0].size()) {
      same_grid = false;
      break;
    }
    for (std::size_t j = 0; j < seeds[i].size(); ++j) {
      if (seeds[i][j].first != seeds[0][j].first) {
        same_grid = false;
        break;
      }
    }
    if (!same_grid) break;
  }
  if (!same_grid) {
    result.warnings.push_back(
        "episode step grids differ across seeds; resampling returns onto a "
        "common grid");
  }

  long max_common = seeds[0].back().first;
  for (const auto& s : seeds) max_common = std::min(max_common, s.back().first);

  std::ofstream out(out_csv);
  if (!out) throw ConfigError("cannot write " + out_csv);
  out.precision(17);
  out << "step,mean_return,std_return,seeds\n";
  for (long g = grid_step; g <= max_common; g += grid_step) {
    double sum = 0.0;
    for (const auto& s : seeds) sum += detail::interp_at(s, g);
    const double mean = sum / static_cast<double>(seeds.size());
    double var = 0.0;
    for (const auto& s : seeds) {
      const double d = detail::interp_at(s, g) - mean;
      var += d * d;
    }
    const double stddev = std::sqrt(var / static_cast<double>(seeds.size()));
    CurvePoint p;
    p.step = g;
    p.mean = mean;
    p.stddev = stddev;
    p.seeds = static_cast<int>(seeds.size());
    result.points.push_back(p);
    out << g << ',' << mean << ',' << stddev << ',' << seeds.size() << '\n';
  }
  return result;
}

}  // namespace mvrl
