#pragma once

// Experiment configuration: one JSON document describing a full training run
// (task, view/fusion setup, encoder, SAC hyperparameters, augmentation
// ranges, budgets, seeds, output directory).  Round-trips losslessly through
// nlohmann::json; validate() reports every offending field by name.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvrl/augment.hpp"
#include "mvrl/encoder.hpp"
#include "mvrl/errors.hpp"
#include "mvrl/fusion.hpp"
#include "mvrl/sac.hpp"
#include "mvrl/sim.hpp"

namespace mvrl {

struct ExperimentConfig {
  std::string task = "reach";            // reach | push
  std::string view = "both";             // both | ego-only | third-only
  std::string fusion = "bidirectional";  // none | additive | a12_only | a21_only | bidirectional
  EncoderConfig encoder = EncoderConfig::desk_default();
  SacConfig sac;
  long total_steps = 100000;
  int eval_every = 5000;
  int eval_trials = 30;
  double stop_at_success = -1.0;  // early-stop eval threshold; negative disables
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string out_dir = "runs/exp";

  bool single_view() const { return view != "both"; }

  ViewMode view_mode() const { return view_mode_from_name(view); }

  FusionMode fusion_mode() const {
    if (fusion == "none") {
      throw ConfigError("fusion mode 'none' has no fusion module");
    }
    return fusion_mode_from_name(fusion);
  }

  // Single-view runs have nothing to fuse; force fusion to "none" so two
  // configs that describe the same run serialize identically.
  void normalize() {
    if (single_view()) fusion = "none";
  }

  void validate() const {
    std::vector<std::string> bad;
    if (task != "reach" && task != "push") bad.push_back("task");
    if (view != "both" && view != "ego-only" && view != "third-only") {
      bad.push_back("view");
    }
    const bool fusion_known = fusion == "none" || fusion == "additive" ||
                              fusion == "a12_only" || fusion == "a21_only" ||
                              fusion == "bidirectional";
    if (!fusion_known) {
      bad.push_back("fusion");
    } else if (view == "both" && fusion == "none") {
      bad.push_back("fusion");  // two views but no way to combine them
    } else if (view != "both" && fusion != "none" &&
               (view == "ego-only" || view == "third-only")) {
      bad.push_back("fusion");  // call normalize() first
    }
    try {
      encoder.validate();
    } catch (const ConfigError&) {
      bad.push_back("encoder");
    }
    try {
      sac.validate();
    } catch (const ConfigError&) {
      bad.push_back("sac");
    }
    if (total_steps < 0) bad.push_back("total_steps");
    if (eval_every <= 0) bad.push_back("eval_every");
    if (eval_trials <= 0) bad.push_back("eval_trials");
    if (seeds.empty()) bad.push_back("seeds");
    if (out_dir.empty()) bad.push_back("out_dir");
    if (!bad.empty()) {
      std::string msg = "invalid config fields:";
      for (const auto& f : bad) msg += " " + f;
      throw ConfigError(msg);
    }
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"max_shift", c.max_shift},
                     {"factor_lo", c.factor_lo},
                     {"factor_hi", c.factor_hi},
                     {"hue_range", c.hue_range}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  j.at("max_shift").get_to(c.max_shift);
  j.at("factor_lo").get_to(c.factor_lo);
  j.at("factor_hi").get_to(c.factor_hi);
  j.at("hue_range").get_to(c.hue_range);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"input_hw", c.input_hw},   {"in_channels", c.in_channels},
                     {"channels", c.channels},   {"kernels", c.kernels},
                     {"strides", c.strides},     {"paddings", c.paddings}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("input_hw").get_to(c.input_hw);
  c.in_channels = j.value("in_channels", 3);  // the sim only renders RGB
  j.at("channels").get_to(c.channels);
  j.at("kernels").get_to(c.kernels);
  j.at("strides").get_to(c.strides);
  j.at("paddings").get_to(c.paddings);
}

inline void to_json(nlohmann::json& j, const SacConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"rho", c.rho},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"init_temperature", c.init_temperature},
                     {"target_entropy", c.target_entropy},
                     {"buffer_capacity", c.buffer_capacity},
                     {"warmup", c.warmup},
                     {"updates_per_step", c.updates_per_step},
                     {"update_every", c.update_every},
                     {"hidden", c.hidden},
                     {"log_std_min", c.log_std_min},
                     {"log_std_max", c.log_std_max},
                     {"action_dim", c.action_dim},
                     {"augment", c.augment},
                     {"augment_ranges", c.augment_cfg}};
}

inline void from_json(const nlohmann::json& j, SacConfig& c) {
  j.at("gamma").get_to(c.gamma);
  j.at("rho").get_to(c.rho);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("init_temperature").get_to(c.init_temperature);
  j.at("target_entropy").get_to(c.target_entropy);
  j.at("buffer_capacity").get_to(c.buffer_capacity);
  j.at("warmup").get_to(c.warmup);
  j.at("updates_per_step").get_to(c.updates_per_step);
  j.at("update_every").get_to(c.update_every);
  j.at("hidden").get_to(c.hidden);
  j.at("log_std_min").get_to(c.log_std_min);
  j.at("log_std_max").get_to(c.log_std_max);
  j.at("action_dim").get_to(c.action_dim);
  j.at("augment").get_to(c.augment);
  j.at("augment_ranges").get_to(c.augment_cfg);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"task", c.task},
                     {"view", c.view},
                     {"fusion", c.fusion},
                     {"encoder", c.encoder},
                     {"sac", c.sac},
                     {"total_steps", c.total_steps},
                     {"eval_every", c.eval_every},
                     {"eval_trials", c.eval_trials},
                     {"stop_at_success", c.stop_at_success},
                     {"seeds", c.seeds},
                     {"out_dir", c.out_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  j.at("task").get_to(c.task);
  j.at("view").get_to(c.view);
  j.at("fusion").get_to(c.fusion);
  j.at("encoder").get_to(c.encoder);
  j.at("sac").get_to(c.sac);
  j.at("total_steps").get_to(c.total_steps);
  j.at("eval_every").get_to(c.eval_every);
  j.at("eval_trials").get_to(c.eval_trials);
  if (j.contains("stop_at_success")) j.at("stop_at_success").get_to(c.stop_at_success);
  j.at("seeds").get_to(c.seeds);
  j.at("out_dir").get_to(c.out_dir);
}

inline std::string dump_config(const ExperimentConfig& c, int indent = 2) {
  return nlohmann::json(c).dump(indent);
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.normalize();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config schema error: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << dump_config(c) << "\n";
}

// Stable 64-bit fingerprint of the canonical (compact) JSON form.  Stored in
// checkpoints so a reload against a different configuration fails loudly.
// out_dir and seeds are excluded: they locate and label a run without
// changing what the recorded agent is, so moving a run directory or loading
// under a different seed label stays valid.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  nlohmann::json j(c);
  j.erase("out_dir");
  j.erase("seeds");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace mvrl
