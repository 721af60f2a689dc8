#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "mvrl/config.hpp"

using namespace mvrl;

TEST_CASE("default config validates") {
  ExperimentConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  REQUIRE(cfg.encoder.channels == std::vector<int>{16, 16, 32, 32});
  REQUIRE(cfg.view_mode() == ViewMode::both);
  REQUIRE(cfg.fusion_mode() == FusionMode::bidirectional);
}

static bool same_config(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.task == b.task && a.view == b.view && a.fusion == b.fusion &&
         a.encoder.input_hw == b.encoder.input_hw &&
         a.encoder.in_channels == b.encoder.in_channels &&
         a.encoder.channels == b.encoder.channels &&
         a.encoder.kernels == b.encoder.kernels &&
         a.encoder.strides == b.encoder.strides &&
         a.encoder.paddings == b.encoder.paddings &&
         a.sac.gamma == b.sac.gamma && a.sac.rho == b.sac.rho &&
         a.sac.batch_size == b.sac.batch_size && a.sac.lr == b.sac.lr &&
         a.sac.init_temperature == b.sac.init_temperature &&
         a.sac.target_entropy == b.sac.target_entropy &&
         a.sac.buffer_capacity == b.sac.buffer_capacity &&
         a.sac.warmup == b.sac.warmup &&
         a.sac.updates_per_step == b.sac.updates_per_step &&
         a.sac.update_every == b.sac.update_every &&
         a.sac.hidden == b.sac.hidden &&
         a.sac.log_std_min == b.sac.log_std_min &&
         a.sac.log_std_max == b.sac.log_std_max &&
         a.sac.action_dim == b.sac.action_dim &&
         a.sac.augment == b.sac.augment &&
         a.sac.augment_cfg.max_shift == b.sac.augment_cfg.max_shift &&
         a.sac.augment_cfg.factor_lo == b.sac.augment_cfg.factor_lo &&
         a.sac.augment_cfg.factor_hi == b.sac.augment_cfg.factor_hi &&
         a.sac.augment_cfg.hue_range == b.sac.augment_cfg.hue_range &&
         a.total_steps == b.total_steps && a.eval_every == b.eval_every &&
         a.eval_trials == b.eval_trials &&
         a.stop_at_success == b.stop_at_success && a.seeds == b.seeds &&
         a.out_dir == b.out_dir;
}

TEST_CASE("JSON round-trip is lossless") {
  ExperimentConfig cfg;
  cfg.task = "push";
  cfg.fusion = "a21_only";
  cfg.sac.gamma = 0.1 + 0.2;  // not exactly representable in decimal
  cfg.sac.lr = 3.0517578125e-05;
  cfg.sac.target_entropy = -1.0 / 3.0;
  cfg.sac.augment_cfg.hue_range = 0.07;
  cfg.total_steps = 12345;
  cfg.stop_at_success = 0.8;
  cfg.seeds = {7, 0xffffffffffffffffull, 42};
  cfg.out_dir = "runs/some dir/with spaces";

  const auto back = parse_config(dump_config(cfg));
  REQUIRE(same_config(cfg, back));
  // And again, to show the serialized form is a fixed point.
  REQUIRE(dump_config(back) == dump_config(cfg));
}

TEST_CASE("file round-trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "mvrl_cfg_test";
  fs::create_directories(dir);
  const auto path = (dir / "exp.json").string();

  ExperimentConfig cfg;
  cfg.task = "push";
  cfg.seeds = {11, 22};
  save_config(cfg, path);
  const auto back = load_config(path);
  REQUIRE(same_config(cfg, back));
  fs::remove_all(dir);
}

TEST_CASE("single-view configs are normalized to fusion none") {
  ExperimentConfig cfg;
  cfg.view = "ego-only";
  cfg.fusion = "bidirectional";
  cfg.normalize();
  REQUIRE(cfg.fusion == "none");
  REQUIRE_NOTHROW(cfg.validate());

  // parse_config normalizes too
  ExperimentConfig other;
  other.view = "third-only";
  other.fusion = "additive";
  const auto back = parse_config(dump_config(other));
  REQUIRE(back.fusion == "none");
}

TEST_CASE("two-view config with fusion none is rejected") {
  ExperimentConfig cfg;
  cfg.view = "both";
  cfg.fusion = "none";
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("fusion") != std::string::npos);
  }
}

TEST_CASE("validation lists every offending field") {
  ExperimentConfig cfg;
  cfg.task = "juggle";
  cfg.sac.gamma = 2.0;
  cfg.eval_every = 0;
  cfg.seeds.clear();
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("task") != std::string::npos);
    REQUIRE(msg.find("sac") != std::string::npos);
    REQUIRE(msg.find("eval_every") != std::string::npos);
    REQUIRE(msg.find("seeds") != std::string::npos);
    REQUIRE(msg.find("out_dir") == std::string::npos);
  }
}

TEST_CASE("malformed JSON and missing fields raise ConfigError") {
  REQUIRE_THROWS_AS(parse_config("{ not json"), ConfigError);
  REQUIRE_THROWS_AS(parse_config("{\"task\": \"reach\"}"), ConfigError);
  REQUIRE_THROWS_AS(load_config("/no/such/file.json"), ConfigError);
}

TEST_CASE("stop_at_success is optional and defaults off") {
  ExperimentConfig cfg;
  auto j = nlohmann::json(cfg);
  j.erase("stop_at_success");
  const auto back = parse_config(j.dump());
  REQUIRE(back.stop_at_success == -1.0);
}

TEST_CASE("encoder in_channels is optional and defaults to RGB") {
  ExperimentConfig cfg;
  auto j = nlohmann::json(cfg);
  j["encoder"].erase("in_channels");
  const auto back = parse_config(j.dump());
  REQUIRE(back.encoder.in_channels == 3);
}

TEST_CASE("config hash tracks content, not bookkeeping") {
  ExperimentConfig a;
  ExperimentConfig b;
  REQUIRE(config_hash(a) == config_hash(b));

  // seed labels and output location don't change what the agent is
  b.seeds = {1, 2, 4};
  b.out_dir = "elsewhere";
  REQUIRE(config_hash(a) == config_hash(b));

  b = a;
  b.sac.lr = a.sac.lr * (1.0 + 1e-15);
  REQUIRE(config_hash(a) != config_hash(b));

  b = a;
  b.task = "push";
  REQUIRE(config_hash(a) != config_hash(b));

  b = a;
  b.encoder.channels.back() += 1;
  REQUIRE(config_hash(a) != config_hash(b));
}

TEST_CASE("fusion_mode accessor rejects none") {
  ExperimentConfig cfg;
  cfg.view = "ego-only";
  cfg.normalize();
  REQUIRE_THROWS_AS(cfg.fusion_mode(), ConfigError);
}
