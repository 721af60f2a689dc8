#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mvrl/checkpoint.hpp"
#include "mvrl/config.hpp"
#include "mvrl/replay.hpp"
#include "mvrl/sim.hpp"

using namespace mvrl;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.input_hw = 16;
  c.channels = {4, 4};
  c.kernels = {3, 3};
  c.strides = {2, 2};
  c.paddings = {1, 1};
  return c;
}

SacConfig tiny_sac() {
  SacConfig c;
  c.batch_size = 4;
  c.warmup = 4;
  c.buffer_capacity = 128;
  c.hidden = 16;
  c.augment = false;
  return c;
}

void fill_buffer(ReplayBuffer& buf, int n, std::uint64_t seed) {
  SimConfig sc;
  sc.image_hw = 16;
  TabletopEnv env(sc);
  Rng rng(seed, 900);
  auto obs = env.reset(Task::reach, seed);
  for (int i = 0; i < n; ++i) {
    std::array<double, 2> a{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    auto res = env.step(a);
    const bool store_done = res.done && res.cause == Cause::success;
    buf.push({obs, {a[0], a[1]}, res.reward, res.obs, store_done});
    obs = res.done ? env.reset(Task::reach, seed + 1 + i) : res.obs;
  }
}

std::string temp_path(const char* name) {
  const auto dir = fs::temp_directory_path() / "mvrl_ckpt_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

using Agent = SacAgent<double>;

Agent trained_agent(std::uint64_t seed) {
  Agent agent(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
              tiny_sac(), seed);
  ReplayBuffer buf(128);
  fill_buffer(buf, 16, 5);
  for (int i = 0; i < 3; ++i) agent.update(buf);
  return agent;
}

bool same_params(Agent& a, Agent& b) {
  auto pa = a.all_params();
  auto pb = b.all_params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape()) return false;
    if (pa[i].data() != pb[i].data()) return false;
  }
  return true;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("checkpoint round-trip restores everything bit-exactly") {
  auto src = trained_agent(3);
  const auto path = temp_path("roundtrip.bin");
  save_checkpoint(path, src, 0xabcdef1234ull, 777);

  // A fresh agent from a different seed has different parameters...
  Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
            tiny_sac(), 99);
  REQUIRE_FALSE(same_params(src, dst));

  const auto meta = load_checkpoint(path, dst, 0xabcdef1234ull);
  REQUIRE(meta.version == kCheckpointVersion);
  REQUIRE(meta.config_hash == 0xabcdef1234ull);
  REQUIRE(meta.env_step == 777);

  REQUIRE(same_params(src, dst));
  REQUIRE(dst.rng().state() == src.rng().state());
  REQUIRE(dst.critic_opt().steps() == src.critic_opt().steps());
  REQUIRE(dst.actor_opt().moments1() == src.actor_opt().moments1());
  REQUIRE(dst.critic_opt().moments2() == src.critic_opt().moments2());
  REQUIRE(dst.temperature_opt().moments1() == src.temperature_opt().moments1());
}

TEST_CASE("save-load-save produces identical bytes") {
  auto src = trained_agent(11);
  const auto p1 = temp_path("bytes_a.bin");
  const auto p2 = temp_path("bytes_b.bin");
  save_checkpoint(p1, src, 42, 123);

  Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
            tiny_sac(), 1);
  load_checkpoint(p1, dst, 42);
  save_checkpoint(p2, dst, 42, 123);
  REQUIRE(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("resumed agent continues training identically") {
  auto a = trained_agent(7);
  const auto path = temp_path("resume.bin");
  save_checkpoint(path, a, 1, 0);

  Agent b(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
          tiny_sac(), 1234);
  load_checkpoint(path, b, 1);

  ReplayBuffer buf_a(128), buf_b(128);
  fill_buffer(buf_a, 24, 77);
  fill_buffer(buf_b, 24, 77);
  for (int i = 0; i < 2; ++i) {
    const auto ma = a.update(buf_a);
    const auto mb = b.update(buf_b);
    REQUIRE(ma.critic_loss == mb.critic_loss);
    REQUIRE(ma.actor_loss == mb.actor_loss);
    REQUIRE(ma.temperature == mb.temperature);
  }
  REQUIRE(same_params(a, b));
}

TEST_CASE("peek reads header without an agent") {
  auto src = trained_agent(2);
  const auto path = temp_path("peek.bin");
  save_checkpoint(path, src, 0x55aa, 31415);
  const auto meta = peek_checkpoint(path);
  REQUIRE(meta.version == kCheckpointVersion);
  REQUIRE(meta.config_hash == 0x55aa);
  REQUIRE(meta.env_step == 31415);
}

TEST_CASE("config hash mismatch raises VersionError") {
  auto src = trained_agent(4);
  const auto path = temp_path("hash.bin");
  save_checkpoint(path, src, 100, 0);
  Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
            tiny_sac(), 4);
  REQUIRE_THROWS_AS(load_checkpoint(path, dst, 101), VersionError);
}

TEST_CASE("architecture mismatch raises VersionError") {
  auto src = trained_agent(4);
  const auto path = temp_path("arch.bin");
  save_checkpoint(path, src, 100, 0);

  SECTION("different hidden width") {
    auto sc = tiny_sac();
    sc.hidden = 24;
    Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional, sc, 4);
    REQUIRE_THROWS_AS(load_checkpoint(path, dst, 100), VersionError);
  }
  SECTION("different view mode") {
    Agent dst(tiny_encoder(), ViewMode::ego_only, FusionMode::bidirectional,
              tiny_sac(), 4);
    REQUIRE_THROWS_AS(load_checkpoint(path, dst, 100), VersionError);
  }
}

TEST_CASE("corrupt files are rejected") {
  const auto bad_magic = temp_path("bad_magic.bin");
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out << "NOTACKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxx";
  }
  REQUIRE_THROWS_AS(peek_checkpoint(bad_magic), VersionError);

  auto src = trained_agent(6);
  const auto full = temp_path("full.bin");
  save_checkpoint(full, src, 9, 5);
  const auto bytes = file_bytes(full);
  const auto truncated = temp_path("truncated.bin");
  {
    std::ofstream out(truncated, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
            tiny_sac(), 6);
  REQUIRE_THROWS_AS(load_checkpoint(truncated, dst, 9), ConfigError);

  REQUIRE_THROWS_AS(peek_checkpoint("/no/such/file.bin"), ConfigError);
}

TEST_CASE("extra RNG states round-trip") {
  auto src = trained_agent(8);
  Rng loop_rng(123, 55);
  loop_rng.uniform();
  loop_rng.uniform();
  const auto path = temp_path("extra.bin");
  save_checkpoint(path, src, 3, 10, {loop_rng.state()});

  Agent dst(tiny_encoder(), ViewMode::both, FusionMode::bidirectional,
            tiny_sac(), 8);
  std::vector<std::array<std::uint64_t, 4>> extras;
  load_checkpoint(path, dst, 3, &extras);
  REQUIRE(extras.size() == 1);
  REQUIRE(extras[0] == loop_rng.state());

  Rng restored(1, 1);
  restored.set_state(extras[0]);
  REQUIRE(restored.uniform() == loop_rng.uniform());
}
