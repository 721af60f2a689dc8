#pragma once

// Versioned binary agent checkpoints.
//
// Layout (native little-endian, doubles stored as raw IEEE-754 bytes so a
// save/load cycle is bit-exact):
//
//   magic "MVRLCKPT" | u32 version | u64 config_hash | i64 env_step
//   | u64 agent_rng[4] | u32 n_extra_rng | u64 extra_rng[4] each
//   | u32 n_params | per param: u32 rank, i64 dims[rank], f64 data[numel]
//   | per optimizer (critic, actor, temperature):
//       i64 adam_steps | u32 n_groups | per group: u64 numel, f64 m[], f64 v[]
//
// Loading into an agent built from a different configuration (hash, tensor
// count, or any shape differs) raises VersionError.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/optim.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/sac.hpp"

namespace mvrl {

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'R', 'L',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::int64_t env_step = 0;
};

namespace detail {

template <typename V>
void write_pod(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw ConfigError("truncated checkpoint file");
  return v;
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& in, std::vector<double>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw ConfigError("truncated checkpoint file");
}

template <typename T>
void write_adam(std::ostream& out, const Adam<T>& opt) {
  write_pod(out, static_cast<std::int64_t>(opt.steps()));
  write_pod(out, static_cast<std::uint32_t>(opt.moments1().size()));
  for (std::size_t g = 0; g < opt.moments1().size(); ++g) {
    const auto& m = opt.moments1()[g];
    const auto& v = opt.moments2()[g];
    write_pod(out, static_cast<std::uint64_t>(m.size()));
    std::vector<double> buf(m.begin(), m.end());
    write_doubles(out, buf);
    buf.assign(v.begin(), v.end());
    write_doubles(out, buf);
  }
}

template <typename T>
void read_adam(std::istream& in, Adam<T>& opt) {
  opt.set_steps(read_pod<std::int64_t>(in));
  const auto n = read_pod<std::uint32_t>(in);
  if (n != opt.moments1().size()) {
    throw VersionError("checkpoint optimizer state does not match this agent");
  }
  for (std::uint32_t g = 0; g < n; ++g) {
    const auto numel = read_pod<std::uint64_t>(in);
    auto& m = opt.moments1()[g];
    auto& v = opt.moments2()[g];
    if (numel != m.size()) {
      throw VersionError("checkpoint optimizer state does not match this agent");
    }
    std::vector<double> buf(numel);
    read_doubles(in, buf);
    std::copy(buf.begin(), buf.end(), m.begin());
    read_doubles(in, buf);
    std::copy(buf.begin(), buf.end(), v.begin());
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, SacAgent<T>& agent,
                     std::uint64_t config_hash, std::int64_t env_step,
                     const std::vector<std::array<std::uint64_t, 4>>&
                         extra_rng_states = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint file: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, config_hash);
  detail::write_pod(out, env_step);
  for (auto w : agent.rng().state()) detail::write_pod(out, w);
  detail::write_pod(out, static_cast<std::uint32_t>(extra_rng_states.size()));
  for (const auto& s : extra_rng_states) {
    for (auto w : s) detail::write_pod(out, w);
  }

  auto params = agent.all_params();
  detail::write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (auto& p : params) {
    const auto& shape = p.shape();
    detail::write_pod(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) detail::write_pod(out, static_cast<std::int64_t>(d));
    const auto& data = p.data();
    std::vector<double> buf(data.begin(), data.end());
    detail::write_doubles(out, buf);
  }

  detail::write_adam(out, agent.critic_opt());
  detail::write_adam(out, agent.actor_opt());
  detail::write_adam(out, agent.temperature_opt());
  if (!out) throw ConfigError("failed writing checkpoint file: " + path);
}

// Reads only the header; useful for checking compatibility before building
// an agent.
inline CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw VersionError("not a checkpoint file: " + path);
  }
  CheckpointMeta meta;
  meta.version = detail::read_pod<std::uint32_t>(in);
  if (meta.version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " +
                       std::to_string(meta.version));
  }
  meta.config_hash = detail::read_pod<std::uint64_t>(in);
  meta.env_step = detail::read_pod<std::int64_t>(in);
  return meta;
}

template <typename T>
CheckpointMeta load_checkpoint(const std::string& path, SacAgent<T>& agent,
                               std::uint64_t expected_config_hash,
                               std::vector<std::array<std::uint64_t, 4>>*
                                   extra_rng_states = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw VersionError("not a checkpoint file: " + path);
  }
  CheckpointMeta meta;
  meta.version = detail::read_pod<std::uint32_t>(in);
  if (meta.version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " +
                       std::to_string(meta.version));
  }
  meta.config_hash = detail::read_pod<std::uint64_t>(in);
  if (meta.config_hash != expected_config_hash) {
    throw VersionError("checkpoint was produced by a different configuration");
  }
  meta.env_step = detail::read_pod<std::int64_t>(in);

  std::array<std::uint64_t, 4> rng_state;
  for (auto& w : rng_state) w = detail::read_pod<std::uint64_t>(in);
  const auto n_extra = detail::read_pod<std::uint32_t>(in);
  std::vector<std::array<std::uint64_t, 4>> extras(n_extra);
  for (auto& s : extras) {
    for (auto& w : s) w = detail::read_pod<std::uint64_t>(in);
  }

  auto params = agent.all_params();
  const auto n_params = detail::read_pod<std::uint32_t>(in);
  if (n_params != params.size()) {
    throw VersionError("checkpoint parameter count does not match this agent");
  }
  for (auto& p : params) {
    const auto rank = detail::read_pod<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<int>(detail::read_pod<std::int64_t>(in));
    }
    if (shape != p.shape()) {
      throw VersionError("checkpoint tensor shape does not match this agent");
    }
    std::vector<double> buf(p.data().size());
    detail::read_doubles(in, buf);
    auto& dst = p.data();
    std::copy(buf.begin(), buf.end(), dst.begin());
  }

  detail::read_adam(in, agent.critic_opt());
  detail::read_adam(in, agent.actor_opt());
  detail::read_adam(in, agent.temperature_opt());

  agent.rng().set_state(rng_state);
  if (extra_rng_states) *extra_rng_states = std::move(extras);
  return meta;
}

}  // namespace mvrl
