#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

enum class Task { reach, push };

inline const char* task_name(Task t) {
  return t == Task::reach ? "reach" : "push";
}

inline Task task_from_name(const std::string& s) {
  if (s == "reach") return Task::reach;
  if (s == "push") return Task::push;
  throw ConfigError("unknown task: " + s);
}

enum class Cause { none, success, collision, timeout };

inline const char* cause_name(Cause c) {
  switch (c) {
    case Cause::none: return "none";
    case Cause::success: return "success";
    case Cause::collision: return "collision";
    default: return "timeout";
  }
}

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
inline double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }
inline double dist(Vec2 a, Vec2 b) { return norm(a - b); }
inline Vec2 clamp01(Vec2 a) {
  return {std::clamp(a.x, 0.0, 1.0), std::clamp(a.y, 0.0, 1.0)};
}
inline bool inside01(Vec2 a) {
  return a.x >= 0.0 && a.x <= 1.0 && a.y >= 0.0 && a.y <= 1.0;
}

// A camera views an axis-window of half-extent `zoom` around `center`,
// rotated by `rotation` radians in-plane.
struct CameraParams {
  Vec2 center{0.5, 0.5};
  double zoom = 0.5;
  double rotation = 0.0;
};

struct SimConfig {
  int image_hw = 32;
  double delta = 0.05;  // max gripper displacement per step
  int horizon_reach = 50;
  int horizon_push = 100;
  double reach_threshold = 0.05;
  double push_threshold = 0.10;
  double gripper_radius = 0.06;
  double cube_half = 0.05;  // half side of the cube square
  double goal_radius = 0.05;
  double spawn_margin = 0.1;     // entities start inside [margin, 1-margin]²
  double min_separation = 0.2;   // pairwise, at reset
  double ego_zoom = 0.2;         // zoomed-in local window
  double third_zoom = 0.5;       // whole-workspace window
  int collision_patience = 5;    // consecutive exit attempts tolerated
  double success_bonus = 10.0;
  double collision_penalty = 1.0;

  int horizon(Task t) const {
    return t == Task::reach ? horizon_reach : horizon_push;
  }
};

struct EnvState {
  Task task = Task::reach;
  Vec2 gripper, cube, goal;
  int step_count = 0;
  int exit_attempts = 0;
  bool done = false;
  Cause cause = Cause::none;
  CameraParams third_cam;
  double ego_zoom = 0.2;
  double ego_rotation = 0.0;
};

// Planar [3,hw,hw] 8-bit RGB image. Channel values are exact u8, so float
// conversion (k/255) round-trips losslessly.
struct Image8 {
  int hw = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int c, int r, int col) const {
    return data[(static_cast<std::size_t>(c) * hw + r) * hw + col];
  }
};

inline bool operator==(const Image8& a, const Image8& b) {
  return a.hw == b.hw && a.data == b.data;
}

struct ObservationPair {
  Image8 ego, third;
};

struct StepResult {
  ObservationPair obs;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  Cause cause = Cause::none;
};

template <typename T>
Tensor<T> to_tensor(const Image8& img) {
  std::vector<T> v(img.data.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<T>(img.data[i]) / T(255);
  return Tensor<T>({3, img.hw, img.hw}, std::move(v));
}

inline bool success(const EnvState& s, const SimConfig& cfg) {
  if (s.task == Task::reach)
    return dist(s.gripper, s.goal) <= cfg.reach_threshold;
  return dist(s.cube, s.goal) <= cfg.push_threshold;
}

// Dense shaping: negative distance(s) to target.
inline double shaping(const EnvState& s, const SimConfig& cfg) {
  (void)cfg;
  if (s.task == Task::reach) return -dist(s.gripper, s.goal);
  return -dist(s.gripper, s.cube) - dist(s.cube, s.goal);
}

inline double reward(const EnvState& /*prev*/, const EnvState& next,
                     const SimConfig& cfg) {
  double r = shaping(next, cfg);
  if (success(next, cfg)) r += cfg.success_bonus;
  if (next.cause == Cause::collision) r -= cfg.collision_penalty;
  return r;
}

// World point sampled at the center of pixel (row, col).
inline Vec2 pixel_center_world(const CameraParams& cam, int hw, int row,
                               int col) {
  const double u = (col + 0.5) / hw;
  const double v = 1.0 - (row + 0.5) / hw;  // v grows upward
  const double lx = (u - 0.5) * 2.0 * cam.zoom;
  const double ly = (v - 0.5) * 2.0 * cam.zoom;
  const double c = std::cos(cam.rotation), s = std::sin(cam.rotation);
  return {cam.center.x + c * lx - s * ly, cam.center.y + s * lx + c * ly};
}

// Window transform: world position -> (row, col). May fall outside [0,hw).
inline std::pair<int, int> world_to_pixel(const CameraParams& cam, int hw,
                                          Vec2 p) {
  const Vec2 d = p - cam.center;
  const double c = std::cos(-cam.rotation), s = std::sin(-cam.rotation);
  const double qx = c * d.x - s * d.y;
  const double qy = s * d.x + c * d.y;
  const double u = qx / (2.0 * cam.zoom) + 0.5;
  const double v = qy / (2.0 * cam.zoom) + 0.5;
  const int col = static_cast<int>(std::floor(u * hw));
  const int row = static_cast<int>(std::floor((1.0 - v) * hw));
  return {row, col};
}

namespace colors {
inline constexpr std::array<std::uint8_t, 3> background{26, 26, 31};
inline constexpr std::array<std::uint8_t, 3> goal{220, 40, 40};
inline constexpr std::array<std::uint8_t, 3> cube{50, 100, 230};
inline constexpr std::array<std::uint8_t, 3> gripper{60, 220, 100};
}  // namespace colors

// Flat-shaded rasterization by pixel-center sampling; the gripper draws on
// top of the cube, which draws on top of the goal disc.
inline Image8 render_view(const EnvState& s, const CameraParams& cam,
                          const SimConfig& cfg) {
  const int hw = cfg.image_hw;
  Image8 img;
  img.hw = hw;
  img.data.resize(static_cast<std::size_t>(3) * hw * hw);
  for (int r = 0; r < hw; ++r) {
    for (int col = 0; col < hw; ++col) {
      const Vec2 w = pixel_center_world(cam, hw, r, col);
      const std::array<std::uint8_t, 3>* px = &colors::background;
      if (dist(w, s.gripper) <= cfg.gripper_radius) {
        px = &colors::gripper;
      } else if (s.task == Task::push &&
                 std::max(std::abs(w.x - s.cube.x), std::abs(w.y - s.cube.y)) <=
                     cfg.cube_half) {
        px = &colors::cube;
      } else if (dist(w, s.goal) <= cfg.goal_radius) {
        px = &colors::goal;
      }
      for (int c = 0; c < 3; ++c)
        img.data[(static_cast<std::size_t>(c) * hw + r) * hw + col] = (*px)[c];
    }
  }
  return img;
}

class TabletopEnv {
 public:
  explicit TabletopEnv(SimConfig cfg = {}) : cfg_(cfg), rng_(0, 0) {}

  const SimConfig& config() const { return cfg_; }
  const EnvState& state() const { return st_; }
  void set_state(const EnvState& s) { st_ = s; }
  int horizon() const { return cfg_.horizon(st_.task); }

  CameraParams ego_camera() const {
    return {st_.gripper, st_.ego_zoom, st_.ego_rotation};
  }

  ObservationPair observe() const {
    return {render_view(st_, ego_camera(), cfg_),
            render_view(st_, st_.third_cam, cfg_)};
  }

  // Entity placement order is fixed (goal, cube, gripper) so that the goal
  // marginal is exactly uniform; later entities use rejection sampling to
  // honor the minimum-separation contract. Fixed positions override the
  // draw for evaluation on a repeatable grid.
  ObservationPair reset(Task task, std::uint64_t seed,
                        std::optional<Vec2> fixed_goal = std::nullopt,
                        std::optional<Vec2> fixed_cube = std::nullopt) {
    rng_ = Rng(seed, 0);
    st_ = EnvState{};
    st_.task = task;
    st_.third_cam = CameraParams{{0.5, 0.5}, cfg_.third_zoom, 0.0};
    st_.ego_zoom = cfg_.ego_zoom;
    st_.ego_rotation = 0.0;

    st_.goal = fixed_goal ? *fixed_goal : draw_position_();
    if (task == Task::push) {
      st_.cube = fixed_cube ? *fixed_cube
                            : draw_separated_({st_.goal});
    }
    std::vector<Vec2> avoid{st_.goal};
    if (task == Task::push) avoid.push_back(st_.cube);
    st_.gripper = draw_separated_(avoid);
    return observe();
  }

  StepResult step(const std::array<double, 2>& action) {
    if (st_.done) throw ContractError("step: episode already done");
    const double ax = std::clamp(action[0], -1.0, 1.0);
    const double ay = std::clamp(action[1], -1.0, 1.0);
    const Vec2 raw = st_.gripper + Vec2{ax, ay} * cfg_.delta;
    st_.exit_attempts = inside01(raw) ? 0 : st_.exit_attempts + 1;
    st_.gripper = clamp01(raw);
    if (st_.task == Task::push) resolve_contact_();
    st_.step_count += 1;

    if (success(st_, cfg_)) {
      st_.done = true;
      st_.cause = Cause::success;
    } else if (st_.exit_attempts > cfg_.collision_patience) {
      st_.done = true;
      st_.cause = Cause::collision;
    } else if (st_.step_count >= horizon()) {
      st_.done = true;
      st_.cause = Cause::timeout;
    }

    StepResult res;
    res.reward = shaping(st_, cfg_);
    if (st_.cause == Cause::success) res.reward += cfg_.success_bonus;
    if (st_.cause == Cause::collision) res.reward -= cfg_.collision_penalty;
    res.done = st_.done;
    res.success = st_.cause == Cause::success;
    res.cause = st_.cause;
    res.obs = observe();
    return res;
  }

  // Episode-fixed camera jitter for robustness evaluation. The egocentric
  // camera stays attached to the gripper; only its zoom/rotation move.
  void perturb_cameras(Rng& rng, double magnitude) {
    st_.third_cam.center.x += rng.uniform(-magnitude, magnitude);
    st_.third_cam.center.y += rng.uniform(-magnitude, magnitude);
    st_.third_cam.zoom *= 1.0 + rng.uniform(-magnitude, magnitude);
    st_.third_cam.rotation += rng.uniform(-0.2 * magnitude, 0.2 * magnitude);
    st_.ego_zoom *= 1.0 + rng.uniform(-magnitude, magnitude);
    st_.ego_rotation += rng.uniform(-0.2 * magnitude, 0.2 * magnitude);
  }

 private:
  Vec2 draw_position_() {
    const double lo = cfg_.spawn_margin, hi = 1.0 - cfg_.spawn_margin;
    const double x = rng_.uniform(lo, hi);
    const double y = rng_.uniform(lo, hi);
    return {x, y};
  }

  Vec2 draw_separated_(const std::vector<Vec2>& avoid) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const Vec2 p = draw_position_();
      bool ok = true;
      for (const Vec2& a : avoid)
        if (dist(p, a) < cfg_.min_separation) ok = false;
      if (ok) return p;
    }
    throw ContractError("reset: rejection sampling failed to place entity");
  }

  // Positional projection: the cube is pushed out of the gripper disc along
  // the contact normal; if a wall pins the cube, the gripper backs off
  // instead so the two never interpenetrate.
  void resolve_contact_() {
    const double min_d = cfg_.gripper_radius + cfg_.cube_half;
    Vec2 d = st_.cube - st_.gripper;
    double dn = norm(d);
    if (dn >= min_d) return;
    Vec2 n = dn > 1e-12 ? d * (1.0 / dn) : Vec2{1.0, 0.0};
    st_.cube = st_.gripper + n * min_d;
    st_.cube.x = std::clamp(st_.cube.x, cfg_.cube_half, 1.0 - cfg_.cube_half);
    st_.cube.y = std::clamp(st_.cube.y, cfg_.cube_half, 1.0 - cfg_.cube_half);
    d = st_.cube - st_.gripper;
    dn = norm(d);
    if (dn < min_d - 1e-9) {
      n = dn > 1e-12 ? d * (1.0 / dn) : Vec2{1.0, 0.0};
      st_.gripper = clamp01(st_.cube - n * min_d);
    }
  }

  SimConfig cfg_;
  EnvState st_;
  Rng rng_;
};

// One CSV row per step; pair with trace_csv_header() when writing files.
inline std::string trace_csv_header() {
  return "step,task,gripper_x,gripper_y,cube_x,cube_y,goal_x,goal_y,"
         "action_x,action_y,reward,done,success,cause";
}

inline void append_trace_row(std::ostream& os, const EnvState& s,
                             const std::array<double, 2>& action,
                             const StepResult& res) {
  os << s.step_count << ',' << task_name(s.task) << ',' << s.gripper.x << ','
     << s.gripper.y << ',' << s.cube.x << ',' << s.cube.y << ',' << s.goal.x
     << ',' << s.goal.y << ',' << action[0] << ',' << action[1] << ','
     << res.reward << ',' << int(res.done) << ',' << int(res.success) << ','
     << cause_name(res.cause) << '\n';
}

}  // namespace mvrl
