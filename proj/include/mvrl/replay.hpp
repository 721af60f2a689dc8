#pragma once

#include <cstdint>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/sim.hpp"

namespace mvrl {

// One environment transition. Observations keep the renderer's u8 encoding,
// so storage is compact and replays are lossless. `done` here is the
// value-bootstrap flag: timeouts store 0 so the target keeps bootstrapping
// (the episode only ended because we stopped looking at it).
struct Transition {
  ObservationPair obs;
  std::vector<double> action;
  double reward = 0.0;
  ObservationPair next_obs;
  bool done = false;
};

// Fixed-capacity ring; oldest entries are evicted first. Sampling is uniform
// with replacement over the current contents.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity <= 0) throw ConfigError("replay capacity must be positive");
    ring_.reserve(static_cast<std::size_t>(capacity));
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(ring_.size()); }

  void push(Transition t) {
    if (size() < capacity_) {
      ring_.push_back(std::move(t));
    } else {
      ring_[head_] = std::move(t);
      head_ = (head_ + 1) % static_cast<std::size_t>(capacity_);
    }
  }

  const Transition& at(int i) const {
    if (i < 0 || i >= size()) throw RangeError("replay index out of range");
    return ring_[static_cast<std::size_t>(i)];
  }

  std::vector<int> sample_indices(int n, Rng& rng) const {
    if (size() == 0) throw ContractError("sampling from an empty buffer");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (auto& i : idx)
      i = static_cast<int>(rng.uniform_int(0, size() - 1));
    return idx;
  }

 private:
  int capacity_;
  std::vector<Transition> ring_;
  std::size_t head_ = 0;  // next eviction slot once full
};

}  // namespace mvrl
