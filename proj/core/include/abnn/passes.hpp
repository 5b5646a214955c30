#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace abnn {

/// Tally of network traversals. A forward pass is one call of a network's
/// forward function; a backward pass is one reverse sweep that reaches at
/// least one node created by that network. Batch size does not matter.
class PassCounter {
 public:
  void record_forward(const std::string& network) { ++forward_[network]; }
  void record_backward(const std::string& network) { ++backward_[network]; }
  /// Closes a training step; the passes since the previous call form its cost.
  void end_step();

  std::uint64_t forward_passes() const;
  std::uint64_t backward_passes() const;
  std::uint64_t forward_passes(const std::string& network) const;
  std::uint64_t backward_passes(const std::string& network) const;
  std::uint64_t total_passes() const { return forward_passes() + backward_passes(); }
  std::uint64_t steps() const { return steps_; }
  /// Cheapest and most expensive single step seen so far (0 before any step).
  std::uint64_t min_step_passes() const { return min_step_; }
  std::uint64_t max_step_passes() const { return max_step_; }

  const std::map<std::string, std::uint64_t>& forward_by_network() const { return forward_; }
  const std::map<std::string, std::uint64_t>& backward_by_network() const { return backward_; }

  void merge(const PassCounter& other);

 private:
  std::map<std::string, std::uint64_t> forward_;
  std::map<std::string, std::uint64_t> backward_;
  std::uint64_t steps_ = 0;
  std::uint64_t at_last_step_ = 0;
  std::uint64_t min_step_ = 0;
  std::uint64_t max_step_ = 0;
};

/// Routes forward and backward passes on this thread into `counter` while
/// alive. Scopes do not nest.
class PassCounterScope {
 public:
  explicit PassCounterScope(PassCounter& counter);
  ~PassCounterScope();
  PassCounterScope(const PassCounterScope&) = delete;
  PassCounterScope& operator=(const PassCounterScope&) = delete;
};

PassCounter* active_pass_counter();

/// Called by networks at the start of each forward pass.
void note_forward_pass(const std::string& network);

}  // namespace abnn
