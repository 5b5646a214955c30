#include "abnn/passes.hpp"

#include <algorithm>
#include <stdexcept>

#include "abnn/tensor.hpp"

namespace abnn {

namespace {
thread_local PassCounter* t_counter = nullptr;

std::uint64_t total(const std::map<std::string, std::uint64_t>& m) {
  std::uint64_t s = 0;
  for (const auto& [_, v] : m) s += v;
  return s;
}

std::uint64_t lookup(const std::map<std::string, std::uint64_t>& m, const std::string& key) {
  auto it = m.find(key);
  return it == m.end() ? 0 : it->second;
}
}  // namespace

std::uint64_t PassCounter::forward_passes() const { return total(forward_); }
std::uint64_t PassCounter::backward_passes() const { return total(backward_); }
std::uint64_t PassCounter::forward_passes(const std::string& network) const { return lookup(forward_, network); }
std::uint64_t PassCounter::backward_passes(const std::string& network) const { return lookup(backward_, network); }

void PassCounter::end_step() {
  const auto now = total_passes();
  const auto cost = now - at_last_step_;
  min_step_ = steps_ == 0 ? cost : std::min(min_step_, cost);
  max_step_ = steps_ == 0 ? cost : std::max(max_step_, cost);
  at_last_step_ = now;
  ++steps_;
}

void PassCounter::merge(const PassCounter& other) {
  for (const auto& [k, v] : other.forward_) forward_[k] += v;
  for (const auto& [k, v] : other.backward_) backward_[k] += v;
  if (other.steps_ > 0) {
    min_step_ = steps_ == 0 ? other.min_step_ : std::min(min_step_, other.min_step_);
    max_step_ = steps_ == 0 ? other.max_step_ : std::max(max_step_, other.max_step_);
  }
  steps_ += other.steps_;
  at_last_step_ = total_passes();
}

PassCounterScope::PassCounterScope(PassCounter& counter) {
  if (t_counter) throw std::logic_error("PassCounterScope: a counter is already active on this thread");
  t_counter = &counter;
  set_backward_observer([](const BackwardTrace& trace) {
    for (const auto& net : trace.networks) t_counter->record_backward(net);
  });
}

PassCounterScope::~PassCounterScope() {
  set_backward_observer(nullptr);
  t_counter = nullptr;
}

PassCounter* active_pass_counter() { return t_counter; }

void note_forward_pass(const std::string& network) {
  if (t_counter) t_counter->record_forward(network);
}

}  // namespace abnn
