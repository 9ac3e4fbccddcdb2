#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "remask/tensor.hpp"

namespace remask {

struct OptimConfig {
  double peak_lr = 3e-4;
  int64_t warmup_steps = 600;
  int64_t total_steps = 10000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables clipping
};

// Linear warmup from 0 to peak over [0, warmup], then cosine decay to exactly
// 0 at total_steps. lr_at(0) = 0, lr_at(warmup) = peak, lr_at(total) = 0.
double lr_at(const OptimConfig& cfg, int64_t step);

// AdamW over an ordered parameter registry. step() consumes the grads the
// backward pass accumulated into each tensor and leaves them zeroed.
template <class T>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  void add_param(std::string name, Tensor<T>* p);
  Tensor<T>* find(const std::string& name) const;

  // Applies one update using lr_at(step_count()+1), then increments the
  // counter. Throws DivergenceError naming the first parameter whose
  // gradient is non-finite.
  void step();

  int64_t step_count() const { return step_; }
  double last_lr() const { return last_lr_; }
  const OptimConfig& config() const { return cfg_; }
  void zero_grad();

  size_t param_count() const { return slots_.size(); }
  const std::string& param_name(size_t i) const { return slots_[i].name; }
  Tensor<T>* param(size_t i) const { return slots_[i].p; }

  // Moment buffers + step counter, for checkpointing. load() requires the
  // same registry (names, order, shapes) the state was saved from.
  void save_state(std::ostream& os) const;
  void load_state(std::istream& is);

 private:
  struct Slot {
    std::string name;
    Tensor<T>* p;
    std::vector<T> m, v;
  };
  OptimConfig cfg_;
  std::vector<Slot> slots_;
  int64_t step_ = 0;
  double last_lr_ = 0.0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace remask
