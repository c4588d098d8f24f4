#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace advcl {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double clip_norm = 1.0;     // global gradient norm clip; <= 0 disables
};

class Adam {
 public:
  Adam(std::size_t size, AdamOptions opts = {});

  // One update of `params` with gradient `grads` at learning rate `lr`.
  void step(std::span<double> params, std::span<const double> grads, double lr);

  std::int64_t steps() const { return t_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }
  void restore(std::vector<double> m, std::vector<double> v, std::int64_t t);

 private:
  AdamOptions opts_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

// Linear warmup then linear decay to zero over `total_steps`.
class LinearSchedule {
 public:
  LinearSchedule(double base_lr, std::int64_t total_steps, std::int64_t warmup_steps = 0);
  double at(std::int64_t step) const;

 private:
  double base_;
  std::int64_t total_;
  std::int64_t warmup_;
};

}  // namespace advcl
