#include "advcl/optim.hpp"

#include <algorithm>
#include <cmath>

#include "advcl/common.hpp"

namespace advcl {

Adam::Adam(std::size_t size, AdamOptions opts) : opts_(opts), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractError("Adam: size mismatch");
  }
  double clip = 1.0;
  if (opts_.clip_norm > 0.0) {
    double sq = 0.0;
    for (double g : grads) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > opts_.clip_norm) clip = opts_.clip_norm / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] * clip;
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g * g;
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * params[i]);
  }
}

void Adam::restore(std::vector<double> m, std::vector<double> v, std::int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw ContractError("Adam restore: size mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

LinearSchedule::LinearSchedule(double base_lr, std::int64_t total_steps, std::int64_t warmup_steps)
    : base_(base_lr), total_(std::max<std::int64_t>(total_steps, 1)), warmup_(std::max<std::int64_t>(warmup_steps, 0)) {}

double LinearSchedule::at(std::int64_t step) const {
  if (step < warmup_) return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  const double remaining = static_cast<double>(total_ - step) / static_cast<double>(std::max<std::int64_t>(total_ - warmup_, 1));
  return base_ * std::clamp(remaining, 0.0, 1.0);
}

}  // namespace advcl
