#include "semrec/adam.hpp"

#include <cmath>

namespace semrec {

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i)
    if (!params_[i].has_grad())
      throw ValidationError("adam: uninitialized gradient for parameter #" + std::to_string(i) +
                            " (run backward before step)");
  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto pv = params_[i].values();
    auto pg = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < pv.size(); ++j) {
      const double g = pg[j];
      m[j] = static_cast<float>(config_.beta1 * m[j] + (1.0 - config_.beta1) * g);
      v[j] = static_cast<float>(config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g);
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      pv[j] -= static_cast<float>(config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
    params_[i].zero_grad();
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace semrec
