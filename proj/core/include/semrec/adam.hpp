#pragma once

#include <cstdint>
#include <vector>

#include "semrec/tensor.hpp"

namespace semrec {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. step() consumes the gradients: after the update
// every parameter's grad buffer is zeroed.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig config = {});

  // Requires every parameter to carry a grad buffer (i.e. backward ran).
  void step();
  void zero_grad();

  int64_t steps() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  int64_t step_count_ = 0;
  AdamConfig config_;
};

}  // namespace semrec
