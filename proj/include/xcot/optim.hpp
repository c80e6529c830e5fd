#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace xcot {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

double global_norm(std::span<const float> grad);

/// Adam without weight decay, with global-norm gradient clipping.
class Adam {
 public:
  Adam(std::size_t n, AdamConfig config = {}) : config_(config), m_(n, 0.0f), v_(n, 0.0f) {}

  /// Clips `grad` in place, applies one update, returns the pre-clip norm.
  double step(std::span<float> params, std::span<float> grad, double lr);
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<float> m_, v_;
  long t_ = 0;
};

}  // namespace xcot
