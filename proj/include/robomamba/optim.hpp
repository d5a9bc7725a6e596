#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "robomamba/nn.hpp"

namespace robomamba {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay:
//   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
//   p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)
// Only tensors with requires_grad set are touched. Moment buffers are keyed by
// tensor identity and created lazily.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Checks every trainable gradient for finiteness before changing anything.
  void step(const ParamList<T>& params);
  void zero_grad(const ParamList<T>& params) const;

  std::uint64_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::unordered_map<const void*, Moments> state_;
};

}  // namespace robomamba
