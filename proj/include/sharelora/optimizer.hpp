#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sharelora/adapters.hpp"

namespace sharelora {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct Moments {
  std::vector<double> first;
  std::vector<double> second;
};

// One bias-corrected AdamW update of a single tensor; `step` is the 1-based update count.
void adamw_update(std::span<double> param, std::span<const double> grad, Moments& moments, std::size_t step,
                  const AdamWHyper& hyper, double lr);

/// AdamW over a fixed parameter list with one moment pair per tensor.
///
/// Parameters are identified by handle, so a matrix shared by many layers
/// holds a single state entry and takes a single update per step.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWHyper hyper);

  // Throws NumericError naming the parameter if any gradient is non-finite; nothing is updated then.
  void step(double lr);
  void zero_grad();

  std::size_t state_size() const { return state_.size(); }
  std::size_t step_count() const { return step_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<Moments> state_;
  AdamWHyper hyper_;
  std::size_t step_ = 0;
};

// Linear ramp 0 -> base_lr over ceil(warmup_ratio * total_steps) steps, then linear decay to 0 at total_steps.
double linear_warmup_schedule(std::size_t step, double warmup_ratio, std::size_t total_steps, double base_lr);

}  // namespace sharelora
