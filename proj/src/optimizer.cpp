#include "sharelora/optimizer.hpp"

#include <cmath>
#include <unordered_set>

#include "sharelora/errors.hpp"

namespace sharelora {

void adamw_update(std::span<double> param, std::span<const double> grad, Moments& moments, std::size_t step,
                  const AdamWHyper& hyper, double lr) {
  if (grad.size() != param.size()) throw DimensionError("adamw_update: gradient size does not match parameter");
  if (moments.first.size() != param.size()) {
    moments.first.assign(param.size(), 0.0);
    moments.second.assign(param.size(), 0.0);
  }
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const double decay = 1.0 - lr * hyper.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double& m = moments.first[i];
    double& v = moments.second[i];
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    param[i] = param[i] * decay - lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  std::unordered_set<const void*> seen;
  for (const NamedTensor& p : params_) {
    if (!seen.insert(p.tensor.identity()).second) {
      throw ContractError("AdamW: parameter '" + p.name + "' listed twice");
    }
    if (!p.tensor.requires_grad()) throw ContractError("AdamW: parameter '" + p.name + "' is frozen");
  }
  state_.resize(params_.size());
}

void AdamW::step(double lr) {
  for (const NamedTensor& p : params_) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    std::span<const double> g = t.grad();
    if (g.empty()) {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    adamw_update(t.mutable_data(), g, state_[i], step_, hyper_, lr);
  }
}

void AdamW::zero_grad() {
  for (NamedTensor& p : params_) p.tensor.zero_grad();
}

double linear_warmup_schedule(std::size_t step, double warmup_ratio, std::size_t total_steps, double base_lr) {
  if (step > total_steps) throw ContractError("schedule: step beyond total_steps");
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::size_t decay_span = total_steps > warmup ? total_steps - warmup : 1;
  return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(decay_span);
}

}  // namespace sharelora
