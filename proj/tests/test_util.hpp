#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "sharelora/tensor.hpp"

namespace testutil {

using sharelora::Tensor;

inline Tensor rand_tensor(sharelora::Shape shape, std::uint64_t seed, double stddev = 1.0, bool grad = true) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(shape), stddev, rng, grad);
}

// Max over every leaf element of |autodiff - central difference| / max(|a|, |n|, floor).
inline double fd_max_rel_err(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-5,
                             double floor = 1e-2) {
  for (Tensor& t : leaves) t.zero_grad();
  f().backward();
  double worst = 0.0;
  for (Tensor& t : leaves) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double saved = d[i];
      d[i] = saved + h;
      const double up = f().item();
      d[i] = saved - h;
      const double down = f().item();
      d[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) /
                                  std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
    }
  }
  return worst;
}

// sum(out * R) for a fixed random R, so every output element carries a distinct weight.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  const Tensor r = rand_tensor(out.shape(), seed, 1.0, false);
  return sharelora::sum(sharelora::mul(out, r));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
           return std::memcmp(&x, &y, sizeof(double)) == 0;
         });
}

}  // namespace testutil
