#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "dccl/tensor.hpp"

namespace dccl::testing {

/// Central finite differences of a scalar function of one tensor.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g = Tensor::zeros(x.shape());
  Tensor probe = x;
  for (std::size_t k = 0; k < x.numel(); ++k) {
    double orig = probe[k];
    probe[k] = orig + h;
    double up = f(probe);
    probe[k] = orig - h;
    double down = f(probe);
    probe[k] = orig;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_k |a_k - n_k| / max(|a_k|, |n_k|, 1e-3 * max_j |n_j|, 1e-6). Entries three orders of
/// magnitude below the largest gradient component are measured against that scale, since
/// their finite-difference estimates are dominated by cancellation noise.
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  double scale = 0.0;
  for (std::size_t k = 0; k < numeric.numel(); ++k) scale = std::max(scale, std::abs(numeric[k]));
  double floor = std::max(1e-3 * scale, 1e-6);
  double worst = 0.0;
  for (std::size_t k = 0; k < analytic.numel(); ++k) {
    double denom = std::max({std::abs(analytic[k]), std::abs(numeric[k]), floor});
    worst = std::max(worst, std::abs(analytic[k] - numeric[k]) / denom);
  }
  return worst;
}

}  // namespace dccl::testing
