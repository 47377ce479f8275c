#pragma once

#include <cmath>
#include <vector>

#include "vcas/random.hpp"
#include "vcas/tensor.hpp"

namespace vcas::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Weighted sum with fixed random weights: turns any tensor into a scalar
// whose gradient is generically non-degenerate.
inline Tensor<double> random_weights_like(const Tensor<double>& t, Rng& rng) {
  return random_tensor(t.shape(), rng, 0.5, 1.5);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace vcas::testing
