#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "robomamba/ops.hpp"
#include "robomamba/rng.hpp"

namespace rmtest {

using robomamba::Rng;
using robomamba::Shape;
using robomamba::Tensor;

template <typename T>
std::vector<T> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = robomamba::numel_of(shape);
  return Tensor<T>(std::move(shape), random_values<T>(rng, n, lo, hi));
}

// sum(w * y) built from primitives, so the result is a scalar on the tape.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& w) {
  const auto n = y.numel();
  auto flat = robomamba::reshape(robomamba::mul(y, w), Shape{n});
  return robomamba::mul(robomamba::mean_pool(flat), Tensor<T>::scalar(static_cast<T>(n)));
}

// ||a - b||_inf / ||b||_inf
template <typename T>
double rel_error(std::span<const T> a, std::span<const T> b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return den > 0 ? num / den : num;
}

template <typename T>
double rel_error(const std::vector<T>& a, const std::vector<T>& b) {
  return rel_error<T>(std::span<const T>(a), std::span<const T>(b));
}

}  // namespace rmtest
