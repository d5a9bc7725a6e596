#pragma once

// Small compositions of the primitive set used by the model code.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robomamba/error.hpp"
#include "robomamba/ops.hpp"
#include "robomamba/rng.hpp"

namespace robomamba {

using TokenId = std::int32_t;

// Parameter groups of the full model; every parameter belongs to exactly one.
enum class ParamGroup { encoder, projector, lm, head };

const char* to_string(ParamGroup group);

template <typename T>
struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

namespace nn {

template <typename T>
Tensor<T> constant(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return mul(x, Tensor<T>::scalar(s));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return add(x, Tensor<T>::scalar(s));
}

// 1 / (1 + e^-x) as exp(-softplus(-x)).
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return exp(scale(softplus(scale(x, T(-1))), T(-1)));
}

// |x| with the sign held constant, so d|x|/dx = sign(x) (0 at 0).
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  std::vector<T> sign(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < sign.size(); ++i) sign[i] = xv[i] > 0 ? T(1) : (xv[i] < 0 ? T(-1) : T(0));
  return mul(x, Tensor<T>(x.shape(), std::move(sign)));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto n = x.numel();
  return scale(mean_pool(reshape(x, Shape{n})), static_cast<T>(n));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mean_pool(reshape(x, Shape{x.numel()}));
}

// Sum over the last axis of a matrix: [m,n] -> [m,1].
template <typename T>
Tensor<T> row_sum(const Tensor<T>& x) {
  return matmul(x, Tensor<T>::full(Shape{x.shape().back(), 1}, T(1)));
}

// x W (+ b), x: [L, in], W: [in, out], b: [out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// Row-wise log-softmax: x - m - log(sum exp(x - m)) with the row max m held
// constant (the result does not depend on m).
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const auto rows = x.dim(0);
  const auto width = x.dim(1);
  std::vector<T> m(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T best = xv[r * width];
    for (std::size_t j = 1; j < width; ++j) best = std::max(best, xv[r * width + j]);
    m[r] = best;
  }
  auto shifted = sub(x, Tensor<T>(Shape{rows, 1}, std::move(m)));
  auto lse = log(row_sum(exp(shifted)));
  return sub(shifted, lse);
}

// Rows of the identity selected by ids: [L, V].
template <typename T>
Tensor<T> one_hot(std::span<const TokenId> ids, std::size_t vocab) {
  std::vector<T> v(ids.size() * vocab, T(0));
  for (std::size_t i = 0; i < ids.size(); ++i) v[i * vocab + static_cast<std::size_t>(ids[i])] = T(1);
  return Tensor<T>(Shape{ids.size(), vocab}, std::move(v));
}

// Leaf initialisers.
template <typename T>
Tensor<T> normal_param(Rng& rng, Shape shape, double stddev) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> uniform_param(Rng& rng, Shape shape, double bound) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> filled_param(Shape shape, T value) {
  const auto n = numel_of(shape);
  return Tensor<T>(std::move(shape), std::vector<T>(n, value), true);
}

}  // namespace nn

// Mean of -log softmax(logits)[t, targets[t]] over positions with mask[t] set.
// Masked-out positions contribute neither value nor gradient.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const TokenId> targets,
                             const std::vector<bool>& mask) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || mask.size() != targets.size()) {
    throw ShapeError("cross-entropy: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries");
  }
  const auto rows = logits.dim(0);
  const auto vocab = logits.dim(1);
  const auto active = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (active == 0) throw DataError("cross-entropy: every position is masked");
  std::vector<T> w(rows * vocab, T(0));
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw DataError("cross-entropy: target " + std::to_string(targets[t]) +
                      " outside vocabulary of size " + std::to_string(vocab));
    }
    w[t * vocab + static_cast<std::size_t>(targets[t])] = T(-1) / static_cast<T>(active);
  }
  return nn::sum_all(mul(nn::log_softmax_rows(logits), Tensor<T>(logits.shape(), std::move(w))));
}

}  // namespace robomamba
