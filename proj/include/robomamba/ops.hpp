#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "robomamba/tensor.hpp"

namespace robomamba {

enum class ScanMode { sequential, parallel };

// [m,k] x [k,n] -> [m,n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Elementwise with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
// Requires strictly positive input.
template <typename T> Tensor<T> log(const Tensor<T>& x);
// Reduce over axis 0: [L, ...] -> [...]
template <typename T> Tensor<T> mean_pool(const Tensor<T>& x);
template <typename T> Tensor<T> max_pool(const Tensor<T>& x);
// Normalises the last axis to zero mean and unit variance (no affine part).
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5));
// Causal depthwise convolution, x [L,C], kernel [C,K]:
// y[t,c] = sum_k kernel[c,k] * x[t-K+1+k, c], zero before t=0.
template <typename T> Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernel);
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
// arccos of the argument clamped to [-1+margin, 1-margin]; the clamped side
// passes no gradient.
template <typename T> Tensor<T> acos(const Tensor<T>& x, T margin = T(1e-7));

// Fused selective state-space scan with per-step zero-order-hold
// discretisation:
//   z = delta[t,d]*A[d,n], abar = exp(z), bbar = expm1(z)/z * delta[t,d] * B[t,n]
//   h[t,d,n] = abar*h[t-1,d,n] + bbar*u[t,d],  y[t,d] = sum_n C[t,n] h[t,d,n]
// u, delta: [L,D]; A: [D,N]; B, C: [L,N]. h starts at zero.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                         const Tensor<T>& B, const Tensor<T>& C,
                         ScanMode mode = ScanMode::sequential, std::size_t block_size = 64);

// Extra arguments for the generic dispatcher.
struct PrimitiveArgs {
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  Shape shape{};
  double eps = 1e-5;
  double margin = 1e-7;
  ScanMode mode = ScanMode::sequential;
  std::size_t block_size = 64;
};

template <typename T>
Tensor<T> apply_primitive(Primitive kind, std::span<const Tensor<T>> inputs,
                          const PrimitiveArgs& args = {});

// Maximum over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
// The analytic gradient comes from backward() unless one is supplied.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& point, T eps);

template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
             const std::function<std::vector<T>(const Tensor<T>&)>& analytic,
             const Tensor<T>& point, T eps);

}  // namespace robomamba
