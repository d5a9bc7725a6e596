#include "robomamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <type_traits>
#include <unordered_set>

#ifdef ROBOMAMBA_HAVE_CBLAS
#include <cblas.h>
#endif

#include "robomamba/ssm.hpp"

namespace robomamba {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::leaf: return "leaf";
    case Primitive::matmul: return "matmul";
    case Primitive::add: return "add";
    case Primitive::mul: return "mul";
    case Primitive::silu: return "silu";
    case Primitive::softplus: return "softplus";
    case Primitive::exp: return "exp";
    case Primitive::log: return "log";
    case Primitive::mean_pool: return "mean-pool";
    case Primitive::max_pool: return "max-pool";
    case Primitive::layer_norm: return "layer-norm";
    case Primitive::conv1d_depthwise: return "conv1d-depthwise";
    case Primitive::softmax_rows: return "softmax-rows";
    case Primitive::concat: return "concat";
    case Primitive::slice: return "slice";
    case Primitive::reshape: return "reshape";
    case Primitive::transpose: return "transpose";
    case Primitive::acos: return "acos";
    case Primitive::selective_scan: return "selective-scan";
  }
  return "unknown";
}

const char* to_string(CheckpointErrorCode code) {
  switch (code) {
    case CheckpointErrorCode::io: return "checkpoint io error";
    case CheckpointErrorCode::bad_magic: return "bad checkpoint magic";
    case CheckpointErrorCode::bad_version: return "unsupported checkpoint version";
    case CheckpointErrorCode::truncated: return "truncated checkpoint";
    case CheckpointErrorCode::bad_dtype: return "unsupported checkpoint dtype";
    case CheckpointErrorCode::bad_config: return "malformed checkpoint config";
    case CheckpointErrorCode::mismatch: return "checkpoint does not match model";
  }
  return "checkpoint error";
}

namespace detail {
bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

namespace {

template <typename T>
void require_finite(const char* op, const Tensor<T>& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined input tensor");
  for (const T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": rejected non-finite input");
    }
  }
}

// C[m,n] += op(A) op(B), row-major, op(X) = X or X^T. op(A) is [m,k], op(B) is [k,n].
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B,
          T* C) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef ROBOMAMBA_HAVE_CBLAS
  static const bool single_threaded = [] {
#ifdef ROBOMAMBA_OPENBLAS
    openblas_set_num_threads(1);
#endif
    return true;
  }();
  (void)single_threaded;
  const auto lda = int(ta ? m : k), ldb = int(tb ? k : n);
  const auto oa = ta ? CblasTrans : CblasNoTrans, ob = tb ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, oa, ob, int(m), int(n), int(k), 1.0f, A, lda, B, ldb, 1.0f, C, int(n));
  } else {
    cblas_dgemm(CblasRowMajor, oa, ob, int(m), int(n), int(k), 1.0, A, lda, B, ldb, 1.0, C, int(n));
  }
#else
  for (std::size_t i = 0; i < m; ++i) {
    T* row = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ta ? A[p * m + i] : A[i * k + p];
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) row[j] += aip * B[j * k + p];
      } else {
        const T* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
      }
    }
  }
#endif
}

template <typename T>
std::span<T> parent_grad(Node<T>& node, std::size_t i) {
  return node.parents[i]->ensure_grad();
}

template <typename T>
bool parent_wants(const Node<T>& node, std::size_t i) {
  return node.parents[i]->requires_grad;
}

// ---- broadcasting --------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(rank, 1);
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  auto padded = [rank](const Shape& s, std::size_t i) -> std::size_t {
    const std::size_t lead = rank - s.size();
    return i < lead ? 1 : s[i - lead];
  };
  for (std::size_t i = 0; i < rank; ++i) {
    const auto ea = padded(a, i);
    const auto eb = padded(b, i);
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                       shape_string(b));
    }
    p.out[i] = std::max(ea, eb);
  }
  std::size_t sa = 1;
  std::size_t sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    const auto ea = padded(a, i);
    const auto eb = padded(b, i);
    p.stride_a[i] = ea == 1 ? 0 : sa;
    p.stride_b[i] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) over every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const std::size_t rank = p.out.size();
  const std::size_t total = numel_of(p.out);
  if (rank == 0) {
    if (total) fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary(Primitive op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  require_finite(primitive_name(op), a);
  require_finite(primitive_name(op), b);
  auto plan = plan_broadcast(primitive_name(op), a.shape(), b.shape());
  std::vector<T> out(numel_of(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = fwd(av[ia], bv[ib]);
    });
  }
  auto shape = plan.out;
  return detail::record<T>(op, std::move(shape), std::move(out), {a, b},
                           [plan = std::move(plan), bwd](Node<T>& self) {
                             const auto& av = self.parents[0]->value;
                             const auto& bv = self.parents[1]->value;
                             const bool wa = parent_wants(self, 0);
                             const bool wb = parent_wants(self, 1);
                             std::span<T> ga = wa ? parent_grad(self, 0) : std::span<T>{};
                             std::span<T> gb = wb ? parent_grad(self, 1) : std::span<T>{};
                             for_each_broadcast(plan, [&](std::size_t o, std::size_t ia,
                                                          std::size_t ib) {
                               T da;
                               T db;
                               bwd(av[ia], bv[ib], da, db);
                               if (wa) ga[ia] += self.grad[o] * da;
                               if (wb) gb[ib] += self.grad[o] * db;
                             });
                           });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(Primitive op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  require_finite(primitive_name(op), x);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return detail::record<T>(op, x.shape(), std::move(out), {x}, [deriv](Node<T>& self) {
    if (!parent_wants(self, 0)) return;
    auto g = parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(xv[i], self.value[i]);
    }
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace

// ---- primitives ----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_finite("matmul", a);
  require_finite("matmul", b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.dim(0);
  const auto k = a.dim(1);
  const auto n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + ")");
  }
  std::vector<T> out(m * n, T(0));
  gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  return detail::record<T>(Primitive::matmul, Shape{m, n}, std::move(out), {a, b},
                           [m, k, n](Node<T>& self) {
                             const T* A = self.parents[0]->value.data();
                             const T* B = self.parents[1]->value.data();
                             const T* G = self.grad.data();
                             // dA += G B^T, dB += A^T G
                             if (parent_wants(self, 0)) {
                               gemm<T>(false, true, m, k, n, G, B, parent_grad(self, 0).data());
                             }
                             if (parent_wants(self, 1)) {
                               gemm<T>(true, false, k, n, m, A, G, parent_grad(self, 1).data());
                             }
                           });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::add, a, b, [](T x, T y) { return x + y; },
      [](T, T, T& da, T& db) {
        da = T(1);
        db = T(1);
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::mul, a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T& da, T& db) {
        da = y;
        db = x;
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      Primitive::silu, x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      Primitive::softplus, x,
      [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      Primitive::exp, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (const T v : x.data()) {
    if (!(v > T(0))) throw NumericError("log: input must be strictly positive");
  }
  return unary<T>(
      Primitive::log, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

namespace {

template <typename T>
Shape pooled_shape(const char* op, const Tensor<T>& x) {
  if (x.rank() == 0 || x.dim(0) == 0) {
    throw ShapeError(std::string(op) + ": cannot pool an empty sequence " +
                     shape_string(x.shape()));
  }
  return Shape(x.shape().begin() + 1, x.shape().end());
}

}  // namespace

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x) {
  require_finite("mean-pool", x);
  Shape out_shape = pooled_shape("mean-pool", x);
  const auto L = x.dim(0);
  const auto inner = numel_of(out_shape);
  const auto xv = x.data();
  std::vector<T> out(inner, T(0));
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t j = 0; j < inner; ++j) out[j] += xv[t * inner + j];
  }
  const T scale = T(1) / static_cast<T>(L);
  for (auto& v : out) v *= scale;
  return detail::record<T>(Primitive::mean_pool, std::move(out_shape), std::move(out), {x},
                           [L, inner, scale](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t t = 0; t < L; ++t) {
                               for (std::size_t j = 0; j < inner; ++j) {
                                 g[t * inner + j] += self.grad[j] * scale;
                               }
                             }
                           });
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& x) {
  require_finite("max-pool", x);
  Shape out_shape = pooled_shape("max-pool", x);
  const auto L = x.dim(0);
  const auto inner = numel_of(out_shape);
  const auto xv = x.data();
  std::vector<T> out(xv.begin(), xv.begin() + static_cast<std::ptrdiff_t>(inner));
  std::vector<std::size_t> arg(inner, 0);
  for (std::size_t t = 1; t < L; ++t) {
    for (std::size_t j = 0; j < inner; ++j) {
      if (xv[t * inner + j] > out[j]) {
        out[j] = xv[t * inner + j];
        arg[j] = t;
      }
    }
  }
  return detail::record<T>(Primitive::max_pool, std::move(out_shape), std::move(out), {x},
                           [inner, arg = std::move(arg)](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t j = 0; j < inner; ++j) {
                               g[arg[j] * inner + j] += self.grad[j];
                             }
                           });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  require_finite("layer-norm", x);
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError("layer-norm: needs a non-empty last axis, got " + shape_string(x.shape()));
  }
  const auto width = x.shape().back();
  const auto rows = x.numel() / width;
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * width;
    T mean = T(0);
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<T>(width);
    T var = T(0);
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(width);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = (row[j] - mean) * inv_std[r];
  }
  return detail::record<T>(
      Primitive::layer_norm, x.shape(), std::move(out), {x},
      [rows, width, inv_std = std::move(inv_std)](Node<T>& self) {
        if (!parent_wants(self, 0)) return;
        auto g = parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gy = self.grad.data() + r * width;
          const T* y = self.value.data() + r * width;
          T mean_g = T(0);
          T mean_gy = T(0);
          for (std::size_t j = 0; j < width; ++j) {
            mean_g += gy[j];
            mean_gy += gy[j] * y[j];
          }
          mean_g /= static_cast<T>(width);
          mean_gy /= static_cast<T>(width);
          for (std::size_t j = 0; j < width; ++j) {
            g[r * width + j] += inv_std[r] * (gy[j] - mean_g - y[j] * mean_gy);
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernel) {
  require_finite("conv1d-depthwise", x);
  require_finite("conv1d-depthwise", kernel);
  require_rank("conv1d-depthwise", x, 2);
  require_rank("conv1d-depthwise", kernel, 2);
  const auto L = x.dim(0);
  const auto C = x.dim(1);
  const auto K = kernel.dim(1);
  if (kernel.dim(0) != C || K == 0) {
    throw ShapeError("conv1d-depthwise: kernel " + shape_string(kernel.shape()) +
                     " does not match input channels of " + shape_string(x.shape()));
  }
  const auto xv = x.data();
  const auto kv = kernel.data();
  std::vector<T> out(L * C, T(0));
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      // source time index t - (K-1) + k
      if (t + k + 1 < K) continue;
      const std::size_t src = t + k + 1 - K;
      for (std::size_t c = 0; c < C; ++c) out[t * C + c] += kv[c * K + k] * xv[src * C + c];
    }
  }
  return detail::record<T>(Primitive::conv1d_depthwise, Shape{L, C}, std::move(out), {x, kernel},
                           [L, C, K](Node<T>& self) {
                             const auto& xv = self.parents[0]->value;
                             const auto& kv = self.parents[1]->value;
                             const bool wx = parent_wants(self, 0);
                             const bool wk = parent_wants(self, 1);
                             std::span<T> gx = wx ? parent_grad(self, 0) : std::span<T>{};
                             std::span<T> gk = wk ? parent_grad(self, 1) : std::span<T>{};
                             for (std::size_t t = 0; t < L; ++t) {
                               for (std::size_t k = 0; k < K; ++k) {
                                 if (t + k + 1 < K) continue;
                                 const std::size_t src = t + k + 1 - K;
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const T g = self.grad[t * C + c];
                                   if (wx) gx[src * C + c] += g * kv[c * K + k];
                                   if (wk) gk[c * K + k] += g * xv[src * C + c];
                                 }
                               }
                             }
                           });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_finite("softmax-rows", x);
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError("softmax-rows: needs a non-empty last axis, got " + shape_string(x.shape()));
  }
  const auto width = x.shape().back();
  const auto rows = x.numel() / width;
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * width;
    const T mx = *std::max_element(row, row + width);
    T sum = T(0);
    for (std::size_t j = 0; j < width; ++j) {
      out[r * width + j] = std::exp(row[j] - mx);
      sum += out[r * width + j];
    }
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] /= sum;
  }
  return detail::record<T>(Primitive::softmax_rows, x.shape(), std::move(out), {x},
                           [rows, width](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* y = self.value.data() + r * width;
                               const T* gy = self.grad.data() + r * width;
                               T dot = T(0);
                               for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
                               for (std::size_t j = 0; j < width; ++j) {
                                 g[r * width + j] += y[j] * (gy[j] - dot);
                               }
                             }
                           });
}

namespace {

// outer = product of extents before axis, inner = product after it.
std::pair<std::size_t, std::size_t> split_at(const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

}  // namespace

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    require_finite("concat", p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_string(s) + " does not conform to " +
                       shape_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
    extents.push_back(s[axis]);
  }
  const auto [outer, inner] = split_at(out_shape, axis);
  const auto total_axis = out_shape[axis];
  std::vector<T> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pv = parts[pi].data();
    const auto ext = extents[pi];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * ext * inner, ext * inner,
                  out.data() + (o * total_axis + offset) * inner);
    }
    offset += ext;
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return detail::record<T>(Primitive::concat, std::move(out_shape), std::move(out),
                           std::move(inputs),
                           [outer = outer, inner = inner, total_axis,
                            extents = std::move(extents)](Node<T>& self) {
                             std::size_t offset = 0;
                             for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                               const auto ext = extents[pi];
                               if (parent_wants(self, pi)) {
                                 auto g = parent_grad(self, pi);
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < ext * inner; ++j) {
                                     g[o * ext * inner + j] +=
                                         self.grad[(o * total_axis + offset) * inner + j];
                                   }
                                 }
                               }
                               offset += ext;
                             }
                           });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t end) {
  require_finite("slice", x);
  if (axis >= x.rank() || start > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " +
                     shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - start;
  const auto [outer, inner] = split_at(x.shape(), axis);
  const auto full = x.dim(axis);
  const auto ext = end - start;
  const auto xv = x.data();
  std::vector<T> out(numel_of(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * full + start) * inner, ext * inner, out.data() + o * ext * inner);
  }
  return detail::record<T>(Primitive::slice, std::move(out_shape), std::move(out), {x},
                           [outer = outer, inner = inner, full, start, ext](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t j = 0; j < ext * inner; ++j) {
                                 g[(o * full + start) * inner + j] += self.grad[o * ext * inner + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_finite("reshape", x);
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::record<T>(Primitive::reshape, std::move(shape), std::move(out), {x},
                           [](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_finite("transpose", x);
  require_rank("transpose", x, 2);
  const auto m = x.dim(0);
  const auto n = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  }
  return detail::record<T>(Primitive::transpose, Shape{n, m}, std::move(out), {x},
                           [m, n](Node<T>& self) {
                             if (!parent_wants(self, 0)) return;
                             auto g = parent_grad(self, 0);
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 g[i * n + j] += self.grad[j * m + i];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> acos(const Tensor<T>& x, T margin) {
  const T lo = T(-1) + margin;
  const T hi = T(1) - margin;
  return unary<T>(
      Primitive::acos, x, [lo, hi](T v) { return std::acos(std::clamp(v, lo, hi)); },
      [lo, hi](T v, T) {
        if (v <= lo || v >= hi) return T(0);
        return T(-1) / std::sqrt(T(1) - v * v);
      });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                         const Tensor<T>& B, const Tensor<T>& C, ScanMode mode,
                         std::size_t block_size) {
  for (const auto* t : {&u, &delta, &A, &B, &C}) require_finite("selective-scan", *t);
  require_rank("selective-scan", u, 2);
  const auto L = u.dim(0);
  const auto D = u.dim(1);
  if (A.rank() != 2 || A.dim(0) != D) {
    throw ShapeError("selective-scan: A must be [D,N] with D=" + std::to_string(D) + ", got " +
                     shape_string(A.shape()));
  }
  const auto N = A.dim(1);
  if (delta.shape() != u.shape()) {
    throw ShapeError("selective-scan: delta " + shape_string(delta.shape()) +
                     " must match u " + shape_string(u.shape()));
  }
  if (B.shape() != Shape{L, N} || C.shape() != Shape{L, N}) {
    throw ShapeError("selective-scan: B and C must be [L,N] = " + shape_string(Shape{L, N}));
  }
  for (const T v : delta.data()) {
    if (!(v > T(0))) throw NumericError("selective-scan: delta must be strictly positive");
  }
  const auto uv = u.data();
  const auto dv = delta.data();
  const auto av = A.data();
  const auto bv = B.data();
  const auto cv = C.data();
  const auto lanes = D * N;
  const bool keep_states = grad_enabled() && (u.requires_grad() || delta.requires_grad() ||
                                              A.requires_grad() || B.requires_grad() ||
                                              C.requires_grad());

  std::vector<T> y(L * D, T(0));
  std::vector<T> states;
  if (mode == ScanMode::parallel) {
    std::vector<T> a(L * lanes);
    std::vector<T> h(L * lanes);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const T dt = dv[t * D + d];
        for (std::size_t n = 0; n < N; ++n) {
          const T z = dt * av[d * N + n];
          a[t * lanes + d * N + n] = std::exp(z);
          h[t * lanes + d * N + n] = ssm::zoh_gain(z) * dt * bv[t * N + n] * uv[t * D + d];
        }
      }
    }
    ssm::affine_scan<T>(a, h, L, lanes, {}, ssm::ScanOptions{block_size, 1});
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        T acc = T(0);
        for (std::size_t n = 0; n < N; ++n) acc += cv[t * N + n] * h[t * lanes + d * N + n];
        y[t * D + d] = acc;
      }
    }
    if (keep_states) states = std::move(h);
  } else {
    std::vector<T> h(lanes, T(0));
    if (keep_states) states.resize(L * lanes);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const T dt = dv[t * D + d];
        const T x = uv[t * D + d];
        T acc = T(0);
        for (std::size_t n = 0; n < N; ++n) {
          const T z = dt * av[d * N + n];
          T& hv = h[d * N + n];
          hv = std::exp(z) * hv + ssm::zoh_gain(z) * dt * bv[t * N + n] * x;
          acc += cv[t * N + n] * hv;
        }
        y[t * D + d] = acc;
      }
      if (keep_states) std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(t * lanes));
    }
  }

  return detail::record<T>(
      Primitive::selective_scan, Shape{L, D}, std::move(y), {u, delta, A, B, C},
      [L, D, N, lanes, states = std::move(states)](Node<T>& self) {
        const auto& uv = self.parents[0]->value;
        const auto& dv = self.parents[1]->value;
        const auto& av = self.parents[2]->value;
        const auto& bv = self.parents[3]->value;
        const auto& cv = self.parents[4]->value;
        std::vector<T> gu(L * D, T(0)), gdelta(L * D, T(0)), gA(D * N, T(0)), gB(L * N, T(0)),
            gC(L * N, T(0));
        // gh carries dLoss/dh_t backwards through the recurrence.
        std::vector<T> gh(lanes, T(0));
        for (std::size_t t = L; t-- > 0;) {
          for (std::size_t d = 0; d < D; ++d) {
            const T gy = self.grad[t * D + d];
            const T dt = dv[t * D + d];
            const T x = uv[t * D + d];
            for (std::size_t n = 0; n < N; ++n) {
              const auto lane = d * N + n;
              const T h = states[t * lanes + lane];
              const T h_prev = t ? states[(t - 1) * lanes + lane] : T(0);
              const T z = dt * av[lane];
              const T abar = std::exp(z);
              const T gain = ssm::zoh_gain(z);
              const T bbar = gain * dt * bv[t * N + n];
              gC[t * N + n] += gy * h;
              const T g = gh[lane] + gy * cv[t * N + n];
              // h = abar*h_prev + bbar*x
              const T g_abar = g * h_prev;
              const T g_bbar = g * x;
              gu[t * D + d] += g * bbar;
              // abar = exp(z); bbar = gain(z) * dt * B
              const T gz = g_abar * abar + g_bbar * ssm::zoh_gain_derivative(z) * dt * bv[t * N + n];
              gdelta[t * D + d] += gz * av[lane] + g_bbar * gain * bv[t * N + n];
              gA[lane] += gz * dt;
              gB[t * N + n] += g_bbar * gain * dt;
              gh[lane] = g * abar;
            }
          }
        }
        const std::vector<T>* grads[] = {&gu, &gdelta, &gA, &gB, &gC};
        for (std::size_t i = 0; i < 5; ++i) {
          if (!parent_wants(self, i)) continue;
          auto g = parent_grad(self, i);
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += (*grads[i])[j];
        }
      });
}

template <typename T>
Tensor<T> apply_primitive(Primitive kind, std::span<const Tensor<T>> inputs,
                          const PrimitiveArgs& args) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case Primitive::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case Primitive::add: need(2); return add(inputs[0], inputs[1]);
    case Primitive::mul: need(2); return mul(inputs[0], inputs[1]);
    case Primitive::silu: need(1); return silu(inputs[0]);
    case Primitive::softplus: need(1); return softplus(inputs[0]);
    case Primitive::exp: need(1); return exp(inputs[0]);
    case Primitive::log: need(1); return log(inputs[0]);
    case Primitive::mean_pool: need(1); return mean_pool(inputs[0]);
    case Primitive::max_pool: need(1); return max_pool(inputs[0]);
    case Primitive::layer_norm: need(1); return layer_norm(inputs[0], static_cast<T>(args.eps));
    case Primitive::conv1d_depthwise: need(2); return conv1d_depthwise(inputs[0], inputs[1]);
    case Primitive::softmax_rows: need(1); return softmax_rows(inputs[0]);
    case Primitive::concat: return concat(inputs, args.axis);
    case Primitive::slice: need(1); return slice(inputs[0], args.axis, args.start, args.end);
    case Primitive::reshape: need(1); return reshape(inputs[0], args.shape);
    case Primitive::transpose: need(1); return transpose(inputs[0]);
    case Primitive::acos: need(1); return acos(inputs[0], static_cast<T>(args.margin));
    case Primitive::selective_scan:
      need(5);
      return selective_scan(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], args.mode,
                            args.block_size);
    case Primitive::leaf: break;
  }
  throw ShapeError("apply_primitive: leaf is not an operation");
}

// ---- backward and gradient checking --------------------------------------

template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_string(root.shape()) : std::string("undefined")));
  }
  std::vector<Tensor<T>> leaves;
  if (!root.requires_grad()) return leaves;

  // Iterative post-order DFS gives a topological order.
  using NodePtr = std::shared_ptr<Node<T>>;
  std::vector<NodePtr> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& node = **it;
    if (node.is_leaf()) continue;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
  for (const NodePtr& node : order) {
    if (node->is_leaf()) leaves.push_back(Tensor<T>::from_node(node));
  }
  // Consume the tape: interior nodes drop their links and scratch gradients.
  for (const NodePtr& node : order) {
    if (node->is_leaf()) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
  }
  return leaves;
}

template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
             const std::function<std::vector<T>(const Tensor<T>&)>& analytic,
             const Tensor<T>& point, T eps) {
  if (!(eps > T(0))) throw NumericError("grad_check: eps must be positive");
  const std::vector<T> g = analytic(point);
  if (g.size() != point.numel()) throw ShapeError("grad_check: analytic gradient has wrong size");
  NoGradGuard no_grad;
  std::vector<T> values(point.data().begin(), point.data().end());
  T worst = T(0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto eval = [&](T shifted) {
      std::vector<T> v = values;
      v[i] = shifted;
      const Tensor<T> out = f(Tensor<T>(point.shape(), std::move(v)));
      if (out.numel() != 1) {
        throw ShapeError("grad_check: function output must be scalar, got " +
                         shape_string(out.shape()));
      }
      return out.item();
    };
    const T central = (eval(values[i] + eps) - eval(values[i] - eps)) / (2 * eps);
    const T err = std::abs(g[i] - central) / (std::abs(g[i]) + std::abs(central) + T(1e-12));
    worst = std::max(worst, err);
  }
  return worst;
}

template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& point, T eps) {
  auto analytic = [&f](const Tensor<T>& at) {
    Tensor<T> x = at.detach();
    x.set_requires_grad(true);
    const Tensor<T> out = f(x);
    if (out.numel() != 1) {
      throw ShapeError("grad_check: function output must be scalar, got " +
                       shape_string(out.shape()));
    }
    backward(out);
    return std::vector<T>(x.grad().begin(), x.grad().end());
  };
  return grad_check<T>(f, analytic, point, eps);
}

#define ROBOMAMBA_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> silu(const Tensor<T>&);                                                    \
  template Tensor<T> softplus(const Tensor<T>&);                                                \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> log(const Tensor<T>&);                                                     \
  template Tensor<T> mean_pool(const Tensor<T>&);                                               \
  template Tensor<T> max_pool(const Tensor<T>&);                                                \
  template Tensor<T> layer_norm(const Tensor<T>&, T);                                           \
  template Tensor<T> conv1d_depthwise(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                            \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                           \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> acos(const Tensor<T>&, T);                                                 \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                    const Tensor<T>&, const Tensor<T>&, ScanMode, std::size_t); \
  template Tensor<T> apply_primitive(Primitive, std::span<const Tensor<T>>,                     \
                                     const PrimitiveArgs&);                                     \
  template std::vector<Tensor<T>> backward(const Tensor<T>&);                                   \
  template T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>&,                      \
                        const std::function<std::vector<T>(const Tensor<T>&)>&,                 \
                        const Tensor<T>&, T);                                                   \
  template T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>&, const Tensor<T>&, T);

ROBOMAMBA_INSTANTIATE_OPS(float)
ROBOMAMBA_INSTANTIATE_OPS(double)

}  // namespace robomamba
