#include "robomamba/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <string>

#include "robomamba/error.hpp"

namespace robomamba::ssm {

template <typename T>
T zoh_gain(T z) {
  if (std::abs(z) < T(kZohSeriesThreshold)) {
    return T(1) + z / T(2) + z * z / T(6);
  }
  return std::expm1(z) / z;
}

template <typename T>
T zoh_gain_derivative(T z) {
  // (z e^z - e^z + 1) / z^2 cancels badly near zero; the series is accurate
  // to ~z^4/144 there.
  if (std::abs(z) < T(1e-3)) {
    return T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30);
  }
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

template <typename T>
std::pair<T, T> discretize_zoh(T a, T b, T delta) {
  if (!(delta > T(0))) {
    throw NumericError("discretize_zoh: delta must be positive, got " + std::to_string(delta));
  }
  const T z = delta * a;
  return {std::exp(z), zoh_gain(z) * delta * b};
}

template <typename T>
Discretized<T> discretize_zoh(std::span<const T> A, std::span<const T> B, std::span<const T> delta,
                              std::size_t channels, std::size_t state) {
  if (A.size() != channels * state || B.size() != channels * state || delta.size() != channels) {
    throw ShapeError("discretize_zoh: expected A, B of [" + std::to_string(channels) + "," +
                     std::to_string(state) + "] and delta of [" + std::to_string(channels) + "]");
  }
  Discretized<T> out;
  out.abar.resize(A.size());
  out.bbar.resize(A.size());
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state; ++n) {
      const auto i = d * state + n;
      std::tie(out.abar[i], out.bbar[i]) = discretize_zoh(A[i], B[i], delta[d]);
    }
  }
  return out;
}

template <typename T>
Recurrence<T> Recurrence<T>::time_invariant(std::size_t length, std::size_t channels,
                                            std::size_t state, std::span<const T> abar,
                                            std::span<const T> bbar, std::span<const T> c) {
  const auto lanes = channels * state;
  if (abar.size() != lanes || bbar.size() != lanes || c.size() != lanes) {
    throw ShapeError("Recurrence::time_invariant: coefficient size does not match [D,N]");
  }
  Recurrence r;
  r.length = length;
  r.channels = channels;
  r.state = state;
  r.abar.reserve(length * lanes);
  r.bbar.reserve(length * lanes);
  r.c.reserve(length * lanes);
  for (std::size_t t = 0; t < length; ++t) {
    r.abar.insert(r.abar.end(), abar.begin(), abar.end());
    r.bbar.insert(r.bbar.end(), bbar.begin(), bbar.end());
    r.c.insert(r.c.end(), c.begin(), c.end());
  }
  return r;
}

template <typename T>
void Recurrence<T>::validate(std::size_t x_size, std::size_t h0_size) const {
  const auto lanes = channels * state;
  const auto want = length * lanes;
  if (abar.size() != want || bbar.size() != want || c.size() != want) {
    throw ShapeError("scan: coefficients must be [L,D,N] = [" + std::to_string(length) + "," +
                     std::to_string(channels) + "," + std::to_string(state) + "]");
  }
  if (x_size != length * channels) {
    throw ShapeError("scan: input must be [L,D] = [" + std::to_string(length) + "," +
                     std::to_string(channels) + "], got " + std::to_string(x_size) + " values");
  }
  if (h0_size != 0 && h0_size != lanes) {
    throw ShapeError("scan: h0 must be [D,N]");
  }
}

template <typename T>
void scan_step(ScanState<T>& s, std::span<const T> abar, std::span<const T> bbar,
               std::span<const T> c, std::span<const T> x) {
  const auto D = s.channels;
  const auto N = s.state;
  for (std::size_t d = 0; d < D; ++d) {
    T acc = T(0);
    for (std::size_t n = 0; n < N; ++n) {
      const auto i = d * N + n;
      s.h[i] = abar[i] * s.h[i] + bbar[i] * x[d];
      acc += c[i] * s.h[i];
    }
    s.x[d] = x[d];
    s.y[d] = acc;
  }
  ++s.step;
}

template <typename T>
ScanResult<T> scan_sequential(const Recurrence<T>& r, std::span<const T> x, std::span<const T> h0) {
  r.validate(x.size(), h0.size());
  const auto lanes = r.channels * r.state;
  ScanState<T> s(r.channels, r.state);
  if (!h0.empty()) std::copy(h0.begin(), h0.end(), s.h.begin());
  ScanResult<T> out;
  out.y.resize(r.length * r.channels);
  for (std::size_t t = 0; t < r.length; ++t) {
    const auto off = t * lanes;
    scan_step<T>(s, std::span<const T>(r.abar).subspan(off, lanes),
                 std::span<const T>(r.bbar).subspan(off, lanes),
                 std::span<const T>(r.c).subspan(off, lanes), x.subspan(t * r.channels, r.channels));
    std::copy(s.y.begin(), s.y.end(), out.y.begin() + static_cast<std::ptrdiff_t>(t * r.channels));
  }
  out.h = std::move(s.h);
  return out;
}

template <typename T>
void affine_scan(std::span<const T> a, std::span<T> b, std::size_t length, std::size_t lanes,
                 std::span<const T> h0, const ScanOptions& options) {
  if (a.size() != length * lanes || b.size() != length * lanes) {
    throw ShapeError("affine_scan: a and b must be [L, lanes]");
  }
  if (length == 0) return;
  const std::size_t block = std::max<std::size_t>(options.block_size, 1);
  const std::size_t chunks = (length + block - 1) / block;

  // prefix[t] is the product of a over the chunk up to and including t.
  std::vector<T> prefix(a.size());

  auto local_scan = [&](std::size_t chunk) {
    const std::size_t begin = chunk * block;
    const std::size_t end = std::min(length, begin + block);
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      Affine<T> acc{a[begin * lanes + lane], b[begin * lanes + lane]};
      prefix[begin * lanes + lane] = acc.a;
      for (std::size_t t = begin + 1; t < end; ++t) {
        const auto i = t * lanes + lane;
        acc = combine(Affine<T>{a[i], b[i]}, acc);
        prefix[i] = acc.a;
        b[i] = acc.b;
      }
    }
  };

  // Applies the incoming carry to every element of a chunk.
  auto fix_up = [&](std::size_t chunk, std::span<const T> carry) {
    const std::size_t begin = chunk * block;
    const std::size_t end = std::min(length, begin + block);
    for (std::size_t t = begin; t < end; ++t) {
      for (std::size_t lane = 0; lane < lanes; ++lane) {
        const auto i = t * lanes + lane;
        b[i] = prefix[i] * carry[lane] + b[i];
      }
    }
  };

  auto for_each_chunk = [&](auto&& fn) {
    if (options.threads <= 1 || chunks == 1) {
      for (std::size_t c = 0; c < chunks; ++c) fn(c);
      return;
    }
    std::vector<std::future<void>> jobs;
    const std::size_t workers = std::min(options.threads, chunks);
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t c = w; c < chunks; c += workers) fn(c);
      }));
    }
    for (auto& j : jobs) j.get();
  };

  for_each_chunk(local_scan);

  // carries[c] is the state entering chunk c.
  std::vector<T> carries(chunks * lanes, T(0));
  if (!h0.empty()) std::copy(h0.begin(), h0.end(), carries.begin());
  for (std::size_t c = 0; c + 1 < chunks; ++c) {
    const std::size_t last = std::min(length, (c + 1) * block) - 1;
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      const Affine<T> chunk_map{prefix[last * lanes + lane], b[last * lanes + lane]};
      carries[(c + 1) * lanes + lane] =
          chunk_map.a * carries[c * lanes + lane] + chunk_map.b;
    }
  }

  for_each_chunk([&](std::size_t c) {
    fix_up(c, std::span<const T>(carries).subspan(c * lanes, lanes));
  });
}

template <typename T>
ScanResult<T> scan_parallel(const Recurrence<T>& r, std::span<const T> x, std::span<const T> h0,
                            const ScanOptions& options) {
  r.validate(x.size(), h0.size());
  const auto D = r.channels;
  const auto N = r.state;
  const auto lanes = D * N;
  std::vector<T> h(r.length * lanes);
  for (std::size_t t = 0; t < r.length; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t n = 0; n < N; ++n) {
        const auto i = t * lanes + d * N + n;
        h[i] = r.bbar[i] * x[t * D + d];
      }
    }
  }
  affine_scan<T>(r.abar, h, r.length, lanes, h0, options);

  ScanResult<T> out;
  out.y.assign(r.length * D, T(0));
  for (std::size_t t = 0; t < r.length; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      T acc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const auto i = t * lanes + d * N + n;
        acc += r.c[i] * h[i];
      }
      out.y[t * D + d] = acc;
    }
  }
  if (r.length == 0) {
    out.h = h0.empty() ? std::vector<T>(lanes, T(0)) : std::vector<T>(h0.begin(), h0.end());
  } else {
    out.h.assign(h.end() - static_cast<std::ptrdiff_t>(lanes), h.end());
  }
  return out;
}

template <typename T>
std::vector<T> continuous_ode_oracle(std::span<const T> A, std::span<const T> B,
                                     std::span<const T> C, std::span<const T> x,
                                     std::span<const T> delta, std::size_t channels,
                                     std::size_t state, std::size_t substeps,
                                     std::span<const T> h0) {
  const auto lanes = channels * state;
  if (A.size() != lanes || B.size() != lanes || C.size() != lanes || delta.size() != channels) {
    throw ShapeError("continuous_ode_oracle: A, B, C must be [D,N] and delta [D]");
  }
  if (channels == 0 || x.size() % channels != 0) {
    throw ShapeError("continuous_ode_oracle: x must be [L,D]");
  }
  if (!h0.empty() && h0.size() != lanes) throw ShapeError("continuous_ode_oracle: h0 must be [D,N]");
  if (substeps < 100) throw NumericError("continuous_ode_oracle: substeps must be >= 100");

  const std::size_t length = x.size() / channels;
  std::vector<T> h = h0.empty() ? std::vector<T>(lanes, T(0)) : std::vector<T>(h0.begin(), h0.end());
  std::vector<T> y(length * channels, T(0));
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      const T step = delta[d] / static_cast<T>(substeps);
      const T u = x[t * channels + d];
      T acc = T(0);
      for (std::size_t n = 0; n < state; ++n) {
        const auto i = d * state + n;
        const T a = A[i];
        const T bu = B[i] * u;
        auto rhs = [&](T hv) { return a * hv + bu; };
        T hv = h[i];
        for (std::size_t k = 0; k < substeps; ++k) {
          const T k1 = rhs(hv);
          const T k2 = rhs(hv + step / 2 * k1);
          const T k3 = rhs(hv + step / 2 * k2);
          const T k4 = rhs(hv + step * k3);
          hv += step / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        h[i] = hv;
        acc += C[i] * hv;
      }
      y[t * channels + d] = acc;
    }
  }
  return y;
}

#define ROBOMAMBA_INSTANTIATE_SSM(T)                                                            \
  template T zoh_gain<T>(T);                                                                    \
  template T zoh_gain_derivative<T>(T);                                                         \
  template std::pair<T, T> discretize_zoh<T>(T, T, T);                                          \
  template Discretized<T> discretize_zoh<T>(std::span<const T>, std::span<const T>,             \
                                            std::span<const T>, std::size_t, std::size_t);      \
  template struct Recurrence<T>;                                                                \
  template void scan_step<T>(ScanState<T>&, std::span<const T>, std::span<const T>,             \
                             std::span<const T>, std::span<const T>);                           \
  template ScanResult<T> scan_sequential<T>(const Recurrence<T>&, std::span<const T>,           \
                                            std::span<const T>);                                \
  template void affine_scan<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t,      \
                               std::span<const T>, const ScanOptions&);                         \
  template ScanResult<T> scan_parallel<T>(const Recurrence<T>&, std::span<const T>,             \
                                          std::span<const T>, const ScanOptions&);              \
  template std::vector<T> continuous_ode_oracle<T>(                                             \
      std::span<const T>, std::span<const T>, std::span<const T>, std::span<const T>,           \
      std::span<const T>, std::size_t, std::size_t, std::size_t, std::span<const T>);

ROBOMAMBA_INSTANTIATE_SSM(float)
ROBOMAMBA_INSTANTIATE_SSM(double)

}  // namespace robomamba::ssm
