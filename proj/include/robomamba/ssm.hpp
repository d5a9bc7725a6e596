#pragma once

// Diagonal state-space dynamics: zero-order-hold discretisation and the
// discrete recurrence h_t = abar_t * h_{t-1} + bbar_t * x_t, y_t = sum_n c_t * h_t,
// evaluated left to right or as a chunked associative scan.
//
// Layout conventions: channel-major state [D, N]; sequences [L, D];
// time-varying coefficients [L, D, N].

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace robomamba::ssm {

// Below this |delta*A| the input gain expm1(z)/z is taken from its series.
inline constexpr double kZohSeriesThreshold = 1e-6;

// expm1(z)/z, equal to 1 at z = 0.
template <typename T> T zoh_gain(T z);
// d/dz of zoh_gain.
template <typename T> T zoh_gain_derivative(T z);

// abar = exp(delta*a), bbar = (exp(delta*a) - 1)/(delta*a) * delta * b.
// Throws NumericError unless delta > 0.
template <typename T> std::pair<T, T> discretize_zoh(T a, T b, T delta);

template <typename T>
struct Discretized {
  std::vector<T> abar;  // [D, N]
  std::vector<T> bbar;  // [D, N]
};

// Per-channel discretisation with delta broadcast over the state axis.
// A, B: [D, N]; delta: [D].
template <typename T>
Discretized<T> discretize_zoh(std::span<const T> A, std::span<const T> B, std::span<const T> delta,
                              std::size_t channels, std::size_t state);

// Coefficients of a (possibly time-varying) diagonal recurrence.
template <typename T>
struct Recurrence {
  std::size_t length = 0;
  std::size_t channels = 0;
  std::size_t state = 0;
  std::vector<T> abar;  // [L, D, N]
  std::vector<T> bbar;  // [L, D, N]
  std::vector<T> c;     // [L, D, N]

  // Repeats [D, N] coefficients over L steps.
  static Recurrence time_invariant(std::size_t length, std::size_t channels, std::size_t state,
                                   std::span<const T> abar, std::span<const T> bbar,
                                   std::span<const T> c);

  void validate(std::size_t x_size, std::size_t h0_size) const;
};

template <typename T>
struct ScanResult {
  std::vector<T> y;  // [L, D]
  std::vector<T> h;  // final state [D, N]
};

// Carried state of a single lane set; used for step-at-a-time evaluation
// during generation.
template <typename T>
struct ScanState {
  std::size_t channels = 0;
  std::size_t state = 0;
  std::vector<T> h;  // [D, N]
  std::size_t step = 0;
  std::vector<T> x;  // last input [D]
  std::vector<T> y;  // last output [D]

  ScanState() = default;
  ScanState(std::size_t d, std::size_t n)
      : channels(d), state(n), h(d * n, T(0)), x(d, T(0)), y(d, T(0)) {}
};

// One step of the recurrence. abar, bbar, c: [D, N]; x: [D].
template <typename T>
void scan_step(ScanState<T>& s, std::span<const T> abar, std::span<const T> bbar,
               std::span<const T> c, std::span<const T> x);

// Exact left-to-right recurrence. An empty h0 means zeros.
template <typename T>
ScanResult<T> scan_sequential(const Recurrence<T>& r, std::span<const T> x,
                              std::span<const T> h0 = {});

struct ScanOptions {
  std::size_t block_size = 64;
  std::size_t threads = 1;
};

// Pair (a, b) standing for the map h -> a*h + b.
template <typename T>
struct Affine {
  T a;
  T b;
};

// Composition "later after earlier": (a2,b2) o (a1,b1) = (a2*a1, a2*b1 + b2).
template <typename T>
constexpr Affine<T> combine(const Affine<T>& later, const Affine<T>& earlier) {
  return {later.a * earlier.a, later.a * earlier.b + later.b};
}

// In-place affine scan over `lanes` independent lanes: on return
// b[t, lane] holds h_t = a_t h_{t-1} + b_t with h_{-1} = h0 (zeros if empty).
// a, b: [L, lanes]. Chunks of block_size are scanned independently and then
// stitched through their composed maps.
template <typename T>
void affine_scan(std::span<const T> a, std::span<T> b, std::size_t length, std::size_t lanes,
                 std::span<const T> h0, const ScanOptions& options);

// Same result as scan_sequential, evaluated with affine_scan.
template <typename T>
ScanResult<T> scan_parallel(const Recurrence<T>& r, std::span<const T> x,
                            std::span<const T> h0 = {}, const ScanOptions& options = {});

// Continuous system h' = A h + B x, y = C h (diagonal A, per-channel [D, N]),
// integrated with classic fixed-step RK4, x held constant across each window
// of length delta[d]. Returns y sampled at window ends, [L, D]. Test oracle.
template <typename T>
std::vector<T> continuous_ode_oracle(std::span<const T> A, std::span<const T> B,
                                     std::span<const T> C, std::span<const T> x,
                                     std::span<const T> delta, std::size_t channels,
                                     std::size_t state, std::size_t substeps,
                                     std::span<const T> h0 = {});

}  // namespace robomamba::ssm
