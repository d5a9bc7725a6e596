#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "robomamba/mamba.hpp"

namespace robomamba {

// Single-head causal softmax attention with learned Q/K/V/O, no residual.
template <typename T>
class AttentionBaseline {
 public:
  AttentionBaseline() = default;
  AttentionBaseline(std::size_t d_model, Rng& rng);

  // [L, d] -> [L, d], forward only.
  Tensor<T> forward(const Tensor<T>& tokens) const;
  // Row-major [L, L] softmax weights, zero above the diagonal.
  std::vector<T> weights(const Tensor<T>& tokens) const;

  Tensor<T> wq, wk, wv, wo;  // [d, d]

 private:
  std::size_t d_ = 0;
};

enum class Mechanism { scan_seq, scan_par, attention };

const char* to_string(Mechanism m);
Mechanism parse_mechanism(std::string_view s);

struct BenchRecord {
  std::size_t length = 0;
  Mechanism mechanism = Mechanism::scan_seq;
  double median_ms = 0;
  double spread_ms = 0;  // max - min over the repeats
  std::size_t peak_bytes = 0;
  std::size_t repeats = 0;
  bool flagged = false;  // spread > 50% of the median
};

struct BenchConfig {
  std::vector<std::size_t> lengths;
  std::size_t d_model = 64;
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  std::vector<Mechanism> mechanisms{Mechanism::scan_seq, Mechanism::scan_par, Mechanism::attention};
};

struct BenchResult {
  std::vector<BenchRecord> records;
  // Least-squares slope of log(ms) on log(L) per mechanism, in config order.
  // Empty unless there are >= 4 distinct lengths spanning >= 8x.
  std::vector<std::pair<Mechanism, double>> slopes;
};

// Activation accounting of one forward pass, f32.
std::size_t peak_bytes_estimate(Mechanism m, std::size_t length, const MambaConfig& block);

double loglog_slope(std::span<const double> x, std::span<const double> y);
bool slope_lengths_ok(std::span<const std::size_t> lengths);

BenchResult bench_scaling(const BenchConfig& config);

// length,mechanism,median_ms,spread_ms,peak_bytes,repeats,flagged
void write_bench_csv(const BenchResult& result, const std::filesystem::path& path);

}  // namespace robomamba
