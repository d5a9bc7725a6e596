#include "robomamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "robomamba/binio.hpp"

namespace robomamba {

template <typename T>
AttentionBaseline<T>::AttentionBaseline(std::size_t d_model, Rng& rng) : d_(d_model) {
  const double s = 1.0 / std::sqrt(double(d_model));
  wq = nn::uniform_param<T>(rng, Shape{d_model, d_model}, s);
  wk = nn::uniform_param<T>(rng, Shape{d_model, d_model}, s);
  wv = nn::uniform_param<T>(rng, Shape{d_model, d_model}, s);
  wo = nn::uniform_param<T>(rng, Shape{d_model, d_model}, s);
}

template <typename T>
std::vector<T> AttentionBaseline<T>::weights(const Tensor<T>& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != d_ || tokens.dim(0) == 0) {
    throw ShapeError("attention expects [L>=1, " + std::to_string(d_) + "], got " +
                     shape_string(tokens.shape()));
  }
  NoGradGuard guard;
  const auto L = tokens.dim(0);
  const auto q = matmul(tokens, wq);
  const auto k = matmul(tokens, wk);
  const auto qd = q.data(), kd = k.data();
  const T scale = T(1) / std::sqrt(T(d_));
  std::vector<T> w(L * L, T(0));
  for (std::size_t t = 0; t < L; ++t) {
    T* row = w.data() + t * L;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t s = 0; s <= t; ++s) {
      T acc = 0;
      for (std::size_t j = 0; j < d_; ++j) acc += qd[t * d_ + j] * kd[s * d_ + j];
      row[s] = acc * scale;
      mx = std::max(mx, row[s]);
    }
    T z = 0;
    for (std::size_t s = 0; s <= t; ++s) z += (row[s] = std::exp(row[s] - mx));
    for (std::size_t s = 0; s <= t; ++s) row[s] /= z;
  }
  return w;
}

template <typename T>
Tensor<T> AttentionBaseline<T>::forward(const Tensor<T>& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != d_ || tokens.dim(0) == 0) {
    throw ShapeError("attention expects [L>=1, " + std::to_string(d_) + "], got " +
                     shape_string(tokens.shape()));
  }
  NoGradGuard guard;
  const auto L = tokens.dim(0);
  const auto q = matmul(tokens, wq);
  const auto k = matmul(tokens, wk);
  const auto v = matmul(tokens, wv);
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  const T scale = T(1) / std::sqrt(T(d_));
  std::vector<T> y(L * d_, T(0));
  std::vector<T> row(L);
  for (std::size_t t = 0; t < L; ++t) {
    T mx = -std::numeric_limits<T>::infinity();
    const T* qt = qd.data() + t * d_;
    for (std::size_t s = 0; s <= t; ++s) {
      const T* ks = kd.data() + s * d_;
      T acc = 0;
      for (std::size_t j = 0; j < d_; ++j) acc += qt[j] * ks[j];
      row[s] = acc * scale;
      mx = std::max(mx, row[s]);
    }
    T z = 0;
    for (std::size_t s = 0; s <= t; ++s) z += (row[s] = std::exp(row[s] - mx));
    T* yt = y.data() + t * d_;
    for (std::size_t s = 0; s <= t; ++s) {
      const T a = row[s] / z;
      const T* vs = vd.data() + s * d_;
      for (std::size_t j = 0; j < d_; ++j) yt[j] += a * vs[j];
    }
  }
  return matmul(Tensor<T>(Shape{L, d_}, std::move(y)), wo);
}

template class AttentionBaseline<float>;
template class AttentionBaseline<double>;

const char* to_string(Mechanism m) {
  switch (m) {
    case Mechanism::scan_seq: return "scan-seq";
    case Mechanism::scan_par: return "scan-par";
    case Mechanism::attention: return "attention";
  }
  return "unknown";
}

Mechanism parse_mechanism(std::string_view s) {
  if (s == "scan-seq") return Mechanism::scan_seq;
  if (s == "scan-par") return Mechanism::scan_par;
  if (s == "attention") return Mechanism::attention;
  throw DataError("unknown mechanism '" + std::string(s) + "' (expected scan-seq, scan-par, attention)");
}

std::size_t peak_bytes_estimate(Mechanism m, std::size_t L, const MambaConfig& block) {
  const std::size_t d = block.d_model;
  if (m == Mechanism::attention) {
    // input, q, k, v, mixed, output, one score row
    return 4 * (6 * L * d + L);
  }
  const std::size_t e = block.d_inner(), n = block.d_state, r = block.rank();
  // input, norm, in_proj, conv, u, x_proj, delta, scan output, gate, out_proj, residual
  std::size_t floats = L * (4 * d + 2 * e + 5 * e + r + 2 * n) + e * n;
  if (m == Mechanism::scan_par) floats += 2 * std::min(L, block.scan_block) * e * n;
  return 4 * floats;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DataError("slope fit needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= double(x.size());
  my /= double(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw DataError("slope fit needs distinct lengths");
  return sxy / sxx;
}

bool slope_lengths_ok(std::span<const std::size_t> lengths) {
  const std::set<std::size_t> distinct(lengths.begin(), lengths.end());
  return distinct.size() >= 4 && *distinct.begin() > 0 && *distinct.rbegin() >= 8 * *distinct.begin();
}

BenchResult bench_scaling(const BenchConfig& config) {
  if (config.lengths.empty()) throw DataError("bench: no lengths given");
  if (config.repeats < 5) throw DataError("bench: repeats must be at least 5");
  for (auto L : config.lengths) {
    if (L == 0) throw DataError("bench: lengths must be positive");
  }
  MambaConfig seq;
  seq.d_model = config.d_model;
  seq.d_state = 16;
  seq.scan_mode = ScanMode::sequential;
  MambaConfig par = seq;
  par.scan_mode = ScanMode::parallel;
  // Same seed for both blocks, so they hold identical weights.
  Rng seq_rng(config.seed), par_rng(config.seed);
  const MambaBlock<float> seq_block(seq, seq_rng, "bench", ParamGroup::lm);
  const MambaBlock<float> par_block(par, par_rng, "bench", ParamGroup::lm);
  Rng rng(config.seed + 1);
  const AttentionBaseline<float> attention(config.d_model, rng);

  BenchResult result;
  NoGradGuard guard;
  for (auto L : config.lengths) {
    std::vector<float> x(L * config.d_model);
    for (auto& v : x) v = float(rng.normal());
    const Tensor<float> tokens(Shape{L, config.d_model}, std::move(x));
    for (auto m : config.mechanisms) {
      auto run = [&] {
        switch (m) {
          case Mechanism::scan_seq: return seq_block.forward(tokens);
          case Mechanism::scan_par: return par_block.forward(tokens);
          case Mechanism::attention: return attention.forward(tokens);
        }
        return Tensor<float>{};
      };
      for (std::size_t w = 0; w < config.warmup; ++w) run();
      std::vector<double> ms;
      for (std::size_t r = 0; r < config.repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = run();
        const auto t1 = std::chrono::steady_clock::now();
        if (out.numel() != tokens.numel()) throw NumericError("bench: forward returned a wrong shape");
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      std::sort(ms.begin(), ms.end());
      BenchRecord rec;
      rec.length = L;
      rec.mechanism = m;
      rec.repeats = ms.size();
      rec.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
      rec.spread_ms = ms.back() - ms.front();
      rec.flagged = rec.spread_ms > 0.5 * rec.median_ms;
      rec.peak_bytes = peak_bytes_estimate(m, L, m == Mechanism::scan_par ? par : seq);
      result.records.push_back(rec);
    }
  }
  if (slope_lengths_ok(config.lengths)) {
    for (auto m : config.mechanisms) {
      std::vector<double> xs, ys;
      for (const auto& r : result.records) {
        if (r.mechanism != m) continue;
        xs.push_back(double(r.length));
        ys.push_back(std::max(r.median_ms, 1e-6));
      }
      result.slopes.emplace_back(m, loglog_slope(xs, ys));
    }
  }
  return result;
}

void write_bench_csv(const BenchResult& result, const std::filesystem::path& path) {
  std::string text = "length,mechanism,median_ms,spread_ms,peak_bytes,repeats,flagged\n";
  char buf[200];
  for (const auto& r : result.records) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%zu,%zu,%d\n", r.length, to_string(r.mechanism),
                  r.median_ms, r.spread_ms, r.peak_bytes, r.repeats, r.flagged ? 1 : 0);
    text += buf;
  }
  binio::write_text_atomic(path, text);
}

}  // namespace robomamba
