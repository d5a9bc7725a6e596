#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "robomamba/bench.hpp"
#include "robomamba/config.hpp"

using namespace robomamba;
namespace fs = std::filesystem;

namespace {

Tensor<double> random_tokens(std::size_t L, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(L * d);
  for (auto& v : x) v = rng.normal();
  return Tensor<double>(Shape{L, d}, std::move(x));
}

}  // namespace

TEST_CASE("attention weights are causal and rows sum to one") {
  Rng rng(1);
  const AttentionBaseline<double> att(8, rng);
  const std::size_t L = 6;
  const auto w = att.weights(random_tokens(L, 8, 2));
  for (std::size_t t = 0; t < L; ++t) {
    double sum = 0;
    for (std::size_t s = 0; s < L; ++s) {
      if (s > t) CHECK(w[t * L + s] == 0.0);
      sum += w[t * L + s];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("attention matches a hand computation") {
  Rng rng(4);
  const std::size_t d = 5, L = 4;
  const AttentionBaseline<double> att(d, rng);
  const auto x = random_tokens(L, d, 9);
  auto proj = [&](const Tensor<double>& w, std::size_t t, std::size_t j) {
    double acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += x.at(t, i) * w.at(i, j);
    return acc;
  };
  const auto y = att.forward(x);
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<double> score(t + 1);
    double z = 0;
    for (std::size_t s = 0; s <= t; ++s) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += proj(att.wq, t, j) * proj(att.wk, s, j);
      score[s] = std::exp(dot / std::sqrt(double(d)));
      z += score[s];
    }
    std::vector<double> mixed(d, 0.0);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t j = 0; j < d; ++j) mixed[j] += score[s] / z * proj(att.wv, s, j);
    for (std::size_t j = 0; j < d; ++j) {
      double want = 0;
      for (std::size_t i = 0; i < d; ++i) want += mixed[i] * att.wo.at(i, j);
      CHECK(y.at(t, j) == doctest::Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("attention rejects empty or misshaped input") {
  Rng rng(1);
  const AttentionBaseline<double> att(4, rng);
  CHECK_THROWS_AS(att.forward(Tensor<double>(Shape{0, 4}, {})), ShapeError);
  CHECK_THROWS_AS(att.forward(Tensor<double>(Shape{3, 5}, std::vector<double>(15))), ShapeError);
}

TEST_CASE("log-log slope recovers a power law") {
  const std::vector<double> x{100, 200, 400, 800, 1600};
  std::vector<double> y;
  for (double v : x) y.push_back(3e-4 * std::pow(v, 1.7));
  CHECK(loglog_slope(x, y) == doctest::Approx(1.7).epsilon(1e-12));
  CHECK_THROWS_AS(loglog_slope(std::vector<double>{5, 5}, std::vector<double>{1, 2}), DataError);
}

TEST_CASE("slope precondition needs four lengths over an 8x span") {
  CHECK(slope_lengths_ok(std::vector<std::size_t>{64, 128, 256, 512}));
  CHECK_FALSE(slope_lengths_ok(std::vector<std::size_t>{64, 128, 256, 511}));
  CHECK_FALSE(slope_lengths_ok(std::vector<std::size_t>{64, 64, 128, 512}));
  CHECK_FALSE(slope_lengths_ok(std::vector<std::size_t>{256, 512}));
}

TEST_CASE("bench writes one row per length and mechanism") {
  BenchConfig c;
  c.lengths = {16, 32};
  c.d_model = 8;
  const auto r = bench_scaling(c);
  CHECK(r.records.size() == 6);
  CHECK(r.slopes.empty());
  for (const auto& rec : r.records) {
    CHECK(rec.repeats == 5);
    CHECK(rec.median_ms >= 0);
    CHECK(rec.peak_bytes > 0);
  }
  const auto path = fs::temp_directory_path() / "robomamba_test_bench.csv";
  write_bench_csv(r, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  std::getline(in, line);
  CHECK(line == "length,mechanism,median_ms,spread_ms,peak_bytes,repeats,flagged");
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 6);

  c.lengths = {8, 16, 32, 64};
  CHECK(bench_scaling(c).slopes.size() == 3);
  c.repeats = 4;
  CHECK_THROWS_AS(bench_scaling(c), DataError);
}

TEST_CASE("mechanism names roundtrip") {
  for (auto m : {Mechanism::scan_seq, Mechanism::scan_par, Mechanism::attention})
    CHECK(parse_mechanism(to_string(m)) == m);
  CHECK_THROWS_AS(parse_mechanism("rnn"), DataError);
}

TEST_CASE("key value config parsing") {
  const auto c = KeyValueConfig::parse("# comment\n\n d-model = 32 \nhead=mlp1\r\nprompt = a = b\n");
  REQUIRE(c.entries().size() == 3);
  CHECK(*c.find("d-model") == "32");
  CHECK(*c.find("head") == "mlp1");
  CHECK(*c.find("prompt") == "a = b");
  CHECK(c.find("seed") == nullptr);
  CHECK_THROWS_AS(KeyValueConfig::parse("a=1\na=2\n"), DataError);
  CHECK_THROWS_AS(KeyValueConfig::parse("just words\n"), DataError);
  CHECK_THROWS_AS(KeyValueConfig::parse("Bad Key=1\n"), DataError);
  CHECK_THROWS_AS(KeyValueConfig::parse("k=\xff\n"), DataError);
  CHECK_THROWS_AS(KeyValueConfig::load("/nonexistent/robomamba.cfg"), IoError);
}
