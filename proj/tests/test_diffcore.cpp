#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "robomamba/ops.hpp"
#include "test_util.hpp"

using namespace robomamba;
using rmtest::random_tensor;
using rmtest::weighted_sum;

namespace {

Tensor<double> scalar_leaf(double v) { return Tensor<double>(Shape{}, {v}, true); }

}  // namespace

TEST_CASE("matmul with identity returns the other operand") {
  Rng rng(1);
  auto m = random_tensor<double>(rng, {3, 3});
  auto eye = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = matmul(eye, m);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == m[i]);
}

TEST_CASE("pointwise values at zero") {
  auto z = Tensor<double>::scalar(0.0);
  CHECK(silu(z).item() == 0.0);
  CHECK(softplus(z).item() == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(softplus(z).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("backward: product rule, silu slope, mean gradient") {
  auto x = scalar_leaf(2.0);
  auto y = scalar_leaf(3.0);
  backward(mul(x, y));
  CHECK(x.grad()[0] == 3.0);
  CHECK(y.grad()[0] == 2.0);

  auto s = scalar_leaf(0.0);
  backward(silu(s));
  CHECK(s.grad()[0] == doctest::Approx(0.5));

  auto v = Tensor<double>({4}, {1, 2, 3, 4}, true);
  backward(mean_pool(v));
  for (double g : v.grad()) CHECK(g == 0.25);
}

TEST_CASE("backward errors and edge cases") {
  auto v = Tensor<double>({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(exp(v)), ShapeError);

  // A leaf that never reached the root reads as a zero gradient.
  auto x = scalar_leaf(1.0);
  auto unused = scalar_leaf(5.0);
  backward(exp(x));
  CHECK_FALSE(unused.has_grad());
  CHECK(unused.grad()[0] == 0.0);

  // Tape is consumed: interior nodes drop their inputs.
  auto a = scalar_leaf(1.5);
  auto mid = exp(a);
  auto root = mul(mid, mid);
  backward(root);
  CHECK(root.node()->parents.empty());
  CHECK(mid.node()->parents.empty());
  CHECK(a.grad()[0] == doctest::Approx(2 * std::exp(3.0)));
}

TEST_CASE("gradients accumulate across backward calls") {
  auto x = scalar_leaf(3.0);
  backward(mul(x, x));
  backward(mul(x, x));
  CHECK(x.grad()[0] == 12.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = scalar_leaf(1.0);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = exp(x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
  CHECK(grad_enabled());
}

TEST_CASE("shape and finiteness errors") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, Tensor<double>::zeros({2, 2})), ShapeError);
  CHECK_THROWS_AS(mean_pool(Tensor<double>::zeros({0, 3})), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 4), ShapeError);
  CHECK_THROWS_AS(conv1d_depthwise(a, Tensor<double>::zeros({2, 2})), ShapeError);

  auto bad = Tensor<double>({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(exp(bad), NumericError);
  auto inf = Tensor<double>({1}, {INFINITY});
  CHECK_THROWS_AS(silu(inf), NumericError);
  CHECK_THROWS_AS(exp(Tensor<double>::scalar(1000.0)), NumericError);
  CHECK_THROWS_AS(log(Tensor<double>::scalar(0.0)), NumericError);

  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("grad_check reference cases") {
  std::function<Tensor<double>(const Tensor<double>&)> linear = [](const Tensor<double>& x) {
    return mul(x, Tensor<double>::scalar(3.0));
  };
  CHECK(grad_check<double>(linear, Tensor<double>::scalar(0.7), 1e-3) <= 1e-10);

  std::function<Tensor<double>(const Tensor<double>&)> square = [](const Tensor<double>& x) {
    return mul(x, x);
  };
  CHECK(grad_check<double>(square, Tensor<double>::scalar(1.0), 1e-4) <= 1e-7);

  std::function<std::vector<double>(const Tensor<double>&)> doubled =
      [](const Tensor<double>& x) { return std::vector<double>{4.0 * x.item()}; };
  CHECK(grad_check<double>(square, doubled, Tensor<double>::scalar(1.0), 1e-4) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  std::function<Tensor<double>(const Tensor<double>&)> vector_out = [](const Tensor<double>& x) {
    return exp(x);
  };
  CHECK_THROWS_AS(grad_check<double>(vector_out, Tensor<double>::zeros({2}), 1e-4), ShapeError);
}

namespace {

using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

struct PrimitiveCase {
  std::string name;
  // Builds a scalar function of one input from a random draw.
  std::function<std::pair<Fn, Tensor<double>>(Rng&)> make;
};

// loss = sum(w * op(x)) with random w.
Fn weighted(Rng& rng, Shape out_shape, std::function<Tensor<double>(const Tensor<double>&)> op) {
  auto w = random_tensor<double>(rng, std::move(out_shape), -1.0, 1.0);
  return [w, op](const Tensor<double>& x) { return weighted_sum(op(x), w); };
}

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;
  auto unary_case = [&](std::string name, auto op, double lo, double hi) {
    cases.push_back({name, [op, lo, hi](Rng& rng) {
                       auto x = random_tensor<double>(rng, {3, 4}, lo, hi);
                       return std::pair{weighted(rng, {3, 4}, op), x};
                     }});
  };
  unary_case("silu", [](const Tensor<double>& x) { return silu(x); }, -3, 3);
  unary_case("softplus", [](const Tensor<double>& x) { return softplus(x); }, -3, 3);
  unary_case("exp", [](const Tensor<double>& x) { return exp(x); }, -2, 2);
  unary_case("log", [](const Tensor<double>& x) { return log(x); }, 0.2, 3);
  unary_case("layer-norm", [](const Tensor<double>& x) { return layer_norm(x); }, -2, 2);
  unary_case("softmax-rows", [](const Tensor<double>& x) { return softmax_rows(x); }, -2, 2);
  unary_case("acos", [](const Tensor<double>& x) { return acos(x); }, -0.9, 0.9);

  cases.push_back({"matmul-left", [](Rng& rng) {
                     auto b = random_tensor<double>(rng, {4, 2});
                     auto x = random_tensor<double>(rng, {3, 4});
                     return std::pair{weighted(rng, {3, 2},
                                               [b](const Tensor<double>& a) { return matmul(a, b); }),
                                      x};
                   }});
  cases.push_back({"matmul-right", [](Rng& rng) {
                     auto a = random_tensor<double>(rng, {3, 4});
                     auto x = random_tensor<double>(rng, {4, 2});
                     return std::pair{weighted(rng, {3, 2},
                                               [a](const Tensor<double>& b) { return matmul(a, b); }),
                                      x};
                   }});
  cases.push_back({"add-broadcast", [](Rng& rng) {
                     auto a = random_tensor<double>(rng, {3, 4});
                     auto x = random_tensor<double>(rng, {4});
                     return std::pair{weighted(rng, {3, 4},
                                               [a](const Tensor<double>& b) { return add(a, b); }),
                                      x};
                   }});
  cases.push_back({"mul-broadcast-column", [](Rng& rng) {
                     auto a = random_tensor<double>(rng, {3, 4});
                     auto x = random_tensor<double>(rng, {3, 1});
                     return std::pair{weighted(rng, {3, 4},
                                               [a](const Tensor<double>& b) { return mul(a, b); }),
                                      x};
                   }});
  cases.push_back({"mul-full", [](Rng& rng) {
                     auto b = random_tensor<double>(rng, {3, 4});
                     auto x = random_tensor<double>(rng, {3, 4});
                     return std::pair{weighted(rng, {3, 4},
                                               [b](const Tensor<double>& a) { return mul(a, b); }),
                                      x};
                   }});
  cases.push_back({"mean-pool", [](Rng& rng) {
                     auto x = random_tensor<double>(rng, {5, 3});
                     return std::pair{
                         weighted(rng, {3}, [](const Tensor<double>& v) { return mean_pool(v); }), x};
                   }});
  cases.push_back({"max-pool", [](Rng& rng) {
                     auto x = random_tensor<double>(rng, {5, 3});
                     return std::pair{
                         weighted(rng, {3}, [](const Tensor<double>& v) { return max_pool(v); }), x};
                   }});
  cases.push_back({"conv1d-input", [](Rng& rng) {
                     auto k = random_tensor<double>(rng, {3, 4});
                     auto x = random_tensor<double>(rng, {6, 3});
                     return std::pair{weighted(rng, {6, 3},
                                               [k](const Tensor<double>& v) {
                                                 return conv1d_depthwise(v, k);
                                               }),
                                      x};
                   }});
  cases.push_back({"conv1d-kernel", [](Rng& rng) {
                     auto in = random_tensor<double>(rng, {6, 3});
                     auto x = random_tensor<double>(rng, {3, 4});
                     return std::pair{weighted(rng, {6, 3},
                                               [in](const Tensor<double>& k) {
                                                 return conv1d_depthwise(in, k);
                                               }),
                                      x};
                   }});
  cases.push_back({"concat", [](Rng& rng) {
                     auto other = random_tensor<double>(rng, {2, 2});
                     auto x = random_tensor<double>(rng, {2, 3});
                     return std::pair{weighted(rng, {2, 5},
                                               [other](const Tensor<double>& v) {
                                                 std::vector<Tensor<double>> parts{other, v};
                                                 return concat<double>(parts, 1);
                                               }),
                                      x};
                   }});
  cases.push_back({"slice", [](Rng& rng) {
                     auto x = random_tensor<double>(rng, {4, 5});
                     return std::pair{weighted(rng, {4, 2},
                                               [](const Tensor<double>& v) { return slice(v, 1, 1, 3); }),
                                      x};
                   }});
  cases.push_back({"reshape", [](Rng& rng) {
                     auto x = random_tensor<double>(rng, {4, 3});
                     return std::pair{weighted(rng, {2, 6},
                                               [](const Tensor<double>& v) {
                                                 return exp(reshape(v, Shape{2, 6}));
                                               }),
                                      x};
                   }});
  cases.push_back({"transpose", [](Rng& rng) {
                     auto x = random_tensor<double>(rng, {3, 2});
                     return std::pair{weighted(rng, {2, 3},
                                               [](const Tensor<double>& v) { return transpose(v); }),
                                      x};
                   }});
  // selective scan, one case per input slot
  for (int slot = 0; slot < 5; ++slot) {
    cases.push_back({"selective-scan-" + std::to_string(slot), [slot](Rng& rng) {
                       const std::size_t L = 5, D = 3, N = 2;
                       std::vector<Tensor<double>> in{
                           random_tensor<double>(rng, {L, D}),
                           random_tensor<double>(rng, {L, D}, 0.05, 0.8),
                           random_tensor<double>(rng, {D, N}, -2.0, -0.1),
                           random_tensor<double>(rng, {L, N}),
                           random_tensor<double>(rng, {L, N}),
                       };
                       auto x = in[slot];
                       auto f = weighted(rng, {L, D}, [in, slot](const Tensor<double>& v) {
                         auto args = in;
                         args[slot] = v;
                         return selective_scan(args[0], args[1], args[2], args[3], args[4]);
                       });
                       return std::pair{f, x};
                     }});
  }
  return cases;
}

}  // namespace

TEST_CASE("every primitive passes grad_check at 10 random points") {
  for (const auto& c : primitive_cases()) {
    CAPTURE(c.name);
    Rng rng(std::hash<std::string>{}(c.name) % 1000);
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
      auto [f, x] = c.make(rng);
      worst = std::max(worst, grad_check<double>(f, x, 1e-6));
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("selective scan: parallel mode agrees with sequential mode") {
  Rng rng(3);
  const std::size_t L = 300, D = 4, N = 3;
  auto u = random_tensor<float>(rng, {L, D});
  auto dt = random_tensor<float>(rng, {L, D}, 0.01, 0.5);
  auto A = random_tensor<float>(rng, {D, N}, -3, -0.1);
  auto B = random_tensor<float>(rng, {L, N});
  auto C = random_tensor<float>(rng, {L, N});
  auto seq = selective_scan(u, dt, A, B, C, ScanMode::sequential);
  auto par = selective_scan(u, dt, A, B, C, ScanMode::parallel, 16);
  CHECK(rmtest::rel_error(par.data(), seq.data()) <= 1e-5);
}

TEST_CASE("apply_primitive dispatches and validates arity") {
  std::vector<Tensor<double>> two{Tensor<double>({2}, {1, 2}), Tensor<double>({2}, {3, 4})};
  auto sum = apply_primitive<double>(Primitive::add, two);
  CHECK(sum[0] == 4);
  CHECK(sum[1] == 6);
  CHECK_THROWS_AS(apply_primitive<double>(Primitive::exp, two), ShapeError);
  PrimitiveArgs args;
  args.axis = 0;
  args.start = 1;
  args.end = 2;
  std::vector<Tensor<double>> one{two[0]};
  CHECK(apply_primitive<double>(Primitive::slice, one, args).item() == 2);
}

TEST_CASE("primitives are deterministic") {
  Rng rng(9);
  auto x = random_tensor<float>(rng, {16, 8});
  auto w = random_tensor<float>(rng, {8, 8});
  auto k = random_tensor<float>(rng, {8, 4});
  auto run = [&] { return softmax_rows(layer_norm(conv1d_depthwise(silu(matmul(x, w)), k))); };
  auto a = run();
  auto b = run();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("concat then slice at the seam recovers both operands") {
  Rng rng(4);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Shape sa{2, 3, 4};
    Shape sb = sa;
    sb[axis] = 5;
    auto a = random_tensor<float>(rng, sa);
    auto b = random_tensor<float>(rng, sb);
    std::vector<Tensor<float>> parts{a, b};
    auto joined = concat<float>(parts, axis);
    auto ra = slice(joined, axis, 0, sa[axis]);
    auto rb = slice(joined, axis, sa[axis], sa[axis] + 5);
    CHECK(ra.shape() == a.shape());
    CHECK(rb.shape() == b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(ra[i] == a[i]);
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(rb[i] == b[i]);
  }
}

TEST_CASE("causal depthwise convolution does not look ahead") {
  auto x = Tensor<double>({3, 1}, {1, 2, 3});
  auto k = Tensor<double>({1, 2}, {10, 1});  // y[t] = 10*x[t-1] + x[t]
  auto y = conv1d_depthwise(x, k);
  CHECK(y[0] == 1);
  CHECK(y[1] == 12);
  CHECK(y[2] == 23);
}

TEST_CASE("acos clamps at the singular ends") {
  auto x = Tensor<double>({2}, {1.0, -1.0}, true);
  auto y = acos(x);
  CHECK(y[0] == doctest::Approx(std::acos(1 - 1e-7)).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(std::acos(-1 + 1e-7)).epsilon(1e-12));
  backward(weighted_sum(y, Tensor<double>({2}, {1, 1})));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
}
