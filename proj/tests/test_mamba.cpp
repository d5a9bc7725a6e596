#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "robomamba/mamba.hpp"
#include "robomamba/optim.hpp"
#include "robomamba/tokenizer.hpp"
#include "test_util.hpp"

using namespace robomamba;
using rmtest::random_tensor;

namespace {

MambaConfig small_block(std::size_t d = 16) {
  MambaConfig c;
  c.d_model = d;
  c.d_state = 4;
  return c;
}

LMConfig small_lm(std::size_t vocab = 12, std::size_t layers = 2, std::size_t d = 16) {
  LMConfig c;
  c.vocab = vocab;
  c.n_layers = layers;
  c.block = small_block(d);
  return c;
}

template <typename T>
void set_zero(const Tensor<T>& t) {
  for (auto& v : t.mutable_data()) v = T(0);
}

template <typename T>
bool rows_equal(const Tensor<T>& a, const Tensor<T>& b, std::size_t rows) {
  const auto w = a.dim(1);
  for (std::size_t i = 0; i < rows * w; ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

template <typename T>
void train_next_token(const LanguageModel<T>& lm, const std::vector<TokenId>& seq, int steps,
                      double lr) {
  AdamW<T> opt(AdamWConfig{lr});
  const auto params = lm.parameters();
  std::vector<TokenId> in(seq.begin(), seq.end() - 1);
  std::vector<TokenId> target(seq.begin() + 1, seq.end());
  const std::vector<bool> mask(in.size(), true);
  for (int s = 0; s < steps; ++s) {
    opt.zero_grad(params);
    auto loss = cross_entropy_loss(lm.forward(in), target, mask);
    backward(loss);
    opt.step(params);
  }
}

}  // namespace

TEST_CASE("selection at zero input") {
  Rng rng(1);
  MambaBlock<float> block(small_block(), rng, "b", ParamGroup::lm);
  set_zero(block.x_proj);
  set_zero(block.dt_proj);
  for (auto& v : block.dt_bias.mutable_data()) v = 0.3f;
  const auto di = block.config().d_inner();
  auto sel = block.select_params(Tensor<float>::zeros(Shape{5, di}));
  const float expected = std::log1p(std::exp(0.3f));
  for (float v : sel.delta.data()) CHECK(v == doctest::Approx(expected).epsilon(1e-6));
  for (float v : sel.B.data()) CHECK(v == 0.0f);
  for (float v : sel.C.data()) CHECK(v == 0.0f);
}

TEST_CASE("selection is pointwise in time") {
  Rng rng(2);
  MambaBlock<double> block(small_block(), rng, "b", ParamGroup::lm);
  const auto di = block.config().d_inner();
  auto u = random_tensor<double>(rng, Shape{6, di});
  auto base = block.select_params(u);
  auto changed = u.detach();
  changed.mutable_data()[3 * di + 2] += 0.5;
  auto sel = block.select_params(changed);
  const auto N = block.config().d_state;
  for (std::size_t t = 0; t < 6; ++t) {
    bool same = true;
    for (std::size_t n = 0; n < N; ++n) {
      same = same && sel.B.at(t, n) == base.B.at(t, n) && sel.C.at(t, n) == base.C.at(t, n);
    }
    for (std::size_t d = 0; d < di; ++d) same = same && sel.delta.at(t, d) == base.delta.at(t, d);
    CHECK(same == (t != 3));
  }
}

TEST_CASE("default initialisation") {
  Rng rng(3);
  MambaConfig c;
  MambaBlock<float> block(c, rng, "b", ParamGroup::lm);
  CHECK(c.rank() == 8);
  CHECK(block.A_log.shape() == Shape{256, 8});
  for (std::size_t d = 0; d < 256; ++d) {
    for (std::size_t n = 0; n < 8; ++n) {
      CHECK(-std::exp(block.A_log.at(d, n)) == doctest::Approx(-double(n + 1)).epsilon(1e-6));
    }
  }
  for (float b : block.dt_bias.data()) {
    const double dt = std::log1p(std::exp(double(b)));
    CHECK(dt >= 0.001 * (1 - 1e-5));
    CHECK(dt <= 0.1 * (1 + 1e-5));
  }
  CHECK(block.parameters().size() == 11);
  std::size_t total = 0;
  for (const auto& p : block.parameters()) total += p.tensor.numel();
  CHECK(total == block.parameter_count());
}

TEST_CASE("block causality") {
  Rng rng(4);
  MambaBlock<float> block(small_block(), rng, "b", ParamGroup::lm);
  auto x = random_tensor<float>(rng, Shape{12, 16});
  auto y = block.forward(x);
  for (std::size_t t : {0u, 5u, 11u}) {
    auto x2 = x.detach();
    x2.mutable_data()[t * 16 + 3] += 1.0f;
    auto y2 = block.forward(x2);
    CHECK(rows_equal(y, y2, t));
    CHECK_FALSE(rows_equal(y, y2, t + 1));
  }
}

TEST_CASE("zero output projection leaves the residual") {
  Rng rng(5);
  MambaBlock<float> block(small_block(), rng, "b", ParamGroup::lm);
  set_zero(block.out_proj);
  auto x = random_tensor<float>(rng, Shape{7, 16});
  auto y = block.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("block forward is deterministic") {
  Rng rng(6);
  MambaBlock<float> block(small_block(), rng, "b", ParamGroup::lm);
  auto x = random_tensor<float>(rng, Shape{16, 16});
  auto a = block.forward(x);
  auto b = block.forward(x);
  CHECK(rows_equal(a, b, 16));
}

TEST_CASE("parallel scan mode agrees with sequential") {
  Rng rng(7);
  auto c = small_block();
  MambaBlock<float> seq(c, rng, "b", ParamGroup::lm);
  c.scan_mode = ScanMode::parallel;
  c.scan_block = 8;
  Rng rng2(7);
  MambaBlock<float> par(c, rng2, "b", ParamGroup::lm);
  auto x = random_tensor<float>(rng, Shape{70, 16});
  auto a = seq.forward(x);
  auto b = par.forward(x);
  CHECK(rmtest::rel_error<float>(b.data(), a.data()) <= 1e-5);
}

TEST_CASE("delta stays positive") {
  Rng rng(8);
  MambaBlock<float> block(small_block(), rng, "b", ParamGroup::lm);
  const auto di = block.config().d_inner();
  auto u = random_tensor<float>(rng, Shape{10000, di}, -5.0, 5.0);
  auto sel = block.select_params(u);
  std::size_t positive = 0;
  for (float v : sel.delta.data()) positive += v > 0.0f;
  CHECK(positive == sel.delta.numel());
}

TEST_CASE("lm prefix consistency and finiteness") {
  Rng rng(9);
  LanguageModel<float> lm(small_lm(), rng);
  std::vector<TokenId> ids{3, 4, 5, 6, 7, 8, 9, 10};
  auto full = lm.forward(ids);
  auto one = lm.forward(std::span<const TokenId>(ids).first(1));
  CHECK(full.shape() == Shape{8, 12});
  CHECK(rows_equal(full, one, 1));

  Rng rng2(10);
  LanguageModel<float> big(LMConfig{64, 4, MambaConfig{}}, rng2);
  std::vector<TokenId> longer(512);
  for (std::size_t i = 0; i < longer.size(); ++i) longer[i] = TokenId(rng2.index(64));
  NoGradGuard ng;
  auto logits = big.forward(longer);
  for (float v : logits.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("lm rejects out of range ids") {
  Rng rng(11);
  LanguageModel<float> lm(small_lm(), rng);
  std::vector<TokenId> bad{1, 12};
  CHECK_THROWS_AS(lm.forward(bad), DataError);
  std::vector<TokenId> neg{-1};
  CHECK_THROWS_AS(lm.forward(neg), DataError);
}

TEST_CASE("lm causality by perturbation") {
  Rng rng(12);
  LanguageModel<double> lm(small_lm(), rng);
  auto e = random_tensor<double>(rng, Shape{10, 16});
  auto base = lm.logits_from_hidden(lm.hidden(e));
  for (std::size_t t : {1u, 3u, 5u, 7u, 9u}) {
    auto e2 = e.detach();
    for (std::size_t j = 0; j < 16; ++j) e2.mutable_data()[t * 16 + j] += 0.25;
    auto out = lm.logits_from_hidden(lm.hidden(e2));
    CHECK(rows_equal(base, out, t));
  }
}

TEST_CASE("recurrent step reproduces the full forward") {
  Rng rng(13);
  LanguageModel<float> lm(small_lm(), rng);
  std::vector<TokenId> ids{3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
  auto full = lm.forward(ids);
  auto state = lm.initial_state();
  NoGradGuard ng;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const TokenId one[1] = {ids[t]};
    auto row = lm.step(lm.embed(one), state);
    for (std::size_t v = 0; v < 12; ++v) CHECK(row[v] == full.at(t, v));
  }
}

TEST_CASE("greedy generation") {
  Rng rng(14);
  LanguageModel<float> lm(small_lm(), rng);
  std::vector<TokenId> prefix{3, 4};
  CHECK(lm.generate_greedy(prefix, 0, std::nullopt) == prefix);
  auto a = lm.generate_greedy(prefix, 6, std::nullopt);
  auto b = lm.generate_greedy(prefix, 6, std::nullopt);
  CHECK(a == b);
  CHECK(a.size() == 8);
  // Each generated token is the argmax of the full forward over what came before.
  for (std::size_t i = 2; i < a.size(); ++i) {
    auto logits = lm.forward(std::span<const TokenId>(a).first(i));
    std::size_t best = 0;
    for (std::size_t v = 1; v < 12; ++v) {
      if (logits.at(i - 1, v) > logits.at(i - 1, best)) best = v;
    }
    CHECK(a[i] == TokenId(best));
  }
  CHECK_THROWS(lm.generate_greedy(std::vector<TokenId>{}, 3, std::nullopt));
}

TEST_CASE("generation stops at eos") {
  Rng rng(15);
  LanguageModel<float> lm(small_lm(), rng);
  std::vector<TokenId> prefix{5};
  auto free_run = lm.generate_greedy(prefix, 1, std::nullopt);
  const TokenId first = free_run.back();
  auto stopped = lm.generate_greedy(prefix, 10, first);
  CHECK(stopped.size() == 2);
  CHECK(stopped.back() == first);
}

TEST_CASE("overfit a -> b") {
  Tokenizer tok = Tokenizer::from_corpus(std::vector<std::string>{"a b"});
  auto ids = tok.encode("a b");
  REQUIRE(ids.size() == 2);
  Rng rng(16);
  LanguageModel<float> lm(small_lm(tok.size(), 2, 16), rng);
  train_next_token(lm, ids, 60, 1e-2);
  const TokenId a[1] = {ids[0]};
  auto logits = lm.forward(a);
  std::size_t best = 0;
  for (std::size_t v = 1; v < tok.size(); ++v) {
    if (logits.at(0, v) > logits.at(0, best)) best = v;
  }
  CHECK(tok.decode(std::vector<TokenId>{TokenId(best)}) == " b");
}

TEST_CASE("memorised continuation") {
  const std::string text = "open the drawer then pull the handle slowly .";
  Tokenizer tok = Tokenizer::from_corpus(std::vector<std::string>{text});
  auto ids = tok.encode(text);
  ids.push_back(Tokenizer::kEos);
  Rng rng(17);
  LanguageModel<float> lm(small_lm(tok.size(), 2, 32), rng);
  train_next_token(lm, ids, 150, 1e-2);
  auto out = lm.generate_greedy(std::span<const TokenId>(ids).first(2), 20, Tokenizer::kEos);
  CHECK(tok.decode(out) == text);
}

TEST_CASE("two-block gradient check") {
  Rng rng(18);
  // Order-one timescales and a stronger selection projection keep every
  // coordinate's gradient well above finite-difference roundoff.
  auto config = small_lm(7, 2, 8);
  config.block.dt_min = 0.3;
  config.block.dt_max = 1.0;
  LanguageModel<double> lm(config, rng);
  for (auto& block : lm.blocks) {
    for (auto& v : block.x_proj.mutable_data()) v *= 3.0;
  }
  std::vector<TokenId> ids{3, 5, 1, 6, 2};
  std::vector<TokenId> target{5, 1, 6, 2, 4};
  const std::vector<bool> mask(ids.size(), true);
  auto loss_with = [&](auto assign) {
    return [&, assign](const Tensor<double>& p) {
      LanguageModel<double> copy = lm;
      assign(copy, p);
      return cross_entropy_loss(copy.forward(ids), target, mask);
    };
  };
  struct Case {
    const char* name;
    Tensor<double> point;
    std::function<void(LanguageModel<double>&, const Tensor<double>&)> assign;
  };
  std::vector<Case> cases{
      {"embedding", lm.embedding, [](auto& m, const auto& p) { m.embedding = p; }},
      {"in_proj", lm.blocks[0].in_proj, [](auto& m, const auto& p) { m.blocks[0].in_proj = p; }},
      {"conv", lm.blocks[0].conv_weight,
       [](auto& m, const auto& p) { m.blocks[0].conv_weight = p; }},
      {"x_proj", lm.blocks[1].x_proj, [](auto& m, const auto& p) { m.blocks[1].x_proj = p; }},
      {"dt_bias", lm.blocks[1].dt_bias, [](auto& m, const auto& p) { m.blocks[1].dt_bias = p; }},
      {"A_log", lm.blocks[0].A_log, [](auto& m, const auto& p) { m.blocks[0].A_log = p; }},
      {"out_proj", lm.blocks[1].out_proj,
       [](auto& m, const auto& p) { m.blocks[1].out_proj = p; }},
      {"head", lm.head, [](auto& m, const auto& p) { m.head = p; }},
  };
  for (auto& c : cases) {
    const std::string name = c.name;
    CAPTURE(name);
    const double err = grad_check<double>(loss_with(c.assign), c.point, 1e-4);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("tokenizer roundtrip") {
  Tokenizer tok = Tokenizer::from_corpus(
      std::vector<std::string>{"open the drawer", "close the door.", "lift  the lid\n"});
  CHECK(tok.encode("").empty());
  CHECK(tok.decode(std::vector<TokenId>{}).empty());
  for (const char* s : {"open the drawer", "close the door.", "lift  the lid\n", " the door"}) {
    auto ids = tok.encode(s);
    for (auto id : ids) CHECK(id != Tokenizer::kUnk);
    CHECK(tok.decode(ids) == s);
  }
  auto ids = tok.encode("open the window");
  CHECK(ids.back() == Tokenizer::kUnk);
  CHECK(tok.decode(ids) == "open the" + std::string(Tokenizer::kReplacement));
  CHECK(tok.decode(std::vector<TokenId>{Tokenizer::kBos, Tokenizer::kEos}).empty());
  CHECK(tok.size() <= Tokenizer::kMaxVocab);
  CHECK_THROWS_AS(tok.encode("bad \xC3"), DataError);
  CHECK_THROWS_AS(tok.encode("bad \xFF"), DataError);
}

TEST_CASE("tokenizer pieces") {
  CHECK(Tokenizer::split("open the drawer") ==
        std::vector<std::string>{"open", " the", " drawer"});
  CHECK(Tokenizer::split("a,b  c") == std::vector<std::string>{"a", ",", "b", " ", " c"});
  CHECK(Tokenizer::split(" x\n") == std::vector<std::string>{" x", "\n"});
  CHECK(Tokenizer::split("\xC3\xA9t\xC3\xA9 ok") == std::vector<std::string>{"\xC3\xA9t\xC3\xA9", " ok"});
}

TEST_CASE("vocabulary file roundtrip") {
  Tokenizer tok({"<unk>", "<bos>", "<eos>", "a", " b", "\n", "\\", "\t\r"});
  const auto path = std::filesystem::temp_directory_path() / "rm_vocab_test.txt";
  tok.save(path);
  Tokenizer back = Tokenizer::load(path);
  CHECK(back.tokens() == tok.tokens());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Tokenizer::load(path), IoError);
  CHECK_THROWS_AS(Tokenizer({"a", "a"}), DataError);
}

TEST_CASE("adamw reference updates") {
  Tensor<double> p(Shape{1}, {0.0}, true);
  ParamList<double> params{{"p", ParamGroup::head, p}};
  AdamW<double> opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  p.mutable_grad()[0] = 1.0;
  opt.step(params);
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));

  Tensor<double> q(Shape{1}, {1.0}, true);
  ParamList<double> qs{{"q", ParamGroup::head, q}};
  AdamW<double> decay(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.1});
  q.mutable_grad()[0] = 0.0;
  decay.step(qs);
  CHECK(q[0] == doctest::Approx(0.99).epsilon(1e-12));

  Tensor<double> frozen(Shape{1}, {2.0}, false);
  frozen.mutable_grad()[0] = 5.0;
  ParamList<double> fs{{"f", ParamGroup::lm, frozen}};
  decay.step(fs);
  CHECK(frozen[0] == 2.0);

  Tensor<double> bad(Shape{1}, {1.0}, true);
  bad.mutable_grad()[0] = std::nan("");
  ParamList<double> bs{{"x", ParamGroup::projector, bad}};
  try {
    decay.step(bs);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("projector") != std::string::npos);
  }
  CHECK(bad[0] == 1.0);
}

TEST_CASE("cross entropy") {
  Tensor<double> uniform = Tensor<double>::zeros(Shape{3, 16}, true);
  std::vector<TokenId> targets{1, 2, 3};
  auto loss = cross_entropy_loss(uniform, targets, {true, true, true});
  CHECK(loss.item() == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  std::vector<double> sharp(16, 0.0);
  sharp[4] = 60.0;
  auto l2 = cross_entropy_loss(Tensor<double>(Shape{1, 16}, sharp), std::vector<TokenId>{4}, {true});
  CHECK(l2.item() < 1e-20);

  Rng rng(3);
  Tensor<double> logits(Shape{3, 4}, rmtest::random_values<double>(rng, 12), true);
  auto l3 = cross_entropy_loss(logits, std::vector<TokenId>{0, 1, 2}, {false, true, false});
  backward(l3);
  for (std::size_t v = 0; v < 4; ++v) {
    CHECK(logits.grad()[v] == 0.0);
    CHECK(logits.grad()[8 + v] == 0.0);
  }
  CHECK(logits.grad()[4 + 1] < 0.0);
  CHECK_THROWS_AS(cross_entropy_loss(logits, std::vector<TokenId>{0, 1, 2}, {false, false, false}),
                  DataError);
}
