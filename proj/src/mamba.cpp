#include "robomamba/mamba.hpp"

#include <cmath>

#include "robomamba/ssm.hpp"

namespace robomamba {

void MambaConfig::validate() const {
  if (d_model == 0 || d_state == 0 || expand == 0) {
    throw ShapeError("mamba config: d_model, d_state and expand must be positive");
  }
  if (conv_width == 0) throw ShapeError("mamba config: conv_width must be at least 1");
  if (!(dt_min > 0.0) || !(dt_max >= dt_min)) {
    throw ShapeError("mamba config: need 0 < dt_min <= dt_max");
  }
  if (scan_block == 0) throw ShapeError("mamba config: scan_block must be positive");
}

void LMConfig::validate() const {
  if (vocab == 0) throw ShapeError("lm config: vocab must be positive");
  block.validate();
}

template <typename T>
MambaBlock<T>::MambaBlock(const MambaConfig& config, Rng& rng, std::string prefix,
                          ParamGroup group)
    : config_(config), prefix_(std::move(prefix)), group_(group) {
  config_.validate();
  const auto d = config_.d_model;
  const auto di = config_.d_inner();
  const auto n = config_.d_state;
  const auto r = config_.rank();
  const auto k = config_.conv_width;

  norm_gain = nn::filled_param<T>(Shape{d}, T(1));
  norm_bias = nn::filled_param<T>(Shape{d}, T(0));
  in_proj = nn::uniform_param<T>(rng, Shape{d, 2 * di}, 1.0 / std::sqrt(double(d)));
  conv_weight = nn::uniform_param<T>(rng, Shape{di, k}, 1.0 / std::sqrt(double(k)));
  conv_bias = nn::filled_param<T>(Shape{di}, T(0));
  x_proj = nn::uniform_param<T>(rng, Shape{di, r + 2 * n}, 1.0 / std::sqrt(double(di)));
  dt_proj = nn::uniform_param<T>(rng, Shape{r, di}, 1.0 / std::sqrt(double(r)));

  // softplus(dt_bias) log-uniform in [dt_min, dt_max].
  std::vector<T> bias(di);
  const double lo = std::log(config_.dt_min);
  const double hi = std::log(config_.dt_max);
  for (auto& b : bias) {
    const double dt = std::exp(rng.uniform(lo, hi));
    b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  dt_bias = Tensor<T>(Shape{di}, std::move(bias), true);

  std::vector<T> alog(di * n);
  for (std::size_t c = 0; c < di; ++c) {
    for (std::size_t s = 0; s < n; ++s) alog[c * n + s] = static_cast<T>(std::log(double(s + 1)));
  }
  A_log = Tensor<T>(Shape{di, n}, std::move(alog), true);
  D_skip = nn::filled_param<T>(Shape{di}, T(1));
  out_proj = nn::uniform_param<T>(rng, Shape{di, d}, 1.0 / std::sqrt(double(di)));
}

template <typename T>
Tensor<T> MambaBlock<T>::normed(const Tensor<T>& x) const {
  return add(mul(layer_norm(x), norm_gain), norm_bias);
}

template <typename T>
Tensor<T> MambaBlock<T>::A() const {
  return nn::scale(exp(A_log), T(-1));
}

template <typename T>
Selection<T> MambaBlock<T>::select_params(const Tensor<T>& u) const {
  const auto r = config_.rank();
  const auto n = config_.d_state;
  auto sel = matmul(u, x_proj);
  auto dt_low = slice(sel, 1, 0, r);
  Selection<T> out;
  out.B = slice(sel, 1, r, r + n);
  out.C = slice(sel, 1, r + n, r + 2 * n);
  out.delta = softplus(add(matmul(dt_low, dt_proj), dt_bias));
  return out;
}

template <typename T>
Tensor<T> MambaBlock<T>::gated_output(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& u,
                                      const Tensor<T>& z) const {
  auto skip = add(y, mul(u, D_skip));
  auto gated = mul(skip, silu(z));
  return add(x, matmul(gated, out_proj));
}

template <typename T>
Tensor<T> MambaBlock<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 2 || x.dim(1) != config_.d_model || x.dim(0) == 0) {
    throw ShapeError("mamba block: expected [L>=1, " + std::to_string(config_.d_model) + "], got " +
                     shape_string(x.shape()));
  }
  const auto di = config_.d_inner();
  auto xz = matmul(normed(x), in_proj);
  auto xa = slice(xz, 1, 0, di);
  auto z = slice(xz, 1, di, 2 * di);
  auto u = silu(add(conv1d_depthwise(xa, conv_weight), conv_bias));
  auto sel = select_params(u);
  auto y = selective_scan(u, sel.delta, A(), sel.B, sel.C, config_.scan_mode, config_.scan_block);
  return gated_output(x, y, u, z);
}

template <typename T>
BlockState<T> MambaBlock<T>::initial_state() const {
  const auto di = config_.d_inner();
  return BlockState<T>{std::vector<T>((config_.conv_width - 1) * di, T(0)),
                       std::vector<T>(di * config_.d_state, T(0))};
}

template <typename T>
Tensor<T> MambaBlock<T>::step(const Tensor<T>& x, BlockState<T>& state) const {
  if (x.shape() != Shape{1, config_.d_model}) {
    throw ShapeError("mamba step: expected [1, " + std::to_string(config_.d_model) + "], got " +
                     shape_string(x.shape()));
  }
  const auto di = config_.d_inner();
  const auto k = config_.conv_width;
  const auto n = config_.d_state;
  auto xz = matmul(normed(x), in_proj);
  auto xa = slice(xz, 1, 0, di);
  auto z = slice(xz, 1, di, 2 * di);

  std::vector<T> window(state.window);
  window.insert(window.end(), xa.data().begin(), xa.data().end());
  auto conv = conv1d_depthwise(Tensor<T>(Shape{k, di}, window), conv_weight);
  auto u = silu(add(slice(conv, 0, k - 1, k), conv_bias));
  state.window.assign(window.begin() + static_cast<std::ptrdiff_t>(di), window.end());

  auto sel = select_params(u);
  const auto a_tensor = A();
  const auto a = a_tensor.data();
  const auto uv = u.data();
  const auto dv = sel.delta.data();
  const auto bv = sel.B.data();
  const auto cv = sel.C.data();
  std::vector<T> y(di);
  // Same expression order as the sequential selective scan.
  for (std::size_t d = 0; d < di; ++d) {
    const T dt = dv[d];
    const T xin = uv[d];
    T acc = T(0);
    for (std::size_t s = 0; s < n; ++s) {
      const T zz = dt * a[d * n + s];
      T& hv = state.h[d * n + s];
      hv = std::exp(zz) * hv + ssm::zoh_gain(zz) * dt * bv[s] * xin;
      acc += cv[s] * hv;
    }
    y[d] = acc;
  }
  return gated_output(x, Tensor<T>(Shape{1, di}, std::move(y)), u, z);
}

template <typename T>
ParamList<T> MambaBlock<T>::parameters() const {
  const auto p = [&](const char* name, const Tensor<T>& t) {
    return NamedParam<T>{prefix_ + "." + name, group_, t};
  };
  return {p("norm_gain", norm_gain), p("norm_bias", norm_bias), p("in_proj", in_proj),
          p("conv_weight", conv_weight), p("conv_bias", conv_bias), p("x_proj", x_proj),
          p("dt_proj", dt_proj), p("dt_bias", dt_bias), p("A_log", A_log),
          p("D_skip", D_skip), p("out_proj", out_proj)};
}

template <typename T>
std::size_t MambaBlock<T>::parameter_count(const MambaConfig& c) {
  const auto d = c.d_model, di = c.d_inner(), n = c.d_state, r = c.rank(), k = c.conv_width;
  return 2 * d + d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d;
}

template <typename T>
std::size_t MambaBlock<T>::parameter_count() const {
  return parameter_count(config_);
}

template <typename T>
LanguageModel<T>::LanguageModel(const LMConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const auto d = config_.block.d_model;
  embedding = nn::normal_param<T>(rng, Shape{config_.vocab, d}, 1.0);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    blocks.emplace_back(config_.block, rng, "lm.blocks." + std::to_string(i), ParamGroup::lm);
  }
  final_gain = nn::filled_param<T>(Shape{d}, T(1));
  final_bias = nn::filled_param<T>(Shape{d}, T(0));
  head = nn::uniform_param<T>(rng, Shape{d, config_.vocab}, 1.0 / std::sqrt(double(d)));
}

template <typename T>
Tensor<T> LanguageModel<T>::embed(std::span<const TokenId> tokens) const {
  for (const TokenId id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(config_.vocab));
    }
  }
  return matmul(nn::one_hot<T>(tokens, config_.vocab), embedding);
}

template <typename T>
Tensor<T> LanguageModel<T>::final_norm(const Tensor<T>& x) const {
  return add(mul(layer_norm(x), final_gain), final_bias);
}

template <typename T>
Tensor<T> LanguageModel<T>::hidden(const Tensor<T>& embeddings) const {
  Tensor<T> x = embeddings;
  for (const auto& block : blocks) x = block.forward(x);
  return final_norm(x);
}

template <typename T>
Tensor<T> LanguageModel<T>::logits_from_hidden(const Tensor<T>& h) const {
  return matmul(h, head);
}

template <typename T>
Tensor<T> LanguageModel<T>::forward(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw ShapeError("lm forward: empty token sequence");
  return logits_from_hidden(hidden(embed(tokens)));
}

template <typename T>
typename LanguageModel<T>::State LanguageModel<T>::initial_state() const {
  State s;
  for (const auto& block : blocks) s.blocks.push_back(block.initial_state());
  return s;
}

template <typename T>
Tensor<T> LanguageModel<T>::step(const Tensor<T>& e, State& state) const {
  Tensor<T> x = e;
  for (std::size_t i = 0; i < blocks.size(); ++i) x = blocks[i].step(x, state.blocks[i]);
  return logits_from_hidden(final_norm(x));
}

namespace {

template <typename T>
TokenId argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

}  // namespace

template <typename T>
std::vector<TokenId> LanguageModel<T>::generate_from_embeddings(const Tensor<T>& prefix,
                                                                std::size_t max_new,
                                                                std::optional<TokenId> eos) const {
  const auto d = config_.block.d_model;
  if (prefix.rank() != 2 || prefix.dim(1) != d || prefix.dim(0) == 0) {
    throw ShapeError("generate: prefix embeddings must be [L>=1, " + std::to_string(d) + "]");
  }
  std::vector<TokenId> out;
  if (max_new == 0) return out;
  NoGradGuard no_grad;
  auto state = initial_state();
  Tensor<T> logits;
  const auto pv = prefix.data();
  for (std::size_t t = 0; t < prefix.dim(0); ++t) {
    std::vector<T> row(pv.begin() + static_cast<std::ptrdiff_t>(t * d),
                       pv.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
    logits = step(Tensor<T>(Shape{1, d}, std::move(row)), state);
  }
  while (out.size() < max_new) {
    const TokenId next = argmax(logits.data());
    out.push_back(next);
    if (eos && next == *eos) break;
    if (out.size() == max_new) break;
    const TokenId ids[1] = {next};
    logits = step(embed(ids), state);
  }
  return out;
}

template <typename T>
std::vector<TokenId> LanguageModel<T>::generate_greedy(std::span<const TokenId> prefix,
                                                       std::size_t max_new,
                                                       std::optional<TokenId> eos) const {
  if (prefix.empty()) throw ShapeError("generate: prefix must be non-empty");
  std::vector<TokenId> out(prefix.begin(), prefix.end());
  if (max_new == 0) return out;
  Tensor<T> e;
  {
    NoGradGuard no_grad;
    e = embed(prefix);
  }
  const auto gen = generate_from_embeddings(e, max_new, eos);
  out.insert(out.end(), gen.begin(), gen.end());
  return out;
}

template <typename T>
ParamList<T> LanguageModel<T>::parameters() const {
  ParamList<T> out{{"lm.embedding", ParamGroup::lm, embedding}};
  for (const auto& block : blocks) {
    auto p = block.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  out.push_back({"lm.final_gain", ParamGroup::lm, final_gain});
  out.push_back({"lm.final_bias", ParamGroup::lm, final_bias});
  out.push_back({"lm.head", ParamGroup::lm, head});
  return out;
}

template <typename T>
std::size_t LanguageModel<T>::parameter_count(const LMConfig& c) {
  const auto d = c.block.d_model;
  return c.vocab * d + c.n_layers * MambaBlock<T>::parameter_count(c.block) + 2 * d + d * c.vocab;
}

template <typename T>
std::size_t LanguageModel<T>::parameter_count() const {
  return parameter_count(config_);
}

template class MambaBlock<float>;
template class MambaBlock<double>;
template class LanguageModel<float>;
template class LanguageModel<double>;

}  // namespace robomamba
