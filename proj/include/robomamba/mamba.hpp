#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robomamba/nn.hpp"

namespace robomamba {

struct MambaConfig {
  std::size_t d_model = 128;
  std::size_t d_state = 8;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 0;  // 0 selects max(1, d_model / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  ScanMode scan_mode = ScanMode::sequential;
  std::size_t scan_block = 64;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t rank() const { return dt_rank ? dt_rank : std::max<std::size_t>(1, d_model / 16); }
  void validate() const;
};

template <typename T>
struct Selection {
  Tensor<T> B;      // [L, N]
  Tensor<T> C;      // [L, N]
  Tensor<T> delta;  // [L, d_inner], strictly positive
};

// Recurrent state carried between single-token steps.
template <typename T>
struct BlockState {
  std::vector<T> window;  // last conv_width-1 conv inputs, [K-1, d_inner], oldest first
  std::vector<T> h;       // [d_inner, N]
};

// Pre-norm residual Mamba block:
//   x + out_proj((scan(u) + Dskip*u) * silu(z)),  u = silu(conv(xa) + conv_bias),
//   [xa | z] = in_proj(layer_norm(x)).
template <typename T>
class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(const MambaConfig& config, Rng& rng, std::string prefix, ParamGroup group);

  Tensor<T> forward(const Tensor<T>& x) const;
  Selection<T> select_params(const Tensor<T>& u) const;

  BlockState<T> initial_state() const;
  // One position [1, d_model] -> [1, d_model]; equals the matching row of forward().
  Tensor<T> step(const Tensor<T>& x, BlockState<T>& state) const;

  ParamList<T> parameters() const;
  const MambaConfig& config() const { return config_; }
  std::size_t parameter_count() const;
  static std::size_t parameter_count(const MambaConfig& config);

  Tensor<T> norm_gain, norm_bias;
  Tensor<T> in_proj;     // [d, 2*di]
  Tensor<T> conv_weight; // [di, K]
  Tensor<T> conv_bias;   // [di]
  Tensor<T> x_proj;      // [di, R + 2N]
  Tensor<T> dt_proj;     // [R, di]
  Tensor<T> dt_bias;     // [di]
  Tensor<T> A_log;       // [di, N], A = -exp(A_log)
  Tensor<T> D_skip;      // [di]
  Tensor<T> out_proj;    // [di, d]

 private:
  Tensor<T> normed(const Tensor<T>& x) const;
  Tensor<T> A() const;
  Tensor<T> gated_output(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& u,
                         const Tensor<T>& z) const;

  MambaConfig config_;
  std::string prefix_;
  ParamGroup group_ = ParamGroup::lm;
};

struct LMConfig {
  std::size_t vocab = 64;
  std::size_t n_layers = 4;
  MambaConfig block{};
  void validate() const;
};

template <typename T>
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const LMConfig& config, Rng& rng);

  Tensor<T> embed(std::span<const TokenId> tokens) const;
  // Blocks and final norm over an embedded sequence [L, d] -> [L, d].
  Tensor<T> hidden(const Tensor<T>& embeddings) const;
  Tensor<T> logits_from_hidden(const Tensor<T>& hidden) const;
  Tensor<T> forward(std::span<const TokenId> tokens) const;

  struct State {
    std::vector<BlockState<T>> blocks;
  };
  State initial_state() const;
  // Consumes one embedded position [1, d], returns logits [1, V].
  Tensor<T> step(const Tensor<T>& embedding, State& state) const;

  // Feeds the prefix embeddings, then appends argmax tokens until max_new or eos.
  std::vector<TokenId> generate_from_embeddings(const Tensor<T>& prefix, std::size_t max_new,
                                                std::optional<TokenId> eos) const;
  // Returns prefix followed by the generated tokens.
  std::vector<TokenId> generate_greedy(std::span<const TokenId> prefix, std::size_t max_new,
                                       std::optional<TokenId> eos) const;

  ParamList<T> parameters() const;
  std::size_t parameter_count() const;
  static std::size_t parameter_count(const LMConfig& config);
  const LMConfig& config() const { return config_; }

  Tensor<T> embedding;  // [V, d]
  std::vector<MambaBlock<T>> blocks;
  Tensor<T> final_gain, final_bias;
  Tensor<T> head;  // [d, V], untied

 private:
  Tensor<T> final_norm(const Tensor<T>& x) const;
  LMConfig config_;
};

}  // namespace robomamba
