#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "robomamba/mamba.hpp"

namespace robomamba {

// Square image, row-major, channel-last: rgb[(y*W + x)*3 + c] in [0,1].
// depth is empty or [H*W] meters with 0 marking invalid pixels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;
  std::vector<float> depth;

  Image() = default;
  Image(std::size_t w, std::size_t h, bool with_depth = false)
      : width(w), height(h), rgb(w * h * 3, 0.0f), depth(with_depth ? w * h : 0, 0.0f) {}

  bool has_depth() const { return !depth.empty(); }
  float depth_at(std::size_t x, std::size_t y) const { return depth[y * width + x]; }
  void validate() const;
};

// RMIM: "RMIM", u32 version=1, u32 W, u32 H, u8 channels (3 = RGB, 4 = RGB+depth),
// then W*H*channels little-endian f32, row-major, channel-last.
void write_rmim(const std::filesystem::path& path, const Image& image);
Image read_rmim(const std::filesystem::path& path);
std::vector<unsigned char> encode_rmim(const Image& image);
Image decode_rmim(std::span<const unsigned char> bytes);

struct VisionConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t d_vis = 64;
  std::size_t projector_hidden = 0;  // 0 selects d_model
  // Pixels enter the encoder as (x - pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.5;
  // Init scale of the learned position embedding.
  double position_std = 0.3;

  std::size_t tokens() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  void validate() const;
};

// Non-overlapping p x p patches, row-major over the patch grid, each flattened
// as (y, x, channel): [N_vis, p*p*3].
template <typename T>
Tensor<T> extract_patches(const Image& image, std::size_t patch);

template <typename T>
class PatchEncoder {
 public:
  PatchEncoder() = default;
  PatchEncoder(const VisionConfig& config, Rng& rng);

  // f_v = normalized patches * weight + bias + position, [N_vis, d_vis].
  Tensor<T> encode(const Image& image) const;
  ParamList<T> parameters() const;
  static std::size_t parameter_count(const VisionConfig& config);

  Tensor<T> weight;    // [p*p*3, d_vis]
  Tensor<T> bias;      // [d_vis]
  Tensor<T> position;  // [N_vis, d_vis]

 private:
  VisionConfig config_;
};

// Per-token two-layer perceptron d_vis -> hidden -> d_model with silu.
template <typename T>
class Projector {
 public:
  Projector() = default;
  Projector(std::size_t d_vis, std::size_t hidden, std::size_t d_model, Rng& rng);

  Tensor<T> forward(const Tensor<T>& features) const;
  ParamList<T> parameters() const;
  static std::size_t parameter_count(std::size_t d_vis, std::size_t hidden, std::size_t d_model);

  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct MultimodalOutput {
  std::size_t visual_tokens = 0;
  Tensor<T> hidden;  // [N_vis + L_text, d_model], last layer after the final norm
  Tensor<T> logits;  // [L_text, V], rows for the text positions
};

// encode -> project -> concat(visual, text) -> LM.
template <typename T>
class VisionLanguageModel {
 public:
  VisionLanguageModel() = default;
  VisionLanguageModel(const VisionConfig& vision, const LMConfig& lm, Rng& rng);

  Tensor<T> visual_tokens(const Image& image) const;
  Tensor<T> sequence(const Image& image, std::span<const TokenId> text) const;
  MultimodalOutput<T> forward(const Image& image, std::span<const TokenId> text) const;
  // Greedy continuation of [visual, prompt]; returns only the new tokens.
  std::vector<TokenId> generate(const Image& image, std::span<const TokenId> prompt,
                                std::size_t max_new, std::optional<TokenId> eos) const;

  ParamList<T> parameters() const;
  const VisionConfig& vision_config() const { return vision_; }

  PatchEncoder<T> encoder;
  Projector<T> projector;
  LanguageModel<T> lm;
  // Called with "encode", "project", "concat", "lm" as each stage runs.
  std::function<void(std::string_view)> observer;

 private:
  void notify(std::string_view stage) const {
    if (observer) observer(stage);
  }
  VisionConfig vision_;
};

}  // namespace robomamba
