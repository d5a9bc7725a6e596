#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "robomamba/policy.hpp"
#include "robomamba/tokenizer.hpp"
#include "robomamba/vision.hpp"

namespace robomamba {

// warmup is the toy encoder warm start that precedes align.
enum class Stage { warmup, align, cotrain, manip };

Stage parse_stage(std::string_view s);
const char* to_string(Stage stage);

struct ModelConfig {
  VisionConfig vision;
  LMConfig lm;  // lm.vocab is overwritten by the tokenizer size
  PolicyConfig head;
  // Lets cotrain update the encoder as well.
  bool train_encoder_in_cotrain = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// Trainable groups of a stage, indexed by ParamGroup.
std::array<bool, 4> trainable_groups(Stage stage, const ModelConfig& config);

struct ParamReport {
  Stage stage = Stage::align;
  std::array<std::size_t, 4> total{};      // by ParamGroup
  std::array<std::size_t, 4> trainable{};
  std::size_t total_count = 0;
  std::size_t trainable_count = 0;
  double ratio = 0;
};

class RoboMambaModel {
 public:
  RoboMambaModel(ModelConfig config, Tokenizer tokenizer);

  // Sets requires_grad on every tensor from the stage table.
  void set_stage(Stage stage);
  Stage stage() const { return stage_; }

  ParamList<float> parameters() const;
  ParamReport param_report() const;

  // [BOS] + prompt tokens.
  std::vector<TokenId> prompt_tokens(std::string_view prompt) const;
  // Last-layer hidden states for (image, prompt).
  Tensor<float> hidden(const Image& image, std::string_view prompt) const;
  EndEffectorPose act(const Image& image, std::string_view prompt) const;
  std::string generate(const Image& image, std::string_view prompt, std::size_t max_new) const;

  const ModelConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }

  VisionLanguageModel<float> vlm;
  PolicyHead<float> head;

 private:
  ModelConfig config_;
  Tokenizer tokenizer_;
  Stage stage_ = Stage::align;
};

// Config plus vocabulary and active stage.
std::string config_to_json(const ModelConfig& config, const Tokenizer& tokenizer, Stage stage);

// RMCK: "RMCK", u32 version=1, u32 tensor_count, per tensor u32 name_len, name,
// u8 dtype (0 = f32), u8 rank, rank x u64 dims, f32 payload; then u64 length
// and the UTF-8 JSON config. Errors are CheckpointError.
std::vector<unsigned char> encode_checkpoint(const RoboMambaModel& model);
RoboMambaModel decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const RoboMambaModel& model, const std::filesystem::path& path);
RoboMambaModel load_checkpoint(const std::filesystem::path& path);

struct CheckpointTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

struct CheckpointContents {
  std::vector<CheckpointTensor> tensors;
  std::string config_json;
};

// Structural parse only, no model construction.
CheckpointContents parse_checkpoint(std::span<const unsigned char> bytes);

}  // namespace robomamba
