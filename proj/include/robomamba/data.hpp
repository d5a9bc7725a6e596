#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "robomamba/geometry.hpp"
#include "robomamba/simworld.hpp"
#include "robomamba/tokenizer.hpp"
#include "robomamba/vision.hpp"

namespace robomamba {

// Stage 1.x sample.
struct TextSample {
  Image image;
  std::string prompt;
  std::string answer;
};

// Stage 2 sample: contact pixel and end-effector rotation.
struct PoseSample {
  Image image;
  std::string prompt;
  double u = 0.5, v = 0.5;
  Mat3 rotation = identity3();
  std::optional<bool> gripper;
};

using TextDataset = std::vector<TextSample>;
using PoseDataset = std::vector<PoseSample>;
using Dataset = std::variant<TextDataset, PoseDataset>;

// Every word the toy corpora and manipulation prompts can produce.
Tokenizer toy_tokenizer();

// Captions of simulator scenes: "a red drawer on a brown cabinet , left ."
std::string caption_for(const sim::Scene& scene);
TextDataset make_caption_dataset(std::size_t n, std::uint64_t seed);
// Captions mixed with planning, affordance yes/no and joint-type questions.
TextDataset make_cotrain_dataset(std::size_t n, std::uint64_t seed);

// Successful episodes only, pixel centre as the uv label.
PoseSample pose_sample(const sim::ManipEpisode& episode);
// Collects episodes from seed upward until n successes.
PoseDataset make_manip_dataset(std::size_t n, std::uint64_t seed);

// Manifests are JSON lines; image paths are relative to the manifest file.
//   text:    {image, prompt, answer}
//   pose:    {image, prompt, pos_uv: [u, v], rot: [9], gripper: 0|1|null}
//   episode: pose row + {success, dq, seed}
void write_text_manifest(const TextDataset& data, const std::filesystem::path& dir);
void write_episode_manifest(const std::vector<sim::ManipEpisode>& episodes,
                            const std::filesystem::path& dir);
// Detects the row schema. Episode rows with success = false are dropped.
Dataset read_manifest(const std::filesystem::path& manifest);

}  // namespace robomamba
