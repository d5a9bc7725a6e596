#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "robomamba/data.hpp"
#include "robomamba/model.hpp"
#include "robomamba/optim.hpp"
#include "robomamba/simworld.hpp"

namespace robomamba {

struct StepRecord {
  std::size_t step = 0;  // 1-based optimizer step
  Stage stage = Stage::align;
  double loss = 0;
  double lr = 0;
  double wall_ms = 0;
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0 = run whole epochs, otherwise stop here (cycling epochs)
  std::size_t batch = 8;
  std::size_t accumulate = 1;  // micro-batches per optimizer step
  AdamWConfig optim;
  std::uint64_t seed = 0;  // data order
  bool shuffle = true;
  // manip: refit the head input affine on the cached features before training.
  bool fit_head_normalization = true;
  std::filesystem::path metrics_csv;  // empty: no file
  std::filesystem::path checkpoint;   // empty: no file
  std::function<void(const StepRecord&)> on_step;
};

// Stored stage defaults: lr 2e-5 for align and cotrain (1 and 2 epochs), lr 1e-5
// with weight decay 0.1 for manip (5 epochs), lr 1e-3 for the warm start.
TrainOptions stage_defaults(Stage stage);

struct StageResult {
  std::vector<StepRecord> steps;
};

// Sets the stage on the model, trains, writes the metrics CSV
// (step,stage,loss,lr,wall_ms) and the final checkpoint when paths are given.
// Text stages need a TextDataset and manip a PoseDataset.
StageResult run_stage(RoboMambaModel& model, Stage stage, const Dataset& data,
                      const TrainOptions& options);

// Next-token cross-entropy on the answer and EOS only.
Tensor<float> text_loss(const RoboMambaModel& model, const TextSample& sample);

struct PoseLosses {
  double position = 0;   // mean L1 over uv
  double direction = 0;  // mean geodesic angle, rad
};

PoseLosses pose_losses(const RoboMambaModel& model, const PoseDataset& data);

sim::Policy model_policy(const RoboMambaModel& model);

}  // namespace robomamba
