#include "robomamba/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace robomamba {

namespace {

std::vector<float> rows_of(const std::vector<Tensor<float>>& pooled, std::span<const std::size_t> idx) {
  std::vector<float> out;
  for (auto i : idx) {
    const auto d = pooled[i].data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

Tensor<float> pose_targets_uv(const PoseDataset& data, std::span<const std::size_t> idx) {
  std::vector<float> v;
  for (auto i : idx) {
    v.push_back(float(data[i].u));
    v.push_back(float(data[i].v));
  }
  return Tensor<float>(Shape{idx.size(), 2}, std::move(v));
}

Tensor<float> pose_targets_rot(const PoseDataset& data, std::span<const std::size_t> idx) {
  std::vector<float> v;
  for (auto i : idx)
    for (double r : data[i].rotation) v.push_back(float(r));
  return Tensor<float>(Shape{idx.size(), 9}, std::move(v));
}

// softplus(z) - y z, averaged over the labelled rows.
Tensor<float> gripper_loss(const Tensor<float>& logits, const PoseDataset& data,
                           std::span<const std::size_t> idx) {
  std::vector<float> w(idx.size(), 0.0f), y(idx.size(), 0.0f);
  std::size_t labelled = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (!data[idx[r]].gripper) continue;
    w[r] = 1.0f;
    y[r] = *data[idx[r]].gripper ? 1.0f : 0.0f;
    ++labelled;
  }
  if (labelled == 0) return {};
  const Shape s{idx.size(), 1};
  const auto per_row = nn::sub(softplus(logits), mul(logits, Tensor<float>(s, y)));
  return nn::scale(nn::sum_all(mul(per_row, Tensor<float>(s, w))), 1.0f / float(labelled));
}

Tensor<float> pose_loss(const PoseOutput<float>& out, const PoseDataset& data,
                        std::span<const std::size_t> idx) {
  auto loss = add(position_loss(out.uv, pose_targets_uv(data, idx)),
                  direction_loss(out.rotation, pose_targets_rot(data, idx)));
  if (out.gripper.defined()) {
    const auto g = gripper_loss(out.gripper, data, idx);
    if (g.defined()) loss = add(loss, g);
  }
  return loss;
}

class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write metrics log " + path.string());
    out_ << "step,stage,loss,lr,wall_ms\n";
  }
  void row(const StepRecord& r) {
    if (!out_.is_open()) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.3f\n", r.step, to_string(r.stage), r.loss,
                  r.lr, r.wall_ms);
    out_ << buf;
    out_.flush();
    if (!out_) throw IoError("metrics log write failed");
  }

 private:
  std::ofstream out_;
};

std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!shuffle) return order;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

}  // namespace

TrainOptions stage_defaults(Stage stage) {
  TrainOptions o;
  switch (stage) {
    case Stage::warmup:
      o.optim.lr = 1e-3;
      o.epochs = 1;
      break;
    case Stage::align:
      o.optim.lr = 2e-5;
      o.epochs = 1;
      break;
    case Stage::cotrain:
      o.optim.lr = 2e-5;
      o.epochs = 2;
      break;
    case Stage::manip:
      o.optim.lr = 1e-5;
      o.optim.weight_decay = 0.1;
      o.epochs = 5;
      break;
  }
  return o;
}

Tensor<float> text_loss(const RoboMambaModel& model, const TextSample& sample) {
  auto ids = model.prompt_tokens(sample.prompt);
  const std::size_t prompt_len = ids.size();
  for (auto t : model.tokenizer().encode(sample.answer)) ids.push_back(t);
  ids.push_back(Tokenizer::kEos);
  const auto out = model.vlm.forward(sample.image, ids);
  // Row t predicts token t+1; only answer positions are supervised.
  std::vector<TokenId> targets(ids.size(), 0);
  std::vector<bool> mask(ids.size(), false);
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    targets[t] = ids[t + 1];
    mask[t] = t + 1 >= prompt_len;
  }
  return cross_entropy_loss(out.logits, targets, mask);
}

StageResult run_stage(RoboMambaModel& model, Stage stage, const Dataset& data,
                      const TrainOptions& options) {
  const bool text_stage = stage != Stage::manip;
  if (text_stage != std::holds_alternative<TextDataset>(data)) {
    throw DataError(std::string("stage ") + to_string(stage) + " needs " +
                    (text_stage ? "an {image, prompt, answer}" : "a {image, prompt, pos_uv, rot}") +
                    " dataset");
  }
  const std::size_t n = text_stage ? std::get<TextDataset>(data).size() : std::get<PoseDataset>(data).size();
  if (n == 0) throw DataError("empty dataset");
  if (options.batch == 0 || options.accumulate == 0) throw DataError("batch and accumulate must be positive");

  model.set_stage(stage);
  const auto params = model.parameters();
  AdamW<float> opt(options.optim);
  MetricsLog log(options.metrics_csv);
  Rng order_rng(options.seed);

  // The backbone is frozen in manip: its outputs are computed once.
  std::vector<Tensor<float>> cached;
  const bool pooled_cache = !text_stage && model.head.pools_first();
  if (!text_stage) {
    const auto& poses = std::get<PoseDataset>(data);
    NoGradGuard guard;
    cached.reserve(n);
    for (const auto& s : poses) {
      if (s.image.width != model.config().vision.image_size) {
        throw DataError("pose sample image is " + std::to_string(s.image.width) + " px, model expects " +
                        std::to_string(model.config().vision.image_size));
      }
      const auto h = model.hidden(s.image, s.prompt);
      cached.push_back(pooled_cache ? model.head.pool(h) : h);
    }
    if (options.fit_head_normalization) {
      std::vector<float> rows;
      for (const auto& t : cached) {
        const auto p = pooled_cache ? t : model.head.pool(t);
        rows.insert(rows.end(), p.data().begin(), p.data().end());
      }
      const auto d = model.config().lm.block.d_model;
      model.head.fit_input_normalization(Tensor<float>(Shape{n, d}, std::move(rows)));
    }
  }

  const std::size_t per_step = options.batch * options.accumulate;
  const std::size_t steps_per_epoch = (n + per_step - 1) / per_step;
  const std::size_t total = options.max_steps ? options.max_steps : options.epochs * steps_per_epoch;

  StageResult result;
  std::size_t step = 0;
  while (step < total) {
    const auto order = epoch_order(n, options.shuffle, order_rng);
    for (std::size_t begin = 0; begin < n && step < total; begin += per_step) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t end = std::min(n, begin + per_step);
      const double count = double(end - begin);
      double loss_sum = 0;
      opt.zero_grad(params);
      for (std::size_t mb = begin; mb < end; mb += options.batch) {
        const std::span<const std::size_t> idx(order.data() + mb, std::min(end, mb + options.batch) - mb);
        if (text_stage) {
          const auto& texts = std::get<TextDataset>(data);
          for (auto i : idx) {
            auto l = text_loss(model, texts[i]);
            loss_sum += double(l[0]);
            backward(nn::scale(l, float(1.0 / count)));
          }
        } else if (pooled_cache) {
          const auto& poses = std::get<PoseDataset>(data);
          const auto d = model.config().lm.block.d_model;
          const Tensor<float> x(Shape{idx.size(), d}, rows_of(cached, idx));
          auto l = pose_loss(model.head.forward_pooled(x), poses, idx);
          loss_sum += double(l[0]) * double(idx.size());
          backward(nn::scale(l, float(double(idx.size()) / count)));
        } else {
          const auto& poses = std::get<PoseDataset>(data);
          for (auto i : idx) {
            const std::size_t one[] = {i};
            auto l = pose_loss(model.head.forward(cached[i]), poses, one);
            loss_sum += double(l[0]);
            backward(nn::scale(l, float(1.0 / count)));
          }
        }
      }
      const double loss = loss_sum / count;
      if (!std::isfinite(loss)) {
        throw NumericError(std::string("non-finite loss at step ") + std::to_string(step + 1) +
                           " of stage " + to_string(stage));
      }
      opt.step(params);
      ++step;
      const auto t1 = std::chrono::steady_clock::now();
      StepRecord rec{step, stage, loss, options.optim.lr,
                     std::chrono::duration<double, std::milli>(t1 - t0).count()};
      log.row(rec);
      if (options.on_step) options.on_step(rec);
      result.steps.push_back(rec);
    }
  }
  opt.zero_grad(params);
  if (!options.checkpoint.empty()) save_checkpoint(model, options.checkpoint);
  return result;
}

PoseLosses pose_losses(const RoboMambaModel& model, const PoseDataset& data) {
  if (data.empty()) throw DataError("empty dataset");
  NoGradGuard guard;
  PoseLosses out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t one[] = {i};
    const auto pred = model.head.forward(model.hidden(data[i].image, data[i].prompt));
    out.position += double(position_loss(pred.uv, pose_targets_uv(data, one))[0]);
    out.direction += double(direction_loss(pred.rotation, pose_targets_rot(data, one))[0]);
  }
  out.position /= double(data.size());
  out.direction /= double(data.size());
  return out;
}

sim::Policy model_policy(const RoboMambaModel& model) {
  return [&model](const sim::Observation& obs) { return model.act(obs.image, obs.prompt); };
}

}  // namespace robomamba
