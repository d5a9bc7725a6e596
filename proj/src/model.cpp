#include "robomamba/model.hpp"

#include <json.hpp>

#include "robomamba/binio.hpp"

namespace robomamba {

using nlohmann::json;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

const char* scan_mode_name(ScanMode m) { return m == ScanMode::sequential ? "sequential" : "parallel"; }

ScanMode parse_scan_mode(const std::string& s) {
  if (s == "sequential") return ScanMode::sequential;
  if (s == "parallel") return ScanMode::parallel;
  throw DataError("unknown scan mode '" + s + "'");
}

ModelConfig config_from_json(const json& j, std::vector<std::string>& vocab, Stage& stage) {
  ModelConfig c;
  const auto& v = j.at("vision");
  c.vision.image_size = v.at("image_size");
  c.vision.patch = v.at("patch");
  c.vision.d_vis = v.at("d_vis");
  c.vision.projector_hidden = v.at("projector_hidden");
  c.vision.pixel_mean = v.at("pixel_mean");
  c.vision.pixel_std = v.at("pixel_std");
  c.vision.position_std = v.at("position_std");
  const auto& l = j.at("lm");
  c.lm.vocab = l.at("vocab");
  c.lm.n_layers = l.at("n_layers");
  auto& b = c.lm.block;
  b.d_model = l.at("d_model");
  b.d_state = l.at("d_state");
  b.expand = l.at("expand");
  b.conv_width = l.at("conv_width");
  b.dt_rank = l.at("dt_rank");
  b.dt_min = l.at("dt_min");
  b.dt_max = l.at("dt_max");
  b.scan_mode = parse_scan_mode(l.at("scan_mode"));
  b.scan_block = l.at("scan_block");
  const auto& h = j.at("head");
  c.head.variant = parse_head_variant(h.at("variant").get<std::string>());
  c.head.pooling = parse_pooling(h.at("pooling").get<std::string>());
  c.head.hidden = h.at("hidden");
  c.head.gripper = h.at("gripper");
  c.train_encoder_in_cotrain = j.at("train_encoder_in_cotrain");
  c.seed = j.at("seed");
  vocab = j.at("vocab").get<std::vector<std::string>>();
  stage = parse_stage(j.at("stage").get<std::string>());
  return c;
}

[[noreturn]] void truncated(const std::string& what) {
  throw CheckpointError(CheckpointErrorCode::truncated, "file ends inside " + what);
}

}  // namespace

Stage parse_stage(std::string_view s) {
  if (s == "warmup") return Stage::warmup;
  if (s == "align") return Stage::align;
  if (s == "cotrain") return Stage::cotrain;
  if (s == "manip") return Stage::manip;
  throw DataError("unknown stage '" + std::string(s) + "' (expected warmup, align, cotrain, manip)");
}

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::warmup: return "warmup";
    case Stage::align: return "align";
    case Stage::cotrain: return "cotrain";
    case Stage::manip: return "manip";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  vision.validate();
  lm.validate();
  if (head.hidden == 0) throw ShapeError("head hidden width must be positive");
}

std::array<bool, 4> trainable_groups(Stage stage, const ModelConfig& config) {
  // Indexed encoder, projector, lm, head.
  switch (stage) {
    case Stage::warmup: return {true, true, true, false};
    case Stage::align: return {false, true, false, false};
    case Stage::cotrain: return {config.train_encoder_in_cotrain, true, true, false};
    case Stage::manip: return {false, false, false, true};
  }
  return {};
}

RoboMambaModel::RoboMambaModel(ModelConfig config, Tokenizer tokenizer)
    : config_(std::move(config)), tokenizer_(std::move(tokenizer)) {
  config_.lm.vocab = tokenizer_.size();
  config_.validate();
  Rng rng(config_.seed);
  vlm = VisionLanguageModel<float>(config_.vision, config_.lm, rng);
  head = PolicyHead<float>(config_.head, config_.lm.block, rng);
  set_stage(Stage::align);
}

void RoboMambaModel::set_stage(Stage stage) {
  const auto groups = trainable_groups(stage, config_);
  for (const auto& p : parameters()) {
    p.tensor.set_requires_grad(groups[static_cast<std::size_t>(p.group)]);
    p.tensor.zero_grad();
  }
  stage_ = stage;
}

ParamList<float> RoboMambaModel::parameters() const {
  auto out = vlm.parameters();
  for (auto& p : head.parameters()) out.push_back(std::move(p));
  return out;
}

ParamReport RoboMambaModel::param_report() const {
  ParamReport r;
  r.stage = stage_;
  const auto groups = trainable_groups(stage_, config_);
  for (const auto& p : parameters()) {
    const auto g = static_cast<std::size_t>(p.group);
    r.total[g] += p.tensor.numel();
    if (groups[g]) r.trainable[g] += p.tensor.numel();
  }
  for (std::size_t g = 0; g < 4; ++g) {
    r.total_count += r.total[g];
    r.trainable_count += r.trainable[g];
  }
  r.ratio = r.total_count ? double(r.trainable_count) / double(r.total_count) : 0.0;
  return r;
}

std::vector<TokenId> RoboMambaModel::prompt_tokens(std::string_view prompt) const {
  std::vector<TokenId> ids{Tokenizer::kBos};
  for (auto t : tokenizer_.encode(prompt)) ids.push_back(t);
  return ids;
}

Tensor<float> RoboMambaModel::hidden(const Image& image, std::string_view prompt) const {
  const auto ids = prompt_tokens(prompt);
  return vlm.forward(image, ids).hidden;
}

EndEffectorPose RoboMambaModel::act(const Image& image, std::string_view prompt) const {
  NoGradGuard guard;
  const auto h = hidden(image, prompt);
  return pose_at(head.forward(h), 0);
}

std::string RoboMambaModel::generate(const Image& image, std::string_view prompt,
                                     std::size_t max_new) const {
  NoGradGuard guard;
  const auto ids = prompt_tokens(prompt);
  const auto out = vlm.generate(image, ids, max_new, Tokenizer::kEos);
  std::vector<TokenId> text;
  for (auto t : out) {
    if (t == Tokenizer::kEos) break;
    text.push_back(t);
  }
  return tokenizer_.decode(text);
}

std::string config_to_json(const ModelConfig& c, const Tokenizer& tokenizer, Stage stage) {
  const auto& b = c.lm.block;
  json j;
  j["vision"] = {{"image_size", c.vision.image_size},
                 {"patch", c.vision.patch},
                 {"d_vis", c.vision.d_vis},
                 {"projector_hidden", c.vision.projector_hidden},
                 {"pixel_mean", c.vision.pixel_mean},
                 {"pixel_std", c.vision.pixel_std},
                 {"position_std", c.vision.position_std}};
  j["lm"] = {{"vocab", c.lm.vocab},         {"n_layers", c.lm.n_layers},
             {"d_model", b.d_model},        {"d_state", b.d_state},
             {"expand", b.expand},          {"conv_width", b.conv_width},
             {"dt_rank", b.dt_rank},        {"dt_min", b.dt_min},
             {"dt_max", b.dt_max},          {"scan_mode", scan_mode_name(b.scan_mode)},
             {"scan_block", b.scan_block}};
  j["head"] = {{"variant", to_string(c.head.variant)},
               {"pooling", to_string(c.head.pooling)},
               {"hidden", c.head.hidden},
               {"gripper", c.head.gripper}};
  j["train_encoder_in_cotrain"] = c.train_encoder_in_cotrain;
  j["seed"] = c.seed;
  j["stage"] = to_string(stage);
  j["vocab"] = tokenizer.tokens();
  return j.dump();
}

std::vector<unsigned char> encode_checkpoint(const RoboMambaModel& model) {
  const auto params = model.parameters();
  binio::Writer w;
  w.raw("RMCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u64(d);
    for (float v : p.tensor.data()) w.f32(v);
  }
  const auto cfg = config_to_json(model.config(), model.tokenizer(), model.stage());
  w.u64(cfg.size());
  w.raw(cfg);
  return w.take();
}

CheckpointContents parse_checkpoint(std::span<const unsigned char> bytes) {
  binio::Reader r(bytes);
  std::string magic;
  if (!r.raw(4, magic)) truncated("magic");
  if (magic != "RMCK") throw CheckpointError(CheckpointErrorCode::bad_magic, "expected RMCK");
  std::uint32_t version = 0, count = 0;
  if (!r.u32(version)) truncated("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorCode::bad_version,
                          "version " + std::to_string(version) + " is not supported");
  }
  if (!r.u32(count)) truncated("tensor count");
  CheckpointContents out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    std::uint32_t len = 0;
    std::uint8_t dtype = 0, rank = 0;
    if (!r.u32(len) || !r.raw(len, t.name)) truncated("tensor name");
    if (!r.u8(dtype)) truncated("dtype of " + t.name);
    if (dtype != kDtypeF32) {
      throw CheckpointError(CheckpointErrorCode::bad_dtype,
                            t.name + " has dtype " + std::to_string(dtype));
    }
    if (!r.u8(rank)) truncated("rank of " + t.name);
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      std::uint64_t d = 0;
      if (!r.u64(d)) truncated("dims of " + t.name);
      t.dims.push_back(d);
      n *= d;
    }
    if (n > r.remaining() / 4) truncated("payload of " + t.name);
    t.values.resize(n);
    for (auto& v : t.values) r.f32(v);
    out.tensors.push_back(std::move(t));
  }
  std::uint64_t len = 0;
  if (!r.u64(len)) truncated("config length");
  if (len > r.remaining()) truncated("config");
  r.raw(len, out.config_json);
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorCode::mismatch,
                          std::to_string(r.remaining()) + " trailing bytes after the config");
  }
  return out;
}

RoboMambaModel decode_checkpoint(std::span<const unsigned char> bytes) {
  auto contents = parse_checkpoint(bytes);
  ModelConfig config;
  std::vector<std::string> vocab;
  Stage stage = Stage::align;
  try {
    config = config_from_json(json::parse(contents.config_json), vocab, stage);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::bad_config, e.what());
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointErrorCode::bad_config, e.what());
  }
  if (vocab.size() != config.lm.vocab) {
    throw CheckpointError(CheckpointErrorCode::bad_config, "vocabulary size disagrees with lm.vocab");
  }
  RoboMambaModel model(config, Tokenizer(std::move(vocab)));
  const auto params = model.parameters();
  if (params.size() != contents.tensors.size()) {
    throw CheckpointError(CheckpointErrorCode::mismatch,
                          "file has " + std::to_string(contents.tensors.size()) +
                              " tensors, config implies " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& t = contents.tensors[i];
    const auto& shape = p.tensor.shape();
    if (t.name != p.name || t.dims.size() != shape.size() ||
        !std::equal(shape.begin(), shape.end(), t.dims.begin())) {
      throw CheckpointError(CheckpointErrorCode::mismatch,
                            "tensor " + std::to_string(i) + " '" + t.name + "' does not match '" +
                                p.name + "' " + shape_string(shape));
    }
    std::copy(t.values.begin(), t.values.end(), p.tensor.mutable_data().begin());
  }
  model.set_stage(stage);
  return model;
}

void save_checkpoint(const RoboMambaModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  binio::write_file_atomic(path, bytes);
}

RoboMambaModel load_checkpoint(const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  try {
    bytes = binio::read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(CheckpointErrorCode::io, e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace robomamba
