#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "robomamba/binio.hpp"
#include "robomamba/trainer.hpp"

using namespace robomamba;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.lm.n_layers = 2;
  c.lm.block.d_model = 32;
  c.lm.block.d_state = 4;
  c.vision.d_vis = 16;
  c.seed = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("robomamba_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::map<std::string, std::vector<float>> snapshot(const RoboMambaModel& m) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& p : m.parameters()) out[p.name] = {p.tensor.data().begin(), p.tensor.data().end()};
  return out;
}

std::set<ParamGroup> trainable_set(const RoboMambaModel& m) {
  std::set<ParamGroup> s;
  for (const auto& p : m.parameters())
    if (p.tensor.requires_grad()) s.insert(p.group);
  return s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Independent block count: norm, in_proj, conv, x_proj, dt_proj, A, D, out_proj.
std::size_t block_hand_count(std::size_t d, std::size_t n, std::size_t expand, std::size_t w, std::size_t r) {
  const std::size_t e = expand * d;
  return 2 * d + d * 2 * e + e * w + e + e * (r + 2 * n) + r * e + e + e * n + e + e * d;
}

}  // namespace

TEST_CASE("stage table") {
  RoboMambaModel m(small_config(), toy_tokenizer());
  m.set_stage(Stage::align);
  CHECK(trainable_set(m) == std::set<ParamGroup>{ParamGroup::projector});
  m.set_stage(Stage::manip);
  CHECK(trainable_set(m) == std::set<ParamGroup>{ParamGroup::head});
  m.set_stage(Stage::cotrain);
  CHECK(trainable_set(m) == std::set<ParamGroup>{ParamGroup::projector, ParamGroup::lm});
  m.set_stage(Stage::warmup);
  CHECK(trainable_set(m).count(ParamGroup::encoder) == 1);

  auto cfg = small_config();
  cfg.train_encoder_in_cotrain = true;
  RoboMambaModel flagged(cfg, toy_tokenizer());
  flagged.set_stage(Stage::cotrain);
  CHECK(trainable_set(flagged).count(ParamGroup::encoder) == 1);

  CHECK(parse_stage("manip") == Stage::manip);
  CHECK_THROWS_AS(parse_stage("finetune"), DataError);
}

TEST_CASE("every parameter has a unique name and one group") {
  RoboMambaModel m(ModelConfig{}, toy_tokenizer());
  std::set<std::string> names;
  for (const auto& p : m.parameters()) CHECK(names.insert(p.name).second);
}

TEST_CASE("param report matches a hand count") {
  const ModelConfig cfg;
  RoboMambaModel m(cfg, toy_tokenizer());
  const std::size_t V = toy_tokenizer().size(), d = 128, N = 8, K = 4, dv = 64, p = 8, T = 16, H = 8;
  const std::size_t encoder = p * p * 3 * dv + dv + T * dv;
  const std::size_t projector = dv * d + d + d * d + d;
  const std::size_t lm = V * d + K * block_hand_count(d, N, 2, 4, d / 16) + 2 * d + d * V;
  const std::size_t head = 2 * d + (d * H + H + H * 2 + 2) + (d * H + H + H * 6 + 6);
  const std::size_t total = encoder + projector + lm + head;

  m.set_stage(Stage::manip);
  const auto r = m.param_report();
  CHECK(r.total[std::size_t(ParamGroup::encoder)] == encoder);
  CHECK(r.total[std::size_t(ParamGroup::projector)] == projector);
  CHECK(r.total[std::size_t(ParamGroup::lm)] == lm);
  CHECK(r.trainable_count == head);
  CHECK(r.total_count == total);
  CHECK(r.ratio == doctest::Approx(double(head) / double(total)).epsilon(1e-15));
  CHECK(r.ratio <= 0.005);

  m.set_stage(Stage::align);
  CHECK(m.param_report().ratio == doctest::Approx(double(projector) / double(total)).epsilon(1e-15));

  std::size_t counts[3];
  int i = 0;
  for (auto v : {HeadVariant::mlp1, HeadVariant::mlp2, HeadVariant::ssm_mlp}) {
    ModelConfig c;
    c.head.variant = v;
    RoboMambaModel mv(c, toy_tokenizer());
    mv.set_stage(Stage::manip);
    counts[i++] = mv.param_report().trainable_count;
  }
  CHECK(counts[0] < counts[1]);
  CHECK(counts[1] < counts[2]);
}

TEST_CASE("checkpoint roundtrip and errors") {
  auto cfg = small_config();
  cfg.head.gripper = true;
  cfg.head.variant = HeadVariant::ssm_mlp;
  RoboMambaModel m(cfg, toy_tokenizer());
  m.set_stage(Stage::cotrain);
  const auto bytes = encode_checkpoint(m);
  const auto contents = parse_checkpoint(bytes);
  CHECK(contents.tensors.size() == m.parameters().size());

  const auto back = decode_checkpoint(bytes);
  CHECK(snapshot(back) == snapshot(m));
  CHECK(back.stage() == Stage::cotrain);
  CHECK(back.config().head.variant == HeadVariant::ssm_mlp);
  CHECK(back.config().head.gripper);
  CHECK(back.tokenizer().tokens() == m.tokenizer().tokens());
  CHECK(encode_checkpoint(back) == bytes);

  auto expect = [&](std::vector<unsigned char> b, CheckpointErrorCode code) {
    try {
      decode_checkpoint(b);
      FAIL("decode accepted a damaged checkpoint");
    } catch (const CheckpointError& e) {
      CHECK(e.code() == code);
    }
  };
  auto bad = bytes;
  bad[0] = 'X';
  expect(bad, CheckpointErrorCode::bad_magic);
  bad = bytes;
  bad[4] = 2;
  expect(bad, CheckpointErrorCode::bad_version);
  expect({bytes.begin(), bytes.begin() + 200}, CheckpointErrorCode::truncated);
  expect({bytes.begin(), bytes.end() - 5}, CheckpointErrorCode::truncated);
  bad = bytes;
  bad.push_back(0);
  expect(bad, CheckpointErrorCode::mismatch);

  const auto dir = scratch("ckpt");
  save_checkpoint(m, dir / "m.rmck");
  CHECK(binio::read_file(dir / "m.rmck") == bytes);
  CHECK(snapshot(load_checkpoint(dir / "m.rmck")) == snapshot(m));
  try {
    load_checkpoint(dir / "missing.rmck");
    FAIL("missing file loaded");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrorCode::io);
  }
}

TEST_CASE("text loss masks the prompt") {
  RoboMambaModel m(small_config(), toy_tokenizer());
  const auto data = make_caption_dataset(1, 4);
  // Only rows predicting answer tokens and EOS count.
  const auto& s = data[0];
  auto ids = m.prompt_tokens(s.prompt);
  const auto plen = ids.size();
  for (auto t : m.tokenizer().encode(s.answer)) ids.push_back(t);
  ids.push_back(Tokenizer::kEos);
  NoGradGuard g;
  const auto logits = m.vlm.forward(s.image, ids).logits;
  double sum = 0;
  std::size_t rows = 0;
  const auto V = logits.dim(1);
  for (std::size_t t = plen - 1; t + 1 < ids.size(); ++t) {
    double mx = -1e30;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, double(logits.at(t, v)));
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(double(logits.at(t, v)) - mx);
    sum += -(double(logits.at(t, std::size_t(ids[t + 1]))) - mx - std::log(z));
    ++rows;
  }
  const auto loss = text_loss(m, s);
  CHECK(double(loss[0]) == doctest::Approx(sum / double(rows)).epsilon(1e-5));
}

TEST_CASE("align overfit: loss strictly decreases over 50 steps") {
  RoboMambaModel m(small_config(), toy_tokenizer());
  TextDataset one = make_caption_dataset(1, 9);
  TrainOptions o = stage_defaults(Stage::align);
  o.optim.lr = 1e-3;
  o.max_steps = 50;
  o.batch = 1;
  const auto dir = scratch("align");
  o.metrics_csv = dir / "metrics.csv";
  const auto res = run_stage(m, Stage::align, one, o);
  REQUIRE(res.steps.size() == 50);
  for (std::size_t i = 1; i < res.steps.size(); ++i) CHECK(res.steps[i].loss < res.steps[i - 1].loss);

  std::ifstream in(o.metrics_csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 51);
  CHECK(lines[0] == "step,stage,loss,lr,wall_ms");
  CHECK(lines[1].rfind("1,align,", 0) == 0);
}

TEST_CASE("freeze contract across the stage pipeline") {
  auto cfg = small_config();
  RoboMambaModel m(cfg, toy_tokenizer());
  const auto dir = scratch("freeze");
  const TextDataset captions = make_caption_dataset(6, 20);
  const TextDataset mix = make_cotrain_dataset(6, 40);
  const PoseDataset poses = make_manip_dataset(6, 60);

  struct Run {
    Stage stage;
    const Dataset data;
  };
  const Run runs[] = {{Stage::warmup, captions}, {Stage::align, captions}, {Stage::cotrain, mix},
                      {Stage::manip, poses}};
  for (const auto& run : runs) {
    save_checkpoint(m, dir / "before.rmck");
    TrainOptions o = stage_defaults(run.stage);
    o.optim.lr = 1e-3;
    o.max_steps = 3;
    o.batch = 2;
    o.checkpoint = dir / "after.rmck";
    run_stage(m, run.stage, run.data, o);
    const auto before = snapshot(load_checkpoint(dir / "before.rmck"));
    const auto after = snapshot(load_checkpoint(dir / "after.rmck"));
    const auto groups = trainable_groups(run.stage, cfg);
    std::size_t changed = 0;
    for (const auto& p : m.parameters()) {
      const bool same = before.at(p.name) == after.at(p.name);
      if (!groups[std::size_t(p.group)]) {
        CHECK_MESSAGE(same, to_string(run.stage), " changed frozen ", p.name);
      } else {
        changed += same ? 0 : 1;
      }
    }
    CHECK(changed > 0);
  }
}

TEST_CASE("stage and dataset schema must agree") {
  RoboMambaModel m(small_config(), toy_tokenizer());
  TrainOptions o;
  o.max_steps = 1;
  CHECK_THROWS_AS(run_stage(m, Stage::manip, make_caption_dataset(2, 1), o), DataError);
  CHECK_THROWS_AS(run_stage(m, Stage::align, make_manip_dataset(2, 1), o), DataError);
  CHECK_THROWS_AS(run_stage(m, Stage::align, TextDataset{}, o), DataError);
}

TEST_CASE("training is deterministic") {
  auto run = [] {
    RoboMambaModel m(small_config(), toy_tokenizer());
    TrainOptions o = stage_defaults(Stage::cotrain);
    o.optim.lr = 1e-3;
    o.max_steps = 4;
    o.batch = 2;
    o.seed = 5;
    run_stage(m, Stage::cotrain, make_cotrain_dataset(5, 3), o);
    TrainOptions p = stage_defaults(Stage::manip);
    p.optim.lr = 1e-3;
    p.max_steps = 4;
    p.batch = 3;
    run_stage(m, Stage::manip, make_manip_dataset(5, 3), p);
    return encode_checkpoint(m);
  };
  CHECK(run() == run());
}

TEST_CASE("gradient accumulation matches one large batch") {
  const auto data = make_manip_dataset(8, 30);
  auto run = [&](std::size_t batch, std::size_t acc) {
    RoboMambaModel m(small_config(), toy_tokenizer());
    TrainOptions o = stage_defaults(Stage::manip);
    o.optim.lr = 1e-3;
    o.max_steps = 3;
    o.batch = batch;
    o.accumulate = acc;
    o.shuffle = false;
    run_stage(m, Stage::manip, data, o);
    return snapshot(m);
  };
  const auto a = run(8, 1), b = run(2, 4);
  for (const auto& [name, v] : a) {
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == doctest::Approx(b.at(name)[i]).epsilon(1e-4));
  }
}

TEST_CASE("toy vocabulary covers every corpus string") {
  const auto tok = toy_tokenizer();
  const auto caps = make_caption_dataset(20, 0);
  const auto mix = make_cotrain_dataset(60, 0);
  for (const auto* set : {&caps, &mix}) {
    for (const auto& s : *set) {
      for (const auto& text : {s.prompt, s.answer}) {
        const auto ids = tok.encode(text);
        CHECK(std::count(ids.begin(), ids.end(), Tokenizer::kUnk) == 0);
        CHECK(tok.decode(ids) == text);
      }
    }
  }
  for (auto k : {sim::ObjectKind::drawer, sim::ObjectKind::door, sim::ObjectKind::lid}) {
    const auto ids = tok.encode(sim::prompt_for(k));
    CHECK(std::count(ids.begin(), ids.end(), Tokenizer::kUnk) == 0);
  }
}

TEST_CASE("manifests roundtrip and reject bad rows") {
  const auto dir = scratch("manifest");
  const auto caps = make_caption_dataset(3, 7);
  write_text_manifest(caps, dir / "text");
  const auto back = std::get<TextDataset>(read_manifest(dir / "text" / "manifest.jsonl"));
  REQUIRE(back.size() == 3);
  CHECK(back[1].answer == caps[1].answer);
  CHECK(back[1].image.rgb == caps[1].image.rgb);

  std::vector<sim::ManipEpisode> eps;
  for (std::uint64_t s = 0; s < 12; ++s) eps.push_back(sim::collect_episode(s));
  write_episode_manifest(eps, dir / "ep");
  const auto poses = std::get<PoseDataset>(read_manifest(dir / "ep" / "manifest.jsonl"));
  std::size_t wins = 0;
  for (const auto& e : eps) wins += e.success ? 1 : 0;
  CHECK(poses.size() == wins);

  std::ifstream in(dir / "ep" / "manifest.jsonl");
  std::string first;
  std::getline(in, first);
  const auto row = nlohmann::json::parse(first);
  for (const char* key : {"image", "prompt", "pos_uv", "rot", "gripper", "success", "dq", "seed"}) {
    CHECK(row.contains(key));
  }
  CHECK(row["rot"].size() == 9);
  CHECK(row["gripper"].is_null());

  auto write = [&](const std::string& body) {
    binio::write_text_atomic(dir / "ep" / "bad.jsonl", body);
    return dir / "ep" / "bad.jsonl";
  };
  CHECK_THROWS_AS(read_manifest(write(first + "\n{\"image\":\"images/000000.rmim\",\"prompt\":\"p\",\"answer\":\"a\"}\n")),
                  DataError);
  CHECK_THROWS_AS(read_manifest(write("{\"image\":\"images/000000.rmim\",\"prompt\":\"p\",\"pos_uv\":[0.5,0.5],"
                                      "\"rot\":[2,0,0,0,1,0,0,0,1],\"gripper\":null}\n")),
                  DataError);
  CHECK_THROWS_AS(read_manifest(write("not json\n")), DataError);
  CHECK_THROWS_AS(read_manifest(dir / "nothing.jsonl"), IoError);
}

TEST_CASE("episode collection is byte-identical across runs") {
  const auto dir = scratch("collect");
  for (const char* sub : {"a", "b"}) {
    std::vector<sim::ManipEpisode> eps;
    for (std::uint64_t s = 100; s < 106; ++s) eps.push_back(sim::collect_episode(s));
    write_episode_manifest(eps, dir / sub);
  }
  CHECK(read_text(dir / "a" / "manifest.jsonl") == read_text(dir / "b" / "manifest.jsonl"));
  for (const auto& e : fs::directory_iterator(dir / "a" / "images")) {
    CHECK(read_text(e.path()) == read_text(dir / "b" / "images" / e.path().filename()));
  }
}
