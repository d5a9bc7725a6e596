#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using robomamba::cli::run;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("robomamba_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("unknown or missing subcommand is a usage error") {
  auto r = call({"frobnicate"});
  CHECK(r.code == 1);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(r.out.empty());
  CHECK(call({}).code == 1);
}

TEST_CASE("every subcommand documents its flags with defaults") {
  const std::map<std::string, std::vector<std::string>> expected{
      {"train", {"--stage", "--data", "--lr", "--max-steps", "[0]", "--batch", "[8]", "--head", "[mlp2]"}},
      {"eval-manip", {"--ckpt", "--policy", "[model]", "--episodes", "[50]"}},
      {"collect-data", {"--set", "[manip]", "--episodes", "[100]", "[data]"}},
      {"generate", {"--ckpt", "--image", "--prompt", "--max-new", "[24]"}},
      {"bench-scan", {"--lengths", "--d-model", "[64]", "--repeats", "[5]", "--mechanisms", "[bench.csv]"}},
      {"param-report", {"--ckpt", "--stage", "[manip]", "--d-model", "[128]"}},
  };
  for (const auto& [sub, flags] : expected) {
    CAPTURE(sub);
    const auto r = call({sub, "--help"});
    CHECK(r.code == 0);
    for (const auto& g : {"--config", "--seed", "--out"}) CHECK(r.out.find(g) != std::string::npos);
    for (const auto& f : flags) {
      CAPTURE(f);
      CHECK(r.out.find(f) != std::string::npos);
    }
  }
}

TEST_CASE("train without a stage is a usage error") {
  const auto r = call({"train"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--stage") != std::string::npos);
  CHECK(call({"train", "--stage", "pretrain"}).code == 1);
}

TEST_CASE("missing checkpoint is a data error") {
  CHECK(call({"eval-manip", "--ckpt", "missing.rmck"}).code == 2);
  CHECK(call({"generate", "--ckpt", "missing.rmck"}).code == 2);
}

TEST_CASE("bench-scan writes its CSV") {
  const auto csv = scratch("bench") / "b.csv";
  const auto r = call({"bench-scan", "--lengths", "256,512", "--d-model", "32", "--repeats", "5", "--out", csv.string()});
  CHECK(r.code == 0);
  REQUIRE(fs::exists(csv));
  std::ifstream in(csv);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 7);
  CHECK(call({"bench-scan", "--repeats", "3"}).code == 1);
}

TEST_CASE("collect, train, evaluate and report through the command line") {
  const auto dir = scratch("flow");
  const auto data = dir / "data";
  REQUIRE(call({"collect-data", "--episodes", "6", "--out", data.string()}).code == 0);
  CHECK(fs::exists(data / "manifest.jsonl"));
  CHECK(fs::exists(data / "vocab.txt"));

  const auto run_dir = dir / "run";
  const std::vector<std::string> model{"--d-model", "32", "--layers", "1", "--d-state", "4", "--d-vis", "16"};
  std::vector<std::string> train{"train", "--stage", "manip", "--data", (data / "manifest.jsonl").string(),
                                 "--max-steps", "2", "--out", run_dir.string()};
  train.insert(train.end(), model.begin(), model.end());
  REQUIRE(call(train).code == 0);
  const auto ckpt = (run_dir / "model.rmck").string();
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(run_dir / "metrics.csv"));

  const auto log = dir / "eval.jsonl";
  const auto e = call({"eval-manip", "--ckpt", ckpt, "--episodes", "3", "--out", log.string()});
  CHECK(e.code == 0);
  CHECK(e.out.find("success_rate") != std::string::npos);
  std::ifstream in(log);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);

  CHECK(call({"generate", "--ckpt", ckpt, "--max-new", "3"}).code == 0);

  const auto rep = call({"param-report", "--ckpt", ckpt, "--stage", "manip"});
  CHECK(rep.code == 0);
  CHECK(rep.out.find("ratio") != std::string::npos);

  CHECK(call({"train", "--stage", "align", "--data", (data / "manifest.jsonl").string(), "--out",
              (dir / "bad").string()})
            .code == 2);
}

TEST_CASE("config file supplies flags and the command line wins") {
  const auto dir = scratch("config");
  const auto cfg = dir / "run.cfg";
  std::ofstream(cfg) << "# small model\nd-model = 32\nhead-hidden = 16\n";
  const auto a = call({"param-report", "--config", cfg.string()});
  const auto b = call({"param-report", "--config", cfg.string(), "--d-model", "64"});
  const auto c = call({"param-report", "--d-model", "32", "--head-hidden", "16"});
  CHECK(a.code == 0);
  CHECK(a.out == c.out);
  CHECK(a.out != b.out);

  std::ofstream(dir / "bad.cfg") << "no-such-flag = 1\n";
  CHECK(call({"param-report", "--config", (dir / "bad.cfg").string()}).code == 2);
  CHECK(call({"param-report", "--config", (dir / "absent.cfg").string()}).code == 2);
}
