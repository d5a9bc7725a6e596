#include "robomamba/data.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "robomamba/binio.hpp"
#include "robomamba/error.hpp"
#include "robomamba/policy.hpp"

namespace robomamba {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kMovableNames[] = {"red", "blue", "green", "orange", "purple", "yellow"};
constexpr const char* kBaseNames[] = {"brown", "gray", "white"};
constexpr const char* kKinds[] = {"drawer", "door", "lid"};
constexpr const char* kSides[] = {"left", "right", "center"};

const char* container_for(sim::ObjectKind kind) {
  switch (kind) {
    case sim::ObjectKind::drawer: return "cabinet";
    case sim::ObjectKind::door: return "cupboard";
    case sim::ObjectKind::lid: return "box";
  }
  return "box";
}

std::string caption_text(const std::string& mc, const std::string& kind, const std::string& bc,
                         const std::string& container, const std::string& side) {
  return "a " + mc + " " + kind + " on a " + bc + " " + container + ", " + side + ".";
}

std::string plan_text(sim::ObjectKind kind, const std::string& mc) {
  switch (kind) {
    case sim::ObjectKind::drawer: return "touch the " + mc + " front, then pull it out.";
    case sim::ObjectKind::door: return "touch the " + mc + " door, then swing it open.";
    case sim::ObjectKind::lid: return "touch the " + mc + " lid, then lift it up.";
  }
  return {};
}

std::string motion_text(sim::ObjectKind kind, const std::string& hinge) {
  switch (kind) {
    case sim::ObjectKind::drawer: return "it slides.";
    case sim::ObjectKind::door: return "it turns on a " + hinge + " hinge.";
    case sim::ObjectKind::lid: return "it turns on a back hinge.";
  }
  return {};
}

std::string horizontal_side(const sim::Scene& scene) {
  const Vec3 c = scene.object.front_centroid();
  const double u = (scene.camera.fx * c[0] / c[2] + scene.camera.cx) / double(scene.camera.width);
  if (u < 0.4) return "left";
  if (u > 0.6) return "right";
  return "center";
}

std::string hinge_side(const sim::ArticulatedObject& obj) {
  const double lx = dot(obj.pivot - obj.movable_rest.center, column(obj.frame, 0));
  return lx < 0 ? "left" : "right";
}

std::string index_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06zu.rmim", i);
  return buf;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  binio::write_text_atomic(path, text);
}

fs::path prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  return dir / "manifest.jsonl";
}

json pose_row(const std::string& image, const std::string& prompt, double u, double v,
              const Mat3& rot, const std::optional<bool>& gripper) {
  json row;
  row["image"] = image;
  row["prompt"] = prompt;
  row["pos_uv"] = {u, v};
  row["rot"] = std::vector<double>(rot.begin(), rot.end());
  row["gripper"] = gripper ? json(*gripper ? 1 : 0) : json(nullptr);
  return row;
}

[[noreturn]] void bad_row(const fs::path& path, std::size_t line, const std::string& why) {
  throw DataError(path.string() + ":" + std::to_string(line) + ": " + why);
}

}  // namespace

Tokenizer toy_tokenizer() {
  std::vector<std::string> corpus;
  for (auto kind : {sim::ObjectKind::drawer, sim::ObjectKind::door, sim::ObjectKind::lid}) {
    corpus.push_back(sim::prompt_for(kind));
    const std::string k = sim::to_string(kind);
    corpus.push_back("how do i open the " + k + "?");
    corpus.push_back("which way does the " + k + " move?");
    for (const char* hinge : {"left", "right"}) corpus.push_back(motion_text(kind, hinge));
    for (const char* mc : kMovableNames) {
      corpus.push_back(plan_text(kind, mc));
      corpus.push_back("the " + std::string(mc) + " " + k + ".");
      for (const char* bc : kBaseNames) {
        for (const char* side : kSides) corpus.push_back(caption_text(mc, k, bc, container_for(kind), side));
      }
    }
  }
  for (const char* c : kMovableNames) corpus.push_back("is the " + std::string(c) + " part movable?");
  for (const char* c : kBaseNames) corpus.push_back("is the " + std::string(c) + " part movable?");
  corpus.push_back("describe the image.");
  corpus.push_back("what is the movable part?");
  corpus.push_back("yes.");
  corpus.push_back("no.");
  for (const char* k : kKinds) corpus.push_back(k);
  return Tokenizer::from_corpus(corpus);
}

std::string caption_for(const sim::Scene& scene) {
  const auto& obj = scene.object;
  return caption_text(obj.movable_color, sim::to_string(obj.kind), obj.base_color,
                      container_for(obj.kind), horizontal_side(scene));
}

TextDataset make_caption_dataset(std::size_t n, std::uint64_t seed) {
  TextDataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto scene = sim::spawn_scene(seed + i);
    out.push_back({sim::render(scene).image, "describe the image.", caption_for(scene)});
  }
  return out;
}

TextDataset make_cotrain_dataset(std::size_t n, std::uint64_t seed) {
  TextDataset out;
  out.reserve(n);
  Rng rng(seed ^ 0xC07A1Dull);
  for (std::size_t i = 0; i < n; ++i) {
    const auto scene = sim::spawn_scene(seed + i);
    const auto& obj = scene.object;
    const std::string k = sim::to_string(obj.kind);
    TextSample s{sim::render(scene).image, {}, {}};
    switch (rng.index(5)) {
      case 0:
        s.prompt = "describe the image.";
        s.answer = caption_for(scene);
        break;
      case 1:
        s.prompt = "what is the movable part?";
        s.answer = "the " + obj.movable_color + " " + k + ".";
        break;
      case 2: {
        const bool ask_movable = rng.index(2) == 0;
        s.prompt = "is the " + (ask_movable ? obj.movable_color : obj.base_color) + " part movable?";
        s.answer = ask_movable ? "yes." : "no.";
        break;
      }
      case 3:
        s.prompt = "how do i open the " + k + "?";
        s.answer = plan_text(obj.kind, obj.movable_color);
        break;
      default:
        s.prompt = "which way does the " + k + " move?";
        s.answer = motion_text(obj.kind, hinge_side(obj));
        break;
    }
    out.push_back(std::move(s));
  }
  return out;
}

PoseSample pose_sample(const sim::ManipEpisode& ep) {
  PoseSample s;
  s.image = ep.image;
  s.prompt = ep.prompt;
  s.u = (double(ep.pixel_x) + 0.5) / double(ep.image.width);
  s.v = (double(ep.pixel_y) + 0.5) / double(ep.image.height);
  s.rotation = ep.pose.rotation;
  s.gripper = ep.pose.gripper;
  return s;
}

PoseDataset make_manip_dataset(std::size_t n, std::uint64_t seed) {
  PoseDataset out;
  out.reserve(n);
  for (std::uint64_t s = seed; out.size() < n; ++s) {
    const auto ep = sim::collect_episode(s);
    if (ep.success) out.push_back(pose_sample(ep));
  }
  return out;
}

void write_text_manifest(const TextDataset& data, const fs::path& dir) {
  const auto manifest = prepare_dir(dir);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto name = index_name(i);
    write_rmim(dir / name, data[i].image);
    json row;
    row["image"] = name;
    row["prompt"] = data[i].prompt;
    row["answer"] = data[i].answer;
    lines.push_back(row.dump());
  }
  write_lines(manifest, lines);
}

void write_episode_manifest(const std::vector<sim::ManipEpisode>& episodes, const fs::path& dir) {
  const auto manifest = prepare_dir(dir);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& ep = episodes[i];
    const auto name = index_name(i);
    write_rmim(dir / name, ep.image);
    const auto s = pose_sample(ep);
    json row = pose_row(name, s.prompt, s.u, s.v, s.rotation, s.gripper);
    row["success"] = ep.success;
    row["dq"] = ep.dq;
    row["seed"] = ep.seed;
    lines.push_back(row.dump());
  }
  write_lines(manifest, lines);
}

Dataset read_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  TextDataset text;
  PoseDataset pose;
  int kind = -1;  // 0 text, 1 pose
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      bad_row(manifest, lineno, e.what());
    }
    if (!row.is_object() || !row.contains("image") || !row["image"].is_string() ||
        !row.contains("prompt") || !row["prompt"].is_string()) {
      bad_row(manifest, lineno, "row needs string fields image and prompt");
    }
    const int row_kind = row.contains("answer") ? 0 : row.contains("pos_uv") ? 1 : -1;
    if (row_kind < 0) bad_row(manifest, lineno, "row has neither answer nor pos_uv");
    if (kind >= 0 && row_kind != kind) bad_row(manifest, lineno, "rows mix stage 1 and stage 2 schemas");
    kind = row_kind;
    if (row.contains("success")) {
      if (!row["success"].is_boolean()) bad_row(manifest, lineno, "success must be a boolean");
      if (!row["success"].get<bool>()) continue;
    }
    const Image image = read_rmim(base / row["image"].get<std::string>());
    if (kind == 0) {
      if (!row["answer"].is_string()) bad_row(manifest, lineno, "answer must be a string");
      text.push_back({image, row["prompt"].get<std::string>(), row["answer"].get<std::string>()});
      continue;
    }
    PoseSample s;
    s.image = image;
    s.prompt = row["prompt"].get<std::string>();
    const auto& uv = row["pos_uv"];
    if (!uv.is_array() || uv.size() != 2 || !uv[0].is_number() || !uv[1].is_number()) {
      bad_row(manifest, lineno, "pos_uv must be two numbers");
    }
    s.u = uv[0];
    s.v = uv[1];
    if (!(s.u >= 0 && s.u <= 1 && s.v >= 0 && s.v <= 1)) bad_row(manifest, lineno, "pos_uv outside [0,1]");
    if (!row.contains("rot") || !row["rot"].is_array() || row["rot"].size() != 9) {
      bad_row(manifest, lineno, "rot must be 9 numbers");
    }
    for (std::size_t k = 0; k < 9; ++k) {
      if (!row["rot"][k].is_number()) bad_row(manifest, lineno, "rot must be 9 numbers");
      s.rotation[k] = row["rot"][k];
    }
    try {
      require_rotation(s.rotation, 1e-3, "rot");
    } catch (const Error& e) {
      bad_row(manifest, lineno, e.what());
    }
    const auto& g = row.contains("gripper") ? row["gripper"] : json(nullptr);
    if (g.is_number_integer() && (g == 0 || g == 1)) {
      s.gripper = g == 1;
    } else if (!g.is_null()) {
      bad_row(manifest, lineno, "gripper must be 0, 1 or null");
    }
    pose.push_back(std::move(s));
  }
  if (kind == 1) return pose;
  return text;
}

}  // namespace robomamba
