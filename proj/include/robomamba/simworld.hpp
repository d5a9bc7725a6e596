#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "robomamba/geometry.hpp"
#include "robomamba/policy.hpp"
#include "robomamba/rng.hpp"
#include "robomamba/vision.hpp"

namespace robomamba::sim {

enum class ObjectKind { drawer, door, lid };
enum class JointKind { prismatic, revolute };

const char* to_string(ObjectKind kind);
ObjectKind parse_kind(std::string_view s);

enum Label : std::uint8_t { kBackground = 0, kBase = 1, kMovable = 2 };

// Oriented box: rotation maps box-local axes to camera axes.
struct Box {
  Vec3 center{};
  Mat3 rotation = identity3();
  Vec3 half{};
  std::uint8_t label = kBase;
  std::array<float, 3> color{0.5f, 0.5f, 0.5f};

  // Distance from p to the solid box (0 inside).
  double distance(const Vec3& p) const;
  // Outward normal of the face closest to p.
  Vec3 nearest_face_normal(const Vec3& p) const;
};

struct RayHit {
  double t = 0;
  Vec3 normal{};
};

// Ray o + t d against the box, nearest hit with t > 0.
std::optional<RayHit> intersect(const Box& box, const Vec3& origin, const Vec3& dir);

struct SimConfig {
  std::size_t image_size = 32;
  double fov_deg = 60.0;
  double attach_tolerance = 1e-2;    // m
  double cone_half_angle_deg = 60.0;
  double pull_distance = 0.25;       // m, arc length for revolute joints
  double success_threshold = 0.1;    // m or rad
  double min_movable_fraction = 0.05;
};

struct ArticulatedObject {
  ObjectKind kind = ObjectKind::drawer;
  JointKind joint = JointKind::prismatic;
  Vec3 axis{};   // unit, camera frame
  Vec3 pivot{};  // a point on a revolute axis
  double q_min = 0, q_max = 0, q = 0;
  std::vector<Box> base;
  Box movable_rest;    // movable part at q = 0
  Vec3 front_local{};  // outward normal of the graspable face, movable-box frame
  Mat3 frame = identity3();  // object axes in the camera frame
  std::string base_color, movable_color;

  Box movable() const;  // at the current q
  std::vector<Box> boxes() const;
  Vec3 front_normal() const;
  Vec3 front_centroid() const;
};

struct Scene {
  ArticulatedObject object;
  Intrinsics camera;
  std::string prompt;
  std::uint64_t seed = 0;
};

struct Render {
  Image image;  // rgb + depth
  std::vector<std::uint8_t> labels;
  std::vector<Vec3> normals;  // zero where nothing was hit

  std::size_t count(std::uint8_t label) const;
};

Render render_boxes(const std::vector<Box>& boxes, const Intrinsics& camera);
Render render(const Scene& scene);

// Deterministic in (seed, kind). Resamples until the object is inside the
// frustum and the movable part covers at least min_movable_fraction.
Scene spawn_object(std::uint64_t seed, ObjectKind kind, const SimConfig& config = {});
// Kind drawn from the seed.
Scene spawn_scene(std::uint64_t seed, const SimConfig& config = {});

struct InteractResult {
  bool attached = false;
  bool success = false;
  double dq = 0;
};

// Suction contact at pose.position with approach axis = third rotation column,
// then a pull of pull_distance along -z projected onto the joint motion.
// Updates scene.object.q.
InteractResult interact(Scene& scene, const EndEffectorPose& pose, const SimConfig& config = {});

struct ManipEpisode {
  std::uint64_t seed = 0;
  ObjectKind kind = ObjectKind::drawer;
  Image image;
  Intrinsics camera;
  std::string prompt;
  EndEffectorPose pose;  // applied pose, also the label for successful episodes
  std::size_t pixel_x = 0, pixel_y = 0;
  bool success = false;
  double dq = 0;
};

// Random movable pixel, z = -rendered normal, random y about z, x = y cross z.
ManipEpisode collect_episode(std::uint64_t seed, const SimConfig& config = {});

struct Observation {
  const Image& image;
  const Intrinsics& camera;
  const std::string& prompt;
  const Scene& scene;  // ground truth, for reference policies only
  const Render& render;
};

using Policy = std::function<EndEffectorPose(const Observation&)>;

struct EvalRecord {
  std::uint64_t seed = 0;
  ObjectKind kind = ObjectKind::drawer;
  double u = 0, v = 0;
  bool valid = true;
  bool attached = false;
  bool success = false;
  double dq = 0;
  std::string note;
};

struct EvalResult {
  double success_rate = 0;
  std::vector<EvalRecord> log;
};

// Fresh scene per episode with seed + index. uv is snapped to the centre of
// the pixel it falls in before lifting with the rendered depth.
EvalResult evaluate(const Policy& policy, std::size_t episodes, std::uint64_t seed,
                    const SimConfig& config = {});

// Front-face pixel nearest to the projected centroid, z = -front normal.
EndEffectorPose oracle_policy(const Observation& obs);
// uv = (0.5, 0.5), identity rotation.
EndEffectorPose center_policy(const Observation& obs);

std::string prompt_for(ObjectKind kind);

}  // namespace robomamba::sim
