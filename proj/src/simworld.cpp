#include "robomamba/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "robomamba/error.hpp"

namespace robomamba::sim {

namespace {

constexpr double kPi = std::numbers::pi;

double deg(double d) { return d * kPi / 180.0; }

Vec3 to_local(const Box& b, const Vec3& p) { return transpose(b.rotation) * (p - b.center); }

struct Swatch {
  const char* name;
  std::array<float, 3> rgb;
};

constexpr Swatch kMovableColors[] = {
    {"red", {0.85f, 0.18f, 0.15f}},  {"blue", {0.15f, 0.35f, 0.85f}},
    {"green", {0.20f, 0.72f, 0.25f}}, {"orange", {0.95f, 0.55f, 0.10f}},
    {"purple", {0.55f, 0.25f, 0.75f}}, {"yellow", {0.92f, 0.85f, 0.20f}},
};

constexpr Swatch kBaseColors[] = {
    {"brown", {0.45f, 0.33f, 0.22f}},
    {"gray", {0.50f, 0.50f, 0.52f}},
    {"white", {0.80f, 0.78f, 0.74f}},
};

Box make_box(const Mat3& frame, const Vec3& origin, const Vec3& center_local, const Vec3& half,
             std::uint8_t label, std::array<float, 3> color) {
  Box b;
  b.center = origin + frame * center_local;
  b.rotation = frame;
  b.half = half;
  b.label = label;
  b.color = color;
  return b;
}

std::array<Vec3, 8> corners(const Box& b) {
  std::array<Vec3, 8> out{};
  for (int i = 0; i < 8; ++i) {
    const Vec3 l{(i & 1 ? 1.0 : -1.0) * b.half[0], (i & 2 ? 1.0 : -1.0) * b.half[1],
                 (i & 4 ? 1.0 : -1.0) * b.half[2]};
    out[std::size_t(i)] = b.center + b.rotation * l;
  }
  return out;
}

bool inside_frustum(const std::vector<Box>& boxes, const Intrinsics& k) {
  for (const auto& b : boxes) {
    for (const auto& c : corners(b)) {
      if (c[2] < 0.2) return false;
      const double u = k.fx * c[0] / c[2] + k.cx;
      const double v = k.fy * c[1] / c[2] + k.cy;
      if (u < 0.5 || v < 0.5 || u > double(k.width) - 0.5 || v > double(k.height) - 0.5) return false;
    }
  }
  return true;
}

// Object axes: x right, y up, z out of the front face.
ArticulatedObject sample_object(Rng& rng, ObjectKind kind) {
  ArticulatedObject obj;
  obj.kind = kind;
  const bool lid = kind == ObjectKind::lid;
  const double yaw = deg(rng.uniform(-35.0, 35.0));
  const double pitch = lid ? deg(rng.uniform(35.0, 55.0)) : deg(rng.uniform(5.0, 20.0));
  const Mat3 flip{1, 0, 0, 0, -1, 0, 0, 0, -1};
  obj.frame = axis_angle({1, 0, 0}, pitch) * flip * axis_angle({0, 1, 0}, yaw);
  const double z = rng.uniform(2.2, 3.0);
  const Vec3 origin{rng.uniform(-0.4, 0.4) * z, rng.uniform(-0.3, 0.3) * z, z};

  const auto& base_swatch = kBaseColors[rng.index(std::size(kBaseColors))];
  const auto& mov_swatch = kMovableColors[rng.index(std::size(kMovableColors))];
  obj.base_color = base_swatch.name;
  obj.movable_color = mov_swatch.name;
  const Mat3& f = obj.frame;

  Vec3 body{};
  Vec3 part_center{}, part_half{};
  switch (kind) {
    case ObjectKind::drawer: {
      body = {rng.uniform(0.6, 0.95), rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.6)};
      const double w = body[0] * rng.uniform(0.8, 0.92);
      const double h = body[1] * rng.uniform(0.4, 0.6);
      const double t = rng.uniform(0.03, 0.06);
      const double slack = 0.5 * (body[1] - h) * 0.8;
      part_center = {0, rng.uniform(-slack, slack), 0.5 * body[2] + 0.5 * t};
      part_half = {0.5 * w, 0.5 * h, 0.5 * t};
      obj.joint = JointKind::prismatic;
      obj.axis = f * Vec3{0, 0, 1};
      obj.q_max = rng.uniform(0.3, 0.45);
      obj.front_local = {0, 0, 1};
      break;
    }
    case ObjectKind::door: {
      body = {rng.uniform(0.45, 0.7), rng.uniform(0.6, 0.95), rng.uniform(0.35, 0.55)};
      const double w = body[0] * 0.92;
      const double h = body[1] * 0.92;
      const double t = rng.uniform(0.03, 0.05);
      part_center = {0, 0, 0.5 * body[2] + 0.5 * t};
      part_half = {0.5 * w, 0.5 * h, 0.5 * t};
      // Hinge on the right edge opens about +y, on the left edge about -y.
      const bool right = rng.uniform() < 0.5;
      const double side = right ? 1.0 : -1.0;
      obj.joint = JointKind::revolute;
      obj.axis = f * Vec3{0, side, 0};
      obj.pivot = origin + f * Vec3{side * 0.5 * w, 0, 0.5 * body[2]};
      obj.q_max = rng.uniform(1.2, 1.9);
      obj.front_local = {0, 0, 1};
      break;
    }
    case ObjectKind::lid: {
      body = {rng.uniform(0.55, 0.85), rng.uniform(0.3, 0.5), rng.uniform(0.4, 0.6)};
      const double t = rng.uniform(0.03, 0.06);
      part_center = {0, 0.5 * body[1] + 0.5 * t, 0};
      part_half = {0.5 * body[0], 0.5 * t, 0.5 * body[2]};
      obj.joint = JointKind::revolute;
      obj.axis = f * Vec3{-1, 0, 0};
      obj.pivot = origin + f * Vec3{0, 0.5 * body[1], -0.5 * body[2]};
      obj.q_max = rng.uniform(1.2, 1.8);
      obj.front_local = {0, 1, 0};
      break;
    }
  }
  obj.q_min = 0;
  obj.q = obj.q_min;
  obj.base.push_back(make_box(f, origin, {0, 0, 0}, 0.5 * body, kBase, base_swatch.rgb));
  obj.movable_rest = make_box(f, origin, part_center, part_half, kMovable, mov_swatch.rgb);
  return obj;
}

}  // namespace

const char* to_string(ObjectKind kind) {
  switch (kind) {
    case ObjectKind::drawer: return "drawer";
    case ObjectKind::door: return "door";
    case ObjectKind::lid: return "lid";
  }
  return "?";
}

ObjectKind parse_kind(std::string_view s) {
  if (s == "drawer") return ObjectKind::drawer;
  if (s == "door") return ObjectKind::door;
  if (s == "lid") return ObjectKind::lid;
  throw DataError("unknown object kind '" + std::string(s) + "' (expected drawer, door or lid)");
}

std::string prompt_for(ObjectKind kind) {
  switch (kind) {
    case ObjectKind::drawer: return "where should the gripper touch to open the drawer?";
    case ObjectKind::door: return "where should the gripper touch to open the door?";
    case ObjectKind::lid: return "where should the gripper touch to lift the lid?";
  }
  return {};
}

double Box::distance(const Vec3& p) const {
  const Vec3 l = to_local(*this, p);
  double s = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double q = std::max(std::abs(l[i]) - half[i], 0.0);
    s += q * q;
  }
  return std::sqrt(s);
}

Vec3 Box::nearest_face_normal(const Vec3& p) const {
  const Vec3 l = to_local(*this, p);
  std::size_t best = 0;
  double best_gap = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 3; ++i) {
    const double gap = std::abs(l[i]) - half[i];
    if (gap > best_gap) {
      best_gap = gap;
      best = i;
    }
  }
  Vec3 n{0, 0, 0};
  n[best] = l[best] >= 0 ? 1.0 : -1.0;
  return rotation * n;
}

std::optional<RayHit> intersect(const Box& box, const Vec3& origin, const Vec3& dir) {
  const Mat3 rt = transpose(box.rotation);
  const Vec3 o = rt * (origin - box.center);
  const Vec3 d = rt * dir;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  std::size_t axis = 0;
  double sign = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (std::abs(o[i]) > box.half[i]) return std::nullopt;
      continue;
    }
    double t0 = (-box.half[i] - o[i]) / d[i];
    double t1 = (box.half[i] - o[i]) / d[i];
    // Entering through the -half face when d > 0.
    double s = d[i] > 0 ? -1.0 : 1.0;
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      axis = i;
      sign = s;
    }
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return std::nullopt;
  }
  if (!(t_near > 0)) return std::nullopt;
  Vec3 n{0, 0, 0};
  n[axis] = sign;
  return RayHit{t_near, box.rotation * n};
}

Box ArticulatedObject::movable() const {
  Box b = movable_rest;
  if (joint == JointKind::prismatic) {
    b.center = b.center + q * axis;
  } else {
    const Mat3 r = axis_angle(axis, q);
    b.center = pivot + r * (b.center - pivot);
    b.rotation = r * b.rotation;
  }
  return b;
}

std::vector<Box> ArticulatedObject::boxes() const {
  std::vector<Box> out = base;
  out.push_back(movable());
  return out;
}

Vec3 ArticulatedObject::front_normal() const { return movable().rotation * front_local; }

Vec3 ArticulatedObject::front_centroid() const {
  const Box b = movable();
  Vec3 offset{};
  for (std::size_t i = 0; i < 3; ++i) offset[i] = front_local[i] * b.half[i];
  return b.center + b.rotation * offset;
}

std::size_t Render::count(std::uint8_t label) const {
  return std::size_t(std::count(labels.begin(), labels.end(), label));
}

Render render_boxes(const std::vector<Box>& boxes, const Intrinsics& camera) {
  if (!camera.valid()) throw DataError("render: camera intrinsics must have fx, fy > 0");
  Render out;
  out.image = Image(camera.width, camera.height, true);
  out.labels.assign(camera.width * camera.height, kBackground);
  out.normals.assign(camera.width * camera.height, Vec3{0, 0, 0});
  const Vec3 origin{0, 0, 0};
  for (std::size_t y = 0; y < camera.height; ++y) {
    for (std::size_t x = 0; x < camera.width; ++x) {
      const std::size_t i = y * camera.width + x;
      const Vec3 dir{(double(x) + 0.5 - camera.cx) / camera.fx,
                     (double(y) + 0.5 - camera.cy) / camera.fy, 1.0};
      double best = std::numeric_limits<double>::infinity();
      const Box* hit_box = nullptr;
      Vec3 normal{};
      for (const auto& b : boxes) {
        const auto hit = intersect(b, origin, dir);
        if (hit && hit->t < best) {
          best = hit->t;
          hit_box = &b;
          normal = hit->normal;
        }
      }
      float* rgb = &out.image.rgb[i * 3];
      if (!hit_box) {
        rgb[0] = 0.92f;
        rgb[1] = 0.92f;
        rgb[2] = 0.95f;
        continue;
      }
      // dir has unit z, so the ray parameter is the depth.
      out.image.depth[i] = float(best);
      out.labels[i] = hit_box->label;
      out.normals[i] = normal;
      const double facing = std::max(0.0, -dot(normal, normalized(dir)));
      const double shade = 0.35 + 0.65 * facing;
      for (std::size_t c = 0; c < 3; ++c) rgb[c] = float(shade * hit_box->color[c]);
    }
  }
  return out;
}

Render render(const Scene& scene) { return render_boxes(scene.object.boxes(), scene.camera); }

Scene spawn_object(std::uint64_t seed, ObjectKind kind, const SimConfig& config) {
  Rng rng(seed * 0x9E3779B97F4A7C15ull + std::uint64_t(kind) + 1);
  Scene scene;
  scene.seed = seed;
  scene.camera = Intrinsics::from_fov(config.image_size, config.image_size, config.fov_deg);
  scene.prompt = prompt_for(kind);
  const double pixels = double(config.image_size * config.image_size);
  for (;;) {
    scene.object = sample_object(rng, kind);
    if (!inside_frustum(scene.object.boxes(), scene.camera)) continue;
    const Render r = render(scene);
    if (double(r.count(kMovable)) >= config.min_movable_fraction * pixels) break;
  }
  return scene;
}

Scene spawn_scene(std::uint64_t seed, const SimConfig& config) {
  Rng rng(seed ^ 0x5DEECE66Dull);
  const auto kind = ObjectKind(rng.index(3));
  return spawn_object(seed, kind, config);
}

InteractResult interact(Scene& scene, const EndEffectorPose& pose, const SimConfig& config) {
  InteractResult result;
  auto& obj = scene.object;
  const Vec3& p = pose.position;
  if (!(p[2] > 0)) return result;
  const Box part = obj.movable();
  if (part.distance(p) > config.attach_tolerance) return result;
  const Vec3 inward = -part.nearest_face_normal(p);
  const Vec3 z = normalized(column(pose.rotation, 2));
  if (dot(z, inward) < std::cos(deg(config.cone_half_angle_deg)) - 1e-12) return result;
  result.attached = true;

  const Vec3 pull = -config.pull_distance * z;
  double dq = 0;
  if (obj.joint == JointKind::prismatic) {
    dq = dot(pull, obj.axis);
  } else {
    const Vec3 r = p - obj.pivot;
    const Vec3 r_perp = r - dot(r, obj.axis) * obj.axis;
    const double radius = norm(r_perp);
    if (radius > 1e-6) {
      const Vec3 tangent = (1.0 / radius) * cross(obj.axis, r_perp);
      dq = dot(pull, tangent) / radius;
    }
  }
  const double q_new = std::clamp(obj.q + dq, obj.q_min, obj.q_max);
  result.dq = q_new - obj.q;
  obj.q = q_new;
  result.success = std::abs(result.dq) > config.success_threshold;
  return result;
}

ManipEpisode collect_episode(std::uint64_t seed, const SimConfig& config) {
  Scene scene = spawn_scene(seed, config);
  Render r = render(scene);
  Rng rng(seed * 0xD1B54A32D192ED03ull + 7);

  std::vector<std::size_t> movable;
  for (std::size_t i = 0; i < r.labels.size(); ++i)
    if (r.labels[i] == kMovable) movable.push_back(i);
  const std::size_t pick = movable[rng.index(movable.size())];
  const std::size_t W = r.image.width;

  ManipEpisode ep;
  ep.seed = seed;
  ep.kind = scene.object.kind;
  ep.camera = scene.camera;
  ep.prompt = scene.prompt;
  ep.pixel_x = pick % W;
  ep.pixel_y = pick / W;

  const Vec3 z = -r.normals[pick];
  Vec3 y{};
  for (;;) {
    const Vec3 g{rng.normal(), rng.normal(), rng.normal()};
    const Vec3 o = g - dot(g, z) * z;
    if (norm(o) > 1e-3) {
      y = normalized(o);
      break;
    }
  }
  const Vec3 x = cross(y, z);
  ep.pose.rotation = from_columns(x, y, z);
  ep.pose.u = (double(ep.pixel_x) + 0.5) / double(W);
  ep.pose.v = (double(ep.pixel_y) + 0.5) / double(r.image.height);
  ep.pose.position = lift_to_3d(ep.pose.u, ep.pose.v, r.image, scene.camera);

  const auto res = interact(scene, ep.pose, config);
  ep.success = res.success;
  ep.dq = res.dq;
  ep.image = std::move(r.image);
  return ep;
}

EvalResult evaluate(const Policy& policy, std::size_t episodes, std::uint64_t seed,
                    const SimConfig& config) {
  if (episodes == 0) throw DataError("evaluate: episodes must be at least 1");
  EvalResult out;
  std::size_t successes = 0;
  for (std::size_t i = 0; i < episodes; ++i) {
    EvalRecord rec;
    rec.seed = seed + i;
    Scene scene = spawn_scene(rec.seed, config);
    rec.kind = scene.object.kind;
    const Render r = render(scene);
    const Observation obs{r.image, scene.camera, scene.prompt, scene, r};
    EndEffectorPose pose = policy(obs);
    rec.u = pose.u;
    rec.v = pose.v;
    if (!(pose.u >= 0 && pose.u <= 1 && pose.v >= 0 && pose.v <= 1)) {
      rec.valid = false;
      rec.note = "contact pixel outside the image";
    } else if (!(orthonormality_error(pose.rotation) <= 1e-3) || !(det(pose.rotation) > 0)) {
      rec.valid = false;
      rec.note = "invalid rotation";
    }
    if (rec.valid) {
      const double W = double(r.image.width), H = double(r.image.height);
      const double px = std::min(std::floor(pose.u * W), W - 1);
      const double py = std::min(std::floor(pose.v * H), H - 1);
      pose.u = (px + 0.5) / W;
      pose.v = (py + 0.5) / H;
      if (!(r.image.depth_at(std::size_t(px), std::size_t(py)) > 0)) {
        rec.note = "no depth at contact pixel";
      } else {
        pose.position = lift_to_3d(pose.u, pose.v, r.image, scene.camera);
        const auto res = interact(scene, pose, config);
        rec.attached = res.attached;
        rec.success = res.success;
        rec.dq = res.dq;
        if (!res.attached) rec.note = "suction did not attach";
      }
    }
    if (rec.success) ++successes;
    out.log.push_back(std::move(rec));
  }
  out.success_rate = double(successes) / double(episodes);
  return out;
}

EndEffectorPose oracle_policy(const Observation& obs) {
  const auto& obj = obs.scene.object;
  const Vec3 n = obj.front_normal();
  const Vec3 c = obj.front_centroid();
  const auto& k = obs.camera;
  const double cu = k.fx * c[0] / c[2] + k.cx;
  const double cv = k.fy * c[1] / c[2] + k.cy;
  const auto& r = obs.render;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bx = 0, by = 0;
  for (std::size_t y = 0; y < k.height; ++y) {
    for (std::size_t x = 0; x < k.width; ++x) {
      const std::size_t i = y * k.width + x;
      if (r.labels[i] != kMovable || dot(r.normals[i], n) < 0.999) continue;
      const double du = double(x) + 0.5 - cu, dv = double(y) + 0.5 - cv;
      if (du * du + dv * dv < best) {
        best = du * du + dv * dv;
        bx = x;
        by = y;
      }
    }
  }
  EndEffectorPose pose;
  pose.u = (double(bx) + 0.5) / double(k.width);
  pose.v = (double(by) + 0.5) / double(k.height);
  const Vec3 z = -n;
  Vec3 y = Vec3{0, 1, 0} - z[1] * z;
  if (norm(y) < 1e-6) y = Vec3{1, 0, 0} - z[0] * z;
  y = normalized(y);
  pose.rotation = from_columns(cross(y, z), y, z);
  return pose;
}

EndEffectorPose center_policy(const Observation&) {
  EndEffectorPose pose;
  pose.u = 0.5;
  pose.v = 0.5;
  pose.rotation = identity3();
  return pose;
}

}  // namespace robomamba::sim
