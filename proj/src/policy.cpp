#include "robomamba/policy.hpp"

#include <algorithm>
#include <cmath>

namespace robomamba {

HeadVariant parse_head_variant(std::string_view s) {
  if (s == "mlp2") return HeadVariant::mlp2;
  if (s == "mlp1") return HeadVariant::mlp1;
  if (s == "ssm-mlp") return HeadVariant::ssm_mlp;
  throw DataError("unknown head variant '" + std::string(s) + "' (expected mlp2, mlp1, ssm-mlp)");
}

Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  throw DataError("unknown pooling '" + std::string(s) + "' (expected mean, max)");
}

const char* to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::mlp2: return "mlp2";
    case HeadVariant::mlp1: return "mlp1";
    case HeadVariant::ssm_mlp: return "ssm-mlp";
  }
  return "unknown";
}

const char* to_string(Pooling p) { return p == Pooling::mean ? "mean" : "max"; }

template <typename T>
Tensor<T> pool_global_token(const Tensor<T>& hidden, Pooling mode) {
  if (hidden.rank() != 2 || hidden.dim(0) == 0) {
    throw ShapeError("pooling needs a non-empty [L, d] sequence, got " + shape_string(hidden.shape()));
  }
  auto pooled = mode == Pooling::mean ? mean_pool(hidden) : max_pool(hidden);
  return reshape(pooled, Shape{1, hidden.dim(1)});
}

namespace {

template <typename T>
Tensor<T> col(const Tensor<T>& x, std::size_t j) {
  return slice(x, 1, j, j + 1);
}

template <typename T>
Tensor<T> unit_rows(const Tensor<T>& v) {
  auto sq = nn::add_scalar(nn::row_sum(mul(v, v)), T(1e-12));
  return mul(v, exp(nn::scale(log(sq), T(-0.5))));
}

template <typename T>
void check_rotation_rows(const Tensor<T>& r, const char* what) {
  if (r.rank() != 2 || r.dim(1) != 9) {
    throw ShapeError(std::string(what) + " must be [B, 9], got " + shape_string(r.shape()));
  }
  const auto v = r.data();
  for (std::size_t b = 0; b < r.dim(0); ++b) {
    Mat3 m;
    for (std::size_t k = 0; k < 9; ++k) m[k] = double(v[b * 9 + k]);
    require_rotation(m, 1e-3, std::string(what) + " row " + std::to_string(b));
  }
}

}  // namespace

void require_rotation(const Mat3& r, double tol, const std::string& what) {
  const double err = orthonormality_error(r);
  if (!(err <= tol) || !(det(r) > 0)) {
    throw NumericError(what + " is not a rotation (orthonormality error " + std::to_string(err) +
                       ", det " + std::to_string(det(r)) + ")");
  }
}

template <typename T>
Tensor<T> rotation_from_6d(const Tensor<T>& a) {
  if (a.rank() != 2 || a.dim(1) != 6) {
    throw ShapeError("6D rotation input must be [B, 6], got " + shape_string(a.shape()));
  }
  auto b1 = unit_rows(slice(a, 1, 0, 3));
  auto a2 = slice(a, 1, 3, 6);
  auto b2 = unit_rows(nn::sub(a2, mul(b1, nn::row_sum(mul(b1, a2)))));
  const Tensor<T> x1 = col(b1, 0), y1 = col(b1, 1), z1 = col(b1, 2);
  const Tensor<T> x2 = col(b2, 0), y2 = col(b2, 1), z2 = col(b2, 2);
  const Tensor<T> x3 = nn::sub(mul(y1, z2), mul(z1, y2));
  const Tensor<T> y3 = nn::sub(mul(z1, x2), mul(x1, z2));
  const Tensor<T> z3 = nn::sub(mul(x1, y2), mul(y1, x2));
  const Tensor<T> parts[9] = {x1, x2, x3, y1, y2, y3, z1, z2, z3};
  return concat<T>(parts, 1);
}

template <typename T>
Tensor<T> position_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 2 || pred.dim(0) == 0) {
    throw ShapeError("position loss: prediction " + shape_string(pred.shape()) +
                     " and target " + shape_string(gt.shape()) + " must both be [N>=1, k]");
  }
  return nn::scale(nn::sum_all(nn::abs(nn::sub(pred, gt))), T(1) / static_cast<T>(pred.dim(0)));
}

template <typename T>
Tensor<T> direction_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("direction loss: prediction " + shape_string(pred.shape()) +
                     " and target " + shape_string(gt.shape()) + " differ");
  }
  check_rotation_rows(pred, "predicted rotation");
  check_rotation_rows(gt, "target rotation");
  auto trace = nn::row_sum(mul(gt, pred));
  auto angle = acos(nn::scale(nn::add_scalar(trace, T(-1)), T(0.5)), T(1e-7));
  return nn::mean_all(angle);
}

double geodesic_angle(const Mat3& a, const Mat3& b) {
  double tr = 0;
  for (std::size_t k = 0; k < 9; ++k) tr += a[k] * b[k];
  return std::acos(std::clamp((tr - 1) / 2, -1.0 + 1e-7, 1.0 - 1e-7));
}

Vec3 lift_to_3d(double u, double v, const Image& image, const Intrinsics& k) {
  if (!image.has_depth()) throw DataError("lift_to_3d: image has no depth channel");
  const double upx = u * double(image.width);
  const double vpx = v * double(image.height);
  if (!(upx >= 0) || !(vpx >= 0) || upx > double(image.width) || vpx > double(image.height)) {
    throw DataError("lift_to_3d: pixel (" + std::to_string(upx) + ", " + std::to_string(vpx) +
                    ") outside the image");
  }
  const auto px = std::min<std::size_t>(std::size_t(upx), image.width - 1);
  const auto py = std::min<std::size_t>(std::size_t(vpx), image.height - 1);
  const double d = image.depth_at(px, py);
  if (!(d > 0)) {
    throw DataError("lift_to_3d: no depth at pixel (" + std::to_string(px) + ", " +
                    std::to_string(py) + ")");
  }
  return {(upx - k.cx) * d / k.fx, (vpx - k.cy) * d / k.fy, d};
}

template <typename T>
PolicyHead<T>::PolicyHead(const PolicyConfig& config, const MambaConfig& block_config, Rng& rng)
    : config_(config), d_model_(block_config.d_model) {
  if (config_.hidden == 0) throw ShapeError("policy head hidden width must be positive");
  const auto d = d_model_;
  const auto h = config_.hidden;
  const std::size_t g = config_.gripper ? 1 : 0;
  const double s1 = 1.0 / std::sqrt(double(d));
  const double s2 = 1.0 / std::sqrt(double(h));
  if (config_.variant == HeadVariant::ssm_mlp) {
    block = MambaBlock<T>(block_config, rng, "head.block", ParamGroup::head);
  }
  in_shift = nn::filled_param<T>(Shape{d}, T(0));
  in_scale = nn::filled_param<T>(Shape{d}, T(1));
  p1 = nn::uniform_param<T>(rng, Shape{d, h}, s1);
  pb1 = nn::filled_param<T>(Shape{h}, T(0));
  if (config_.variant == HeadVariant::mlp1) {
    p2 = nn::uniform_param<T>(rng, Shape{h, 8 + g}, s2);
    pb2 = nn::filled_param<T>(Shape{8 + g}, T(0));
    return;
  }
  p2 = nn::uniform_param<T>(rng, Shape{h, 2}, s2);
  pb2 = nn::filled_param<T>(Shape{2}, T(0));
  r1 = nn::uniform_param<T>(rng, Shape{d, h}, s1);
  rb1 = nn::filled_param<T>(Shape{h}, T(0));
  r2 = nn::uniform_param<T>(rng, Shape{h, 6 + g}, s2);
  rb2 = nn::filled_param<T>(Shape{6 + g}, T(0));
}

template <typename T>
PoseOutput<T> PolicyHead<T>::heads(const Tensor<T>& pooled) const {
  // The six outputs are the approach axis z and then y, offset so that a zero
  // head predicts the identity. Gram-Schmidt gives R' = [z, y, -x]; the
  // quarter turn P reorders it to R = R' P = [x, y, z].
  static const std::vector<T> identity6{T(0), T(0), T(1), T(0), T(1), T(0)};
  static const std::vector<T> quarter{T(0), T(0), T(1), T(0), T(1), T(0), T(-1), T(0), T(0)};
  const Tensor<T> base(Shape{6}, identity6);
  const Tensor<T> P(Shape{3, 3}, quarter);
  PoseOutput<T> out;
  Tensor<T> uv_raw, rot_raw, grip;
  const auto x = mul(add(pooled, in_shift), in_scale);
  if (config_.variant == HeadVariant::mlp1) {
    auto o = nn::linear(silu(nn::linear(x, p1, pb1)), p2, pb2);
    uv_raw = slice(o, 1, 0, 2);
    rot_raw = slice(o, 1, 2, 8);
    if (config_.gripper) grip = slice(o, 1, 8, 9);
  } else {
    uv_raw = nn::linear(silu(nn::linear(x, p1, pb1)), p2, pb2);
    auto o = nn::linear(silu(nn::linear(x, r1, rb1)), r2, rb2);
    rot_raw = config_.gripper ? slice(o, 1, 0, 6) : o;
    if (config_.gripper) grip = slice(o, 1, 6, 7);
  }
  out.uv = nn::sigmoid(uv_raw);
  const auto r_prime = rotation_from_6d(add(rot_raw, base));
  const std::size_t batch = r_prime.dim(0);
  out.rotation = reshape(matmul(reshape(r_prime, Shape{batch * 3, 3}), P), Shape{batch, 9});
  out.gripper = grip;
  return out;
}

template <typename T>
PoseOutput<T> PolicyHead<T>::forward_pooled(const Tensor<T>& pooled) const {
  if (!pools_first()) throw ShapeError("ssm-mlp head needs the full hidden sequence");
  if (pooled.rank() != 2 || pooled.dim(1) != d_model_) {
    throw ShapeError("policy head expects [B, " + std::to_string(d_model_) + "], got " +
                     shape_string(pooled.shape()));
  }
  return heads(pooled);
}

template <typename T>
Tensor<T> PolicyHead<T>::pool(const Tensor<T>& hidden) const {
  if (pools_first()) return pool_global_token(hidden, config_.pooling);
  return pool_global_token(block.forward(hidden), config_.pooling);
}

template <typename T>
PoseOutput<T> PolicyHead<T>::forward(const Tensor<T>& hidden) const {
  return heads(pool(hidden));
}

template <typename T>
void PolicyHead<T>::fit_input_normalization(const Tensor<T>& pooled) {
  if (pooled.rank() != 2 || pooled.dim(1) != d_model_ || pooled.dim(0) == 0) {
    throw ShapeError("input normalization expects [N>0, " + std::to_string(d_model_) + "], got " +
                     shape_string(pooled.shape()));
  }
  const std::size_t n = pooled.dim(0), d = d_model_;
  const auto x = pooled.data();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += double(x[i * d + j]);
  for (auto& m : mean) m /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = double(x[i * d + j]) - mean[j];
      var[j] += c * c;
    }
  double mean_var = 0;
  for (auto& v : var) mean_var += (v /= double(n));
  mean_var /= double(d);
  const double floor = 0.01 * mean_var + 1e-12;
  auto shift = in_shift.mutable_data();
  auto scale = in_scale.mutable_data();
  for (std::size_t j = 0; j < d; ++j) {
    shift[j] = T(-mean[j]);
    scale[j] = T(1.0 / std::sqrt(var[j] + floor));
  }
}

template <typename T>
ParamList<T> PolicyHead<T>::parameters() const {
  ParamList<T> out;
  if (config_.variant == HeadVariant::ssm_mlp) out = block.parameters();
  const auto add_p = [&](const char* name, const Tensor<T>& t) {
    if (t.defined()) out.push_back({std::string("head.") + name, ParamGroup::head, t});
  };
  add_p("in_shift", in_shift);
  add_p("in_scale", in_scale);
  add_p("p1", p1);
  add_p("pb1", pb1);
  add_p("p2", p2);
  add_p("pb2", pb2);
  add_p("r1", r1);
  add_p("rb1", rb1);
  add_p("r2", r2);
  add_p("rb2", rb2);
  return out;
}

template <typename T>
std::size_t PolicyHead<T>::parameter_count(const PolicyConfig& c, const MambaConfig& block) {
  const std::size_t d = block.d_model, h = c.hidden, g = c.gripper ? 1 : 0;
  if (c.variant == HeadVariant::mlp1) return 2 * d + d * h + h + h * (8 + g) + 8 + g;
  const std::size_t mlps = 2 * d + (d * h + h + h * 2 + 2) + (d * h + h + h * (6 + g) + 6 + g);
  if (c.variant == HeadVariant::mlp2) return mlps;
  return mlps + MambaBlock<T>::parameter_count(block);
}

template <typename T>
std::size_t PolicyHead<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
EndEffectorPose pose_at(const PoseOutput<T>& out, std::size_t row) {
  EndEffectorPose pose;
  pose.u = double(out.uv.at(row, 0));
  pose.v = double(out.uv.at(row, 1));
  for (std::size_t k = 0; k < 9; ++k) pose.rotation[k] = double(out.rotation[row * 9 + k]);
  if (out.gripper.defined()) pose.gripper = out.gripper[row] > T(0);
  return pose;
}

#define ROBOMAMBA_INSTANTIATE_POLICY(T)                                           \
  template Tensor<T> pool_global_token(const Tensor<T>&, Pooling);                \
  template Tensor<T> rotation_from_6d(const Tensor<T>&);                          \
  template Tensor<T> position_loss(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> direction_loss(const Tensor<T>&, const Tensor<T>&);          \
  template class PolicyHead<T>;                                                   \
  template EndEffectorPose pose_at(const PoseOutput<T>&, std::size_t);

ROBOMAMBA_INSTANTIATE_POLICY(float)
ROBOMAMBA_INSTANTIATE_POLICY(double)

}  // namespace robomamba
