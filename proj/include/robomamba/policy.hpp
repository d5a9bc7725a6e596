#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "robomamba/geometry.hpp"
#include "robomamba/mamba.hpp"
#include "robomamba/vision.hpp"

namespace robomamba {

enum class HeadVariant { mlp2, mlp1, ssm_mlp };
enum class Pooling { mean, max };

HeadVariant parse_head_variant(std::string_view s);
Pooling parse_pooling(std::string_view s);
const char* to_string(HeadVariant v);
const char* to_string(Pooling p);

struct PolicyConfig {
  HeadVariant variant = HeadVariant::mlp2;
  Pooling pooling = Pooling::mean;
  std::size_t hidden = 8;
  bool gripper = false;
};

struct EndEffectorPose {
  Vec3 position{};
  Mat3 rotation = identity3();
  double u = 0.5, v = 0.5;  // contact pixel, normalized
  std::optional<bool> gripper;
};

// [L, d] -> [1, d]; throws on an empty sequence.
template <typename T>
Tensor<T> pool_global_token(const Tensor<T>& hidden, Pooling mode);

// Gram-Schmidt on two 3-vectors: a [B,6] -> R [B,9] row-major with columns
// b1 = a1/|a1|, b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2.
template <typename T>
Tensor<T> rotation_from_6d(const Tensor<T>& a);

// Mean over the batch of sum_j |pred_j - gt_j|.
template <typename T>
Tensor<T> position_loss(const Tensor<T>& pred, const Tensor<T>& gt);

// Mean geodesic angle acos((tr(R_gt^T R) - 1)/2), argument clamped to
// [-1+1e-7, 1-1e-7]. Inputs [B,9] row-major; both must be rotations to 1e-3.
template <typename T>
Tensor<T> direction_loss(const Tensor<T>& pred, const Tensor<T>& gt);

double geodesic_angle(const Mat3& a, const Mat3& b);
void require_rotation(const Mat3& r, double tol, const std::string& what);

// X = (u*W - cx) d / fx, Y = (v*H - cy) d / fy, Z = d with d the depth at the
// pixel containing (u*W, v*H). Zero depth raises DataError naming the pixel.
Vec3 lift_to_3d(double u, double v, const Image& image, const Intrinsics& k);

template <typename T>
struct PoseOutput {
  Tensor<T> uv;       // [B, 2] in (0, 1)
  Tensor<T> rotation; // [B, 9]; the first 6D vector is the approach axis (third column)
  Tensor<T> gripper;  // [B, 1] logits, or undefined
};

template <typename T>
class PolicyHead {
 public:
  PolicyHead() = default;
  PolicyHead(const PolicyConfig& config, const MambaConfig& block, Rng& rng);

  // Full path from last-layer hidden states [L, d] to a single pose.
  PoseOutput<T> forward(const Tensor<T>& hidden) const;
  // Pose from already pooled tokens [B, d]; mlp variants only.
  PoseOutput<T> forward_pooled(const Tensor<T>& pooled) const;
  bool pools_first() const { return config_.variant != HeadVariant::ssm_mlp; }
  // Pooled token [B, d] as the perceptrons see it, before normalization.
  Tensor<T> pool(const Tensor<T>& hidden) const;

  // Data-dependent init of the input affine from pooled training features
  // [N, d]: shift = -mean, scale = 1 / sqrt(var + 0.01 * mean var).
  void fit_input_normalization(const Tensor<T>& pooled);

  ParamList<T> parameters() const;
  std::size_t parameter_count() const;
  static std::size_t parameter_count(const PolicyConfig& config, const MambaConfig& block);
  const PolicyConfig& config() const { return config_; }

  // Per-dimension input affine (pooled + in_shift) * in_scale, [d] each.
  Tensor<T> in_shift, in_scale;
  // mlp2 and ssm-mlp: position branch p*, direction branch r*.
  // mlp1: shared trunk in p*, r* unused.
  Tensor<T> p1, pb1, p2, pb2;
  Tensor<T> r1, rb1, r2, rb2;
  MambaBlock<T> block;  // ssm-mlp only

 private:
  PoseOutput<T> heads(const Tensor<T>& pooled) const;
  PolicyConfig config_;
  std::size_t d_model_ = 0;
};

template <typename T>
EndEffectorPose pose_at(const PoseOutput<T>& out, std::size_t row);

}  // namespace robomamba
