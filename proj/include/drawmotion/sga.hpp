#pragma once

// Stickman generation: frontal projection of a 3-D pose and synthesis of a
// six-stroke hand-drawn-style sketch from it.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "drawmotion/motion.hpp"
#include "drawmotion/rng.hpp"

namespace drawmotion {

inline constexpr int kStrokeCount = 6;
inline constexpr int kMaxStrokePoints = 64;
inline constexpr double kProjectionExtent = 0.9;

struct StickmanSketch {
  std::vector<Matrix> strokes;  // each k x 2 inside [-1, 1]^2

  void validate() const {
    if (strokes.size() != kStrokeCount) {
      throw InputError("strokes", "a stickman needs exactly 6 strokes, got " + std::to_string(strokes.size()));
    }
    for (const auto& s : strokes) {
      if (s.cols() != 2 || s.rows() < 2 || s.rows() > kMaxStrokePoints) {
        throw InputError("strokes", "each stroke needs between 2 and 64 [x, y] points");
      }
      if (!s.allFinite()) throw InputError("strokes", "stroke has non-finite points");
      if (s.cwiseAbs().maxCoeff() > 1.0 + 1e-9) throw InputError("strokes", "stroke leaves the [-1, 1] drawing box");
    }
  }
};

struct SgaStyle {
  double jitter_sigma = 0.01;
  double misplace_sigma = 0.03;
  double scale_lo = 0.85;
  double scale_hi = 1.15;
  int points_per_stroke = 16;

  static SgaStyle noiseless() { return {0.0, 0.0, 1.0, 1.0, 16}; }

  /// Wider random style used while pretraining the codec.
  static SgaStyle sample_training(Rng& rng) {
    SgaStyle s;
    s.jitter_sigma = rng.uniform(0.0, 0.02);
    s.misplace_sigma = rng.uniform(0.0, 0.06);
    s.scale_lo = rng.uniform(0.75, 1.0);
    s.scale_hi = rng.uniform(1.0, 1.25);
    return s;
  }

  void validate() const {
    if (jitter_sigma < 0.0 || misplace_sigma < 0.0) throw ConfigError("SGA sigmas must be non-negative");
    if (!(scale_lo > 0.0) || scale_lo > scale_hi) throw ConfigError("SGA scale range must satisfy 0 < lo <= hi");
    if (points_per_stroke < 2 || points_per_stroke > kMaxStrokePoints) {
      throw ConfigError("points_per_stroke must be in [2, 64]");
    }
  }
};

struct FrontalProjection {
  Matrix points;  // J x 2
  double scale = 1.0;
  bool frontalized = true;
};

/// Rotates the pose about the vertical axis so the hip axis (left minus
/// right hip) lies along +x, drops depth, and scales so the pelvis sits at
/// the origin and the largest coordinate is 0.9.
inline FrontalProjection project_frontal(const Pose& pose) {
  FrontalProjection out;
  const Eigen::RowVector3d hip = pose.row(kLeftHip) - pose.row(kRightHip);
  const double planar = std::hypot(hip.x(), hip.z());
  Pose p = pose.rowwise() - pose.row(kPelvis);
  if (planar < 1e-9) {
    out.frontalized = false;
  } else {
    // rotate_about_vertical maps (x, z) -> (c x + s z, -s x + c z); choose the
    // angle that sends the hip direction to +x.
    const double yaw = std::atan2(hip.z(), hip.x());
    p = rotate_about_vertical(p, yaw);
  }
  out.points = p.leftCols(2);
  const double extent = out.points.cwiseAbs().maxCoeff();
  out.scale = extent > 0.0 ? kProjectionExtent / extent : 1.0;
  out.points *= out.scale;
  return out;
}

namespace detail {

inline Matrix densify(const Matrix& chain, int count) {
  return resample_trajectory(Trajectory2D{chain, std::nullopt}, count, ResampleMode::uniform).points;
}

inline Matrix chain(const Matrix& pts, std::initializer_list<int> joints) {
  Matrix c(static_cast<Eigen::Index>(joints.size()), 2);
  Eigen::Index r = 0;
  for (int j : joints) c.row(r++) = pts.row(j);
  return c;
}

}  // namespace detail

inline constexpr int kHeadVertices = 8;
inline constexpr double kHeadRadiusRatio = 0.4;

/// The six noiseless strokes in canonical order: head, torso, left arm,
/// right arm, left leg, right leg.
inline std::vector<Matrix> stickman_skeleton_strokes(const Matrix& projected, int points_per_stroke) {
  const Eigen::RowVector2d head = projected.row(kHead);
  const double radius = kHeadRadiusRatio * (projected.row(kHead) - projected.row(kNeck)).norm();
  Matrix circle(kHeadVertices + 1, 2);
  for (int i = 0; i <= kHeadVertices; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i % kHeadVertices) / kHeadVertices;
    circle.row(i) = head + radius * Eigen::RowVector2d(std::cos(a), std::sin(a));
  }
  std::vector<Matrix> strokes;
  strokes.push_back(detail::densify(circle, points_per_stroke));
  strokes.push_back(detail::densify(detail::chain(projected, {kNeck, kPelvis}), points_per_stroke));
  strokes.push_back(
      detail::densify(detail::chain(projected, {kLeftShoulder, kLeftElbow, kLeftWrist}), points_per_stroke));
  strokes.push_back(
      detail::densify(detail::chain(projected, {kRightShoulder, kRightElbow, kRightWrist}), points_per_stroke));
  strokes.push_back(detail::densify(detail::chain(projected, {kLeftHip, kLeftKnee, kLeftAnkle}), points_per_stroke));
  strokes.push_back(
      detail::densify(detail::chain(projected, {kRightHip, kRightKnee, kRightAnkle}), points_per_stroke));
  return strokes;
}

/// Smooth jitter for one stroke: a cumulative walk of truncated Gaussian
/// steps, smoothed with a 3-tap moving average and centered. Each step is
/// bounded by 3 sigma, so second differences of the result stay below
/// 2 sqrt(2) sigma.
inline Matrix smooth_jitter(Eigen::Index points, double sigma, Rng& rng) {
  Matrix walk = Matrix::Zero(points, 2);
  for (Eigen::Index i = 1; i < points; ++i) {
    for (int c = 0; c < 2; ++c) walk(i, c) = walk(i - 1, c) + sigma * rng.truncated_normal(3.0);
  }
  Matrix smooth(points, 2);
  for (Eigen::Index i = 0; i < points; ++i) {
    const Eigen::Index lo = std::max<Eigen::Index>(i - 1, 0);
    const Eigen::Index hi = std::min<Eigen::Index>(i + 1, points - 1);
    smooth.row(i) = (walk.row(lo) + walk.row(i) + walk.row(hi)) / 3.0;
  }
  smooth.rowwise() -= smooth.colwise().mean();
  return smooth;
}

/// Deterministic in (pose, style, seed). Noise is applied per stroke as
/// scaling about the stroke centroid, then jitter, then a rigid offset.
inline StickmanSketch generate_stickman(const Pose& pose, const SgaStyle& style, std::uint64_t seed) {
  style.validate();
  const FrontalProjection proj = project_frontal(pose);
  std::vector<Matrix> strokes = stickman_skeleton_strokes(proj.points, style.points_per_stroke);

  Rng scale_rng(derive_seed(seed, 1));
  Rng jitter_rng(derive_seed(seed, 2));
  Rng offset_rng(derive_seed(seed, 3));
  Rng order_rng(derive_seed(seed, 4));
  for (Matrix& s : strokes) {
    const double k = scale_rng.uniform(style.scale_lo, style.scale_hi);
    const Eigen::RowVector2d centroid = s.colwise().mean();
    s = ((s.rowwise() - centroid) * k).rowwise() + centroid;
    if (style.jitter_sigma > 0.0) s += smooth_jitter(s.rows(), style.jitter_sigma, jitter_rng);
    if (style.misplace_sigma > 0.0) {
      const Eigen::RowVector2d off(offset_rng.normal(0.0, style.misplace_sigma),
                                   offset_rng.normal(0.0, style.misplace_sigma));
      s.rowwise() += off;
    }
    s = s.cwiseMax(-1.0).cwiseMin(1.0);
  }
  order_rng.shuffle(strokes);
  return StickmanSketch{std::move(strokes)};
}

// Sketch wire format: {"strokes": [[[x, y], ...] x 6]}

inline json sketch_to_json(const StickmanSketch& s) {
  json strokes = json::array();
  for (const auto& st : s.strokes) {
    json pts = json::array();
    for (Eigen::Index i = 0; i < st.rows(); ++i) pts.push_back({st(i, 0), st(i, 1)});
    strokes.push_back(std::move(pts));
  }
  return json{{"strokes", std::move(strokes)}};
}

inline StickmanSketch sketch_from_json(const json& j) {
  const json& arr = j.is_array() ? j : j.at("strokes");
  if (!arr.is_array()) throw InputError("strokes", "strokes must be a list");
  StickmanSketch s;
  for (const auto& stroke : arr) {
    if (!stroke.is_array()) throw InputError("strokes", "each stroke must be a list of [x, y] points");
    Matrix m(static_cast<Eigen::Index>(stroke.size()), 2);
    for (std::size_t i = 0; i < stroke.size(); ++i) {
      const auto& p = stroke[i];
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw InputError("strokes", "stroke points must be [x, y] number pairs");
      }
      m(static_cast<Eigen::Index>(i), 0) = p[0].get<double>();
      m(static_cast<Eigen::Index>(i), 1) = p[1].get<double>();
    }
    s.strokes.push_back(std::move(m));
  }
  s.validate();
  return s;
}

}  // namespace drawmotion
