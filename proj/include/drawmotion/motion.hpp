#pragma once

// Motion representation, the procedural motion dataset, trajectory/pose
// extraction and trajectory resampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/rng.hpp"

namespace drawmotion {

using json = nlohmann::json;

/// Raised for malformed configuration (unknown families, bad vocabularies, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed user input (bad tokens, shapes, frame indices, ...).
class InputError : public std::runtime_error {
 public:
  InputError(std::string field, const std::string& what) : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// ---------------------------------------------------------------------------
// Skeleton

enum Joint : int {
  kPelvis = 0,
  kNeck,
  kHead,
  kLeftShoulder,
  kLeftElbow,
  kLeftWrist,
  kRightShoulder,
  kRightElbow,
  kRightWrist,
  kLeftHip,
  kLeftKnee,
  kLeftAnkle,
  kLeftFoot,
  kRightHip,
  kRightKnee,
  kRightAnkle,
  kRightFoot,
  kJointCount
};

inline constexpr int kJoints = kJointCount;
inline constexpr int kBones = kJoints - 1;
inline constexpr double kDefaultFps = 20.0;

/// Fixed 17-joint toy skeleton. Local frame: +x body left, +y up, +z forward.
struct Skeleton {
  std::array<int, kJoints> parent{};
  std::array<double, kJoints> bone_length{};  // length of the bone ending at each joint; 0 for the root
  std::array<std::string_view, kJoints> names{};

  static const Skeleton& toy() {
    static const Skeleton s = [] {
      Skeleton k;
      k.parent = {kPelvis,    kPelvis,   kNeck,      kNeck,     kLeftShoulder, kLeftElbow,
                  kNeck,      kRightShoulder, kRightElbow, kPelvis, kLeftHip,  kLeftKnee,
                  kLeftAnkle, kPelvis,   kRightHip,  kRightKnee, kRightAnkle};
      k.bone_length = {0.0,  0.50, 0.15, 0.18, 0.28, 0.25, 0.18, 0.28, 0.25,
                       0.10, 0.42, 0.40, 0.15, 0.10, 0.42, 0.40, 0.15};
      k.names = {"pelvis",    "neck",       "head",        "left_shoulder", "left_elbow", "left_wrist",
                 "right_shoulder", "right_elbow", "right_wrist", "left_hip",    "left_knee",  "left_ankle",
                 "left_foot", "right_hip",  "right_knee",  "right_ankle",   "right_foot"};
      return k;
    }();
    return s;
  }

  /// Parent array acyclic with the pelvis as the only root; positive bone lengths.
  bool valid() const {
    if (parent[kPelvis] != kPelvis) return false;
    for (int j = 1; j < kJoints; ++j) {
      if (parent[j] == j || bone_length[j] <= 0.0) return false;
      int cur = j;
      for (int steps = 0; cur != kPelvis; ++steps) {
        if (steps > kJoints) return false;
        cur = parent[cur];
      }
    }
    return true;
  }

  /// Parent positions always precede children in joint order.
  static constexpr bool topologically_ordered() { return true; }
};

/// J x 3 joint positions.
using Pose = Matrix;

/// Offsets child - parent for joints 1..J-1, as a (J-1) x 3 matrix.
inline Matrix limb_offsets(const Pose& pose) {
  const auto& sk = Skeleton::toy();
  Matrix off(kBones, 3);
  for (int j = 1; j < kJoints; ++j) off.row(j - 1) = pose.row(j) - pose.row(sk.parent[j]);
  return off;
}

/// Inverse of limb_offsets with the pelvis at the origin.
inline Pose pose_from_offsets(const Matrix& offsets) {
  const auto& sk = Skeleton::toy();
  Pose p = Pose::Zero(kJoints, 3);
  for (int j = 1; j < kJoints; ++j) p.row(j) = p.row(sk.parent[j]) + offsets.row(j - 1);
  return p;
}

/// Largest |bone length - skeleton length| of a pose.
inline double bone_length_error(const Pose& pose) {
  const auto& sk = Skeleton::toy();
  double worst = 0.0;
  for (int j = 1; j < kJoints; ++j) {
    const double len = (pose.row(j) - pose.row(sk.parent[j])).norm();
    worst = std::max(worst, std::abs(len - sk.bone_length[j]));
  }
  return worst;
}

/// Rescales every bone of `pose` to the skeleton length, keeping directions.
inline Pose project_to_skeleton(const Pose& pose) {
  const auto& sk = Skeleton::toy();
  Pose out = Pose::Zero(kJoints, 3);
  for (int j = 1; j < kJoints; ++j) {
    Eigen::RowVector3d d = pose.row(j) - pose.row(sk.parent[j]);
    const double n = d.norm();
    if (n < 1e-12) d = Eigen::RowVector3d(0.0, -1.0, 0.0);
    else d /= n;
    out.row(j) = out.row(sk.parent[j]) + sk.bone_length[j] * d;
  }
  return out;
}

/// Joint angles driving the procedural pose generator (radians).
struct PoseAngles {
  double torso_lean = 0.0;  // forward pitch of the pelvis->neck bone
  double head_pitch = 0.0;
  double left_arm_abduction = 0.15;  // 0 = down, pi/2 = horizontal
  double left_arm_swing = 0.0;       // forward pitch
  double left_elbow = 0.2;
  double right_arm_abduction = 0.15;
  double right_arm_swing = 0.0;
  double right_elbow = 0.2;
  double left_hip_flex = 0.0;
  double left_knee = 0.0;
  double right_hip_flex = 0.0;
  double right_knee = 0.0;
};

namespace detail {
inline Eigen::RowVector3d unit(double x, double y, double z) {
  Eigen::RowVector3d v(x, y, z);
  return v / v.norm();
}

/// Rotates `u` toward +z by `angle` within the plane spanned by u and z.
inline Eigen::RowVector3d bend_forward(const Eigen::RowVector3d& u, double angle) {
  Eigen::RowVector3d w = Eigen::RowVector3d(0.0, 0.0, 1.0) - u.z() * u;
  if (w.norm() < 1e-9) w = Eigen::RowVector3d(0.0, 1.0, 0.0) - u.y() * u;
  w /= w.norm();
  return std::cos(angle) * u + std::sin(angle) * w;
}

inline Eigen::RowVector3d arm_direction(double abduction, double swing, double side) {
  return {side * std::cos(swing) * std::sin(abduction), -std::cos(swing) * std::cos(abduction), std::sin(swing)};
}
}  // namespace detail

/// Forward kinematics from angles; bone lengths match the skeleton exactly.
inline Pose pose_from_angles(const PoseAngles& a) {
  using detail::unit;
  const auto& sk = Skeleton::toy();
  std::array<Eigen::RowVector3d, kJoints> dir;
  dir[kPelvis] = Eigen::RowVector3d::Zero();
  dir[kNeck] = {0.0, std::cos(a.torso_lean), std::sin(a.torso_lean)};
  const double hp = a.torso_lean + a.head_pitch;
  dir[kHead] = {0.0, std::cos(hp), std::sin(hp)};
  dir[kLeftShoulder] = unit(1.0, -0.15, 0.0);
  dir[kRightShoulder] = unit(-1.0, -0.15, 0.0);
  dir[kLeftElbow] = detail::arm_direction(a.left_arm_abduction, a.left_arm_swing, 1.0);
  dir[kRightElbow] = detail::arm_direction(a.right_arm_abduction, a.right_arm_swing, -1.0);
  dir[kLeftWrist] = detail::bend_forward(dir[kLeftElbow], a.left_elbow);
  dir[kRightWrist] = detail::bend_forward(dir[kRightElbow], a.right_elbow);
  dir[kLeftHip] = unit(1.0, -0.2, 0.0);
  dir[kRightHip] = unit(-1.0, -0.2, 0.0);
  auto leg = [&](int hip, int knee, int ankle, int foot, double flex, double bend) {
    (void)hip;
    dir[knee] = {0.0, -std::cos(flex), std::sin(flex)};
    const double shin = flex - bend;
    dir[ankle] = {0.0, -std::cos(shin), std::sin(shin)};
    const Eigen::RowVector3d fwd(0.0, std::sin(shin), std::cos(shin));
    const Eigen::RowVector3d f = fwd + 0.3 * dir[ankle];
    dir[foot] = f / f.norm();
  };
  leg(kLeftHip, kLeftKnee, kLeftAnkle, kLeftFoot, a.left_hip_flex, a.left_knee);
  leg(kRightHip, kRightKnee, kRightAnkle, kRightFoot, a.right_hip_flex, a.right_knee);

  Pose p = Pose::Zero(kJoints, 3);
  for (int j = 1; j < kJoints; ++j) p.row(j) = p.row(sk.parent[j]) + sk.bone_length[j] * dir[j];
  return p;
}

/// Arms horizontal, legs straight.
inline Pose t_pose() {
  PoseAngles a;
  a.left_arm_abduction = std::numbers::pi / 2;
  a.right_arm_abduction = std::numbers::pi / 2;
  a.left_elbow = 0.0;
  a.right_elbow = 0.0;
  return pose_from_angles(a);
}

/// Rotation of a pose about the vertical axis by `yaw` radians.
inline Pose rotate_about_vertical(const Pose& pose, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Pose out = pose;
  for (Eigen::Index j = 0; j < pose.rows(); ++j) {
    const double x = pose(j, 0), z = pose(j, 2);
    out(j, 0) = c * x + s * z;
    out(j, 2) = -s * x + c * z;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Motion sequences

struct Trajectory2D {
  Matrix points;  // n x 2, planar (x, z) in meters
  std::optional<Vector> timestamps;

  Eigen::Index size() const { return points.rows(); }

  void validate() const {
    if (!points.allFinite()) throw InputError("trajectory", "trajectory has non-finite points");
    if (points.cols() != 2) throw InputError("trajectory", "trajectory points must be pairs");
    if (timestamps) {
      if (timestamps->size() != points.rows()) throw InputError("trajectory", "timestamp count mismatch");
      for (Eigen::Index i = 1; i < timestamps->size(); ++i) {
        if ((*timestamps)(i) <= (*timestamps)(i - 1)) {
          throw InputError("trajectory", "timestamps must be strictly increasing");
        }
      }
    }
  }
};

struct MotionSequence {
  double fps = kDefaultFps;
  Matrix root_xz;     // T x 2
  Vector root_yaw;    // T
  Matrix local_pose;  // T x (J*3), joint j at columns 3j..3j+2, root relative

  Eigen::Index frames() const { return root_xz.rows(); }

  Pose pose(Eigen::Index i) const {
    Pose p(kJoints, 3);
    for (int j = 0; j < kJoints; ++j) p.row(j) = local_pose.block(i, 3 * j, 1, 3);
    return p;
  }

  void set_pose(Eigen::Index i, const Pose& p) {
    for (int j = 0; j < kJoints; ++j) local_pose.block(i, 3 * j, 1, 3) = p.row(j);
  }

  static MotionSequence zeros(Eigen::Index frames, double fps = kDefaultFps) {
    MotionSequence m;
    m.fps = fps;
    m.root_xz = Matrix::Zero(frames, 2);
    m.root_yaw = Vector::Zero(frames);
    m.local_pose = Matrix::Zero(frames, kJoints * 3);
    return m;
  }

  /// Throws InputError naming the violated invariant.
  void validate(double bone_tol = 1e-6) const {
    const auto t = frames();
    if (t < 2) throw InputError("motion", "motion needs at least two frames");
    if (root_yaw.size() != t || local_pose.rows() != t || local_pose.cols() != kJoints * 3 || root_xz.cols() != 2) {
      throw InputError("motion", "motion arrays have inconsistent shapes");
    }
    if (!root_xz.allFinite() || !root_yaw.allFinite() || !local_pose.allFinite()) {
      throw InputError("motion", "motion has non-finite entries");
    }
    for (Eigen::Index i = 0; i < t; ++i) {
      if (bone_length_error(pose(i)) > bone_tol) throw InputError("motion", "bone lengths inconsistent with skeleton");
    }
  }
};

/// The planar root path, verbatim.
inline Trajectory2D extract_trajectory(const MotionSequence& m) { return Trajectory2D{m.root_xz, std::nullopt}; }

/// Root-relative pose of frame i.
inline Pose extract_pose(const MotionSequence& m, Eigen::Index i) {
  if (i < 0 || i >= m.frames()) throw std::out_of_range("extract_pose: frame index out of range");
  return m.pose(i);
}

inline MotionSequence static_clip(const Pose& pose, Eigen::Index frames, double fps = kDefaultFps) {
  MotionSequence m = MotionSequence::zeros(frames, fps);
  for (Eigen::Index i = 0; i < frames; ++i) m.set_pose(i, pose);
  return m;
}

// ---------------------------------------------------------------------------
// Motion features: [root_x, root_z, yaw, joints 1..J-1 xyz] = 3 + 48 channels.

inline constexpr int kMotionDim = 3 + 3 * kBones;
inline constexpr int kRootXChannel = 0;
inline constexpr int kRootZChannel = 1;
inline constexpr int kYawChannel = 2;
inline constexpr int kPoseChannel = 3;

inline Matrix to_features(const MotionSequence& m) {
  Matrix f(m.frames(), kMotionDim);
  f.col(kRootXChannel) = m.root_xz.col(0);
  f.col(kRootZChannel) = m.root_xz.col(1);
  f.col(kYawChannel) = m.root_yaw;
  f.rightCols(3 * kBones) = m.local_pose.rightCols(3 * kBones);
  return f;
}

/// Inverse of to_features. Bones are projected back onto skeleton lengths so
/// the result satisfies the motion invariants.
inline MotionSequence from_features(const Matrix& f, double fps = kDefaultFps) {
  MotionSequence m = MotionSequence::zeros(f.rows(), fps);
  m.root_xz.col(0) = f.col(kRootXChannel);
  m.root_xz.col(1) = f.col(kRootZChannel);
  m.root_yaw = f.col(kYawChannel);
  m.local_pose.rightCols(3 * kBones) = f.rightCols(3 * kBones);
  for (Eigen::Index i = 0; i < m.frames(); ++i) m.set_pose(i, project_to_skeleton(m.pose(i)));
  return m;
}

/// Per-channel affine normalization of motion features.
struct FeatureNormalizer {
  RowVector mean;
  RowVector stddev;

  static FeatureNormalizer identity() {
    return {RowVector::Zero(kMotionDim), RowVector::Ones(kMotionDim)};
  }

  /// Root channels share one isotropic scale and zero offset so trajectories
  /// keep their geometry after normalization.
  static FeatureNormalizer fit(const std::vector<Matrix>& features) {
    Eigen::Index rows = 0;
    for (const auto& f : features) rows += f.rows();
    if (rows < 2) throw ConfigError("normalizer needs data");
    Matrix all(rows, kMotionDim);
    Eigen::Index r = 0;
    for (const auto& f : features) {
      all.middleRows(r, f.rows()) = f;
      r += f.rows();
    }
    FeatureNormalizer n;
    n.mean = all.colwise().mean();
    n.stddev = ((all.rowwise() - n.mean).array().square().colwise().mean().sqrt()).matrix();
    const double root_scale = std::sqrt(all.leftCols(2).array().square().mean());
    n.mean(kRootXChannel) = 0.0;
    n.mean(kRootZChannel) = 0.0;
    n.stddev(kRootXChannel) = root_scale;
    n.stddev(kRootZChannel) = root_scale;
    for (Eigen::Index c = 0; c < kMotionDim; ++c) n.stddev(c) = std::max(n.stddev(c), 1e-3);
    return n;
  }

  Matrix normalize(const Matrix& f) const {
    return ((f.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
  }
  Matrix denormalize(const Matrix& f) const {
    Matrix out = (f.array().rowwise() * stddev.array()).matrix();
    out.rowwise() += mean;
    return out;
  }
  double root_scale() const { return stddev(kRootXChannel); }

  /// Trajectory points (meters) into the normalized root-channel space.
  Matrix normalize_trajectory(const Matrix& points) const { return points / root_scale(); }

  json to_json() const {
    return json{{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                {"stddev", std::vector<double>(stddev.data(), stddev.data() + stddev.size())}};
  }
  static FeatureNormalizer from_json(const json& j) {
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto s = j.at("stddev").get<std::vector<double>>();
    if (m.size() != kMotionDim || s.size() != kMotionDim) throw ConfigError("normalizer has wrong width");
    FeatureNormalizer n;
    n.mean = Eigen::Map<const RowVector>(m.data(), kMotionDim);
    n.stddev = Eigen::Map<const RowVector>(s.data(), kMotionDim);
    return n;
  }
};

// ---------------------------------------------------------------------------
// Trajectory resampling

enum class ResampleMode { uniform, density };

inline ResampleMode parse_resample_mode(std::string_view s) {
  if (s == "uniform") return ResampleMode::uniform;
  if (s == "density") return ResampleMode::density;
  throw InputError("resample_mode", "resample_mode must be 'uniform' or 'density'");
}

inline std::string to_string(ResampleMode m) { return m == ResampleMode::uniform ? "uniform" : "density"; }

/// Resamples a polyline to `count` points. Uniform mode spaces points equally
/// in arc length; density mode spaces them equally in raw sample index, so
/// regions drawn slowly (many samples) keep more output points.
inline Trajectory2D resample_trajectory(const Trajectory2D& raw, Eigen::Index count, ResampleMode mode) {
  const Eigen::Index n = raw.points.rows();
  if (n < 2) throw InputError("trajectory", "trajectory needs at least two points");
  if (count < 2) throw InputError("length", "resampled length must be at least 2");
  raw.validate();
  const Matrix& p = raw.points;
  Matrix out(count, 2);

  // Cumulative parameter per raw sample.
  Vector param(n);
  param(0) = 0.0;
  for (Eigen::Index i = 1; i < n; ++i) {
    param(i) = param(i - 1) + (mode == ResampleMode::uniform ? (p.row(i) - p.row(i - 1)).norm() : 1.0);
  }
  const double total = param(n - 1);
  if (total <= 0.0) {
    for (Eigen::Index k = 0; k < count; ++k) out.row(k) = p.row(0);
    return Trajectory2D{out, std::nullopt};
  }

  Eigen::Index seg = 0;
  for (Eigen::Index k = 0; k < count; ++k) {
    if (k == 0) {
      out.row(k) = p.row(0);
      continue;
    }
    if (k == count - 1) {
      out.row(k) = p.row(n - 1);
      continue;
    }
    const double target = total * static_cast<double>(k) / static_cast<double>(count - 1);
    while (seg < n - 2 && param(seg + 1) < target) ++seg;
    // skip zero-length segments
    while (seg < n - 2 && param(seg + 1) <= param(seg)) ++seg;
    const double len = param(seg + 1) - param(seg);
    const double u = len > 0.0 ? std::clamp((target - param(seg)) / len, 0.0, 1.0) : 0.0;
    out.row(k) = (1.0 - u) * p.row(seg) + u * p.row(seg + 1);
  }
  return Trajectory2D{out, std::nullopt};
}

// ---------------------------------------------------------------------------
// Procedural motion families

enum class MotionFamily {
  straight_walk,
  circular_walk,
  s_curve_walk,
  in_place_turn,
  squat,
  walk_left_arm_raise,
  walk_right_arm_raise,
  walk_then_stop,
};

inline const std::vector<std::pair<std::string, MotionFamily>>& family_names() {
  static const std::vector<std::pair<std::string, MotionFamily>> names = {
      {"straight_walk", MotionFamily::straight_walk},
      {"circular_walk", MotionFamily::circular_walk},
      {"s_curve_walk", MotionFamily::s_curve_walk},
      {"in_place_turn", MotionFamily::in_place_turn},
      {"squat", MotionFamily::squat},
      {"walk_left_arm_raise", MotionFamily::walk_left_arm_raise},
      {"walk_right_arm_raise", MotionFamily::walk_right_arm_raise},
      {"walk_then_stop", MotionFamily::walk_then_stop},
  };
  return names;
}

inline MotionFamily parse_family(std::string_view s) {
  for (const auto& [name, f] : family_names()) {
    if (name == s) return f;
  }
  throw ConfigError("unknown motion family '" + std::string(s) + "'");
}

inline std::string to_string(MotionFamily f) {
  for (const auto& [name, fam] : family_names()) {
    if (fam == f) return name;
  }
  return "unknown";
}

inline std::vector<std::string> all_family_names() {
  std::vector<std::string> v;
  for (const auto& [name, f] : family_names()) v.push_back(name);
  return v;
}

/// Caption templates per family. "{speed}" and "{side}" are filled from the clip.
inline const std::map<MotionFamily, std::vector<std::string>>& caption_templates() {
  static const std::map<MotionFamily, std::vector<std::string>> t = {
      {MotionFamily::straight_walk,
       {"a person walks forward {speed}", "someone walks straight ahead {speed}", "a person walks in a straight line"}},
      {MotionFamily::circular_walk,
       {"a person walks in a circle to the {side}", "someone walks around in a circle", "a person walks in a circle"}},
      {MotionFamily::s_curve_walk,
       {"a person walks in a zigzag path", "someone walks forward while weaving left and right",
        "a person walks along a curved path"}},
      {MotionFamily::in_place_turn,
       {"a person turns around in place", "someone turns to the {side} in place", "a person turns to the {side}"}},
      {MotionFamily::squat, {"a person squats down and stands up", "someone does squats", "a person squats"}},
      {MotionFamily::walk_left_arm_raise,
       {"a person walks forward with the left arm raised", "someone raises the left hand while walking",
        "a person walks and raises the left arm"}},
      {MotionFamily::walk_right_arm_raise,
       {"a person walks forward with the right arm raised", "someone raises the right hand while walking",
        "a person walks and raises the right arm"}},
      {MotionFamily::walk_then_stop,
       {"a person walks forward and then stops", "someone walks and comes to a stop", "a person walks then stops"}},
  };
  return t;
}

/// Token list the toy text encoder understands.
inline std::vector<std::string> default_vocabulary() {
  std::set<std::string> words = {"<pad>", "slowly", "quickly", "left", "right"};
  for (const auto& [fam, templates] : caption_templates()) {
    for (const auto& t : templates) {
      std::istringstream in(t);
      std::string w;
      while (in >> w) {
        if (w.front() != '{') words.insert(w);
      }
    }
  }
  return {words.begin(), words.end()};
}

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Parameters of one procedural clip.
struct ClipParams {
  MotionFamily family = MotionFamily::straight_walk;
  double speed = 1.0;                 // m/s
  double heading = 0.0;               // initial yaw (radians); forward = (sin, cos) in (x, z)
  Eigen::Vector2d start{0.0, 0.0};    // initial root position
  double radius = 2.0;                // circular walk
  int side = 1;                       // +1 left turn, -1 right turn
  double curve_amplitude = 0.6;       // s-curve heading amplitude
  double period = 2.0;                // s-curve / squat period (s)
  double turn_angle = std::numbers::pi;
  double stop_time = 1.5;             // walk_then_stop
  double phase = 0.0;                 // gait phase offset
};

namespace detail {

inline PoseAngles gait_angles(double gait_phase, double amplitude) {
  PoseAngles a;
  const double s = std::sin(gait_phase);
  a.left_hip_flex = amplitude * s;
  a.right_hip_flex = -amplitude * s;
  a.left_knee = 1.4 * amplitude * std::max(0.0, std::sin(gait_phase + std::numbers::pi / 2));
  a.right_knee = 1.4 * amplitude * std::max(0.0, std::sin(gait_phase - std::numbers::pi / 2));
  a.left_arm_swing = -0.8 * amplitude * s;
  a.right_arm_swing = 0.8 * amplitude * s;
  a.torso_lean = 0.05 + 0.1 * amplitude;
  return a;
}

inline double gait_amplitude(double speed) { return 0.32 * std::min(speed, 1.6); }

inline double gait_frequency(double speed) { return 0.6 + 0.5 * speed; }

}  // namespace detail

/// Samples a full clip of the given family. Deterministic in its inputs.
inline MotionSequence generate_clip(const ClipParams& p, Eigen::Index frames, double fps = kDefaultFps) {
  MotionSequence m = MotionSequence::zeros(frames, fps);
  const double v = p.speed;
  const double two_pi = 2.0 * std::numbers::pi;
  auto forward = [](double yaw) { return Eigen::Vector2d(std::sin(yaw), std::cos(yaw)); };

  for (Eigen::Index i = 0; i < frames; ++i) {
    const double t = static_cast<double>(i) / fps;
    Eigen::Vector2d pos = p.start;
    double yaw = p.heading;
    PoseAngles ang;
    double gait_phase = p.phase + two_pi * detail::gait_frequency(v) * t;
    double amp = detail::gait_amplitude(v);

    switch (p.family) {
      case MotionFamily::straight_walk:
      case MotionFamily::walk_left_arm_raise:
      case MotionFamily::walk_right_arm_raise:
        pos = p.start + v * t * forward(p.heading);
        ang = detail::gait_angles(gait_phase, amp);
        if (p.family == MotionFamily::walk_left_arm_raise) {
          ang.left_arm_abduction = 2.8;
          ang.left_arm_swing = 0.0;
          ang.left_elbow = 0.1;
        } else if (p.family == MotionFamily::walk_right_arm_raise) {
          ang.right_arm_abduction = 2.8;
          ang.right_arm_swing = 0.0;
          ang.right_elbow = 0.1;
        }
        break;
      case MotionFamily::circular_walk: {
        const double s = static_cast<double>(p.side);
        yaw = p.heading + s * v * t / p.radius;
        pos.x() = p.start.x() - s * p.radius * (std::cos(yaw) - std::cos(p.heading));
        pos.y() = p.start.y() + s * p.radius * (std::sin(yaw) - std::sin(p.heading));
        ang = detail::gait_angles(gait_phase, amp);
        break;
      }
      case MotionFamily::s_curve_walk: {
        // heading oscillates; integrate position with a fine midpoint rule
        auto heading_at = [&](double tt) { return p.heading + p.curve_amplitude * std::sin(two_pi * tt / p.period); };
        constexpr int kSub = 32;
        const double h = t / kSub;
        for (int k = 0; k < kSub; ++k) pos += v * h * forward(heading_at((k + 0.5) * h));
        yaw = heading_at(t);
        ang = detail::gait_angles(gait_phase, amp);
        break;
      }
      case MotionFamily::in_place_turn: {
        const double duration = static_cast<double>(frames - 1) / fps;
        const double u = duration > 0 ? std::clamp(t / duration, 0.0, 1.0) : 0.0;
        const double smooth = u * u * (3.0 - 2.0 * u);
        yaw = p.heading + static_cast<double>(p.side) * p.turn_angle * smooth;
        gait_phase = p.phase + two_pi * 1.2 * t;
        ang = detail::gait_angles(gait_phase, 0.12);
        break;
      }
      case MotionFamily::squat: {
        const double depth = 0.5 * (1.0 - std::cos(two_pi * t / p.period + p.phase * 0.0));
        ang.left_hip_flex = ang.right_hip_flex = 1.5 * depth;
        ang.left_knee = ang.right_knee = 2.0 * depth;
        ang.torso_lean = 0.05 + 0.55 * depth;
        ang.left_arm_swing = ang.right_arm_swing = 1.3 * depth;
        ang.left_elbow = ang.right_elbow = 0.2;
        break;
      }
      case MotionFamily::walk_then_stop: {
        constexpr double kDecel = 0.5;
        double dist = 0.0, cur_speed = v;
        if (t <= p.stop_time) {
          dist = v * t;
        } else if (t <= p.stop_time + kDecel) {
          const double dt = t - p.stop_time;
          dist = v * p.stop_time + v * dt - 0.5 * (v / kDecel) * dt * dt;
          cur_speed = v * (1.0 - dt / kDecel);
        } else {
          dist = v * p.stop_time + 0.5 * v * kDecel;
          cur_speed = 0.0;
        }
        pos = p.start + dist * forward(p.heading);
        ang = detail::gait_angles(gait_phase, detail::gait_amplitude(cur_speed) * (cur_speed > 0 ? 1.0 : 0.0));
        break;
      }
    }
    m.root_xz(i, 0) = pos.x();
    m.root_xz(i, 1) = pos.y();
    m.root_yaw(i) = yaw;
    m.set_pose(i, pose_from_angles(ang));
  }
  return m;
}

struct DatasetConfig {
  std::uint64_t seed = 0;
  int sample_count = 100;
  std::vector<std::string> families = all_family_names();
  int frames = 60;
  double fps = kDefaultFps;
  std::vector<std::string> vocabulary = default_vocabulary();

  void validate() const {
    if (sample_count <= 0) throw ConfigError("sample_count must be positive");
    if (families.empty()) throw ConfigError("families must be non-empty");
    if (frames < 2) throw ConfigError("frames must be at least 2");
    const std::set<std::string> vocab(vocabulary.begin(), vocabulary.end());
    for (const auto& name : families) {
      const MotionFamily f = parse_family(name);
      const auto it = caption_templates().find(f);
      if (it == caption_templates().end() || it->second.empty()) throw ConfigError("family without caption: " + name);
      for (const auto& templ : it->second) {
        for (const auto& w : tokenize(templ)) {
          if (w.front() == '{') continue;
          if (!vocab.contains(w)) throw ConfigError("caption word '" + w + "' missing from vocabulary");
        }
      }
    }
    for (const char* w : {"slowly", "quickly", "left", "right"}) {
      if (!vocab.contains(w)) throw ConfigError(std::string("vocabulary lacks '") + w + "'");
    }
  }
};

struct MotionClip {
  MotionSequence motion;
  std::vector<std::string> caption;
  MotionFamily family = MotionFamily::straight_walk;
};

/// Draws the parameters of sample `index`. Each sample owns an RNG stream
/// derived from (seed, index), so any partition of the index range
/// reproduces the same clips.
inline ClipParams sample_clip_params(MotionFamily family, Rng& rng) {
  ClipParams p;
  p.family = family;
  p.speed = rng.uniform(0.8, 1.5);
  p.heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
  p.start = Eigen::Vector2d(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  p.radius = rng.uniform(1.5, 3.0);
  p.side = rng.bernoulli(0.5) ? 1 : -1;
  p.curve_amplitude = rng.uniform(0.4, 0.8);
  p.period = rng.uniform(1.5, 2.8);
  p.turn_angle = rng.uniform(std::numbers::pi / 2, std::numbers::pi);
  p.stop_time = rng.uniform(1.0, 2.0);
  p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return p;
}

inline std::vector<std::string> make_caption(const ClipParams& p, Rng& rng) {
  const auto& templates = caption_templates().at(p.family);
  const std::string& templ = templates[rng.index(templates.size())];
  std::vector<std::string> out;
  for (auto& w : tokenize(templ)) {
    if (w == "{speed}") {
      if (p.speed < 1.0) out.emplace_back("slowly");
      else if (p.speed > 1.3) out.emplace_back("quickly");
    } else if (w == "{side}") {
      out.emplace_back(p.side > 0 ? "left" : "right");
    } else {
      out.push_back(std::move(w));
    }
  }
  return out;
}

inline MotionClip generate_sample(const DatasetConfig& cfg, std::size_t index) {
  Rng rng(derive_seed(cfg.seed, index));
  const MotionFamily family = parse_family(cfg.families[index % cfg.families.size()]);
  const ClipParams params = sample_clip_params(family, rng);
  MotionClip clip;
  clip.family = family;
  clip.motion = generate_clip(params, cfg.frames, cfg.fps);
  clip.caption = make_caption(params, rng);
  return clip;
}

/// Generates samples [begin, end) of the dataset.
inline std::vector<MotionClip> generate_partition(const DatasetConfig& cfg, std::size_t begin, std::size_t end) {
  std::vector<MotionClip> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

inline std::vector<MotionClip> generate_synthetic_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  return generate_partition(cfg, 0, static_cast<std::size_t>(cfg.sample_count));
}

// ---------------------------------------------------------------------------
// Motion clip record (structured text). Field names are documented in
// docs/formats.md.

inline constexpr int kMotionFormatVersion = 1;
inline constexpr const char* kSkeletonId = "toy17";

inline json motion_to_json(const MotionSequence& m, const std::vector<std::string>& caption = {}) {
  json root_xz = json::array(), yaw = json::array(), pose = json::array();
  for (Eigen::Index i = 0; i < m.frames(); ++i) {
    root_xz.push_back({m.root_xz(i, 0), m.root_xz(i, 1)});
    yaw.push_back(m.root_yaw(i));
    json frame = json::array();
    for (int j = 0; j < kJoints; ++j) {
      frame.push_back({m.local_pose(i, 3 * j), m.local_pose(i, 3 * j + 1), m.local_pose(i, 3 * j + 2)});
    }
    pose.push_back(std::move(frame));
  }
  return json{{"version", kMotionFormatVersion},
              {"fps", m.fps},
              {"skeleton", kSkeletonId},
              {"frames", m.frames()},
              {"root_xz", std::move(root_xz)},
              {"root_yaw", std::move(yaw)},
              {"local_pose", std::move(pose)},
              {"caption", caption}};
}

inline MotionSequence motion_from_json(const json& j, std::vector<std::string>* caption = nullptr) {
  if (j.value("version", 0) != kMotionFormatVersion) throw InputError("motion", "unsupported motion record version");
  if (j.value("skeleton", "") != kSkeletonId) throw InputError("motion", "unknown skeleton id");
  const auto frames = j.at("frames").get<Eigen::Index>();
  MotionSequence m = MotionSequence::zeros(frames, j.at("fps").get<double>());
  const auto& xz = j.at("root_xz");
  const auto& yaw = j.at("root_yaw");
  const auto& pose = j.at("local_pose");
  if (static_cast<Eigen::Index>(xz.size()) != frames || static_cast<Eigen::Index>(yaw.size()) != frames ||
      static_cast<Eigen::Index>(pose.size()) != frames) {
    throw InputError("motion", "motion record arrays disagree with frame count");
  }
  for (Eigen::Index i = 0; i < frames; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    m.root_xz(i, 0) = xz[ui].at(0).get<double>();
    m.root_xz(i, 1) = xz[ui].at(1).get<double>();
    m.root_yaw(i) = yaw[ui].get<double>();
    if (pose[ui].size() != kJoints) throw InputError("motion", "pose frame has wrong joint count");
    for (int j2 = 0; j2 < kJoints; ++j2) {
      for (int c = 0; c < 3; ++c) m.local_pose(i, 3 * j2 + c) = pose[ui][static_cast<std::size_t>(j2)].at(c).get<double>();
    }
  }
  if (caption != nullptr) *caption = j.value("caption", std::vector<std::string>{});
  return m;
}

inline json dataset_to_json(const DatasetConfig& cfg, const std::vector<MotionClip>& clips) {
  json arr = json::array();
  for (const auto& c : clips) {
    json rec = motion_to_json(c.motion, c.caption);
    rec["family"] = to_string(c.family);
    arr.push_back(std::move(rec));
  }
  return json{{"version", kMotionFormatVersion},
              {"seed", cfg.seed},
              {"sample_count", cfg.sample_count},
              {"families", cfg.families},
              {"vocabulary", cfg.vocabulary},
              {"clips", std::move(arr)}};
}

inline std::vector<MotionClip> dataset_from_json(const json& j) {
  std::vector<MotionClip> clips;
  for (const auto& rec : j.at("clips")) {
    MotionClip c;
    c.motion = motion_from_json(rec, &c.caption);
    c.family = parse_family(rec.value("family", "straight_walk"));
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace drawmotion
