#pragma once

// Intermediate feature guidance: feature statistics, Mahalanobis distance,
// the MD clip rule, the masked guidance loss and the guided noise step.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "drawmotion/diffusion.hpp"
#include "drawmotion/mcm.hpp"

namespace drawmotion {

inline constexpr double kRidgeFraction = 1e-6;
inline constexpr double kRankDeficientRidgeFraction = 1e-3;
inline constexpr double kRidgeFloor = 1e-9;

/// Per-token feature statistics pooled over frames, samples and timesteps.
/// Accumulation is streaming and partial results merge exactly.
class FeatureStats {
 public:
  FeatureStats() = default;
  explicit FeatureStats(Eigen::Index dim) : mean_(RowVector::Zero(dim)), scatter_(Matrix::Zero(dim, dim)) {}

  Eigen::Index dim() const { return mean_.size(); }
  double count() const { return count_; }
  const RowVector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  const Matrix& covariance_inverse() const { return cov_inv_; }
  double ridge() const { return ridge_; }
  bool rank_warning() const { return rank_warning_; }
  int layer_index() const { return layer_; }
  void set_layer_index(int l) { layer_ = l; }
  bool finalized() const { return cov_inv_.size() > 0; }

  /// Adds the rows of `features` (n x dim).
  void add(const Matrix& features) {
    if (features.cols() != dim()) throw std::invalid_argument("FeatureStats::add: width mismatch");
    if (features.rows() == 0) return;
    const double n = static_cast<double>(features.rows());
    const RowVector m = features.colwise().mean();
    const Matrix centered = features.rowwise() - m;
    Matrix s = centered.transpose() * centered;
    merge_moments(n, m, s);
  }

  void merge(const FeatureStats& other) {
    if (other.dim() != dim()) throw std::invalid_argument("FeatureStats::merge: width mismatch");
    if (other.count_ == 0.0) return;
    merge_moments(other.count_, other.mean_, other.scatter_);
  }

  /// Sample covariance plus a ridge of 1e-6 * trace / dim (1e-3 when fewer
  /// than dim + 1 rows were seen), and its inverse.
  void finalize() {
    if (count_ < 2.0) throw std::runtime_error("FeatureStats needs at least two samples");
    const auto e = static_cast<double>(dim());
    Matrix cov = scatter_ / (count_ - 1.0);
    cov = 0.5 * (cov + cov.transpose()).eval();
    rank_warning_ = count_ < e + 1.0;
    const double frac = rank_warning_ ? kRankDeficientRidgeFraction : kRidgeFraction;
    ridge_ = std::max(frac * cov.trace() / e, kRidgeFloor);
    cov.diagonal().array() += ridge_;
    cov_ = cov;
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov_);
    const Vector inv = es.eigenvalues().cwiseInverse();
    cov_inv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    cov_inv_ = 0.5 * (cov_inv_ + cov_inv_.transpose()).eval();
  }

  /// Stats from explicit moments (mainly for tests and fixtures).
  static FeatureStats from_moments(const RowVector& mean, const Matrix& covariance) {
    FeatureStats s(mean.size());
    s.mean_ = mean;
    s.count_ = static_cast<double>(mean.size()) + 1.0;
    s.cov_ = covariance;
    s.cov_inv_ = covariance.inverse();
    return s;
  }

  json to_json() const {
    return {{"format", "drawmotion-feature-stats"}, {"version", 1},          {"layer_index", layer_},
            {"count", count_},                      {"ridge", ridge_},       {"rank_warning", rank_warning_},
            {"mean", nn::matrix_to_json(mean_)},    {"scatter", nn::matrix_to_json(scatter_)}};
  }

  static FeatureStats from_json(const json& j) {
    if (j.value("format", "") != "drawmotion-feature-stats") throw std::runtime_error("not a feature stats record");
    FeatureStats s;
    s.layer_ = j.at("layer_index").get<int>();
    s.count_ = j.at("count").get<double>();
    s.mean_ = nn::matrix_from_json(j.at("mean")).row(0);
    s.scatter_ = nn::matrix_from_json(j.at("scatter"));
    s.finalize();
    return s;
  }

 private:
  void merge_moments(double n, const RowVector& m, const Matrix& s) {
    const double total = count_ + n;
    const RowVector delta = m - mean_;
    scatter_ += s + (delta.transpose() * delta) * (count_ * n / total);
    mean_ += delta * (n / total);
    count_ = total;
  }

  RowVector mean_;
  Matrix scatter_;
  Matrix cov_;
  Matrix cov_inv_;
  double count_ = 0.0;
  double ridge_ = 0.0;
  bool rank_warning_ = false;
  int layer_ = 3;
};

/// Mean over rows of sqrt((f - mu)^T Sigma^-1 (f - mu)).
inline double mahalanobis(const Matrix& features, const FeatureStats& stats) {
  if (features.cols() != stats.dim()) throw std::invalid_argument("mahalanobis: width mismatch");
  const Matrix d = features.rowwise() - stats.mean();
  const Matrix w = d * stats.covariance_inverse();
  double total = 0.0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) total += std::sqrt(std::max(0.0, d.row(i).dot(w.row(i))));
  return total / static_cast<double>(d.rows());
}

struct ClipResult {
  Matrix features;
  bool clipped = false;
};

/// If the update moved the features more than eps_md further from the
/// distribution than the original, pull it back to F + lambda (F_upd - F).
inline ClipResult md_clip(const Matrix& f_orig, const Matrix& f_upd, const FeatureStats& stats, double eps_md,
                          double lambda) {
  if (f_orig.rows() != f_upd.rows() || f_orig.cols() != f_upd.cols()) throw std::invalid_argument("md_clip: shape mismatch");
  if (mahalanobis(f_upd, stats) > mahalanobis(f_orig, stats) + eps_md) {
    return {f_orig + lambda * (f_upd - f_orig), true};
  }
  return {f_upd, false};
}

/// 1 / (number of guided entries), or 0 for an empty mask.
inline double guidance_scale(const Matrix& mask) {
  const double m = (mask.array() != 0.0).count();
  return m > 0.0 ? 1.0 / m : 0.0;
}

/// Squared error over masked entries, averaged over those entries so the
/// step size does not depend on how many frames and channels are guided.
inline double guidance_loss(const Matrix& x0_hat, const Matrix& target, const Matrix& mask) {
  if (x0_hat.rows() != target.rows() || x0_hat.cols() != target.cols() || mask.rows() != target.rows() ||
      mask.cols() != target.cols()) {
    throw std::invalid_argument("guidance_loss: shape mismatch");
  }
  return (x0_hat - target).cwiseProduct(mask).squaredNorm() * guidance_scale(mask);
}

struct GuidanceConfig {
  int layer_index = 3;  // 1-based MCM layer whose fusion output is optimized
  int repeat = 10;
  double lr = 50.0;
  double eps_md = 1.0;
  double clip_scale = 0.01;
  bool use_md_clip = true;
  Matrix target;  // T x D in normalized feature units
  Matrix mask;    // T x D, 1 where the target applies

  void validate(const McmModel& model) const {
    if (layer_index < 1 || layer_index > model.layer_count()) throw InputError("guidance.layer_index", "layer index out of range");
    if (repeat < 0) throw InputError("guidance.repeat", "repeat must be non-negative");
    if (!(lr > 0.0)) throw InputError("guidance.lr", "learning rate must be positive");
    if (clip_scale < -1.0 || clip_scale > 1.0) throw InputError("guidance.clip_scale", "clip scale must lie in [-1, 1]");
    if (target.size() == 0 || target.rows() != mask.rows() || target.cols() != mask.cols()) {
      throw InputError("guidance.target", "guidance target and mask must have the motion shape");
    }
  }

  json hyper_to_json() const {
    return {{"layer_index", layer_index}, {"repeat", repeat},         {"lr", lr},
            {"eps_md", eps_md},           {"clip_scale", clip_scale}, {"md_clip", use_md_clip}};
  }
};

/// Root-channel target for a trajectory given in meters.
inline void set_trajectory_target(GuidanceConfig& g, const McmModel& model, const Matrix& trajectory_m) {
  const Eigen::Index frames = trajectory_m.rows();
  g.target = Matrix::Zero(frames, kMotionDim);
  g.mask = Matrix::Zero(frames, kMotionDim);
  g.target.middleCols(kRootXChannel, 2) = model.normalizer().normalize_trajectory(trajectory_m);
  g.mask.middleCols(kRootXChannel, 2).setOnes();
}

// ---------------------------------------------------------------------------
// Model split at a fusion output

/// Model^1: embedding and layers up to and including the fusion of layer
/// `n` (1-based). Returns the fusion output.
inline Var model_until_fusion(const McmModel& model, Tape& t, const Var& x, int timestep, const CondVars& c, int n) {
  Var h = model.embed_motion(t, x, timestep);
  for (int l = 0; l < n; ++l) {
    if (l > 0) h = model.latent(t, l - 1, h);
    h = model.fuse(t, l, h, c);
  }
  return h;
}

/// Model^2: the rest of the network from the fusion output of layer `n`,
/// returning the noise prediction for x_t.
inline Var model_from_fusion(const McmModel& model, Tape& t, const Var& f, const Var& x_t, int timestep,
                             const CondVars& c, int n) {
  Var h = model.latent(t, n - 1, f);
  for (int l = n; l < model.layer_count(); ++l) {
    h = model.fuse(t, l, h, c);
    h = model.latent(t, l, h);
  }
  return model.output(t, h, x_t, timestep);
}

/// Guidance loss of the clean-motion estimate implied by fusion features
/// `f` of layer g.layer_index, recorded on `t`.
inline Var guidance_objective(const McmModel& model, Tape& t, const Var& f, const Matrix& x_t, int timestep,
                              double alpha_bar, const CondVars& c, const GuidanceConfig& g) {
  const Var eps = model_from_fusion(model, t, f, t.constant(x_t), timestep, c, g.layer_index);
  const Var x0 = ad::scale(ad::sub(t.constant(x_t), ad::scale(eps, std::sqrt(1.0 - alpha_bar))), 1.0 / std::sqrt(alpha_bar));
  const Var err = ad::mul(ad::sub(x0, t.constant(g.target)), t.constant(g.mask));
  return ad::scale(ad::square_sum(err), guidance_scale(g.mask));
}

struct GuidedStep {
  Matrix eps;
  std::vector<double> losses;  // loss before each SGD update, then the final loss
  std::vector<bool> clipped;
  int skipped = 0;
};

/// One ladder step of guidance: F is extracted once, then `repeat` SGD
/// updates on F-bar through Model^2 with MD clipping against the original F.
inline GuidedStep guided_noise(const McmModel& model, const Matrix& x_t, int timestep, double alpha_bar,
                               const CondValues& cond, const GuidanceConfig& g, const FeatureStats* stats) {
  GuidedStep out;
  const int n = g.layer_index;
  Matrix f;
  {
    Tape t(false);
    const CondVars c = cond.on(t);
    f = model_until_fusion(model, t, t.constant(x_t), timestep, c, n).value();
  }
  Matrix f_bar = f;
  for (int r = 0; r < g.repeat; ++r) {
    Tape t(true, false);
    const Var fv = t.leaf(f_bar);
    const Var loss = guidance_objective(model, t, fv, x_t, timestep, alpha_bar, cond.on(t), g);
    t.backward(loss);
    out.losses.push_back(loss.scalar());
    const Matrix& grad = fv.grad();
    if (grad.size() == 0 || !grad.allFinite()) {
      ++out.skipped;
      out.clipped.push_back(false);
      continue;
    }
    Matrix upd = f_bar - g.lr * grad;
    if (g.use_md_clip && stats != nullptr) {
      ClipResult cr = md_clip(f, upd, *stats, g.eps_md, g.clip_scale);
      upd = std::move(cr.features);
      out.clipped.push_back(cr.clipped);
    } else {
      out.clipped.push_back(false);
    }
    f_bar = std::move(upd);
  }
  Tape t(false);
  const CondVars c = cond.on(t);
  out.eps = model_from_fusion(model, t, t.constant(f_bar), t.constant(x_t), timestep, c, n).value();
  out.losses.push_back(guidance_loss(predict_x0(x_t, alpha_bar, out.eps), g.target, g.mask));
  return out;
}

}  // namespace drawmotion
