#pragma once

// Metrics, the toy contrastive feature extractor, the feature perturbation
// experiment, the PCA diagnostic and the fusion cost comparison.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "drawmotion/mcm.hpp"
#include "drawmotion/sampler.hpp"
#include "drawmotion/stickman_codec.hpp"

namespace drawmotion {

// ---------------------------------------------------------------------------
// Trajectory and stickman metrics

/// Mean per-frame planar distance between the generated root path and the target.
inline double traj_err(const MotionSequence& generated, const Trajectory2D& target) {
  if (generated.frames() != target.size()) throw std::invalid_argument("traj_err: frame count mismatch");
  return (extract_trajectory(generated).points - target.points).rowwise().norm().mean();
}

/// Largest per-frame planar distance.
inline double traj_max_err(const MotionSequence& generated, const Trajectory2D& target) {
  if (generated.frames() != target.size()) throw std::invalid_argument("traj_err: frame count mismatch");
  return (extract_trajectory(generated).points - target.points).rowwise().norm().maxCoeff();
}

/// Fraction of clips whose root path strays beyond `threshold` meters at any frame.
inline double traj_fail_ratio(const std::vector<double>& max_errors, double threshold = 0.5) {
  if (max_errors.empty()) return 0.0;
  const auto fails = std::count_if(max_errors.begin(), max_errors.end(), [&](double e) { return e > threshold; });
  return static_cast<double>(fails) / static_cast<double>(max_errors.size());
}

inline constexpr double kStiSimScale = 0.5;

inline double sti_sim_from_rmse(double rmse) { return 100.0 * std::max(0.0, 1.0 - rmse / kStiSimScale); }

/// Limb-offset RMSE between a pose and the candidate closest to it.
inline double best_candidate_pose_rmse(const Pose& pose, const CandidatePoses& candidates) {
  const Matrix gt = limb_offsets(pose);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates.offsets) best = std::min(best, (c - gt).squaredNorm());
  return std::sqrt(best / static_cast<double>(gt.size()));
}

/// Similarity in percent between a generated pose and a sketch, through the
/// decoded candidate closest to the pose.
inline double sti_sim(const Pose& generated, const StickmanSketch& sketch, const StickmanCodec& codec) {
  return sti_sim_from_rmse(best_candidate_pose_rmse(generated, codec.decode_candidates(codec.encode(sketch))));
}

// ---------------------------------------------------------------------------
// Distribution metrics

struct Gaussian {
  RowVector mean;
  Matrix cov;
};

inline Gaussian fit_gaussian(const Matrix& features) {
  if (features.rows() < 2) throw std::invalid_argument("fit_gaussian: need at least two samples");
  Gaussian g;
  g.mean = features.colwise().mean();
  const Matrix c = features.rowwise() - g.mean;
  g.cov = (c.transpose() * c) / static_cast<double>(features.rows() - 1);
  return g;
}

/// Frechet distance between two Gaussians. The trace of (S1 S2)^(1/2) is
/// taken from the eigenvalues of the symmetric product S1^(1/2) S2 S1^(1/2).
inline double frechet_distance(const RowVector& mu1, const Matrix& s1, const RowVector& mu2, const Matrix& s2) {
  Eigen::SelfAdjointEigenSolver<Matrix> e1(0.5 * (s1 + s1.transpose()));
  const Vector l1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix root1 = e1.eigenvectors() * l1.asDiagonal() * e1.eigenvectors().transpose();
  const Matrix prod = root1 * s2 * root1;
  Eigen::SelfAdjointEigenSolver<Matrix> ep(0.5 * (prod + prod.transpose()));
  const Vector ev = ep.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8 * scale) throw std::runtime_error("fid_like: covariance product is not positive semidefinite");
    tr_sqrt += std::sqrt(std::max(0.0, ev(i)));
  }
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

inline double fid_like(const Matrix& real, const Matrix& generated) {
  if (real.cols() != generated.cols()) throw std::invalid_argument("fid_like: feature width mismatch");
  const Gaussian a = fit_gaussian(real);
  const Gaussian b = fit_gaussian(generated);
  return frechet_distance(a.mean, a.cov, b.mean, b.cov);
}

/// Mean distance over `pair_count` disjoint random pairs.
inline double diversity(const Matrix& features, std::size_t pair_count, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (n < 2 * pair_count) throw std::invalid_argument("diversity: need at least 2 * pair_count samples");
  if (pair_count == 0) return 0.0;
  Rng rng(seed);
  const std::vector<std::size_t> perm = rng.permutation(n);
  double total = 0.0;
  for (std::size_t i = 0; i < pair_count; ++i) {
    total += (features.row(static_cast<Eigen::Index>(perm[2 * i])) - features.row(static_cast<Eigen::Index>(perm[2 * i + 1]))).norm();
  }
  return total / static_cast<double>(pair_count);
}

// ---------------------------------------------------------------------------
// Feature perturbation

/// Seed-deterministic cyclic permutation (no fixed points for n >= 2).
inline std::vector<std::size_t> cyclic_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i - 1)]);
  return p;
}

/// F + lambda (F_perm - F) with F_perm a seed-deterministic row shuffle of F.
inline Matrix perturb_features(const Matrix& f, double lambda, std::uint64_t seed) {
  if (f.rows() < 2) throw std::invalid_argument("perturb_features: need at least two rows");
  const auto perm = cyclic_permutation(static_cast<std::size_t>(f.rows()), seed);
  Matrix shuffled(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < f.rows(); ++i) shuffled.row(i) = f.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));
  return f + lambda * (shuffled - f);
}

/// Same rule applied to a batch of per-sample feature matrices.
inline void perturb_batch(std::vector<Matrix>& f, double lambda, std::uint64_t seed) {
  if (f.size() < 2) return;
  const auto perm = cyclic_permutation(f.size(), seed);
  std::vector<Matrix> out;
  out.reserve(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out.push_back(f[i] + lambda * (f[perm[i]] - f[i]));
  f = std::move(out);
}

enum class PerturbSite { mcm_fusion, final_layer };

inline std::string to_string(PerturbSite s) { return s == PerturbSite::mcm_fusion ? "mcm_fusion" : "final_layer"; }

/// Hook that perturbs the chosen site at every ladder step. The fusion site
/// is the fusion output of `fusion_layer` (1-based).
inline FeatureHook perturbation_hook(PerturbSite site, double lambda, std::uint64_t seed, int fusion_layer = 3) {
  const int target = site == PerturbSite::mcm_fusion ? fusion_layer - 1 : kHeadSite;
  return [=](int layer, Segment seg, int timestep, std::vector<Matrix>& f) {
    if (layer != target) return;
    perturb_batch(f, lambda,
                  derive_seed(seed, static_cast<std::uint64_t>(timestep) * 8 + static_cast<std::uint64_t>(seg)));
  };
}

// ---------------------------------------------------------------------------
// PCA diagnostic

/// Smallest k whose leading eigenvalues explain at least `fraction` of the total.
inline int intrinsic_dim_from_eigenvalues(Vector ev, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("variance fraction must lie in (0, 1)");
  ev = ev.cwiseMax(0.0);
  std::sort(ev.data(), ev.data() + ev.size(), std::greater<>());
  const double total = ev.sum();
  if (total <= 0.0) return 0;
  double acc = 0.0;
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    acc += ev(k);
    if (acc >= fraction * total * (1.0 - 1e-12)) return static_cast<int>(k + 1);
  }
  return static_cast<int>(ev.size());
}

inline int pca_intrinsic_dim_cov(const Matrix& cov, double fraction) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (cov + cov.transpose()));
  return intrinsic_dim_from_eigenvalues(es.eigenvalues(), fraction);
}

inline int pca_intrinsic_dim(const Matrix& features, double fraction) {
  if (features.rows() < 2) throw std::invalid_argument("pca_intrinsic_dim: need n > 1");
  return pca_intrinsic_dim_cov(fit_gaussian(features).cov, fraction);
}

// ---------------------------------------------------------------------------
// Fusion cost: segment routing against one masked self-attention

struct FusionFlops {
  std::uint64_t mcm = 0;
  std::uint64_t masked = 0;
};

inline std::uint64_t draw_decoder_macs(std::uint64_t t, std::uint64_t e) {
  // Q, O projections on T tokens; K, V on 2T; scores and mixing over T x 2T
  return 2 * t * e * e + 2 * (2 * t) * e * e + 2 * t * (2 * t) * e;
}

inline std::uint64_t text_decoder_macs(std::uint64_t t, std::uint64_t l, std::uint64_t e) {
  // Q, O on T tokens; K, V on T + L; K^T V over T + L; Q (K^T V) over T
  return 2 * t * e * e + 2 * (t + l) * e * e + (t + l) * e * e + t * e * e;
}

/// Multiply-adds of one fusion layer for a batch holding one sample per
/// segment (text+draw, text, draw, none). The masked baseline runs one
/// self-attention over the 3T + L motion, trajectory, stickman and text
/// tokens of every sample.
inline FusionFlops masked_attention_baseline_flops(std::uint64_t t, std::uint64_t l, std::uint64_t e) {
  if (t == 0 || l == 0 || e == 0) throw std::invalid_argument("dimensions must be positive");
  FusionFlops f;
  f.mcm = 2 * draw_decoder_macs(t, e) + 2 * text_decoder_macs(t, l, e);
  const std::uint64_t n = 3 * t + l;
  f.masked = 4 * (4 * n * e * e + 2 * n * n * e);
  return f;
}

/// Masked self-attention fusion over [motion; trajectory; stickmen; text]
/// tokens; absent conditions are masked out of the keys.
struct MaskedAttentionFusion {
  nn::ParamStore store;
  nn::Linear q, k, v, o;

  static MaskedAttentionFusion create(Eigen::Index e, std::uint64_t seed) {
    MaskedAttentionFusion m;
    Rng rng(seed);
    m.q = nn::Linear::create(m.store, "q", e, e, rng);
    m.k = nn::Linear::create(m.store, "k", e, e, rng);
    m.v = nn::Linear::create(m.store, "v", e, e, rng);
    m.o = nn::Linear::create(m.store, "o", e, e, rng);
    return m;
  }

  Var operator()(Tape& t, const Var& h, const Var& ej, const Var& es, const Var& et, bool text, bool draw) const {
    const Var parts[] = {h, ej, es, et};
    const Var tokens = ad::concat_rows(std::span<const Var>(parts));
    const Eigen::Index frames = h.rows();
    Matrix bias = Matrix::Zero(tokens.rows(), tokens.rows());
    if (!draw) bias.middleCols(frames, 2 * frames).setConstant(-1e9);
    if (!text) bias.rightCols(et.rows()).setConstant(-1e9);
    const double s = 1.0 / std::sqrt(static_cast<double>(h.cols()));
    const Var scores = ad::add(ad::scale(ad::matmul_nt(q(t, tokens), k(t, tokens)), s), t.constant(bias));
    const Var out = o(t, ad::matmul(ad::softmax_rows(scores), v(t, tokens)));
    return ad::add(h, ad::slice_rows(out, 0, frames));
  }
};

/// Counted multiply-adds for one fusion layer of `model` and of the masked
/// baseline on the same four-segment batch.
inline FusionFlops counted_fusion_macs(const McmModel& model, Eigen::Index frames, Eigen::Index text_len,
                                       std::uint64_t seed) {
  const Eigen::Index e = model.config().embed_dim;
  Rng rng(seed);
  auto random = [&](Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
  };
  Tape t(false);
  std::vector<Var> h;
  std::vector<CondVars> conds;
  const Var ej = t.constant(random(frames, e)), es = t.constant(random(frames, e)), et = t.constant(random(text_len, e));
  for (Segment s : kSegments) {
    h.push_back(t.constant(random(frames, e)));
    CondVars c;
    if (has_text(s)) c.et = et;
    if (has_draw(s)) {
      c.ej = ej;
      c.es = es;
    }
    conds.push_back(c);
  }
  FusionFlops f;
  {
    ad::CountScope scope;
    model.condition_fusion(t, 0, h, conds);
    f.mcm = scope.macs();
  }
  const MaskedAttentionFusion masked = MaskedAttentionFusion::create(e, seed);
  {
    ad::CountScope scope;
    for (std::size_t i = 0; i < h.size(); ++i) {
      masked(t, h[i], ej, es, et, has_text(kSegments[i]), has_draw(kSegments[i]));
    }
    f.masked = scope.macs();
  }
  return f;
}

// ---------------------------------------------------------------------------
// Toy contrastive evaluator

inline constexpr int kEvalFeatureDim = 32;
inline constexpr int kInvariantDim = 3 + 3 * kBones;

/// Per-frame features independent of the start position and heading: planar
/// root velocity in the body frame, yaw rate, local pose.
inline Matrix invariant_features(const MotionSequence& m) {
  const Eigen::Index t = m.frames();
  Matrix f(t, kInvariantDim);
  for (Eigen::Index i = 0; i < t; ++i) {
    const Eigen::Index a = i + 1 < t ? i : i - 1;
    const Eigen::Vector2d d = (m.root_xz.row(a + 1) - m.root_xz.row(a)).transpose() * m.fps;
    const double yaw = m.root_yaw(a);
    // body frame: forward = (sin yaw, cos yaw), left = (cos yaw, -sin yaw)
    f(i, 0) = d.x() * std::cos(yaw) - d.y() * std::sin(yaw);
    f(i, 1) = d.x() * std::sin(yaw) + d.y() * std::cos(yaw);
    f(i, 2) = std::remainder(m.root_yaw(a + 1) - yaw, 2.0 * std::numbers::pi) * m.fps;
    f.block(i, 3, 1, 3 * kBones) = m.local_pose.block(i, 3, 1, 3 * kBones);
  }
  return f;
}

struct EvaluatorConfig {
  std::uint64_t seed = 0;
  int steps = 400;
  int batch = 32;
  double lr = 2e-3;
  double margin = 0.2;
};

inline constexpr const char* kEvaluatorKind = "contrastive_evaluator";

class ToyContrastiveModel {
 public:
  ToyContrastiveModel() = default;
  ToyContrastiveModel(ToyContrastiveModel&&) = default;
  ToyContrastiveModel& operator=(ToyContrastiveModel&&) = default;

  static ToyContrastiveModel create(const std::vector<std::string>& vocabulary, std::uint64_t seed) {
    ToyContrastiveModel m;
    m.vocab_ = vocabulary;
    for (std::size_t i = 0; i < vocabulary.size(); ++i) m.index_[vocabulary[i]] = static_cast<int>(i);
    Rng rng(derive_seed(seed, 0xE7A1));
    auto& s = m.store_;
    m.conv1_ = nn::Conv1d::create(s, "motion.conv1", kInvariantDim, 64, 3, rng);
    m.conv2_ = nn::Conv1d::create(s, "motion.conv2", 64, 64, 3, rng);
    m.motion_out_ = nn::Linear::create(s, "motion.out", 64, kEvalFeatureDim, rng);
    m.tokens_ = &s.add_weight("text.tokens", static_cast<Eigen::Index>(vocabulary.size()), kEvalFeatureDim, rng);
    m.text1_ = nn::Linear::create(s, "text.fc1", kEvalFeatureDim, 64, rng);
    m.text2_ = nn::Linear::create(s, "text.fc2", 64, kEvalFeatureDim, rng);
    m.scale_ = RowVector::Ones(kInvariantDim);
    return m;
  }

  nn::ParamStore& params() { return store_; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  /// Channel scales so every invariant feature has unit spread on `clips`.
  void fit_input_scale(const std::vector<MotionClip>& clips) {
    std::vector<Matrix> f;
    Eigen::Index rows = 0;
    for (const auto& c : clips) {
      f.push_back(invariant_features(c.motion));
      rows += f.back().rows();
    }
    Matrix all(rows, kInvariantDim);
    Eigen::Index r = 0;
    for (const auto& m : f) {
      all.middleRows(r, m.rows()) = m;
      r += m.rows();
    }
    const RowVector mean = all.colwise().mean();
    scale_ = ((all.rowwise() - mean).array().square().colwise().mean().sqrt() + 1e-3).matrix();
  }

  Var motion_embedding(Tape& t, const MotionSequence& m) const {
    const Matrix x = (invariant_features(m).array().rowwise() / scale_.array()).matrix();
    Var h = ad::silu(conv1_(t, t.constant(x)));
    h = ad::silu(conv2_(t, h));
    return ad::normalize_rows(motion_out_(t, ad::mean_rows(h)));
  }

  Var text_embedding(Tape& t, const std::vector<std::string>& caption) const {
    std::vector<int> ids;
    for (const auto& w : caption) {
      auto it = index_.find(w);
      if (it != index_.end()) ids.push_back(it->second);
    }
    if (ids.empty()) ids.push_back(0);
    const Var e = ad::mean_rows(ad::gather_rows(t.param(*tokens_), ids));
    return ad::normalize_rows(text2_(t, ad::silu(text1_(t, e))));
  }

  /// Unit-norm 32-dim motion features, one row per motion.
  Matrix motion_features(const std::vector<MotionSequence>& motions) const {
    Matrix out(static_cast<Eigen::Index>(motions.size()), kEvalFeatureDim);
    for (std::size_t i = 0; i < motions.size(); ++i) {
      Tape t(false);
      out.row(static_cast<Eigen::Index>(i)) = motion_embedding(t, motions[i]).value();
    }
    return out;
  }

  json to_checkpoint() const {
    json cfg = {{"vocabulary", vocab_}, {"input_scale", std::vector<double>(scale_.data(), scale_.data() + scale_.size())}};
    return nn::checkpoint_to_json(kEvaluatorKind, cfg, store_);
  }

  static ToyContrastiveModel from_checkpoint(const json& record) {
    const json& cfg = record.at("config");
    ToyContrastiveModel m = create(cfg.at("vocabulary").get<std::vector<std::string>>(), 0);
    nn::load_params(record, kEvaluatorKind, m.store_);
    const auto s = cfg.at("input_scale").get<std::vector<double>>();
    if (s.size() != kInvariantDim) throw std::runtime_error("evaluator input scale has wrong width");
    m.scale_ = Eigen::Map<const RowVector>(s.data(), kInvariantDim);
    return m;
  }

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, int> index_;
  nn::ParamStore store_;
  nn::Conv1d conv1_, conv2_;
  nn::Linear motion_out_, text1_, text2_;
  ad::Param* tokens_ = nullptr;
  RowVector scale_;
};

namespace ad {

/// Symmetric hinge on a similarity matrix: every unpaired entry (i, j) with
/// allowed(i, j) = 1 should sit `margin` below both S(i, i) and S(j, j).
inline Var contrastive_hinge(const Var& sim, const Matrix& allowed, double margin) {
  const Matrix& s = sim.value();
  const Eigen::Index n = s.rows();
  Matrix g = Matrix::Zero(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || allowed(i, j) == 0.0) continue;
      const double a = margin - s(i, i) + s(i, j);  // motion i vs text j
      if (a > 0.0) {
        total += a;
        g(i, j) += 1.0;
        g(i, i) -= 1.0;
      }
      const double b = margin - s(j, j) + s(i, j);  // text j vs motion i
      if (b > 0.0) {
        total += b;
        g(i, j) += 1.0;
        g(j, j) -= 1.0;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  Tape& t = *sim.tape();
  const int is = sim.id();
  return t.push(Matrix::Constant(1, 1, total * inv), t.needs_grad({sim}),
                [is, g, inv](Tape& tp, const Matrix& up) { tp.accumulate(is, (g * (inv * up(0, 0))).eval()); });
}

}  // namespace ad

/// Trains the motion and text heads with the symmetric hinge; pairs sharing
/// a caption are not treated as negatives.
inline std::vector<double> train_evaluator(ToyContrastiveModel& model, const std::vector<MotionClip>& clips,
                                           const EvaluatorConfig& cfg) {
  if (clips.size() < 2) throw ConfigError("train_evaluator: need at least two clips");
  model.fit_input_scale(clips);
  nn::Adam adam({.lr = cfg.lr});
  std::vector<double> losses;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    const int b = std::min<int>(cfg.batch, static_cast<int>(clips.size()));
    const auto perm = rng.permutation(clips.size());
    Tape t(true, true);
    std::vector<Var> ms, ts;
    Matrix allowed = Matrix::Ones(b, b);
    for (int i = 0; i < b; ++i) {
      const MotionClip& c = clips[perm[static_cast<std::size_t>(i)]];
      ms.push_back(model.motion_embedding(t, c.motion));
      ts.push_back(model.text_embedding(t, c.caption));
      for (int j = 0; j < b; ++j) {
        if (clips[perm[static_cast<std::size_t>(j)]].caption == c.caption) allowed(i, j) = 0.0;
      }
    }
    const Var sim = ad::matmul_nt(ad::concat_rows(std::span<const Var>(ms)), ad::concat_rows(std::span<const Var>(ts)));
    const Var loss = ad::contrastive_hinge(sim, allowed, cfg.margin);
    model.params().zero_grad();
    t.backward(loss);
    adam.step(model.params());
    losses.push_back(loss.scalar());
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> values;

  static MetricStat of(std::vector<double> v) {
    MetricStat s;
    s.values = std::move(v);
    if (s.values.empty()) return s;
    s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / static_cast<double>(s.values.size());
    double var = 0.0;
    for (double x : s.values) var += (x - s.mean) * (x - s.mean);
    s.std = s.values.size() > 1 ? std::sqrt(var / static_cast<double>(s.values.size() - 1)) : 0.0;
    return s;
  }
};

struct MetricReport {
  std::map<std::string, MetricStat> metrics;
  std::map<std::string, long> counts;
  std::string traj_err_definition = "mean planar distance (m)";
  json settings = json::object();

  json to_json() const {
    json m = json::object();
    for (const auto& [k, s] : metrics) m[k] = {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
    return {{"format", "drawmotion-metric-report"},
            {"version", 1},
            {"metrics", m},
            {"counts", counts},
            {"traj_err_definition", traj_err_definition},
            {"settings", settings}};
  }

  static MetricReport from_json(const json& j) {
    if (j.value("format", "") != "drawmotion-metric-report") throw std::runtime_error("not a metric report");
    MetricReport r;
    for (const auto& [k, v] : j.at("metrics").items()) {
      MetricStat s;
      s.mean = v.at("mean").get<double>();
      s.std = v.at("std").get<double>();
      s.values = v.at("values").get<std::vector<double>>();
      r.metrics[k] = s;
    }
    r.counts = j.at("counts").get<std::map<std::string, long>>();
    r.traj_err_definition = j.at("traj_err_definition").get<std::string>();
    r.settings = j.at("settings");
    return r;
  }

  bool operator==(const MetricReport& o) const {
    if (metrics.size() != o.metrics.size() || counts != o.counts || traj_err_definition != o.traj_err_definition ||
        settings != o.settings) {
      return false;
    }
    for (const auto& [k, s] : metrics) {
      auto it = o.metrics.find(k);
      if (it == o.metrics.end() || it->second.mean != s.mean || it->second.std != s.std || it->second.values != s.values) {
        return false;
      }
    }
    return true;
  }

  /// Plain-text summary: one row, metrics as columns with mean ± std.
  std::string table() const {
    std::ostringstream os;
    os << std::left;
    std::vector<std::string> order = {"fid_like", "diversity", "traj_err", "traj_fail_ratio", "sti_sim"};
    for (const auto& [k, s] : metrics) {
      if (std::find(order.begin(), order.end(), k) == order.end()) order.push_back(k);
    }
    std::string header, row;
    for (const auto& k : order) {
      auto it = metrics.find(k);
      if (it == metrics.end()) continue;
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << it->second.mean << " ± " << it->second.std;
      const std::size_t w = std::max(k.size(), cell.str().size()) + 2;
      std::ostringstream h, r;
      h << std::left << std::setw(static_cast<int>(w)) << k;
      r << std::left << std::setw(static_cast<int>(w + 1)) << cell.str();  // "±" is two bytes
      header += h.str();
      row += r.str();
    }
    os << header << "\n" << row << "\n";
    os << "traj_err: " << traj_err_definition << "\n";
    for (const auto& [k, v] : counts) os << k << ": " << v << "\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvalConfig {
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  bool guidance = true;
  GuidanceConfig guidance_config;  // hyperparameters only; targets come from each clip
  SamplerConfig sampler;
  std::size_t diversity_pairs = 10;
  double traj_fail_threshold = 0.5;
  bool text = true;
  bool draw = true;
};

/// Drawing conditions of the protocol: the ground-truth root path and SGA
/// stickmen (default style) at the first, middle and last frame.
inline std::vector<int> protocol_frames(Eigen::Index frames) {
  return {0, static_cast<int>(frames / 2), static_cast<int>(frames - 1)};
}

struct GeneratedSet {
  std::vector<MotionSequence> motions;
  std::vector<double> guidance_losses;
};

/// Sample one motion per clip for a seed.
inline GeneratedSet generate_for_clips(const McmModel& model, const StickmanCodec& codec,
                                       const std::vector<MotionClip>& clips, const EvalConfig& cfg, std::uint64_t seed,
                                       const FeatureStats* stats, const NoiseSchedule& sched, const FeatureHook& hook = {}) {
  std::vector<SampleJob> jobs;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const MotionClip& c = clips[i];
    SampleJob job;
    job.frames = c.motion.frames();
    job.seed = derive_seed(seed, i);
    if (cfg.text) job.conditions.text = model.tokenize_text(c.caption);
    if (cfg.draw) {
      job.conditions.draw =
          make_draw_input(model, codec, c.motion, protocol_frames(job.frames), SgaStyle{}, derive_seed(seed, 1000 + i));
      if (cfg.guidance) {
        GuidanceConfig g = cfg.guidance_config;
        set_trajectory_target(g, model, c.motion.root_xz);
        job.guidance = g;
      }
    }
    jobs.push_back(std::move(job));
  }
  const auto results = sample_batch(model, jobs, sched, cfg.sampler, stats, hook);
  GeneratedSet out;
  for (const auto& r : results) {
    out.motions.push_back(r.motion);
    if (r.guidance_loss) out.guidance_losses.push_back(*r.guidance_loss);
  }
  return out;
}

struct SeedMetrics {
  double traj_err = 0.0;
  double traj_fail_ratio = 0.0;
  double sti_sim = 0.0;
  double fid_like = 0.0;
  double diversity = 0.0;
};

/// Metrics of one generated set against its clips.
inline SeedMetrics score_motions(const std::vector<MotionSequence>& generated, const std::vector<MotionClip>& clips,
                                 const StickmanCodec& codec, const ToyContrastiveModel& evaluator, std::uint64_t seed,
                                 const EvalConfig& cfg) {
  SeedMetrics m;
  std::vector<double> max_errs;
  double sti = 0.0;
  int anchored = 0;
  std::vector<MotionSequence> real;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const Trajectory2D target = extract_trajectory(clips[i].motion);
    m.traj_err += traj_err(generated[i], target);
    max_errs.push_back(traj_max_err(generated[i], target));
    const std::vector<int> frames = protocol_frames(clips[i].motion.frames());
    for (std::size_t k = 0; k < frames.size(); ++k) {
      // same sketch the sampler was conditioned on
      const StickmanSketch sketch =
          generate_stickman(clips[i].motion.pose(frames[k]), SgaStyle{}, derive_seed(derive_seed(seed, 1000 + i), k));
      sti += sti_sim(generated[i].pose(frames[k]), sketch, codec);
      ++anchored;
    }
    real.push_back(clips[i].motion);
  }
  m.traj_err /= static_cast<double>(clips.size());
  m.traj_fail_ratio = traj_fail_ratio(max_errs, cfg.traj_fail_threshold);
  m.sti_sim = sti / std::max(1, anchored);
  const Matrix fr = evaluator.motion_features(real);
  const Matrix fg = evaluator.motion_features(generated);
  m.fid_like = fid_like(fr, fg);
  m.diversity = diversity(fg, std::min(cfg.diversity_pairs, generated.size() / 2), derive_seed(seed, 77));
  return m;
}

inline MetricReport make_report(const std::vector<SeedMetrics>& per_seed, std::size_t clip_count, const EvalConfig& cfg) {
  MetricReport r;
  std::vector<double> te, tf, ss, fid, div;
  for (const auto& s : per_seed) {
    te.push_back(s.traj_err);
    tf.push_back(s.traj_fail_ratio);
    ss.push_back(s.sti_sim);
    fid.push_back(s.fid_like);
    div.push_back(s.diversity);
  }
  r.metrics["traj_err"] = MetricStat::of(te);
  r.metrics["traj_fail_ratio"] = MetricStat::of(tf);
  r.metrics["sti_sim"] = MetricStat::of(ss);
  r.metrics["fid_like"] = MetricStat::of(fid);
  r.metrics["diversity"] = MetricStat::of(div);
  r.counts["clips"] = static_cast<long>(clip_count);
  r.counts["seeds"] = static_cast<long>(per_seed.size());
  r.counts["anchored_frames_per_clip"] = 3;
  r.settings = {{"guidance", cfg.guidance},
                {"guidance_config", cfg.guidance_config.hyper_to_json()},
                {"stride", cfg.sampler.stride},
                {"w", cfg.sampler.mixture.w},
                {"p_draw", cfg.sampler.mixture.p_draw},
                {"traj_fail_threshold", cfg.traj_fail_threshold}};
  return r;
}

/// Generation over the test clips with ground-truth trajectories and three
/// anchored stickmen per clip, repeated over the configured seeds.
inline MetricReport evaluate(const McmModel& model, const StickmanCodec& codec, const ToyContrastiveModel& evaluator,
                             const std::vector<MotionClip>& test, const EvalConfig& cfg, const FeatureStats* stats) {
  const NoiseSchedule sched(kDefaultDiffusionSteps);
  std::vector<SeedMetrics> per_seed;
  for (std::uint64_t seed : cfg.seeds) {
    const GeneratedSet g = generate_for_clips(model, codec, test, cfg, seed, cfg.guidance ? stats : nullptr, sched);
    per_seed.push_back(score_motions(g.motions, test, codec, evaluator, seed, cfg));
  }
  return make_report(per_seed, test.size(), cfg);
}

/// Scores the clips themselves as if they were generated.
inline MetricReport evaluate_ground_truth(const StickmanCodec& codec, const ToyContrastiveModel& evaluator,
                                          const std::vector<MotionClip>& test, const EvalConfig& cfg) {
  std::vector<MotionSequence> motions;
  for (const auto& c : test) motions.push_back(c.motion);
  std::vector<SeedMetrics> per_seed;
  for (std::uint64_t seed : cfg.seeds) per_seed.push_back(score_motions(motions, test, codec, evaluator, seed, cfg));
  return make_report(per_seed, test.size(), cfg);
}

}  // namespace drawmotion
