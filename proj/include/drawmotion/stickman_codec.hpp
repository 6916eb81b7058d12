#pragma once

// Stickman autoencoder: an order-free stroke-set encoder and a decoder that
// proposes N candidate limb-offset sets, trained with the candidate loss.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/motion.hpp"
#include "drawmotion/nn.hpp"
#include "drawmotion/sga.hpp"

namespace drawmotion {

inline constexpr int kOffsetDim = 3 * kBones;  // 48

/// N candidate limb-offset sets, each (J-1) x 3.
struct CandidatePoses {
  std::vector<Matrix> offsets;

  std::size_t size() const { return offsets.size(); }
  Pose pose(std::size_t n) const { return pose_from_offsets(offsets.at(n)); }
};

struct CandidateLoss {
  double total = 0.0;
  std::vector<double> per_candidate;
  std::size_t best = 0;
};

inline RowVector flatten_offsets(const Matrix& offsets) {
  RowVector r(offsets.size());
  for (Eigen::Index j = 0; j < offsets.rows(); ++j) r.segment(3 * j, 3) = offsets.row(j);
  return r;
}

inline Matrix unflatten_offsets(const RowVector& r) {
  Matrix m(r.size() / 3, 3);
  for (Eigen::Index j = 0; j < m.rows(); ++j) m.row(j) = r.segment(3 * j, 3);
  return m;
}

/// l_n = 0.1 * |gt - pred_n|^2 (summed over coordinates);
/// total = 10 * l_k + sum_n l_n with k the lowest-index minimizer.
inline CandidateLoss candidate_loss(const CandidatePoses& candidates, const Matrix& gt_offsets) {
  if (candidates.offsets.empty()) throw std::invalid_argument("candidate_loss: no candidates");
  CandidateLoss out;
  double best = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (std::size_t n = 0; n < candidates.size(); ++n) {
    const Matrix& c = candidates.offsets[n];
    if (c.rows() != gt_offsets.rows() || c.cols() != gt_offsets.cols()) {
      throw std::invalid_argument("candidate_loss: shape mismatch");
    }
    const double l = 0.1 * (gt_offsets - c).squaredNorm();
    out.per_candidate.push_back(l);
    sum += l;
    if (l < best) {
      best = l;
      out.best = n;
    }
  }
  out.total = 10.0 * best + sum;
  return out;
}

namespace ad {

/// Batch mean of the candidate loss. `pred` is B x (N * 48), `gt` is B x 48.
inline Var candidate_loss(const Var& pred, const Matrix& gt, int candidates) {
  const Eigen::Index batch = pred.rows();
  const Eigen::Index width = gt.cols();
  if (gt.rows() != batch || pred.cols() != candidates * width) {
    throw std::invalid_argument("candidate_loss: shape mismatch");
  }
  Tape& t = *pred.tape();
  Matrix coef = Matrix::Zero(batch, candidates);  // d total / d l_n per sample
  double total = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index k = 0;
    for (int n = 0; n < candidates; ++n) {
      const double l = 0.1 * (gt.row(b) - pred.value().block(b, n * width, 1, width)).squaredNorm();
      total += l;
      coef(b, n) = 1.0;
      if (l < best) {
        best = l;
        k = n;
      }
    }
    total += 10.0 * best;
    coef(b, k) += 10.0;
  }
  const int ip = pred.id();
  const double inv_b = 1.0 / static_cast<double>(batch);
  return t.push(Matrix::Constant(1, 1, total * inv_b), t.needs_grad({pred}),
                [ip, gt, coef, candidates, width, inv_b](Tape& tp, const Matrix& g) {
                  const Matrix& p = tp.value(ip);
                  Matrix back(p.rows(), p.cols());
                  for (Eigen::Index b = 0; b < p.rows(); ++b) {
                    for (int n = 0; n < candidates; ++n) {
                      back.block(b, n * width, 1, width) =
                          (0.2 * coef(b, n) * inv_b * g(0, 0)) * (p.block(b, n * width, 1, width) - gt.row(b));
                    }
                  }
                  tp.accumulate(ip, back);
                });
}

}  // namespace ad

struct CodecConfig {
  int embed_dim = 64;
  int candidates = 8;
  int stroke_hidden = 32;
  int blocks = 2;
  int ffn_hidden = 128;
  int decoder_hidden = 256;
  int points_per_stroke = 16;

  json to_json() const {
    return {{"embed_dim", embed_dim},          {"candidates", candidates}, {"stroke_hidden", stroke_hidden},
            {"blocks", blocks},                {"ffn_hidden", ffn_hidden}, {"decoder_hidden", decoder_hidden},
            {"points_per_stroke", points_per_stroke}};
  }
  static CodecConfig from_json(const json& j) {
    CodecConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.candidates = j.value("candidates", c.candidates);
    c.stroke_hidden = j.value("stroke_hidden", c.stroke_hidden);
    c.blocks = j.value("blocks", c.blocks);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.points_per_stroke = j.value("points_per_stroke", c.points_per_stroke);
    if (c.candidates < 1 || c.embed_dim < 2 || c.points_per_stroke < 3) throw ConfigError("invalid codec config");
    return c;
  }
};

inline constexpr const char* kCodecKind = "stickman_codec";

class StickmanCodec {
 public:
  StickmanCodec() = default;
  StickmanCodec(StickmanCodec&&) = default;
  StickmanCodec& operator=(StickmanCodec&&) = default;

  static StickmanCodec create(const CodecConfig& cfg, std::uint64_t seed) {
    StickmanCodec c;
    c.cfg_ = cfg;
    Rng rng(derive_seed(seed, 0xC0DEC));
    auto& s = c.store_;
    const int e = cfg.embed_dim;
    c.conv1_ = nn::Conv1d::create(s, "enc.conv1", 2, cfg.stroke_hidden, 3, rng);
    c.conv2_ = nn::Conv1d::create(s, "enc.conv2", cfg.stroke_hidden, e, 3, rng);
    c.stroke_proj_ = nn::Linear::create(s, "enc.stroke_proj", e, e, rng);
    for (int b = 0; b < cfg.blocks; ++b) {
      c.blocks_.push_back(nn::TransformerBlock::create(s, "enc.block" + std::to_string(b), e, cfg.ffn_hidden, rng));
    }
    c.out_norm_ = nn::LayerNorm::create(s, "enc.out_norm", e);
    c.dec1_ = nn::Linear::create(s, "dec.fc1", e, cfg.decoder_hidden, rng);
    c.dec2_ = nn::Linear::create(s, "dec.fc2", cfg.decoder_hidden, cfg.decoder_hidden, rng);
    c.dec3_ = nn::Linear::create(s, "dec.fc3", cfg.decoder_hidden, cfg.candidates * kOffsetDim, rng, 0.1);
    return c;
  }

  const CodecConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// Strokes resampled to the fixed per-stroke point count.
  Matrix stroke_points(const StickmanSketch& s) const {
    s.validate();
    const Eigen::Index p = cfg_.points_per_stroke;
    Matrix out(kStrokeCount * p, 2);
    for (int i = 0; i < kStrokeCount; ++i) {
      out.middleRows(i * p, p) =
          resample_trajectory(Trajectory2D{s.strokes[static_cast<std::size_t>(i)], std::nullopt}, p,
                              ResampleMode::uniform)
              .points;
    }
    return out;
  }

  /// B x E embeddings for a batch of stacked stroke points (B*6*P x 2).
  ad::Var encode_points(ad::Tape& t, const Matrix& stacked) const {
    const Eigen::Index p = cfg_.points_per_stroke;
    const Eigen::Index batch = stacked.rows() / (kStrokeCount * p);
    ad::Var x = t.constant(stacked);
    x = ad::silu(conv1_(t, x, p));
    x = ad::silu(conv2_(t, x, p));
    const ad::Var strokes = stroke_proj_(t, ad::segment_mean_rows(x, p));  // (B*6) x E
    std::vector<ad::Var> rows;
    rows.reserve(static_cast<std::size_t>(batch));
    for (Eigen::Index b = 0; b < batch; ++b) {
      ad::Var h = ad::slice_rows(strokes, b * kStrokeCount, kStrokeCount);
      for (const auto& block : blocks_) h = block(t, h);
      rows.push_back(ad::mean_rows(h));
    }
    return out_norm_(t, ad::concat_rows(std::span<const ad::Var>(rows)));
  }

  /// B x (N * 48) candidate offsets.
  ad::Var decode(ad::Tape& t, const ad::Var& emb) const {
    return dec3_(t, ad::silu(dec2_(t, ad::silu(dec1_(t, emb)))));
  }

  RowVector encode(const StickmanSketch& s) const {
    ad::Tape t(false);
    return encode_points(t, stroke_points(s)).value().row(0);
  }

  Matrix encode_batch(const std::vector<StickmanSketch>& sketches) const {
    if (sketches.empty()) return Matrix(0, cfg_.embed_dim);
    const Eigen::Index block = kStrokeCount * cfg_.points_per_stroke;
    Matrix stacked(block * static_cast<Eigen::Index>(sketches.size()), 2);
    for (std::size_t i = 0; i < sketches.size(); ++i) {
      stacked.middleRows(block * static_cast<Eigen::Index>(i), block) = stroke_points(sketches[i]);
    }
    ad::Tape t(false);
    return encode_points(t, stacked).value();
  }

  CandidatePoses decode_candidates(const RowVector& emb) const {
    if (emb.size() != cfg_.embed_dim || !emb.allFinite()) throw std::invalid_argument("decode_candidates: bad embedding");
    ad::Tape t(false);
    const RowVector out = decode(t, t.constant(Matrix(emb))).value().row(0);
    CandidatePoses c;
    for (int n = 0; n < cfg_.candidates; ++n) c.offsets.push_back(unflatten_offsets(out.segment(n * kOffsetDim, kOffsetDim)));
    return c;
  }

  json to_checkpoint() const { return nn::checkpoint_to_json(kCodecKind, cfg_.to_json(), store_); }

  static StickmanCodec from_checkpoint(const json& record) {
    StickmanCodec c = create(CodecConfig::from_json(record.at("config")), 0);
    nn::load_params(record, kCodecKind, c.store_);
    c.freeze();
    return c;
  }

 private:
  CodecConfig cfg_;
  nn::ParamStore store_;
  nn::Conv1d conv1_, conv2_;
  nn::Linear stroke_proj_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm out_norm_;
  nn::Linear dec1_, dec2_, dec3_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Pretraining

struct CodecTrainConfig {
  std::uint64_t seed = 0;
  int steps = 2500;
  int batch = 64;
  double lr = 2e-3;
  double grad_clip = 5.0;
  int log_every = 250;
};

struct CodecTrainLog {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> losses;  // one entry per logging window
};

/// Stacked stroke points and flattened ground-truth offsets for one
/// training batch. Strokes are drawn in random direction and order.
inline std::pair<Matrix, Matrix> codec_training_batch(const StickmanCodec& codec, const std::vector<Pose>& poses,
                                                      std::uint64_t seed, int batch) {
  Rng rng(seed);
  const Eigen::Index p = codec.config().points_per_stroke;
  Matrix stacked(static_cast<Eigen::Index>(batch) * kStrokeCount * p, 2);
  Matrix gt(batch, kOffsetDim);
  for (int b = 0; b < batch; ++b) {
    const Pose& pose = poses[rng.index(poses.size())];
    const SgaStyle style = SgaStyle::sample_training(rng);
    StickmanSketch s = generate_stickman(pose, style, rng.next_u64());
    for (auto& stroke : s.strokes) {
      if (rng.bernoulli(0.5)) stroke = stroke.colwise().reverse().eval();
    }
    stacked.middleRows(static_cast<Eigen::Index>(b) * kStrokeCount * p, kStrokeCount * p) = codec.stroke_points(s);
    gt.row(b) = flatten_offsets(limb_offsets(pose));
  }
  return {stacked, gt};
}

/// Minimizes the mean candidate loss with Adam. Deterministic given the
/// configuration seed. Throws on a non-finite loss.
inline CodecTrainLog pretrain_codec(StickmanCodec& codec, const std::vector<Pose>& poses, const CodecTrainConfig& cfg) {
  if (codec.frozen()) throw std::logic_error("pretrain_codec: codec is frozen");
  if (poses.empty()) throw ConfigError("pretrain_codec: no training poses");
  nn::Adam adam({.lr = cfg.lr});
  CodecTrainLog log;
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto [stacked, gt] = codec_training_batch(codec, poses, derive_seed(cfg.seed, static_cast<std::uint64_t>(step)), cfg.batch);
    codec.params().zero_grad();
    ad::Tape t(true, true);
    const ad::Var emb = codec.encode_points(t, stacked);
    const ad::Var loss = ad::candidate_loss(codec.decode(t, emb), gt, codec.config().candidates);
    const double l = loss.scalar();
    if (!std::isfinite(l)) throw std::runtime_error("pretrain_codec: non-finite loss at step " + std::to_string(step));
    t.backward(loss);
    const double gn = codec.params().grad_norm();
    if (gn > cfg.grad_clip) codec.params().scale_grad(cfg.grad_clip / gn);
    const double progress = static_cast<double>(step) / std::max(1, cfg.steps);
    adam.step(codec.params(), 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    if (step == 0) log.initial_loss = l;
    window += l;
    ++window_n;
    if ((step + 1) % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps) {
      log.losses.push_back(window / window_n);
      window = 0.0;
      window_n = 0;
    }
  }
  log.final_loss = log.losses.empty() ? log.initial_loss : log.losses.back();
  codec.freeze();
  return log;
}

/// Mean candidate loss over a fixed evaluation batch.
inline double codec_batch_loss(const StickmanCodec& codec, const std::vector<Pose>& poses, std::uint64_t seed, int batch) {
  const auto [stacked, gt] = codec_training_batch(codec, poses, seed, batch);
  ad::Tape t(false);
  return ad::candidate_loss(codec.decode(t, codec.encode_points(t, stacked)), gt, codec.config().candidates).scalar();
}

/// Root-mean-square limb-offset error of the best candidate, pooled over
/// all poses and coordinates, for sketches drawn in `style`.
inline double best_candidate_rmse(const StickmanCodec& codec, const std::vector<Pose>& poses, const SgaStyle& style,
                                  std::uint64_t seed) {
  double sq = 0.0;
  std::vector<StickmanSketch> sketches;
  for (std::size_t i = 0; i < poses.size(); ++i) sketches.push_back(generate_stickman(poses[i], style, derive_seed(seed, i)));
  const Matrix emb = codec.encode_batch(sketches);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const CandidatePoses c = codec.decode_candidates(emb.row(static_cast<Eigen::Index>(i)));
    const Matrix gt = limb_offsets(poses[i]);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& o : c.offsets) best = std::min(best, (o - gt).squaredNorm());
    sq += best;
  }
  return std::sqrt(sq / (static_cast<double>(poses.size()) * kOffsetDim));
}

/// Poses sampled from the frames of a clip set, every `stride`-th frame.
inline std::vector<Pose> collect_poses(const std::vector<MotionClip>& clips, int stride) {
  std::vector<Pose> poses;
  for (const auto& c : clips) {
    for (Eigen::Index i = 0; i < c.motion.frames(); i += stride) poses.push_back(c.motion.pose(i));
  }
  return poses;
}

}  // namespace drawmotion
