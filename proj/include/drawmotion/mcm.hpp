#pragma once

// The denoiser: input encoders, draw/text condition decoders routed by
// condition segment, latent encoder, output head, training objective.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/diffusion.hpp"
#include "drawmotion/motion.hpp"
#include "drawmotion/nn.hpp"
#include "drawmotion/sga.hpp"
#include "drawmotion/stickman_codec.hpp"

namespace drawmotion {

using ad::Tape;
using ad::Var;

/// Condition settings in segment order B1..B4.
enum class Segment : int { text_draw = 0, text_only = 1, draw_only = 2, none = 3 };

inline constexpr std::array<Segment, 4> kSegments = {Segment::text_draw, Segment::text_only, Segment::draw_only,
                                                     Segment::none};

inline constexpr bool has_text(Segment s) { return s == Segment::text_draw || s == Segment::text_only; }
inline constexpr bool has_draw(Segment s) { return s == Segment::text_draw || s == Segment::draw_only; }
inline constexpr Segment segment_of(bool text, bool draw) {
  return text ? (draw ? Segment::text_draw : Segment::text_only) : (draw ? Segment::draw_only : Segment::none);
}

inline std::string to_string(Segment s) {
  switch (s) {
    case Segment::text_draw: return "text_draw";
    case Segment::text_only: return "text_only";
    case Segment::draw_only: return "draw_only";
    case Segment::none: return "none";
  }
  return "none";
}

/// Drawing condition in model units: the trajectory in normalized root
/// coordinates and frozen stickman embeddings anchored at frames.
struct DrawInput {
  Matrix trajectory;                                // T x 2
  std::vector<std::pair<int, RowVector>> stickmen;  // (frame, embedding)

  Vector presence_mask() const {
    Vector m = Vector::Zero(trajectory.rows());
    for (const auto& [f, e] : stickmen) m(f) = 1.0;
    return m;
  }
};

struct Conditions {
  std::optional<std::vector<int>> text;  // token ids
  std::optional<DrawInput> draw;

  Segment segment() const { return segment_of(text.has_value(), draw.has_value()); }

  /// The same conditions with text and/or drawing removed.
  Conditions restricted(Segment s) const {
    Conditions c;
    if (has_text(s)) c.text = text;
    if (has_draw(s)) c.draw = draw;
    return c;
  }
};

struct ModelConfig {
  int embed_dim = 64;
  int layers = 4;
  int ffn_hidden = 128;
  int time_hidden = 128;
  int traj_layers = 6;
  int max_text_len = 16;
  int stickman_dim = 64;
  std::vector<std::string> vocabulary = default_vocabulary();

  json to_json() const {
    return {{"embed_dim", embed_dim},       {"layers", layers},           {"ffn_hidden", ffn_hidden},
            {"time_hidden", time_hidden},   {"traj_layers", traj_layers}, {"max_text_len", max_text_len},
            {"stickman_dim", stickman_dim}, {"vocabulary", vocabulary}};
  }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.layers = j.value("layers", c.layers);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.time_hidden = j.value("time_hidden", c.time_hidden);
    c.traj_layers = j.value("traj_layers", c.traj_layers);
    c.max_text_len = j.value("max_text_len", c.max_text_len);
    c.stickman_dim = j.value("stickman_dim", c.stickman_dim);
    if (j.contains("vocabulary")) c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (c.layers < 1 || c.embed_dim < 2 || c.traj_layers < 1 || c.vocabulary.empty()) {
      throw ConfigError("invalid model config");
    }
    return c;
  }
};

/// Condition encodings for one sample; absent conditions stay empty.
struct CondVars {
  std::optional<Var> ej;  // T x E trajectory encoding
  std::optional<Var> es;  // T x E stickman encoding
  std::optional<Var> et;  // L x E text encoding

  bool text() const { return et.has_value(); }
  bool draw() const { return ej.has_value(); }
  Segment segment() const { return segment_of(text(), draw()); }
};

/// Plain-value copy of CondVars, reusable across tapes.
struct CondValues {
  std::optional<Matrix> ej, es, et;

  static CondValues from(const CondVars& c) {
    CondValues v;
    if (c.ej) v.ej = c.ej->value();
    if (c.es) v.es = c.es->value();
    if (c.et) v.et = c.et->value();
    return v;
  }

  CondVars on(Tape& t) const {
    CondVars c;
    if (ej) c.ej = t.constant(*ej);
    if (es) c.es = t.constant(*es);
    if (et) c.et = t.constant(*et);
    return c;
  }

  CondValues restricted(Segment s) const {
    CondValues v;
    if (has_text(s)) v.et = et;
    if (has_draw(s)) {
      v.ej = ej;
      v.es = es;
    }
    return v;
  }

  Segment segment() const { return segment_of(et.has_value(), ej.has_value()); }
};

struct DrawDecoder {
  nn::LayerNorm norm;
  nn::Linear q, k, v, o;

  /// softmax(Q K^T / sqrt(E)) V with Q from the motion features and K, V
  /// from the token concatenation [m + e^j ; e^s] (2T x E).
  Var operator()(Tape& t, const Var& m, const Var& ej, const Var& es) const {
    const Var kv = ad::concat_rows(ad::add(m, ej), es);
    return o(t, nn::dot_product_attention(q(t, m), k(t, kv), v(t, kv)));
  }
};

struct TextDecoder {
  nn::LayerNorm norm;
  nn::Linear q, k, v, o;

  /// Efficient attention with Q softmaxed over channels and K over the
  /// tokens of [m ; e^t] ((T+L) x E).
  Var operator()(Tape& t, const Var& m, const Var& et) const {
    const Var kv = ad::concat_rows(m, et);
    return o(t, nn::efficient_attention(q(t, m), k(t, kv), v(t, kv)));
  }
};

struct LatentEncoder {
  nn::LayerNorm norm1, norm2;
  nn::Linear q, k, v, o;
  nn::FeedForward ffn;

  Var operator()(Tape& t, const Var& x) const {
    const Var h = norm1(t, x);
    const Var y = ad::add(x, o(t, nn::efficient_attention(q(t, h), k(t, h), v(t, h))));
    return ad::add(y, ffn(t, norm2(t, y)));
  }
};

struct McmLayer {
  DrawDecoder draw;
  TextDecoder text;
  LatentEncoder latent;
};

inline constexpr const char* kModelKind = "drawmotion_model";

class McmModel {
 public:
  McmModel() = default;
  McmModel(McmModel&&) = default;
  McmModel& operator=(McmModel&&) = default;

  static McmModel create(const ModelConfig& cfg, std::uint64_t seed) {
    McmModel m;
    m.cfg_ = cfg;
    m.normalizer_ = FeatureNormalizer::identity();
    for (std::size_t i = 0; i < cfg.vocabulary.size(); ++i) m.vocab_index_[cfg.vocabulary[i]] = static_cast<int>(i);
    if (m.vocab_index_.size() != cfg.vocabulary.size()) throw ConfigError("vocabulary has duplicate tokens");
    Rng rng(derive_seed(seed, 0x3C3));
    auto& s = m.store_;
    const int e = cfg.embed_dim;
    m.motion_in_ = nn::Linear::create(s, "embed.motion", kMotionDim, e, rng);
    m.time1_ = nn::Linear::create(s, "embed.time1", e, cfg.time_hidden, rng);
    m.time2_ = nn::Linear::create(s, "embed.time2", cfg.time_hidden, e, rng);
    for (int i = 0; i < cfg.traj_layers; ++i) {
      m.traj_.push_back(nn::Conv1d::create(s, "embed.traj" + std::to_string(i), i == 0 ? 2 : e, e, 3, rng));
    }
    m.stick_in_ = nn::Linear::create(s, "embed.stickman", cfg.stickman_dim + 1, e, rng);
    m.token_table_ = &s.add_weight("embed.tokens", static_cast<Eigen::Index>(cfg.vocabulary.size()), e, rng, 1.0);
    m.text_block_ = nn::TransformerBlock::create(s, "embed.text_block", e, cfg.ffn_hidden, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "mcm" + std::to_string(l);
      McmLayer layer;
      layer.draw.norm = nn::LayerNorm::create(s, p + ".draw.norm", e);
      layer.draw.q = nn::Linear::create(s, p + ".draw.q", e, e, rng);
      layer.draw.k = nn::Linear::create(s, p + ".draw.k", e, e, rng);
      layer.draw.v = nn::Linear::create(s, p + ".draw.v", e, e, rng);
      layer.draw.o = nn::Linear::create(s, p + ".draw.o", e, e, rng, 0.5);
      layer.text.norm = nn::LayerNorm::create(s, p + ".text.norm", e);
      layer.text.q = nn::Linear::create(s, p + ".text.q", e, e, rng);
      layer.text.k = nn::Linear::create(s, p + ".text.k", e, e, rng);
      layer.text.v = nn::Linear::create(s, p + ".text.v", e, e, rng);
      layer.text.o = nn::Linear::create(s, p + ".text.o", e, e, rng, 0.5);
      layer.latent.norm1 = nn::LayerNorm::create(s, p + ".latent.norm1", e);
      layer.latent.norm2 = nn::LayerNorm::create(s, p + ".latent.norm2", e);
      layer.latent.q = nn::Linear::create(s, p + ".latent.q", e, e, rng);
      layer.latent.k = nn::Linear::create(s, p + ".latent.k", e, e, rng);
      layer.latent.v = nn::Linear::create(s, p + ".latent.v", e, e, rng);
      layer.latent.o = nn::Linear::create(s, p + ".latent.o", e, e, rng, 0.5);
      layer.latent.ffn = nn::FeedForward::create(s, p + ".latent.ffn", e, cfg.ffn_hidden, rng);
      m.layers_.push_back(layer);
    }
    m.head_norm_ = nn::LayerNorm::create(s, "head.norm", e);
    m.head_ = nn::Linear::create(s, "head.out", e, kMotionDim, rng, 0.5);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  int layer_count() const { return cfg_.layers; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const McmLayer& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  McmLayer& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
  const FeatureNormalizer& normalizer() const { return normalizer_; }
  void set_normalizer(FeatureNormalizer n) { normalizer_ = std::move(n); }

  std::vector<int> tokenize_text(const std::vector<std::string>& words) const {
    if (static_cast<int>(words.size()) > cfg_.max_text_len) {
      throw InputError("text", "text exceeds " + std::to_string(cfg_.max_text_len) + " tokens");
    }
    std::vector<int> ids;
    for (const auto& w : words) {
      auto it = vocab_index_.find(w);
      if (it == vocab_index_.end()) throw InputError("text", "token '" + w + "' is not in the vocabulary");
      ids.push_back(it->second);
    }
    return ids;
  }

  // --- input encoders -----------------------------------------------------

  /// e^m: per-frame affine map of x_t, plus a time embedding and a fixed
  /// frame positional code.
  Var embed_motion(Tape& t, const Var& x, int timestep) const {
    const int e = cfg_.embed_dim;
    const Var temb = time2_(t, ad::silu(time1_(t, t.constant(nn::sinusoid(static_cast<double>(timestep), e)))));
    const Var h = ad::add_row(motion_in_(t, x), temb);
    return ad::add(h, t.constant(nn::positional_table(x.rows(), e)));
  }

  /// e^j: six stacked 1-D convolutions over the trajectory.
  Var encode_trajectory(Tape& t, const Matrix& trajectory) const {
    Var h = t.constant(trajectory);
    for (std::size_t i = 0; i < traj_.size(); ++i) {
      h = traj_[i](t, h);
      if (i + 1 < traj_.size()) h = ad::silu(h);
    }
    return h;
  }

  /// e^s: each anchored embedding placed at its frame row with a presence
  /// channel, then mapped to E.
  Var encode_stickmen(Tape& t, const DrawInput& d) const {
    const Eigen::Index frames = d.trajectory.rows();
    Matrix placed = Matrix::Zero(frames, cfg_.stickman_dim + 1);
    for (const auto& [f, emb] : d.stickmen) {
      if (f < 0 || f >= frames) throw InputError("stickmen", "stickman frame outside the motion");
      if (emb.size() != cfg_.stickman_dim) throw InputError("stickmen", "stickman embedding has wrong width");
      placed.row(f).head(cfg_.stickman_dim) = emb;
      placed(f, cfg_.stickman_dim) = 1.0;
    }
    return stick_in_(t, t.constant(placed));
  }

  /// e^t: token table plus positional code, one self-attention block.
  Var encode_text(Tape& t, const std::vector<int>& tokens) const {
    if (tokens.empty()) throw InputError("text", "empty token list");
    const Var emb = ad::gather_rows(t.param(*token_table_), tokens);
    const Var h = ad::add(emb, t.constant(nn::positional_table(emb.rows(), cfg_.embed_dim)));
    return text_block_(t, h);
  }

  CondVars encode_conditions(Tape& t, const Conditions& c, Eigen::Index frames) const {
    CondVars v;
    if (c.text) v.et = encode_text(t, *c.text);
    if (c.draw) {
      if (c.draw->trajectory.rows() != frames || c.draw->trajectory.cols() != 2) {
        throw InputError("trajectory", "trajectory must have one point per frame");
      }
      v.ej = encode_trajectory(t, c.draw->trajectory);
      v.es = encode_stickmen(t, *c.draw);
    }
    return v;
  }

  // --- MCM stages -------------------------------------------------------------

  Var text_offset(Tape& t, int l, const Var& h, const Var& et) const {
    const TextDecoder& d = layer(l).text;
    return d(t, d.norm(t, h), et);
  }

  Var draw_offset(Tape& t, int l, const Var& h, const Var& ej, const Var& es) const {
    const DrawDecoder& d = layer(l).draw;
    return d(t, d.norm(t, h), ej, es);
  }

  /// Condition fusion for one sample: decoder offsets for the conditions the
  /// sample carries are added to its features; (none, none) passes through.
  Var fuse(Tape& t, int l, const Var& h, const CondVars& c) const {
    Var out = h;
    if (c.et) out = ad::add(out, text_offset(t, l, h, *c.et));
    if (c.ej) out = ad::add(out, draw_offset(t, l, h, *c.ej, *c.es));
    return out;
  }

  /// Batch fusion partitioned by segment: the text decoder runs on B1 and
  /// B2 only, the draw decoder on B1 and B3 only.
  std::vector<Var> condition_fusion(Tape& t, int l, const std::vector<Var>& h, const std::vector<CondVars>& c) const {
    std::vector<Var> out(h.size());
    for (Segment seg : kSegments) {
      for (std::size_t i = 0; i < h.size(); ++i) {
        if (c[i].segment() == seg) out[i] = fuse(t, l, h[i], c[i]);
      }
    }
    return out;
  }

  Var latent(Tape& t, int l, const Var& h) const { return layer(l).latent(t, h); }

  /// Raw head output F from the last latent features.
  Var head(Tape& t, const Var& h) const { return head_(t, head_norm_(t, h)); }

  /// Noise prediction from the head output. The clean-motion estimate is
  /// x0 = sqrt(ab) x_t + sqrt(1 - ab) F, so eps = sqrt(1 - ab) x_t - sqrt(ab) F:
  /// near t = 0 the head predicts the noise, near t = T the clean motion.
  Var noise_from_head(const Var& x_t, const Var& f, int timestep) const {
    const double ab = schedule_.alpha_bar(timestep);
    return ad::sub(ad::scale(x_t, std::sqrt(1.0 - ab)), ad::scale(f, std::sqrt(ab)));
  }

  Var output(Tape& t, const Var& h, const Var& x_t, int timestep) const {
    return noise_from_head(x_t, head(t, h), timestep);
  }

  const NoiseSchedule& schedule() const { return schedule_; }

  /// Noise prediction for one sample.
  Var forward(Tape& t, const Var& x, int timestep, const CondVars& c) const {
    Var h = embed_motion(t, x, timestep);
    for (int l = 0; l < cfg_.layers; ++l) {
      h = fuse(t, l, h, c);
      check_finite(h, l);
      h = latent(t, l, h);
    }
    return output(t, h, x, timestep);
  }

  /// Noise predictions for a batch; conditions are encoded on the same tape.
  std::vector<Var> forward_batch(Tape& t, const std::vector<Var>& x, const std::vector<int>& timesteps,
                                 const std::vector<CondVars>& c) const {
    std::vector<Var> h(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) h[i] = embed_motion(t, x[i], timesteps[i]);
    for (int l = 0; l < cfg_.layers; ++l) {
      h = condition_fusion(t, l, h, c);
      for (std::size_t i = 0; i < h.size(); ++i) {
        check_finite(h[i], l);
        h[i] = latent(t, l, h[i]);
      }
    }
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = output(t, h[i], x[i], timesteps[i]);
    return h;
  }

  /// Convenience value-level forward.
  Matrix predict_noise(const Matrix& x_t, int timestep, const Conditions& c) const {
    Tape t(false);
    const CondVars cv = encode_conditions(t, c, x_t.rows());
    return forward(t, t.constant(x_t), timestep, cv).value();
  }

  json to_checkpoint() const {
    json cfg = cfg_.to_json();
    cfg["normalizer"] = normalizer_.to_json();
    return nn::checkpoint_to_json(kModelKind, cfg, store_);
  }

  static McmModel from_checkpoint(const json& record) {
    const json& cfg = record.at("config");
    McmModel m = create(ModelConfig::from_json(cfg), 0);
    nn::load_params(record, kModelKind, m.store_);
    m.normalizer_ = FeatureNormalizer::from_json(cfg.at("normalizer"));
    return m;
  }

 private:
  static void check_finite(const Var& h, int l) {
    if (!h.value().allFinite()) throw std::runtime_error("non-finite activations at MCM layer " + std::to_string(l + 1));
  }

  ModelConfig cfg_;
  NoiseSchedule schedule_;
  nn::ParamStore store_;
  std::map<std::string, int> vocab_index_;
  FeatureNormalizer normalizer_;
  nn::Linear motion_in_, time1_, time2_, stick_in_, head_;
  std::vector<nn::Conv1d> traj_;
  ad::Param* token_table_ = nullptr;
  nn::TransformerBlock text_block_;
  std::vector<McmLayer> layers_;
  nn::LayerNorm head_norm_;
};

// ---------------------------------------------------------------------------
// Supervision on the clean-motion estimate

struct SupervisionTerms {
  double traj = 0.0;
  double stick = 0.0;
  double motion = 0.0;
  double total = 0.0;
};

inline Matrix traj_channels(const Matrix& x) { return x.middleCols(kRootXChannel, 2); }
inline Matrix pose_channels(const Matrix& x) { return x.rightCols(kMotionDim - kPoseChannel); }

/// `draw_preds` are clean-motion estimates under draw-active settings,
/// `all_preds` under every setting present. The trajectory and stickman
/// terms average over the draw-active estimates; the stickman term is 0
/// when the mask is empty.
inline SupervisionTerms training_losses(const std::vector<Matrix>& draw_preds, const std::vector<Matrix>& all_preds,
                                        const Matrix& gt, const Vector& mask) {
  SupervisionTerms s;
  const double m = mask.sum();
  for (const auto& p : draw_preds) {
    s.traj += (traj_channels(p) - traj_channels(gt)).squaredNorm();
    if (m > 0.0) {
      const Matrix diff = pose_channels(p) - pose_channels(gt);
      s.stick += (diff.rowwise().squaredNorm().array() * mask.array()).sum() / m;
    }
  }
  if (!draw_preds.empty()) {
    s.traj /= static_cast<double>(draw_preds.size());
    s.stick /= static_cast<double>(draw_preds.size());
  }
  for (const auto& p : all_preds) s.motion += (p - gt).squaredNorm();
  s.total = s.traj + s.stick + s.motion;
  return s;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double keep_text = 0.7;
  double keep_draw = 0.7;
  int max_stickmen = 3;
  double aux_weight = 1.0;
  double grad_clip = 1.0;
  int warmup = 200;
  int log_every = 100;

  json to_json() const {
    return {{"seed", seed},         {"steps", steps},         {"batch", batch},
            {"lr", lr},             {"keep_text", keep_text}, {"keep_draw", keep_draw},
            {"max_stickmen", max_stickmen}, {"aux_weight", aux_weight}, {"grad_clip", grad_clip},
            {"warmup", warmup},     {"log_every", log_every}};
  }
};

struct TrainLog {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> losses;
};

/// Training example prepared from a clip: normalized features plus the
/// inputs needed to build its conditions.
struct TrainingExample {
  Matrix features;  // normalized T x D
  std::vector<int> tokens;
  const MotionClip* clip = nullptr;
};

/// Builds the drawing condition of a clip from its ground truth: the
/// normalized root path and SGA sketches of the given frames.
inline DrawInput make_draw_input(const McmModel& model, const StickmanCodec& codec, const MotionSequence& motion,
                                 const std::vector<int>& frames, const SgaStyle& style, std::uint64_t seed) {
  DrawInput d;
  d.trajectory = model.normalizer().normalize_trajectory(motion.root_xz);
  std::vector<StickmanSketch> sketches;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    sketches.push_back(generate_stickman(motion.pose(frames[i]), style, derive_seed(seed, i)));
  }
  const Matrix emb = codec.encode_batch(sketches);
  for (std::size_t i = 0; i < frames.size(); ++i) d.stickmen.emplace_back(frames[i], emb.row(static_cast<Eigen::Index>(i)));
  return d;
}

/// One noised training sample with its conditions and targets.
struct TrainingSample {
  Matrix x_t;
  int timestep = 1;
  Conditions conditions;
  Matrix eps;
  Matrix x0;
  Vector mask;  // stickman presence per frame
};

/// Draws a batch: each element takes a random clip and t, noises the clip,
/// keeps text and drawing independently and anchors up to max_stickmen
/// SGA sketches when the drawing is kept.
inline std::vector<TrainingSample> draw_training_batch(const McmModel& model, const StickmanCodec& codec,
                                                       const std::vector<TrainingExample>& examples,
                                                       const TrainConfig& cfg, const NoiseSchedule& sched, Rng& rng) {
  std::vector<TrainingSample> batch;
  for (int b = 0; b < cfg.batch; ++b) {
    const TrainingExample& ex = examples[rng.index(examples.size())];
    const Eigen::Index frames = ex.features.rows();
    TrainingSample s;
    s.timestep = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(sched.steps())));
    s.eps = Matrix(frames, kMotionDim);
    for (Eigen::Index i = 0; i < s.eps.size(); ++i) s.eps.data()[i] = rng.normal();
    if (rng.bernoulli(cfg.keep_text)) s.conditions.text = ex.tokens;
    s.mask = Vector::Zero(frames);
    if (rng.bernoulli(cfg.keep_draw)) {
      const int count = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.max_stickmen) + 1));
      std::vector<std::size_t> perm = rng.permutation(static_cast<std::size_t>(frames));
      std::vector<int> frames_sel;
      for (int k = 0; k < count; ++k) frames_sel.push_back(static_cast<int>(perm[static_cast<std::size_t>(k)]));
      const SgaStyle style = SgaStyle::sample_training(rng);
      s.conditions.draw = make_draw_input(model, codec, ex.clip->motion, frames_sel, style, rng.next_u64());
      s.mask = s.conditions.draw->presence_mask();
    }
    s.x_t = forward_sample(ex.features, s.timestep, s.eps, sched);
    s.x0 = ex.features;
    batch.push_back(std::move(s));
  }
  return batch;
}

/// Batch objective: noise MSE plus, weighted by aux_weight, the MSE of the
/// implied clean motion, its trajectory channels on draw samples and its
/// pose channels on frames anchored by a stickman.
inline Var training_objective(Tape& tape, const McmModel& model, const std::vector<TrainingSample>& batch,
                              double aux_weight) {
  const auto count = static_cast<double>(batch.size());
  std::vector<Var> xs;
  std::vector<int> ts;
  std::vector<CondVars> conds;
  for (const auto& s : batch) {
    xs.push_back(tape.constant(s.x_t));
    ts.push_back(s.timestep);
    conds.push_back(model.encode_conditions(tape, s.conditions, s.x_t.rows()));
  }
  const std::vector<Var> preds = model.forward_batch(tape, xs, ts, conds);
  const NoiseSchedule& sched = model.schedule();
  std::vector<Var> terms;
  std::vector<double> weights;
  for (std::size_t b = 0; b < preds.size(); ++b) {
    const TrainingSample& s = batch[b];
    const Eigen::Index frames = s.x0.rows();
    const double n = static_cast<double>(frames * kMotionDim);
    terms.push_back(ad::square_sum(ad::sub(preds[b], tape.constant(s.eps))));
    weights.push_back(1.0 / (n * count));
    if (aux_weight <= 0.0) continue;
    const double ab = sched.alpha_bar(s.timestep);
    const Var x0_hat = ad::scale(ad::sub(xs[b], ad::scale(preds[b], std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    const Var diff = ad::sub(x0_hat, tape.constant(s.x0));
    const double w = aux_weight / count;
    terms.push_back(ad::square_sum(diff));
    weights.push_back(w / n);
    if (conds[b].draw()) {
      terms.push_back(ad::square_sum(ad::slice_cols(diff, kRootXChannel, 2)));
      weights.push_back(w / static_cast<double>(2 * frames));
      const double m = s.mask.sum();
      if (m > 0.0) {
        const Var pose = ad::slice_cols(diff, kPoseChannel, kMotionDim - kPoseChannel);
        const Var masked = ad::mul(pose, tape.constant(s.mask.replicate(1, kMotionDim - kPoseChannel)));
        terms.push_back(ad::square_sum(masked));
        weights.push_back(w / (m * (kMotionDim - kPoseChannel)));
      }
    }
  }
  return ad::weighted_sum(std::span<const Var>(terms), std::span<const double>(weights));
}

/// Clip features normalized with a normalizer fitted to the clips (stored
/// in the model), paired with their caption tokens.
inline std::vector<TrainingExample> prepare_examples(McmModel& model, const std::vector<MotionClip>& clips) {
  if (clips.empty()) throw ConfigError("train_model: empty dataset");
  std::vector<Matrix> feats;
  for (const auto& c : clips) feats.push_back(to_features(c.motion));
  model.set_normalizer(FeatureNormalizer::fit(feats));
  std::vector<TrainingExample> examples;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    examples.push_back({model.normalizer().normalize(feats[i]), model.tokenize_text(clips[i].caption), &clips[i]});
  }
  return examples;
}

using SnapshotFn = std::function<void(int step, const McmModel&)>;

/// Trains the denoiser with Adam on training_objective, with warmup, a
/// cosine decay to 10% and gradient-norm clipping.
inline TrainLog train_model(McmModel& model, const StickmanCodec& codec, const std::vector<MotionClip>& clips,
                            const TrainConfig& cfg, const SnapshotFn& snapshot = {}, int snapshot_every = 0) {
  if (!codec.frozen()) throw std::logic_error("train_model: codec must be frozen");
  const std::vector<TrainingExample> examples = prepare_examples(model, clips);
  nn::Adam adam({.lr = cfg.lr});
  TrainLog log;
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    const std::vector<TrainingSample> batch = draw_training_batch(model, codec, examples, cfg, model.schedule(), rng);
    Tape tape(true, true);
    const Var loss = training_objective(tape, model, batch, cfg.aux_weight);
    const double l = loss.scalar();
    if (!std::isfinite(l) || (step >= cfg.warmup && l > 1e3)) {
      throw std::runtime_error("train_model: diverged at step " + std::to_string(step) + " (loss " + std::to_string(l) + ")");
    }
    model.params().zero_grad();
    tape.backward(loss);
    const double gn = model.params().grad_norm();
    if (gn > cfg.grad_clip) model.params().scale_grad(cfg.grad_clip / gn);
    const double warm = std::min(1.0, static_cast<double>(step + 1) / std::max(1, cfg.warmup));
    const double progress = static_cast<double>(step) / std::max(1, cfg.steps);
    adam.step(model.params(), warm * (0.55 + 0.45 * std::cos(std::numbers::pi * progress)));

    if (step == 0) log.initial_loss = l;
    window += l;
    ++window_n;
    if ((step + 1) % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps) {
      log.losses.push_back(window / window_n);
      window = 0.0;
      window_n = 0;
    }
    if (snapshot && snapshot_every > 0 && (step + 1) % snapshot_every == 0) snapshot(step + 1, model);
  }
  log.final_loss = log.losses.empty() ? log.initial_loss : log.losses.back();
  return log;
}

}  // namespace drawmotion
