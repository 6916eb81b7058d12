#pragma once

// DDIM sampling with the condition mixture, optional feature guidance,
// and feature hooks used by the analysis tools.

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "drawmotion/diffusion.hpp"
#include "drawmotion/ifg.hpp"
#include "drawmotion/mcm.hpp"

namespace drawmotion {

inline constexpr int kHeadSite = -1;

/// Called with the features of every job evaluated under `segment` at one
/// site: after the fusion of layer `layer` (0-based) or, for kHeadSite, at
/// the head input. Hooks may modify the features in place.
using FeatureHook = std::function<void(int layer, Segment segment, int timestep, std::vector<Matrix>& features)>;

struct SampleJob {
  Conditions conditions;
  Eigen::Index frames = 60;
  std::uint64_t seed = 0;
  std::optional<GuidanceConfig> guidance;
};

struct SamplerConfig {
  int stride = 20;
  MixtureConfig mixture;
  std::optional<MixtureWeights> forced_weights;
};

struct GuidanceTrace {
  std::vector<int> timesteps;
  std::vector<std::vector<double>> losses;  // per ladder step: before each update, then final
  std::vector<std::vector<bool>> clipped;
  int skipped = 0;
};

struct SampleResult {
  Matrix features;  // normalized clean motion, T x D
  MotionSequence motion;
  std::optional<double> guidance_loss;
  GuidanceTrace trace;
};

namespace detail {

/// Unguided noise predictions for a group of jobs sharing a segment.
inline std::vector<Matrix> forward_group(const McmModel& model, const std::vector<const Matrix*>& xs, int timestep,
                                         const std::vector<CondValues>& conds, Segment seg, const FeatureHook& hook) {
  Tape t(false);
  std::vector<Var> h;
  std::vector<CondVars> cv;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    cv.push_back(conds[i].on(t));
    h.push_back(model.embed_motion(t, t.constant(*xs[i]), timestep));
  }
  auto apply_hook = [&](int site) {
    if (!hook) return;
    std::vector<Matrix> f;
    for (const auto& v : h) f.push_back(v.value());
    hook(site, seg, timestep, f);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = t.constant(std::move(f[i]));
  };
  for (int l = 0; l < model.layer_count(); ++l) {
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (l > 0) h[i] = model.latent(t, l - 1, h[i]);
      h[i] = model.fuse(t, l, h[i], cv[i]);
      if (!h[i].value().allFinite()) {
        throw std::runtime_error("non-finite activations at MCM layer " + std::to_string(l + 1) + " (t = " +
                                 std::to_string(timestep) + ")");
      }
    }
    apply_hook(l);
  }
  for (auto& v : h) v = model.latent(t, model.layer_count() - 1, v);
  apply_hook(kHeadSite);
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < h.size(); ++i) out.push_back(model.output(t, h[i], t.constant(*xs[i]), timestep).value());
  return out;
}

}  // namespace detail

/// Runs all jobs through the DDIM ladder in lockstep. At each step every
/// job evaluates the condition settings with nonzero mixture weight; a
/// job with guidance replaces its (text, draw) prediction by the guided one.
inline std::vector<SampleResult> sample_batch(const McmModel& model, const std::vector<SampleJob>& jobs,
                                              const NoiseSchedule& sched, const SamplerConfig& cfg,
                                              const FeatureStats* stats = nullptr, const FeatureHook& hook = {}) {
  cfg.mixture.validate();
  const std::size_t n = jobs.size();
  std::vector<Matrix> x(n);
  std::vector<CondValues> cond(n);
  std::vector<Rng> mix_rng;
  std::vector<SampleResult> results(n);
  for (std::size_t j = 0; j < n; ++j) {
    const SampleJob& job = jobs[j];
    if (job.frames < 2) throw InputError("length", "motion length must be at least 2");
    if (job.guidance) job.guidance->validate(model);
    Rng noise(derive_seed(job.seed, 1));
    x[j] = Matrix(job.frames, kMotionDim);
    for (Eigen::Index i = 0; i < x[j].size(); ++i) x[j].data()[i] = noise.normal();
    Tape t(false);
    cond[j] = CondValues::from(model.encode_conditions(t, job.conditions, job.frames));
    mix_rng.emplace_back(derive_seed(job.seed, 2));
  }

  const std::vector<int> ladder = ddim_ladder(sched.steps(), cfg.stride);
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    const int t = ladder[k];
    const int t_prev = k + 1 < ladder.size() ? ladder[k + 1] : 0;
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);

    // weights and the distinct settings each job needs
    std::vector<MixtureWeights> weights(n);
    std::vector<std::array<Segment, 4>> eff(n);
    std::map<Segment, std::vector<std::size_t>> groups;
    for (std::size_t j = 0; j < n; ++j) {
      weights[j] = cfg.forced_weights ? *cfg.forced_weights : mixture_weights(t, sched.steps(), cfg.mixture, mix_rng[j]);
      const std::array<double, 4> w = {weights[j].w1, weights[j].w2, weights[j].w3, weights[j].w4};
      const std::array<Segment, 4> settings = {Segment::text_draw, Segment::draw_only, Segment::text_only, Segment::none};
      for (int s = 0; s < 4; ++s) {
        eff[j][s] = cond[j].restricted(settings[s]).segment();
        if (w[s] == 0.0) continue;
        if (s == 0 && jobs[j].guidance) continue;
        auto& g = groups[eff[j][s]];
        if (std::find(g.begin(), g.end(), j) == g.end()) g.push_back(j);
      }
    }

    std::vector<std::map<Segment, Matrix>> eps(n);
    for (const auto& [seg, members] : groups) {
      std::vector<const Matrix*> xs;
      std::vector<CondValues> cs;
      for (std::size_t j : members) {
        xs.push_back(&x[j]);
        cs.push_back(cond[j].restricted(seg));
      }
      std::vector<Matrix> out = detail::forward_group(model, xs, t, cs, seg, hook);
      for (std::size_t m = 0; m < members.size(); ++m) eps[members[m]][seg] = std::move(out[m]);
    }

    for (std::size_t j = 0; j < n; ++j) {
      std::optional<Matrix> guided;
      if (jobs[j].guidance && weights[j].w1 != 0.0) {
        const CondValues c = cond[j].restricted(eff[j][0]);
        GuidedStep gs = guided_noise(model, x[j], t, ab, c, *jobs[j].guidance, stats);
        auto& tr = results[j].trace;
        tr.timesteps.push_back(t);
        tr.losses.push_back(gs.losses);
        tr.clipped.push_back(gs.clipped);
        tr.skipped += gs.skipped;
        results[j].guidance_loss = gs.losses.back();
        guided = std::move(gs.eps);
      }
      const std::array<double, 4> w = {weights[j].w1, weights[j].w2, weights[j].w3, weights[j].w4};
      Matrix mixed = Matrix::Zero(x[j].rows(), x[j].cols());
      for (int s = 0; s < 4; ++s) {
        if (w[s] == 0.0) continue;
        const Matrix& e = (s == 0 && guided) ? *guided : eps[j].at(eff[j][s]);
        mixed += w[s] * e;
      }
      x[j] = ddim_step_ab(x[j], ab, ab_prev, mixed);
      if (!x[j].allFinite()) {
        throw std::runtime_error("sampling produced non-finite state at ladder step " + std::to_string(k) +
                                 " (t = " + std::to_string(t) + ")");
      }
    }
  }

  for (std::size_t j = 0; j < n; ++j) {
    results[j].features = x[j];
    results[j].motion = from_features(model.normalizer().denormalize(x[j]));
  }
  return results;
}

/// Unguided sample for one set of conditions.
inline SampleResult sample_motion(const McmModel& model, const Conditions& conditions, Eigen::Index frames,
                                  const NoiseSchedule& sched, const SamplerConfig& cfg, std::uint64_t seed) {
  return sample_batch(model, {SampleJob{conditions, frames, seed, std::nullopt}}, sched, cfg).front();
}

/// Guided sample (Algorithm 1) for one set of conditions.
inline SampleResult ifg_sample(const McmModel& model, const Conditions& conditions, Eigen::Index frames,
                               const GuidanceConfig& guidance, const FeatureStats& stats, const NoiseSchedule& sched,
                               const SamplerConfig& cfg, std::uint64_t seed) {
  return sample_batch(model, {SampleJob{conditions, frames, seed, guidance}}, sched, cfg, &stats).front();
}

/// Statistics of the fusion output of `layer_index` (1-based) under the
/// (text, draw) setting, pooled over frames and ladder steps of unguided
/// sampling runs of `jobs`.
inline FeatureStats estimate_feature_stats(const McmModel& model, const std::vector<SampleJob>& jobs,
                                           const NoiseSchedule& sched, const SamplerConfig& cfg, int layer_index) {
  if (layer_index < 1 || layer_index > model.layer_count()) throw ConfigError("stats layer index out of range");
  FeatureStats stats(model.config().embed_dim);
  stats.set_layer_index(layer_index);
  std::vector<SampleJob> unguided = jobs;
  for (auto& j : unguided) j.guidance.reset();
  const FeatureHook observe = [&](int layer, Segment seg, int, std::vector<Matrix>& f) {
    if (layer != layer_index - 1 || seg != Segment::text_draw) return;
    for (const auto& m : f) stats.add(m);
  };
  sample_batch(model, unguided, sched, cfg, nullptr, observe);
  stats.finalize();
  return stats;
}

}  // namespace drawmotion
