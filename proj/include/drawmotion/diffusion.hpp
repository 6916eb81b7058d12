#pragma once

// Noise schedule, forward noising, reverse steps and the two-stage
// condition mixture.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/motion.hpp"
#include "drawmotion/rng.hpp"

namespace drawmotion {

inline constexpr int kDefaultDiffusionSteps = 1000;
inline constexpr double kAlphaFirst = 0.9999;
inline constexpr double kAlphaLast = 0.98;

/// Timesteps are 1-based: alpha(t) for t in [1, steps]; alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = kDefaultDiffusionSteps) : steps_(steps) {
    if (steps < 2) throw ConfigError("diffusion schedule needs at least 2 steps");
    alpha_.resize(static_cast<std::size_t>(steps));
    alpha_bar_.resize(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
      const double a = kAlphaFirst + (kAlphaLast - kAlphaFirst) * static_cast<double>(i) / (steps - 1);
      alpha_[static_cast<std::size_t>(i)] = a;
      prod *= a;
      alpha_bar_[static_cast<std::size_t>(i)] = prod;
    }
  }

  int steps() const { return steps_; }

  double alpha(int t) const {
    check(t, 1);
    return alpha_[static_cast<std::size_t>(t - 1)];
  }
  double beta(int t) const { return 1.0 - alpha(t); }
  double alpha_bar(int t) const {
    check(t, 0);
    return t == 0 ? 1.0 : alpha_bar_[static_cast<std::size_t>(t - 1)];
  }

  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  void check(int t, int lo) const {
    if (t < lo || t > steps_) throw std::out_of_range("timestep " + std::to_string(t) + " outside schedule");
  }

  int steps_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule build_schedule(int steps = kDefaultDiffusionSteps) { return NoiseSchedule(steps); }

/// x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps
inline Matrix forward_sample_ab(const Matrix& x0, double alpha_bar, const Matrix& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw std::invalid_argument("forward_sample: shape mismatch");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

inline Matrix forward_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& s) {
  return forward_sample_ab(x0, s.alpha_bar(t), eps);
}

/// Posterior mean of the ancestral step with per-step alpha.
inline Matrix ddpm_mean_ab(const Matrix& x_t, double alpha, double alpha_bar, const Matrix& eps_pred) {
  return (x_t - ((1.0 - alpha) / std::sqrt(1.0 - alpha_bar)) * eps_pred) / std::sqrt(alpha);
}

inline Matrix ddpm_mean(const Matrix& x_t, int t, const Matrix& eps_pred, const NoiseSchedule& s) {
  return ddpm_mean_ab(x_t, s.alpha(t), s.alpha_bar(t), eps_pred);
}

/// Clean-motion estimate implied by a noise prediction.
inline Matrix predict_x0(const Matrix& x_t, double alpha_bar, const Matrix& eps_pred) {
  return (x_t - std::sqrt(1.0 - alpha_bar) * eps_pred) / std::sqrt(alpha_bar);
}

inline Matrix ddim_step_ab(const Matrix& x_t, double ab_t, double ab_prev, const Matrix& eps_pred) {
  const Matrix x0 = predict_x0(x_t, ab_t, eps_pred);
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_pred;
}

/// Deterministic (eta = 0) step from t to t_prev using cumulative alphas.
inline Matrix ddim_step(const Matrix& x_t, int t, int t_prev, const Matrix& eps_pred, const NoiseSchedule& s) {
  if (t_prev > t) throw std::invalid_argument("ddim_step: t_prev must not exceed t");
  if (t_prev == t) return x_t;
  return ddim_step_ab(x_t, s.alpha_bar(t), s.alpha_bar(t_prev), eps_pred);
}

/// t = T, T - stride, ..., down to the last positive value.
inline std::vector<int> ddim_ladder(int steps, int stride) {
  if (stride < 1) throw ConfigError("ladder stride must be positive");
  std::vector<int> ladder;
  for (int t = steps; t >= 1; t -= stride) ladder.push_back(t);
  return ladder;
}

// ---------------------------------------------------------------------------
// Condition mixture

enum class MixtureStage { early, late };

struct MixtureWeights {
  double w1 = 1.0;  // (text, draw)
  double w2 = 0.0;  // (none, draw)
  double w3 = 0.0;  // (text, none)
  double w4 = 0.0;  // (none, none)
  MixtureStage stage = MixtureStage::late;

  double sum() const { return w1 + w2 + w3 + w4; }
};

struct MixtureConfig {
  double w = 2.5;
  double p_draw = 0.2;  // probability that w_hat equals w

  void validate() const {
    if (!(w > 1.0)) throw ConfigError("mixture strength w must exceed 1");
    if (p_draw < 0.0 || p_draw > 1.0) throw ConfigError("p_draw must lie in [0, 1]");
  }
};

/// Early stage (t >= steps / 10) samples w_hat in {w, 0} and returns
/// (w, w_hat, w - w_hat, 1 - 2w); the late stage returns (1, 0, 0, 0) and
/// consumes no randomness.
inline MixtureWeights mixture_weights(int t, int steps, const MixtureConfig& cfg, Rng& rng) {
  cfg.validate();
  MixtureWeights m;
  if (10 * t >= steps) {
    const double w_hat = rng.bernoulli(cfg.p_draw) ? cfg.w : 0.0;
    m = {cfg.w, w_hat, cfg.w - w_hat, 1.0 - 2.0 * cfg.w, MixtureStage::early};
  }
  return m;
}

inline Matrix mix_noise(const Matrix& eps_td, const Matrix& eps_d, const Matrix& eps_t, const Matrix& eps_none,
                        const MixtureWeights& w) {
  return w.w1 * eps_td + w.w2 * eps_d + w.w3 * eps_t + w.w4 * eps_none;
}

}  // namespace drawmotion
