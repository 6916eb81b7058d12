#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/nn.hpp"
#include "drawmotion/rng.hpp"

namespace testing {

using drawmotion::Matrix;

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  drawmotion::Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

struct GradCheck {
  double max_rel = 0.0;
  int checked = 0;
};

/// Relative error |a - n| / max(|a| + |n|, floor) over sampled coordinates.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

/// Central differences of `loss` with respect to every coordinate of
/// `value` (or every `stride`-th), compared with `analytic`.
inline GradCheck check_matrix(Matrix& value, const Matrix& analytic, const std::function<double()>& loss,
                              double h = 1e-5, Eigen::Index stride = 1) {
  GradCheck g;
  for (Eigen::Index i = 0; i < value.size(); i += stride) {
    const double orig = value.data()[i];
    value.data()[i] = orig + h;
    const double up = loss();
    value.data()[i] = orig - h;
    const double down = loss();
    value.data()[i] = orig;
    g.max_rel = std::max(g.max_rel, rel_err(analytic.data()[i], (up - down) / (2 * h)));
    ++g.checked;
  }
  return g;
}

}  // namespace testing
