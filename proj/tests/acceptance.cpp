// Acceptance run: one PASS/FAIL line per gating criterion, then extra lines
// for the trained-model checks that do not gate. Trained artifacts are cached
// under --cache so reruns only pay for evaluation.
//
// Exit status is 0 whenever the run completes; --strict turns any gating
// FAIL into exit status 1.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "drawmotion/service.hpp"
#include "support.hpp"

using namespace drawmotion;
using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

namespace {

double now_s() { return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count(); }

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
  bool gating = true;
};

class Ledger {
 public:
  void add(std::string name, bool pass, std::string detail, bool gating = true) {
    Outcome o{std::move(name), pass, std::move(detail), gating};
    std::cout << (gating ? "" : "[extra] ") << (o.pass ? "PASS " : "FAIL ") << o.name << ": " << o.detail << std::endl;
    out_.push_back(std::move(o));
  }

  bool gating_ok() const {
    return std::all_of(out_.begin(), out_.end(), [](const Outcome& o) { return !o.gating || o.pass; });
  }

  json to_json() const {
    json a = json::array();
    for (const auto& o : out_) a.push_back({{"name", o.name}, {"pass", o.pass}, {"detail", o.detail}, {"gating", o.gating}});
    return a;
  }

 private:
  std::vector<Outcome> out_;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

/// Collects named exact checks and reports the first failures.
struct CheckList {
  int total = 0;
  std::vector<std::string> failed;
  void operator()(const std::string& what, bool ok) {
    ++total;
    if (!ok) failed.push_back(what);
  }
  void near(const std::string& what, double got, double want, double tol) {
    (*this)(what + " (" + fmt(got, 10) + " vs " + fmt(want, 10) + ")", std::abs(got - want) <= tol);
  }
  std::string summary() const {
    std::string s = std::to_string(total - static_cast<int>(failed.size())) + "/" + std::to_string(total) + " checks";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, failed.size()); ++i) s += "; failed " + failed[i];
    return s;
  }
};

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

void jitter(nn::ParamStore& store, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& p : store.all()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += scale * rng.normal();
  }
}

ModelConfig tiny_model_config(int layers) {
  ModelConfig c;
  c.embed_dim = 8;
  c.layers = layers;
  c.ffn_hidden = 12;
  c.time_hidden = 8;
  c.traj_layers = 2;
  c.stickman_dim = 6;
  return c;
}

CodecConfig tiny_codec_config() {
  CodecConfig c;
  c.embed_dim = 6;
  c.candidates = 2;
  c.stroke_hidden = 4;
  c.blocks = 1;
  c.ffn_hidden = 8;
  c.decoder_hidden = 8;
  c.points_per_stroke = 6;
  return c;
}

Matrix brute_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  Matrix out = Matrix::Zero(q.rows(), v.cols());
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> w(static_cast<std::size_t>(k.rows()));
    double mx = -1e300;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      double d = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) d += q(i, c) * k(j, c);
      w[static_cast<std::size_t>(j)] = d * s;
      mx = std::max(mx, d * s);
    }
    double z = 0.0;
    for (auto& x : w) z += (x = std::exp(x - mx));
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += w[static_cast<std::size_t>(j)] / z * v(j, c);
    }
  }
  return out;
}

Matrix affine(const Matrix& x, const nn::Linear& l) {
  Matrix y(x.rows(), l.weight->value.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index o = 0; o < y.cols(); ++o) {
      double acc = l.bias->value(0, o);
      for (Eigen::Index c = 0; c < x.cols(); ++c) acc += x(i, c) * l.weight->value(c, o);
      y(i, o) = acc;
    }
  }
  return y;
}

double r_squared_linear(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy * sxy / (sxx * syy);
}

// ---------------------------------------------------------------------------
// criteria that need no training

void formula_suite(Ledger& ledger) {
  CheckList c;
  const double tol = 1e-9;

  // candidate loss
  const Matrix gt = limb_offsets(t_pose());
  auto with_losses = [&](std::initializer_list<double> losses) {
    CandidatePoses p;
    int n = 0;
    for (double l : losses) {
      Matrix o = gt;
      o(n % kBones, n % 3) += std::sqrt(l / 0.1);
      p.offsets.push_back(o);
      ++n;
    }
    return p;
  };
  CandidatePoses exact;
  exact.offsets.assign(3, gt);
  c("candidate loss, exact candidates", candidate_loss(exact, gt).total == 0.0);
  c.near("candidate loss N=1", candidate_loss(with_losses({0.3}), gt).total, 3.3, tol);
  c.near("candidate loss N=2", candidate_loss(with_losses({0.2, 0.5}), gt).total, 2.7, tol);

  // schedule and forward noising
  const NoiseSchedule s;
  c("alpha_bar[1] == alpha[1]", s.alpha_bar(1) == s.alpha(1));
  const Matrix x0 = testing::random_matrix(3, 4, 1);
  c("forward sample, eps = 0", forward_sample(x0, 500, Matrix::Zero(3, 4), s) == std::sqrt(s.alpha_bar(500)) * x0);
  c.near("forward sample scalar", forward_sample_ab(scalar(2.0), 0.25, scalar(1.0))(0, 0), 0.5 * 2 + std::sqrt(0.75), tol);
  c.near("forward sample scalar, 4 places", forward_sample_ab(scalar(2.0), 0.25, scalar(1.0))(0, 0), 1.8660, 5e-5);

  // ancestral mean
  const Matrix xt = testing::random_matrix(3, 4, 2);
  c("ancestral mean, eps = 0",
    (ddpm_mean(xt, 300, Matrix::Zero(3, 4), s) - xt / std::sqrt(s.alpha(300))).cwiseAbs().maxCoeff() <= 1e-15);
  c.near("ancestral mean scalar", ddpm_mean_ab(scalar(1.0), 0.98, 0.5, scalar(0.2))(0, 0),
         (1.0 - 0.02 / std::sqrt(0.5) * 0.2) / std::sqrt(0.98), tol);
  c.near("ancestral mean scalar, 5 places", ddpm_mean_ab(scalar(1.0), 0.98, 0.5, scalar(0.2))(0, 0), 1.00444, 5e-6);

  // DDIM step
  c.near("ddim x0 estimate", predict_x0(scalar(1.0), 0.64, scalar(0.5))(0, 0), 0.875, tol);
  c.near("ddim step scalar", ddim_step_ab(scalar(1.0), 0.64, 0.81, scalar(0.5))(0, 0), 0.9 * 0.875 + std::sqrt(0.19) * 0.5, tol);
  c.near("ddim step scalar, 5 places", ddim_step_ab(scalar(1.0), 0.64, 0.81, scalar(0.5))(0, 0), 1.00544, 5e-6);
  c("ddim step t_prev = t",
    (ddim_step(xt, 400, 400, testing::random_matrix(3, 4, 3), s) - xt).cwiseAbs().maxCoeff() <= 1e-12);

  // mixture weights
  const MixtureConfig mc;
  bool draw = false, text = false;
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const MixtureWeights m = mixture_weights(900, 1000, mc, rng);
    if (m.w2 != 0.0) {
      draw = true;
      c("weights with w_hat = w", m.w1 == 2.5 && m.w2 == 2.5 && m.w3 == 0.0 && m.w4 == -4.0 && m.sum() == 1.0);
    } else {
      text = true;
      c("weights with w_hat = 0", m.w1 == 2.5 && m.w2 == 0.0 && m.w3 == 2.5 && m.w4 == -4.0 && m.sum() == 1.0);
    }
  }
  c("both w_hat values drawn", draw && text);
  const MixtureWeights late = mixture_weights(50, 1000, mc, rng);
  c("late-stage weights", late.w1 == 1.0 && late.w2 == 0.0 && late.w3 == 0.0 && late.w4 == 0.0);
  const Matrix a = testing::random_matrix(3, 4, 4), b = testing::random_matrix(3, 4, 5), d = testing::random_matrix(3, 4, 6),
               e = testing::random_matrix(3, 4, 7);
  c("mix (1,0,0,0) is eps_td", mix_noise(a, b, d, e, MixtureWeights{}) == a);
  c("mix of equal inputs", (mix_noise(a, a, a, a, {2.5, 2.5, 0.0, -4.0}) - a).cwiseAbs().maxCoeff() <= 1e-12);

  // supervision
  const Matrix g1 = testing::random_matrix(1, kMotionDim, 8);
  Matrix p = g1;
  p(0, kRootXChannel) += 0.3;
  p(0, kRootZChannel) += 0.4;
  c.near("supervision scalar case", training_losses({p}, {g1}, g1, Vector::Ones(1)).total, 0.25, tol);
  c("supervision all exact", training_losses({g1, g1}, {g1, g1}, g1, Vector::Ones(1)).total == 0.0);
  Matrix off = g1;
  off(0, kPoseChannel) += 1.0;
  c("supervision empty stickman mask", training_losses({off}, {g1}, g1, Vector::Zero(1)).stick == 0.0);

  // guidance loss
  c("guidance loss at the target", guidance_loss(a, a, Matrix::Ones(3, 4)) == 0.0);
  c("guidance loss empty mask", guidance_loss(a, b, Matrix::Zero(3, 4)) == 0.0);
  Matrix tgt = a, mask = Matrix::Zero(3, 4);
  tgt(1, 2) += 0.3;
  mask(1, 2) = 1.0;
  c.near("guidance loss single entry", guidance_loss(a, tgt, mask), 0.09, tol);

  // feature statistics, Mahalanobis and MD clipping
  FeatureStats cst(3);
  cst.add((RowVector(3) << 1.0, -2.0, 0.5).finished().replicate(10, 1));
  cst.finalize();
  c("constant features: mean", (cst.mean() - (RowVector(3) << 1.0, -2.0, 0.5).finished()).cwiseAbs().maxCoeff() <= tol);
  c("constant features: ridge identity", cst.covariance() == cst.ridge() * Matrix::Identity(3, 3));
  FeatureStats rnd(4);
  rnd.add(testing::random_matrix(100, 4, 9));
  rnd.finalize();
  c("covariance symmetric", (rnd.covariance() - rnd.covariance().transpose()).cwiseAbs().maxCoeff() == 0.0);
  const FeatureStats id = FeatureStats::from_moments(RowVector::Zero(2), Matrix::Identity(2, 2));
  const FeatureStats diag = FeatureStats::from_moments(RowVector::Zero(2), (Matrix(2, 2) << 4, 0, 0, 1).finished());
  c("Mahalanobis at the mean", mahalanobis(Matrix::Zero(1, 2), id) == 0.0);
  c.near("Mahalanobis identity", mahalanobis((Matrix(1, 2) << 3, 4).finished(), id), 5.0, tol);
  c.near("Mahalanobis diagonal", mahalanobis((Matrix(1, 2) << 2, 1).finished(), diag), std::sqrt(2.0), tol);
  const Matrix f0 = (Matrix(1, 2) << 1, 0).finished(), f1 = (Matrix(1, 2) << 1.5, 0).finished();
  const ClipResult kept = md_clip(f0, f1, id, 1.0, 0.01);
  c("md_clip within the boundary", !kept.clipped && kept.features == f1);
  const ClipResult pulled = md_clip(Matrix::Zero(1, 2), (Matrix(1, 2) << 10, 0).finished(), id, 1.0, 0.01);
  c("md_clip pulls back", pulled.clipped && std::abs(pulled.features(0, 0) - 0.1) <= tol && pulled.features(0, 1) == 0.0);
  c("md_clip lambda = 0", md_clip(f0, (Matrix(1, 2) << 7, 3).finished(), id, 1.0, 0.0).features == f0);

  ledger.add("formula suite", c.failed.empty(), c.summary());
}

void gradient_integrity(Ledger& ledger) {
  const double t0 = now_s();
  double worst_codec = 0.0, worst_guidance = 0.0, worst_train = 0.0;
  int n_codec = 0, n_guidance = 0, n_train = 0;

  // (a) candidate loss -> encoder parameters
  {
    CodecConfig cc;
    cc.embed_dim = 16;
    cc.candidates = 3;
    cc.stroke_hidden = 8;
    cc.blocks = 1;
    cc.ffn_hidden = 24;
    cc.decoder_hidden = 32;
    cc.points_per_stroke = 8;
    StickmanCodec codec = StickmanCodec::create(cc, 9);
    DatasetConfig dc;
    dc.sample_count = 3;
    const auto poses = collect_poses(generate_synthetic_dataset(dc), 25);
    const auto [stacked, gt] = codec_training_batch(codec, poses, 17, 3);
    auto loss = [&] {
      Tape t(false);
      return ad::candidate_loss(codec.decode(t, codec.encode_points(t, stacked)), gt, cc.candidates).scalar();
    };
    codec.params().zero_grad();
    {
      Tape t(true, true);
      t.backward(ad::candidate_loss(codec.decode(t, codec.encode_points(t, stacked)), gt, cc.candidates));
    }
    for (auto& p : codec.params().all()) {
      if (p->name.rfind("enc.", 0) != 0) continue;
      const Matrix analytic = p->grad;
      const auto g = testing::check_matrix(p->value, analytic, loss, 1e-6, std::max<Eigen::Index>(1, p->value.size() / 6));
      worst_codec = std::max(worst_codec, g.max_rel);
      n_codec += g.checked;
    }
  }

  // (b) guidance loss -> layer-3 fused features through the model tail
  {
    McmModel model = McmModel::create(tiny_model_config(4), 1);
    jitter(model.params(), 101, 0.05);
    const Eigen::Index frames = 4;
    Conditions cond;
    cond.text = model.tokenize_text({"a", "person", "walks", "forward"});
    DrawInput d;
    d.trajectory = testing::random_matrix(frames, 2, 2, 0.5);
    d.stickmen.emplace_back(1, testing::random_matrix(1, 6, 3).row(0));
    cond.draw = d;
    Tape ct(false);
    const CondValues cv = CondValues::from(model.encode_conditions(ct, cond, frames));
    const Matrix x_t = testing::random_matrix(frames, kMotionDim, 3);
    GuidanceConfig g;
    set_trajectory_target(g, model, testing::random_matrix(frames, 2, 4));
    for (int timestep : {980, 400, 20}) {
      const double ab = model.schedule().alpha_bar(timestep);
      Matrix f;
      {
        Tape t(false);
        f = model_until_fusion(model, t, t.constant(x_t), timestep, cv.on(t), g.layer_index).value();
      }
      Tape t(true);
      const Var fv = t.leaf(f);
      t.backward(guidance_objective(model, t, fv, x_t, timestep, ab, cv.on(t), g));
      const Matrix analytic = fv.grad();
      auto loss = [&] {
        Tape u(false);
        return guidance_objective(model, u, u.constant(f), x_t, timestep, ab, cv.on(u), g).scalar();
      };
      const auto r = testing::check_matrix(f, analytic, loss, 1e-6);
      worst_guidance = std::max(worst_guidance, r.max_rel);
      n_guidance += r.checked;
    }
  }

  // (c) training objective -> every model parameter, 2-sample batch
  {
    DatasetConfig dc;
    dc.sample_count = 4;
    dc.frames = 5;
    const auto clips = generate_synthetic_dataset(dc);
    StickmanCodec codec = StickmanCodec::create(tiny_codec_config(), 1);
    codec.freeze();
    McmModel model = McmModel::create(tiny_model_config(2), 16);
    jitter(model.params(), 17, 0.1);
    const auto examples = prepare_examples(model, clips);
    TrainConfig cfg;
    cfg.batch = 2;
    cfg.keep_text = 1.0;
    cfg.keep_draw = 1.0;
    cfg.max_stickmen = 2;
    std::vector<TrainingSample> batch;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed);
      batch = draw_training_batch(model, codec, examples, cfg, model.schedule(), rng);
      if (batch[0].mask.sum() > 0 && batch[1].mask.sum() > 0) break;
    }
    batch[1].conditions.text.reset();
    auto loss = [&] {
      Tape t(false);
      return training_objective(t, model, batch, 1.0).scalar();
    };
    model.params().zero_grad();
    {
      Tape t(true, true);
      t.backward(training_objective(t, model, batch, 1.0));
    }
    for (auto& p : model.params().all()) {
      const Matrix analytic = p->grad;
      const auto g = testing::check_matrix(p->value, analytic, loss, 1e-5);
      worst_train = std::max(worst_train, g.max_rel);
      n_train += g.checked;
    }
  }
  const double dt = now_s() - t0;
  const bool ok = worst_codec <= 1e-4 && worst_guidance <= 1e-4 && worst_train <= 1e-4 && dt <= 120.0;
  ledger.add("gradient integrity", ok,
             "max rel err codec " + fmt(worst_codec, 3) + " (" + std::to_string(n_codec) + " coords), guidance " +
                 fmt(worst_guidance, 3) + " (" + std::to_string(n_guidance) + "), training " + fmt(worst_train, 3) + " (" +
                 std::to_string(n_train) + ", all params); " + fmt(dt, 3) + " s");
}

void ddim_closed_loop(Ledger& ledger) {
  const NoiseSchedule s;
  const Matrix x0 = testing::random_matrix(60, kMotionDim, 5);
  const Matrix eps = testing::random_matrix(60, kMotionDim, 6);
  const auto ladder = ddim_ladder(s.steps(), 20);
  Matrix x = forward_sample(x0, ladder.front(), eps, s);
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    const int t = ladder[k];
    const int tp = k + 1 < ladder.size() ? ladder[k + 1] : 0;
    const Matrix e = (x - std::sqrt(s.alpha_bar(t)) * x0) / std::sqrt(1 - s.alpha_bar(t));
    x = ddim_step(x, t, tp, e, s);
  }
  const double err = (x - x0).cwiseAbs().maxCoeff();
  ledger.add("DDIM closed loop", ladder.size() == 50 && err <= 1e-6,
             std::to_string(ladder.size()) + "-step ladder, max |x - x0| = " + fmt(err, 3));
}

void attention_oracles(Ledger& ledger) {
  McmModel model = McmModel::create(ModelConfig{}, 3);
  jitter(model.params(), 9, 0.1);
  const DrawDecoder& d = model.layer(1).draw;
  double worst = 0.0;
  for (Eigen::Index frames : {1, 7, 30}) {
    const Matrix m = testing::random_matrix(frames, 64, 10 + frames);
    const Matrix ej = testing::random_matrix(frames, 64, 20 + frames);
    const Matrix es = testing::random_matrix(frames, 64, 30 + frames);
    Tape t(false);
    const Matrix got = d(t, t.constant(m), t.constant(ej), t.constant(es)).value();
    Matrix kv(2 * frames, 64);
    kv << m + ej, es;
    const Matrix expect = affine(brute_attention(affine(m, d.q), affine(kv, d.k), affine(kv, d.v)), d.o);
    worst = std::max(worst, (got - expect).cwiseAbs().maxCoeff());
  }
  std::vector<double> ts, macs;
  for (Eigen::Index frames : {32, 64, 128, 256}) {
    Tape t(false);
    const Var m = t.constant(testing::random_matrix(frames, 64, 1));
    const Var et = t.constant(testing::random_matrix(8, 64, 2));
    ad::CountScope scope;
    (void)model.layer(0).text(t, m, et);
    ts.push_back(static_cast<double>(frames));
    macs.push_back(static_cast<double>(scope.macs()));
  }
  const double r2 = r_squared_linear(ts, macs);
  ledger.add("attention oracles", worst <= 1e-10 && r2 >= 0.999,
             "draw decoder vs brute force max diff " + fmt(worst, 3) + ", text decoder MACs linear in T with R^2 = " + fmt(r2, 8));
}

void mcm_routing(Ledger& ledger) {
  McmModel model = McmModel::create(tiny_model_config(2), 8);
  jitter(model.params(), 9, 0.1);
  const Eigen::Index frames = 8;
  auto conditions = [&](std::uint64_t seed, std::vector<std::string> words) {
    Conditions c;
    c.text = model.tokenize_text(words);
    DrawInput d;
    d.trajectory = testing::random_matrix(frames, 2, seed);
    d.stickmen.emplace_back(0, testing::random_matrix(1, 6, seed + 1).row(0));
    d.stickmen.emplace_back(static_cast<int>(frames) - 1, testing::random_matrix(1, 6, seed + 2).row(0));
    c.draw = d;
    return c;
  };
  const Conditions base = conditions(11, {"a", "person", "walks", "in", "a", "circle"});
  const Conditions other = conditions(12, {"someone", "does", "squats"});
  const Matrix x = testing::random_matrix(frames, kMotionDim, 13);
  auto batch_output = [&](const std::vector<Conditions>& cs, std::size_t which) {
    Tape t(false);
    std::vector<Var> xs;
    std::vector<int> tsteps;
    std::vector<CondVars> cv;
    for (std::size_t i = 0; i < cs.size(); ++i) {
      xs.push_back(t.constant(x + 0.1 * static_cast<double>(i) * Matrix::Ones(frames, kMotionDim)));
      tsteps.push_back(300 + static_cast<int>(i));
      cv.push_back(model.encode_conditions(t, cs[i], frames));
    }
    return model.forward_batch(t, xs, tsteps, cv)[which].value();
  };
  int identical = 0;
  for (Segment s : kSegments) {
    Conditions mixed;
    mixed.text = has_text(s) ? base.text : other.text;
    mixed.draw = has_draw(s) ? base.draw : other.draw;
    identical += batch_output({base, base.restricted(s), base.restricted(Segment::none)}, 1) ==
                 batch_output({other.restricted(Segment::text_only), mixed.restricted(s), other}, 1);
  }
  // B4 pass-through: the fusion is the identity for (none, none)
  Tape t(false);
  const Var h = t.constant(testing::random_matrix(frames, 8, 8));
  bool passthrough = true;
  for (int l = 0; l < model.layer_count(); ++l) passthrough &= model.fuse(t, l, h, CondVars{}).value() == h.value();
  const Matrix single = model.forward(t, t.constant(x + 0.1 * Matrix::Ones(frames, kMotionDim)), 301, CondVars{}).value();
  passthrough &= batch_output({base, Conditions{}, other.restricted(Segment::draw_only)}, 1) == single;
  ledger.add("MCM routing", passthrough && identical == 4,
             std::string("B4 pass-through ") + (passthrough ? "bit-exact" : "differs") + "; unused-condition swaps bit-identical in " +
                 std::to_string(identical) + "/4 segments");
}

void flop_ordering(Ledger& ledger) {
  const McmModel model = McmModel::create(ModelConfig{}, 1);
  const FusionFlops a = masked_attention_baseline_flops(60, 16, 64);
  const FusionFlops c = counted_fusion_macs(model, 60, 16, 3);
  const double dm = std::abs(static_cast<double>(c.mcm) / static_cast<double>(a.mcm) - 1.0);
  const double dk = std::abs(static_cast<double>(c.masked) / static_cast<double>(a.masked) - 1.0);
  ledger.add("FLOP ordering", a.mcm < a.masked && c.mcm < c.masked && dm <= 0.05 && dk <= 0.05,
             "T=60 L=16 E=64: analytic mcm " + std::to_string(a.mcm) + " < masked " + std::to_string(a.masked) +
                 "; counter within " + fmt(100 * std::max(dm, dk), 3) + "%");
}

// ---------------------------------------------------------------------------
// trained artifacts

struct Artifacts {
  StickmanCodec codec = StickmanCodec::create(CodecConfig{}, 1);
  StickmanCodec codec_n1 = StickmanCodec::create(CodecConfig{}, 1);
  McmModel model = McmModel::create(ModelConfig{}, 2);
  std::vector<McmModel> snapshots;
  ToyContrastiveModel evaluator = ToyContrastiveModel::create(default_vocabulary(), 3);
  FeatureStats stats;
  std::vector<MotionClip> train, test;
  double train_seconds = 0.0;
};

constexpr int kSnapshotEvery = 500;
constexpr int kModelSteps = 2000;

template <class Fn>
json cached(const fs::path& path, double& seconds, Fn&& build) {
  if (fs::exists(path)) return nn::read_json_file(path);
  const double t0 = now_s();
  json j = build();
  const double dt = now_s() - t0;
  j["acceptance_seconds"] = dt;
  nn::write_json_file(path, j);
  seconds += dt;
  return j;
}

Artifacts prepare(const fs::path& cache) {
  fs::create_directories(cache);
  Artifacts a;
  DatasetConfig dc;
  dc.sample_count = 400;
  dc.seed = 1;
  a.train = generate_synthetic_dataset(dc);
  a.test = generate_partition(dc, 400, 440);
  const auto poses = collect_poses(a.train, 5);
  double fresh = 0.0;

  auto train_codec = [&](int candidates) {
    CodecConfig cc;
    cc.candidates = candidates;
    StickmanCodec c = StickmanCodec::create(cc, 1);
    const CodecTrainLog log = pretrain_codec(c, poses, CodecTrainConfig{});
    std::cout << "  codec N=" << candidates << " loss " << log.initial_loss << " -> " << log.final_loss << std::endl;
    return c.to_checkpoint();
  };
  std::cout << "preparing artifacts in " << cache << std::endl;
  json j = cached(cache / "codec.json", fresh, [&] { return train_codec(8); });
  double secs = j.value("acceptance_seconds", 0.0);
  a.codec = StickmanCodec::from_checkpoint(j);
  j = cached(cache / "codec_n1.json", fresh, [&] { return train_codec(1); });
  a.codec_n1 = StickmanCodec::from_checkpoint(j);

  const fs::path model_path = cache / "model.json";
  if (!fs::exists(model_path)) {
    const double t0 = now_s();
    McmModel m = McmModel::create(ModelConfig{}, 2);
    TrainConfig tc;
    tc.steps = kModelSteps;
    tc.batch = 32;
    tc.log_every = 250;
    const TrainLog log = train_model(m, a.codec, a.train, tc, [&](int step, const McmModel& snap) {
      if (step < kModelSteps) nn::write_json_file(cache / ("model_" + std::to_string(step) + ".json"), snap.to_checkpoint());
      std::cout << "  model step " << step << " (" << fmt(now_s() - t0, 4) << " s)" << std::endl;
    }, kSnapshotEvery);
    std::cout << "  model loss " << log.initial_loss << " -> " << log.final_loss << std::endl;
    json ck = m.to_checkpoint();
    ck["acceptance_seconds"] = now_s() - t0;
    nn::write_json_file(model_path, ck);
    fresh += now_s() - t0;
  }
  j = nn::read_json_file(model_path);
  secs += j.value("acceptance_seconds", 0.0);
  a.model = McmModel::from_checkpoint(j);
  for (int s = kSnapshotEvery; s < kModelSteps; s += kSnapshotEvery) {
    a.snapshots.push_back(McmModel::from_checkpoint(nn::read_json_file(cache / ("model_" + std::to_string(s) + ".json"))));
  }
  a.snapshots.push_back(McmModel::from_checkpoint(j));

  j = cached(cache / "evaluator.json", fresh, [&] {
    ToyContrastiveModel ev = ToyContrastiveModel::create(a.model.config().vocabulary, 3);
    const auto losses = train_evaluator(ev, a.train, EvaluatorConfig{});
    std::cout << "  evaluator loss " << losses.front() << " -> " << losses.back() << std::endl;
    return ev.to_checkpoint();
  });
  secs += j.value("acceptance_seconds", 0.0);
  a.evaluator = ToyContrastiveModel::from_checkpoint(j);

  j = cached(cache / "stats.json", fresh, [&] {
    std::vector<SampleJob> jobs;
    for (std::size_t i = 0; i < 48; ++i) {
      SampleJob job;
      job.frames = a.train[i].motion.frames();
      job.seed = 900 + i;
      job.conditions.text = a.model.tokenize_text(a.train[i].caption);
      job.conditions.draw = make_draw_input(a.model, a.codec, a.train[i].motion, protocol_frames(job.frames), SgaStyle{}, 77 + i);
      jobs.push_back(std::move(job));
    }
    return estimate_feature_stats(a.model, jobs, a.model.schedule(), SamplerConfig{}, 3).to_json();
  });
  secs += j.value("acceptance_seconds", 0.0);
  a.stats = FeatureStats::from_json(j);
  a.train_seconds = secs;
  std::cout << "artifacts ready (" << fmt(fresh, 4) << " s spent now, " << fmt(secs, 4) << " s recorded for the toy pipeline)"
            << std::endl;
  return a;
}

EvalConfig protocol(std::vector<std::uint64_t> seeds, bool guidance) {
  EvalConfig cfg;
  cfg.seeds = std::move(seeds);
  cfg.guidance = guidance;
  return cfg;
}

/// FID-like score of one seed's (text, draw) generations against the test clips.
double fid_for(const Artifacts& a, const McmModel& model, std::uint64_t seed, const FeatureHook& hook = {}) {
  const EvalConfig cfg = protocol({seed}, false);
  const GeneratedSet g = generate_for_clips(model, a.codec, a.test, cfg, seed, nullptr, model.schedule(), hook);
  return score_motions(g.motions, a.test, a.codec, a.evaluator, seed, cfg).fid_like;
}

void perturbation_ordering(Ledger& ledger, const Artifacts& a) {
  const std::vector<double> sweep = {0.01, 0.1, 0.3, 0.5};
  std::vector<double> base, fusion, head(sweep.size(), 0.0);
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double f0 = fid_for(a, a.model, seed);
    const double ff = fid_for(a, a.model, seed, perturbation_hook(PerturbSite::mcm_fusion, 0.1, seed, 3)) - f0;
    double fh = 0.0;
    for (std::size_t k = 0; k < sweep.size(); ++k) {
      const double v = fid_for(a, a.model, seed, perturbation_hook(PerturbSite::final_layer, sweep[k], seed)) - f0;
      head[k] += v / 5.0;
      if (sweep[k] == 0.1) fh = v;
    }
    base.push_back(f0);
    fusion.push_back(ff);
    wins += ff < fh;
    std::cout << "  seed " << seed << ": FID " << fmt(f0) << ", +fusion " << fmt(ff) << ", +final " << fmt(fh) << std::endl;
  }
  const double mf = std::accumulate(fusion.begin(), fusion.end(), 0.0) / 5.0;
  const double mh = head[1];
  ledger.add("perturbation ordering", mf < mh,
             "lambda=0.1 FID-like degradation over 5 seeds: fusion " + fmt(mf) + " < final layer " + fmt(mh) + " (" +
                 std::to_string(wins) + "/5 seeds)");

  bool monotone = head[0] >= 0.0;
  for (std::size_t k = 1; k < head.size(); ++k) monotone &= head[k] >= head[k - 1];
  std::string curve = "0";
  for (double h : head) curve += ", " + fmt(h);
  ledger.add("final-layer lambda sweep monotone", monotone, "degradation at {0, 0.01, 0.1, 0.3, 0.5}: " + curve, false);
}

void pca_ordering(Ledger& ledger, const Artifacts& a) {
  const McmModel& model = a.model;
  const Eigen::Index e = model.config().embed_dim;
  const int layers = model.layer_count();
  // fused features of every layer for the four condition settings on the same noised test clips
  std::map<Segment, std::vector<std::vector<Matrix>>> feats;
  Rng rng(5);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    const MotionClip& clip = a.test[i];
    const Matrix x0 = model.normalizer().normalize(to_features(clip.motion));
    Conditions full;
    full.text = model.tokenize_text(clip.caption);
    full.draw = make_draw_input(model, a.codec, clip.motion, protocol_frames(x0.rows()), SgaStyle{}, 3000 + i);
    for (int timestep : {980, 700, 400, 100, 20}) {
      Matrix eps(x0.rows(), x0.cols());
      for (Eigen::Index k = 0; k < eps.size(); ++k) eps.data()[k] = rng.normal();
      const Matrix x_t = forward_sample(x0, timestep, eps, model.schedule());
      for (Segment s : kSegments) {
        Tape t(false);
        const CondVars c = model.encode_conditions(t, full.restricted(s), x0.rows());
        auto& slot = feats[s];
        slot.resize(static_cast<std::size_t>(layers));
        for (int n = 1; n <= layers; ++n) {
          slot[static_cast<std::size_t>(n - 1)].push_back(model_until_fusion(model, t, t.constant(x_t), timestep, c, n).value());
        }
      }
    }
  }
  auto dim = [&](Segment s, int layer) {
    const auto& parts = feats[s][static_cast<std::size_t>(layer - 1)];
    Eigen::Index rows = 0;
    for (const auto& m : parts) rows += m.rows();
    Matrix all(rows, e);
    rows = 0;
    for (const auto& m : parts) {
      all.middleRows(rows, m.rows()) = m;
      rows += m.rows();
    }
    return pca_intrinsic_dim(all, 0.999);
  };
  std::string detail;
  bool gate = false;
  for (int layer = 1; layer <= layers; ++layer) {
    const int td = dim(Segment::text_draw, layer), to = dim(Segment::text_only, layer), dr = dim(Segment::draw_only, layer),
              none = dim(Segment::none, layer);
    const bool ok = td > std::max(to, dr) && std::min(to, dr) > none;
    if (layer == 3) gate = ok;
    detail += (layer > 1 ? "; " : "") + std::string("layer ") + std::to_string(layer) + ": td " + std::to_string(td) + ", t " +
              std::to_string(to) + ", d " + std::to_string(dr) + ", none " + std::to_string(none) + (layer == 3 ? " (gated)" : "");
  }
  ledger.add("PCA ordering", gate, "99.9% intrinsic dims of fused features, " + detail);
}

void ifg_efficacy(Ledger& ledger, const Artifacts& a) {
  const double t0 = now_s();
  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  const MetricReport un = evaluate(a.model, a.codec, a.evaluator, a.test, protocol(seeds, false), &a.stats);
  const MetricReport gu = evaluate(a.model, a.codec, a.evaluator, a.test, protocol(seeds, true), &a.stats);
  EvalConfig nc = protocol(seeds, true);
  nc.guidance_config.use_md_clip = false;
  const MetricReport no = evaluate(a.model, a.codec, a.evaluator, a.test, nc, &a.stats);
  const double eval_s = now_s() - t0;
  std::cout << "unguided\n" << un.table() << "guided\n" << gu.table() << "guided, no MD clip\n" << no.table();

  const double te_u = un.metrics.at("traj_err").mean, te_g = gu.metrics.at("traj_err").mean;
  const double fid_u = un.metrics.at("fid_like").mean, fid_g = gu.metrics.at("fid_like").mean;
  const double fid_n = no.metrics.at("fid_like").mean;
  const bool traj = te_g <= 0.5 * te_u;
  const bool fid = fid_g <= 1.15 * fid_u;
  const bool clip = fid_n > fid_g;
  const double hours = (a.train_seconds + eval_s) / 3600.0;
  ledger.add("IFG efficacy", traj && fid && clip && hours <= 4.0,
             "Traj.Err " + fmt(te_g) + " vs unguided " + fmt(te_u) + " (ratio " + fmt(te_g / te_u, 3) + ", need <= 0.5); FID-like " +
                 fmt(fid_g) + " vs " + fmt(fid_u) + " (" + fmt(100 * (fid_g / fid_u - 1), 3) + "%, need <= 15%); without MD clip " +
                 fmt(fid_n) + " (need > " + fmt(fid_g) + "); train+eval " + fmt(hours, 3) + " h");
}

void codec_round_trip(Ledger& ledger, const Artifacts& a) {
  const auto held = collect_poses(a.test, 7);
  const double rmse8 = best_candidate_rmse(a.codec, held, SgaStyle::noiseless(), 5);
  const double rmse1 = best_candidate_rmse(a.codec_n1, held, SgaStyle::noiseless(), 5);
  double perm = 0.0;
  Rng rng(4);
  for (std::size_t i = 0; i < held.size(); i += 5) {
    const StickmanSketch s = generate_stickman(held[i], SgaStyle{}, i);
    const RowVector e = a.codec.encode(s);
    std::vector<int> order(6);
    std::iota(order.begin(), order.end(), 0);
    for (int k = 0; k < 4; ++k) {
      rng.shuffle(order);
      StickmanSketch p;
      for (int o : order) p.strokes.push_back(s.strokes[static_cast<std::size_t>(o)]);
      perm = std::max(perm, (a.codec.encode(p) - e).cwiseAbs().maxCoeff());
    }
  }
  ledger.add("codec round-trip", rmse8 <= 0.08 && perm <= 1e-6 && rmse8 < rmse1,
             "held-out noiseless best-candidate RMSE " + fmt(rmse8) + " m (N=1 ablation " + fmt(rmse1) +
                 " m); stroke-permutation max diff " + fmt(perm, 3) + " over " + std::to_string(held.size()) + " poses");

  // StiSim of a sketch's own source pose
  double sim = 0.0;
  for (std::size_t i = 0; i < held.size(); ++i) sim += sti_sim(held[i], generate_stickman(held[i], SgaStyle::noiseless(), i), a.codec);
  sim /= static_cast<double>(held.size());
  ledger.add("StiSim of the source pose", sim >= 95.0, "mean " + fmt(sim) + "% on noiseless held-out sketches", false);

  // a walking pose and its depth mirror draw the same stickman
  PoseAngles left, right;
  left.left_hip_flex = 0.5;
  left.right_hip_flex = -0.5;
  left.left_knee = 0.3;
  right.left_hip_flex = -0.5;
  right.right_hip_flex = 0.5;
  right.right_knee = 0.3;
  const StickmanSketch s = generate_stickman(pose_from_angles(left), SgaStyle::noiseless(), 1);
  const StickmanSketch s2 = generate_stickman(pose_from_angles(right), SgaStyle::noiseless(), 1);
  const CandidatePoses c = a.codec.decode_candidates(a.codec.encode(s));
  int left_fwd = 0, right_fwd = 0;
  std::string dz;
  for (std::size_t n = 0; n < c.size(); ++n) {
    const Pose p = c.pose(n);
    const double d = p(kLeftKnee, 2) - p(kRightKnee, 2);
    left_fwd += d > 0.1;
    right_fwd += d < -0.1;
    dz += (n ? ", " : "") + fmt(d, 2);
  }
  double sketch_gap = 0.0;
  for (std::size_t k = 0; k < 6; ++k) sketch_gap = std::max(sketch_gap, (s.strokes[k] - s2.strokes[k]).cwiseAbs().maxCoeff());
  ledger.add("ambiguous legs give diverse candidates", left_fwd > 0 && right_fwd > 0,
             "knee depth difference per candidate [" + dz + "] m; mirrored sketches differ by " + fmt(sketch_gap, 3), false);
}

void training_curve(Ledger& ledger, const Artifacts& a) {
  std::vector<double> fids;
  std::string detail;
  for (std::size_t k = 0; k < a.snapshots.size(); ++k) {
    const McmModel& m = a.snapshots[k];
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::vector<SampleJob> jobs;
      for (std::size_t i = 0; i < a.test.size(); ++i) jobs.push_back({Conditions{}, a.test[i].motion.frames(), derive_seed(seed, i), std::nullopt});
      std::vector<MotionSequence> motions;
      for (const auto& r : sample_batch(m, jobs, m.schedule(), SamplerConfig{})) motions.push_back(r.motion);
      std::vector<MotionSequence> real;
      for (const auto& c : a.test) real.push_back(c.motion);
      total += fid_like(a.evaluator.motion_features(motions), a.evaluator.motion_features(real)) / 3.0;
    }
    fids.push_back(total);
    detail += (k ? ", " : "") + std::to_string((k + 1) * kSnapshotEvery) + " steps " + fmt(total);
  }
  // the last three snapshots
  const std::size_t n = fids.size();
  const bool ok = n >= 3 && fids[n - 3] > fids[n - 2] && fids[n - 2] > fids[n - 1];
  ledger.add("unconditional FID-like improves over 3 snapshots", ok, detail, false);
}

void self_target(Ledger& ledger, const Artifacts& a) {
  const McmModel& model = a.model;
  int steps = 0, non_increasing = 0;
  double worst = 0.0;
  bool final_ok = true;
  for (std::size_t i = 0; i < 5; ++i) {
    const MotionClip& clip = a.test[i];
    SampleJob job;
    job.frames = clip.motion.frames();
    job.seed = 50 + i;
    job.conditions.text = model.tokenize_text(clip.caption);
    job.conditions.draw = make_draw_input(model, a.codec, clip.motion, protocol_frames(job.frames), SgaStyle{}, 60 + i);
    const SampleResult plain = sample_batch(model, {job}, model.schedule(), SamplerConfig{}).front();
    GuidanceConfig g;
    set_trajectory_target(g, model, plain.motion.root_xz);
    job.guidance = g;
    const SampleResult guided = sample_batch(model, {job}, model.schedule(), SamplerConfig{}, &a.stats).front();
    for (const auto& l : guided.trace.losses) {
      ++steps;
      non_increasing += l.back() <= l.front() + 1e-12;
    }
    final_ok &= guided.trace.losses.back().back() <= guided.trace.losses.back().front() + 1e-12;
    worst = std::max(worst, (guided.motion.root_xz - plain.motion.root_xz).rowwise().norm().mean());
  }
  const double frac = static_cast<double>(non_increasing) / steps;
  ledger.add("self-target guidance loss non-increasing", frac >= 0.9 && final_ok,
             fmt(100 * frac, 4) + "% of " + std::to_string(steps) + " ladder steps", false);
  ledger.add("self-target trajectory within 0.05 m", worst <= 0.05, "largest mean deviation " + fmt(worst) + " m over 5 clips", false);
}

void service_straight_line(Ledger& ledger, const fs::path& cache) {
  Service svc;
  svc.load({(cache / "model.json").string(), (cache / "codec.json").string(), (cache / "stats.json").string()});
  json line = json::array();
  for (int i = 0; i < 31; ++i) line.push_back({0.1 * i, 0.0});
  int better = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    json req = {{"text", "a person walks forward"}, {"trajectory", line}, {"length", 60}, {"seed", seed}};
    const json guided = svc.generate(req);
    req["guidance"] = {{"enabled", false}};
    const json plain = svc.generate(req);
    const Matrix target = detail::points_from_json(guided.at("resampled_trajectory"), "trajectory");
    auto err = [&](const json& r) { return (motion_from_json(r.at("motion")).root_xz - target).rowwise().norm().mean(); };
    const double eg = err(guided), ep = err(plain);
    better += eg < ep;
    per_seed += (seed ? ", " : "") + fmt(eg, 3) + " vs " + fmt(ep, 3);
  }
  ledger.add("service straight 3 m line beats unguided", better == 5, "Traj.Err guided vs unguided per seed: " + per_seed, false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string cache = "acceptance_cache";
  bool strict = false;
  app.add_option("--cache", cache, "directory for trained artifacts");
  app.add_flag("--strict", strict, "exit 1 when a gating criterion fails");
  CLI11_PARSE(app, argc, argv);

  const double t0 = now_s();
  Ledger ledger;
  try {
    formula_suite(ledger);
    gradient_integrity(ledger);
    ddim_closed_loop(ledger);
    attention_oracles(ledger);
    mcm_routing(ledger);
    flop_ordering(ledger);

    const Artifacts a = prepare(cache);
    perturbation_ordering(ledger, a);
    pca_ordering(ledger, a);
    ifg_efficacy(ledger, a);
    codec_round_trip(ledger, a);
    training_curve(ledger, a);
    self_target(ledger, a);
    service_straight_line(ledger, cache);
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << std::endl;
    return 2;
  }
  nn::write_json_file(fs::path(cache) / "acceptance_results.json", ledger.to_json(), 2);
  std::cout << "acceptance finished in " << fmt(now_s() - t0, 4) << " s" << std::endl;
  return strict && !ledger.gating_ok() ? 1 : 0;
}
