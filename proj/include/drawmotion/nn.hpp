#pragma once

// Parameter storage, layer building blocks, the Adam optimizer and the
// checkpoint record shared by the stickman codec and the denoiser.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "drawmotion/autodiff.hpp"
#include "drawmotion/rng.hpp"

namespace drawmotion::nn {

using ad::Param;
using ad::Tape;
using ad::Var;
using json = nlohmann::json;

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Param& add(const std::string& name, Matrix value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = std::move(value);
    p->zero_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  /// Scaled Gaussian initialization (fan-in).
  Param& add_weight(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng, double gain = 1.0) {
    Matrix w(in, out);
    const double sigma = gain / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal() * sigma;
    return add(name, std::move(w));
  }

  Param& add_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return add(name, Matrix::Zero(rows, cols));
  }

  Param& add_ones(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return add(name, Matrix::Ones(rows, cols));
  }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return *params_[it->second];
  }

  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return *params_[it->second];
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<std::unique_ptr<Param>>& all() { return params_; }
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) s += p->grad.squaredNorm();
    return std::sqrt(s);
  }

  void scale_grad(double f) {
    for (auto& p : params_) p->grad *= f;
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers hold pointers into a ParamStore they do not own. Gradients reach the
// parameters only through tapes created with train_params = true.

struct Linear {
  Param* weight = nullptr;  // in x out
  Param* bias = nullptr;    // 1 x out

  static Linear create(ParamStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                       double gain = 1.0) {
    Linear l;
    l.weight = &store.add_weight(name + ".weight", in, out, rng, gain);
    l.bias = &store.add_zeros(name + ".bias", 1, out);
    return l;
  }

  Eigen::Index in_features() const { return weight->value.rows(); }
  Eigen::Index out_features() const { return weight->value.cols(); }

  Var operator()(Tape& t, const Var& x) const {
    return ad::add_row(ad::matmul(x, t.param(*weight)), t.param(*bias));
  }
};

struct LayerNorm {
  Param* gain = nullptr;
  Param* bias = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& name, Eigen::Index dim) {
    LayerNorm l;
    l.gain = &store.add_ones(name + ".gain", 1, dim);
    l.bias = &store.add_zeros(name + ".bias", 1, dim);
    return l;
  }

  Var operator()(Tape& t, const Var& x) const { return ad::layer_norm(x, t.param(*gain), t.param(*bias)); }
};

/// 1-D convolution along the token axis, odd kernel, zero "same" padding.
struct Conv1d {
  std::vector<Param*> taps;  // kernel entries, each in x out
  Param* bias = nullptr;

  static Conv1d create(ParamStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, int kernel,
                       Rng& rng) {
    if (kernel % 2 != 1) throw std::invalid_argument("Conv1d kernel must be odd");
    Conv1d c;
    const double gain = 1.0 / std::sqrt(static_cast<double>(kernel));
    for (int k = 0; k < kernel; ++k) {
      c.taps.push_back(&store.add_weight(name + ".tap" + std::to_string(k), in, out, rng, gain));
    }
    c.bias = &store.add_zeros(name + ".bias", 1, out);
    return c;
  }

  /// `segment` > 0 convolves independent consecutive blocks of that many rows.
  Var operator()(Tape& t, const Var& x, Eigen::Index segment = 0) const {
    const int half = static_cast<int>(taps.size()) / 2;
    std::vector<Var> terms;
    terms.reserve(taps.size());
    for (int k = 0; k < static_cast<int>(taps.size()); ++k) {
      // out[i] += x[i + k - half] * W_k
      const int offset = half - k;
      const Var shifted = offset == 0 ? x : ad::shift_rows(x, offset, segment);
      terms.push_back(ad::matmul(shifted, t.param(*taps[static_cast<std::size_t>(k)])));
    }
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
    return ad::add_row(acc, t.param(*bias));
  }
};

struct FeedForward {
  Linear in;
  Linear out;

  static FeedForward create(ParamStore& store, const std::string& name, Eigen::Index dim, Eigen::Index hidden, Rng& rng) {
    return {Linear::create(store, name + ".in", dim, hidden, rng), Linear::create(store, name + ".out", hidden, dim, rng)};
  }

  Var operator()(Tape& t, const Var& x) const { return out(t, ad::silu(in(t, x))); }
};

/// softmax(Q K^T / sqrt(d)) V for a single head.
inline Var dot_product_attention(const Var& q, const Var& k, const Var& v) {
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Var scores = ad::scale(ad::matmul_nt(q, k), s);
  return ad::matmul(ad::softmax_rows(scores), v);
}

/// Efficient attention: softmax_channels(Q) (softmax_tokens(K)^T V).
/// Cost is linear in both query and key token counts.
inline Var efficient_attention(const Var& q_logits, const Var& k_logits, const Var& v) {
  const Var q = ad::softmax_rows(q_logits);
  const Var k = ad::softmax_cols(k_logits);
  const Var context = ad::matmul_tn(k, v);
  return ad::matmul(q, context);
}

/// Standard pre-norm transformer block (self attention + feed-forward).
struct TransformerBlock {
  LayerNorm norm1, norm2;
  Linear q, k, v, o;
  FeedForward ffn;

  static TransformerBlock create(ParamStore& store, const std::string& name, Eigen::Index dim, Eigen::Index hidden,
                                 Rng& rng) {
    TransformerBlock b;
    b.norm1 = LayerNorm::create(store, name + ".norm1", dim);
    b.norm2 = LayerNorm::create(store, name + ".norm2", dim);
    b.q = Linear::create(store, name + ".q", dim, dim, rng);
    b.k = Linear::create(store, name + ".k", dim, dim, rng);
    b.v = Linear::create(store, name + ".v", dim, dim, rng);
    b.o = Linear::create(store, name + ".o", dim, dim, rng);
    b.ffn = FeedForward::create(store, name + ".ffn", dim, hidden, rng);
    return b;
  }

  Var operator()(Tape& t, const Var& x) const {
    const Var h = norm1(t, x);
    const Var a = o(t, dot_product_attention(q(t, h), k(t, h), v(t, h)));
    const Var y = ad::add(x, a);
    return ad::add(y, ffn(t, norm2(t, y)));
  }
};

// ---------------------------------------------------------------------------

/// Sinusoidal features of a scalar position, length `dim` (sin/cos pairs).
inline RowVector sinusoid(double position, Eigen::Index dim) {
  RowVector r(dim);
  const Eigen::Index half = dim / 2;
  for (Eigen::Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    r(2 * i) = std::sin(position * freq);
    r(2 * i + 1) = std::cos(position * freq);
  }
  if (dim % 2 == 1) r(dim - 1) = 0.0;
  return r;
}

/// Rows 0..n-1 of sinusoidal position codes.
inline Matrix positional_table(Eigen::Index n, Eigen::Index dim) {
  Matrix m(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) = sinusoid(static_cast<double>(i), dim);
  return m;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store, double lr_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.lr * lr_scale;
    for (auto& p : store.all()) {
      auto& [m, v] = moments_[p->name];
      if (m.size() == 0) {
        m = Matrix::Zero(p->value.rows(), p->value.cols());
        v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p->grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
      const Matrix mhat = m / c1;
      const Matrix denom = ((v / c2).array().sqrt() + cfg_.eps).matrix();
      p->value -= lr * mhat.cwiseQuotient(denom);
      if (cfg_.weight_decay > 0.0) p->value -= lr * cfg_.weight_decay * p->value;
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

// ---------------------------------------------------------------------------
// Checkpoint record: {"format", "version", "kind", "config", "params": [{name, shape, data}]}

inline constexpr const char* kCheckpointFormat = "drawmotion-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json matrix_to_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

inline Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("shape").at(0).get<Eigen::Index>();
  const auto cols = j.at("shape").at(1).get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw std::runtime_error("matrix data/shape mismatch");
  Matrix m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++].get<double>();
  }
  return m;
}

inline json checkpoint_to_json(const std::string& kind, const json& config, const ParamStore& store) {
  json params = json::array();
  for (const auto& p : store.all()) {
    json entry = matrix_to_json(p->value);
    entry["name"] = p->name;
    params.push_back(std::move(entry));
  }
  return json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"kind", kind},
              {"config", config},
              {"params", std::move(params)}};
}

/// Validates the envelope and copies every named array into `store`, whose
/// layout must already match.
inline void load_params(const json& record, const std::string& kind, ParamStore& store) {
  if (record.value("format", "") != kCheckpointFormat) throw std::runtime_error("not a drawmotion checkpoint");
  if (record.value("version", 0) != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  if (record.value("kind", "") != kind) throw std::runtime_error("checkpoint kind mismatch: expected " + kind);
  std::size_t loaded = 0;
  for (const auto& entry : record.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    Param& p = store.at(name);
    Matrix m = matrix_from_json(entry);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    p.value = std::move(m);
    ++loaded;
  }
  if (loaded != store.all().size()) throw std::runtime_error("checkpoint is missing parameters");
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

inline void write_json_file(const std::filesystem::path& path, const json& j, int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(indent) << '\n';
}

}  // namespace drawmotion::nn
