#pragma once

// Generation service: request parsing and validation, the three handlers and
// the HTTP binding used by the drawing UI.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "drawmotion/eval.hpp"
#include "drawmotion/ifg.hpp"
#include "drawmotion/mcm.hpp"
#include "drawmotion/sampler.hpp"
#include "drawmotion/stickman_codec.hpp"

// after Eigen: the resolver headers pulled in here define a `_res` macro
#include <httplib.h>

namespace drawmotion {

inline constexpr int kMaxRequestLength = 600;

/// Raised while no checkpoint is loaded.
class ServiceLoading : public std::runtime_error {
 public:
  ServiceLoading() : std::runtime_error("service is still loading") {}
};

/// FNV-1a over raw bytes, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct StickmanRequest {
  int frame = 0;
  StickmanSketch sketch;
};

struct GuidanceOverrides {
  bool enabled = true;
  GuidanceConfig hyper;  // target and mask are filled from the trajectory
};

struct GenerationRequest {
  std::optional<std::string> text;
  std::optional<Trajectory2D> trajectory;  // raw samples in meters
  std::vector<StickmanRequest> stickmen;
  int length = 60;
  ResampleMode resample_mode = ResampleMode::uniform;
  GuidanceOverrides guidance;
  std::optional<std::uint64_t> seed;
};

namespace detail {

template <class T>
T field_as(const json& j, const char* name) {
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw InputError(name, std::string("field '") + name + "' is missing or has the wrong type");
  }
}

inline Matrix points_from_json(const json& j, const std::string& field) {
  if (!j.is_array()) throw InputError(field, field + " must be a list of [x, y] points");
  Matrix p(static_cast<Eigen::Index>(j.size()), 2);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& pt = j[i];
    if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number()) {
      throw InputError(field, field + " point " + std::to_string(i) + " must be [x, y]");
    }
    p(static_cast<Eigen::Index>(i), 0) = pt[0].get<double>();
    p(static_cast<Eigen::Index>(i), 1) = pt[1].get<double>();
  }
  if (!p.allFinite()) throw InputError(field, field + " contains non-finite values");
  return p;
}

inline json points_to_json(const Matrix& p) {
  json out = json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) out.push_back({p(i, 0), p(i, 1)});
  return out;
}

}  // namespace detail

inline Trajectory2D trajectory_from_json(const json& body) {
  Trajectory2D t{detail::points_from_json(body.at("trajectory"), "trajectory"), std::nullopt};
  if (body.contains("timestamps") && !body["timestamps"].is_null()) {
    const json& ts = body["timestamps"];
    if (!ts.is_array() || ts.size() != static_cast<std::size_t>(t.points.rows())) {
      throw InputError("timestamps", "timestamps must have one entry per trajectory point");
    }
    Vector v(t.points.rows());
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (!ts[i].is_number()) throw InputError("timestamps", "timestamps must be numbers");
      v(static_cast<Eigen::Index>(i)) = ts[i].get<double>();
    }
    t.timestamps = v;
  }
  t.validate();
  return t;
}

inline GenerationRequest parse_generation_request(const json& body) {
  if (!body.is_object()) throw InputError("body", "request body must be an object");
  GenerationRequest r;
  if (body.contains("length")) r.length = detail::field_as<int>(body, "length");
  if (r.length < 2 || r.length > kMaxRequestLength) {
    throw InputError("length", "length must lie in [2, " + std::to_string(kMaxRequestLength) + "]");
  }
  if (body.contains("text") && !body["text"].is_null()) {
    r.text = detail::field_as<std::string>(body, "text");
    if (tokenize(*r.text).empty()) r.text.reset();
  }
  if (body.contains("trajectory") && !body["trajectory"].is_null()) r.trajectory = trajectory_from_json(body);
  if (body.contains("resample_mode")) r.resample_mode = parse_resample_mode(detail::field_as<std::string>(body, "resample_mode"));
  if (body.contains("stickmen") && !body["stickmen"].is_null()) {
    const json& arr = body["stickmen"];
    if (!arr.is_array()) throw InputError("stickmen", "stickmen must be a list");
    std::set<int> seen;
    for (const json& s : arr) {
      if (!s.is_object()) throw InputError("stickmen", "each stickman must be an object");
      StickmanRequest sr;
      sr.frame = detail::field_as<int>(s, "frame");
      if (sr.frame < 0 || sr.frame >= r.length) throw InputError("stickmen.frame", "stickman frame outside [0, length)");
      if (!s.contains("strokes")) throw InputError("strokes", "stickman needs strokes");
      sr.sketch = sketch_from_json(s.at("strokes"));
      sr.sketch.validate();
      if (!seen.insert(sr.frame).second) throw InputError("stickmen.frame", "two stickmen anchored at one frame");
      r.stickmen.push_back(std::move(sr));
    }
    if (!r.stickmen.empty() && !r.trajectory) throw InputError("trajectory", "stickmen need a trajectory");
  }
  if (body.contains("seed") && !body["seed"].is_null()) r.seed = detail::field_as<std::uint64_t>(body, "seed");
  if (body.contains("guidance") && !body["guidance"].is_null()) {
    const json& g = body["guidance"];
    if (!g.is_object()) throw InputError("guidance", "guidance must be an object");
    GuidanceConfig& h = r.guidance.hyper;
    try {
      r.guidance.enabled = g.value("enabled", true);
      h.layer_index = g.value("layer_index", h.layer_index);
      h.repeat = g.value("repeat", h.repeat);
      h.lr = g.value("lr", h.lr);
      h.eps_md = g.value("eps_md", h.eps_md);
      h.clip_scale = g.value("clip_scale", h.clip_scale);
      h.use_md_clip = g.value("md_clip", h.use_md_clip);
    } catch (const json::exception&) {
      throw InputError("guidance", "guidance fields have the wrong type");
    }
  }
  return r;
}

struct ServicePaths {
  std::string model;
  std::string codec;
  std::string stats;  // optional; without it guidance runs without MD clipping
};

/// Immutable after load; every handler is safe to call concurrently.
class Service {
 public:
  Service() : started_(std::chrono::steady_clock::now()) {}

  void load(const ServicePaths& paths) {
    const std::string model_bytes = read_file_bytes(paths.model);
    const std::string codec_bytes = read_file_bytes(paths.codec);
    auto state = std::make_shared<State>();
    state->model = std::make_unique<McmModel>(McmModel::from_checkpoint(json::parse(model_bytes)));
    state->codec = std::make_unique<StickmanCodec>(StickmanCodec::from_checkpoint(json::parse(codec_bytes)));
    state->checkpoint_hash = fnv1a_hex(model_bytes);
    state->codec_hash = fnv1a_hex(codec_bytes);
    if (!paths.stats.empty()) {
      const std::string stats_bytes = read_file_bytes(paths.stats);
      state->stats = FeatureStats::from_json(json::parse(stats_bytes));
      state->stats_hash = fnv1a_hex(stats_bytes);
    }
    std::unique_lock lock(mutex_);
    state_ = std::move(state);
  }

  bool ready() const {
    std::shared_lock lock(mutex_);
    return state_ != nullptr;
  }

  json health() const {
    const auto s = snapshot();
    const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    if (!s) return {{"status", "loading"}, {"uptime_s", uptime}};
    return {{"status", "ready"},
            {"checkpoint_hash", s->checkpoint_hash},
            {"codec_hash", s->codec_hash},
            {"stats_hash", s->stats ? json(s->stats_hash) : json(nullptr)},
            {"layers", s->model->layer_count()},
            {"uptime_s", uptime}};
  }

  /// Exactly the resampling that generation applies.
  static Matrix resample_preview(const Trajectory2D& raw, int length, ResampleMode mode) {
    return resample_trajectory(raw, length, mode).points;
  }

  json resample(const json& body) const {
    if (!body.is_object()) throw InputError("body", "request body must be an object");
    const int length = detail::field_as<int>(body, "length");
    if (length < 2 || length > kMaxRequestLength) throw InputError("length", "length out of range");
    const ResampleMode mode =
        body.contains("resample_mode") ? parse_resample_mode(detail::field_as<std::string>(body, "resample_mode")) : ResampleMode::uniform;
    if (!body.contains("trajectory")) throw InputError("trajectory", "field 'trajectory' is missing");
    return {{"resampled_trajectory", detail::points_to_json(resample_preview(trajectory_from_json(body), length, mode))}};
  }

  json generate(const json& body) const { return generate(parse_generation_request(body)); }

  json generate(const GenerationRequest& req) const {
    const auto s = snapshot();
    if (!s) throw ServiceLoading();
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
    const McmModel& model = *s->model;
    const std::uint64_t seed = req.seed ? *req.seed : std::random_device{}();

    const auto t0 = clock::now();
    SampleJob job;
    job.frames = req.length;
    job.seed = seed;
    std::optional<Matrix> resampled;
    if (req.trajectory) resampled = resample_preview(*req.trajectory, req.length, req.resample_mode);
    const auto t1 = clock::now();
    if (req.text) job.conditions.text = model.tokenize_text(tokenize(*req.text));
    if (resampled) {
      DrawInput d;
      d.trajectory = model.normalizer().normalize_trajectory(*resampled);
      if (!req.stickmen.empty()) {
        std::vector<StickmanSketch> sketches;
        for (const auto& st : req.stickmen) sketches.push_back(st.sketch);
        const Matrix emb = s->codec->encode_batch(sketches);
        for (std::size_t i = 0; i < req.stickmen.size(); ++i) {
          d.stickmen.emplace_back(req.stickmen[i].frame, emb.row(static_cast<Eigen::Index>(i)));
        }
      }
      job.conditions.draw = std::move(d);
      if (req.guidance.enabled) {
        GuidanceConfig g = req.guidance.hyper;
        set_trajectory_target(g, model, *resampled);
        job.guidance = std::move(g);
      }
    }
    const auto t2 = clock::now();
    const auto results =
        sample_batch(model, {job}, model.schedule(), SamplerConfig{}, s->stats ? &*s->stats : nullptr);
    const auto t3 = clock::now();
    const SampleResult& r = results.front();

    json out;
    out["motion"] = motion_to_json(r.motion, req.text ? tokenize(*req.text) : std::vector<std::string>{});
    out["guidance_loss"] = r.guidance_loss ? json(*r.guidance_loss) : json(nullptr);
    out["resampled_trajectory"] = resampled ? detail::points_to_json(*resampled) : json(nullptr);
    out["seed"] = seed;
    out["timing_ms"] = {{"resample", ms(t0, t1)}, {"encode", ms(t1, t2)}, {"sample", ms(t2, t3)}};
    return out;
  }

  const McmModel* model() const {
    const auto s = snapshot();
    return s ? s->model.get() : nullptr;
  }

 private:
  struct State {
    std::unique_ptr<McmModel> model;
    std::unique_ptr<StickmanCodec> codec;
    std::optional<FeatureStats> stats;
    std::string checkpoint_hash, codec_hash, stats_hash;
  };

  std::shared_ptr<const State> snapshot() const {
    std::shared_lock lock(mutex_);
    return state_;
  }

  mutable std::shared_mutex mutex_;
  std::shared_ptr<const State> state_;
  std::chrono::steady_clock::time_point started_;
};

inline json error_body(const std::string& field, const std::string& message) {
  return {{"error", {{"field", field}, {"message", message}}}};
}

/// Wraps a handler: InputError -> 400 naming the field, loading -> 503,
/// numerical aborts and other failures -> 500.
template <class Fn>
void respond(httplib::Response& res, Fn&& fn) {
  try {
    res.set_content(fn().dump(), "application/json");
    res.status = 200;
  } catch (const InputError& e) {
    res.status = 400;
    res.set_content(error_body(e.field(), e.what()).dump(), "application/json");
  } catch (const json::exception& e) {
    res.status = 400;
    res.set_content(error_body("body", e.what()).dump(), "application/json");
  } catch (const ServiceLoading& e) {
    res.status = 503;
    res.set_header("Retry-After", "1");
    res.set_content(error_body("", e.what()).dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(error_body("", e.what()).dump(), "application/json");
  }
}

struct ServerOptions {
  int threads = 2;
  std::size_t max_queued = 8;  // requests beyond the pool and queue are refused
};

/// Registers /generate, /resample and /health on `server`.
inline void bind_routes(httplib::Server& server, const Service& service, const ServerOptions& opt = {}) {
  server.new_task_queue = [opt] { return new httplib::ThreadPool(static_cast<std::size_t>(opt.threads), opt.max_queued); };
  server.set_payload_max_length(8 << 20);
  server.Get("/health", [&service](const httplib::Request&, httplib::Response& res) {
    respond(res, [&] { return service.health(); });
  });
  server.Post("/resample", [&service](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { return service.resample(json::parse(req.body)); });
  });
  server.Post("/generate", [&service](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] {
      if (!service.ready()) throw ServiceLoading();
      return service.generate(json::parse(req.body));
    });
  });
}

}  // namespace drawmotion
