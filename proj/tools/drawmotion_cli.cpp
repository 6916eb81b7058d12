// drawmotion: dataset generation, training, stats estimation, sampling,
// evaluation and the HTTP service.
//
// Every subcommand accepts --config <file.toml> (keys are the long flag
// names, optionally under a [subcommand] section); flags override the file.

#include <filesystem>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "drawmotion/eval.hpp"
#include "drawmotion/service.hpp"

using namespace drawmotion;

namespace {

void require_file(const std::string& path, const char* what) {
  if (path.empty() || !std::filesystem::exists(path)) {
    throw std::runtime_error(std::string(what) + " not found: " + (path.empty() ? "<unset>" : path));
  }
}

std::vector<MotionClip> load_dataset(const std::string& path) {
  require_file(path, "dataset");
  return dataset_from_json(nn::read_json_file(path));
}

StickmanCodec load_codec(const std::string& path) {
  require_file(path, "checkpoint");
  return StickmanCodec::from_checkpoint(nn::read_json_file(path));
}

McmModel load_model(const std::string& path) {
  require_file(path, "checkpoint");
  return McmModel::from_checkpoint(nn::read_json_file(path));
}

void add_guidance_flags(CLI::App* cmd, GuidanceConfig& g, bool& no_guidance) {
  cmd->add_flag("--no-guidance", no_guidance, "disable feature guidance");
  cmd->add_option("--guidance-layer", g.layer_index, "MCM layer whose fusion output is optimized (1-based)");
  cmd->add_option("--guidance-repeat", g.repeat, "SGD iterations per ladder step");
  cmd->add_option("--guidance-lr", g.lr, "SGD step size");
  cmd->add_option("--guidance-eps-md", g.eps_md, "Mahalanobis threshold");
  cmd->add_option("--guidance-clip-scale", g.clip_scale, "clip scale lambda");
  cmd->add_option("--guidance-md-clip", g.use_md_clip, "apply MD clipping (true/false)");
}

void log_config(const CLI::App& app, const CLI::App* cmd) {
  std::cerr << "# resolved configuration (" << cmd->get_name() << ")\n" << app.config_to_str(true, false) << std::flush;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"drawmotion: multi-condition motion diffusion toolkit"};
  app.set_config("--config", "", "TOML configuration file");
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  // gen-data
  DatasetConfig data_cfg;
  std::string data_out = "train.json";
  int data_begin = 0;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic motion dataset");
  gen->add_option("--seed", data_cfg.seed, "dataset seed");
  gen->add_option("--count", data_cfg.sample_count, "number of clips");
  gen->add_option("--begin", data_begin, "index of the first clip (disjoint splits share a seed)");
  gen->add_option("--frames", data_cfg.frames, "frames per clip");
  gen->add_option("--families", data_cfg.families, "motion families");
  gen->add_option("--out", data_out, "output dataset file");

  // train-codec
  CodecConfig codec_cfg;
  CodecTrainConfig codec_train;
  std::string codec_data, codec_out = "codec.json";
  int pose_stride = 5;
  auto* tcodec = app.add_subcommand("train-codec", "pretrain the stickman encoder/decoder");
  tcodec->add_option("--data", codec_data, "training dataset")->required();
  tcodec->add_option("--out", codec_out, "output checkpoint");
  tcodec->add_option("--seed", codec_train.seed, "training seed");
  tcodec->add_option("--steps", codec_train.steps, "optimizer steps");
  tcodec->add_option("--batch", codec_train.batch, "batch size");
  tcodec->add_option("--lr", codec_train.lr, "learning rate");
  tcodec->add_option("--candidates", codec_cfg.candidates, "candidate poses N");
  tcodec->add_option("--pose-stride", pose_stride, "use every k-th frame as a training pose");

  // train-model
  TrainConfig train_cfg;
  ModelConfig model_cfg;
  std::string model_data, model_codec, model_out = "model.json";
  int snapshot_every = 0;
  auto* tmodel = app.add_subcommand("train-model", "train the denoiser");
  tmodel->add_option("--data", model_data, "training dataset")->required();
  tmodel->add_option("--codec", model_codec, "frozen codec checkpoint")->required();
  tmodel->add_option("--out", model_out, "output checkpoint");
  tmodel->add_option("--seed", train_cfg.seed, "training seed");
  tmodel->add_option("--steps", train_cfg.steps, "optimizer steps");
  tmodel->add_option("--batch", train_cfg.batch, "batch size");
  tmodel->add_option("--lr", train_cfg.lr, "learning rate");
  tmodel->add_option("--keep-text", train_cfg.keep_text, "probability of keeping the text condition");
  tmodel->add_option("--keep-draw", train_cfg.keep_draw, "probability of keeping the drawing condition");
  tmodel->add_option("--layers", model_cfg.layers, "MCM layers");
  tmodel->add_option("--embed-dim", model_cfg.embed_dim, "feature width");
  tmodel->add_option("--snapshot-every", snapshot_every, "write <out>.<step> every k steps (0 = never)");

  // estimate-stats
  std::string stats_model, stats_codec, stats_data, stats_out = "stats.json";
  int stats_layer = 3, stats_clips = 48;
  std::uint64_t stats_seed = 0;
  auto* est = app.add_subcommand("estimate-stats", "estimate fusion-feature statistics for MD clipping");
  est->add_option("--model", stats_model, "model checkpoint")->required();
  est->add_option("--codec", stats_codec, "codec checkpoint")->required();
  est->add_option("--data", stats_data, "dataset providing conditions")->required();
  est->add_option("--out", stats_out, "output stats file");
  est->add_option("--layer", stats_layer, "MCM layer index (1-based)");
  est->add_option("--clips", stats_clips, "number of clips to sample");
  est->add_option("--seed", stats_seed, "sampling seed");

  // sample
  std::string sample_model, sample_codec, sample_stats, sample_text, sample_traj, sample_out = "sample.json";
  std::string sample_mode = "uniform";
  int sample_len = 60;
  std::uint64_t sample_seed = 0;
  GuidanceConfig sample_guidance;
  bool sample_no_guidance = false;
  auto* smp = app.add_subcommand("sample", "generate one motion");
  smp->add_option("--model", sample_model, "model checkpoint");
  smp->add_option("--codec", sample_codec, "codec checkpoint");
  smp->add_option("--stats", sample_stats, "feature stats for MD clipping");
  smp->add_option("--text", sample_text, "text prompt");
  smp->add_option("--trajectory", sample_traj, "JSON file: list of [x, z] points in meters, or a generation request");
  smp->add_option("--length", sample_len, "frames");
  smp->add_option("--resample-mode", sample_mode, "uniform or density");
  smp->add_option("--seed", sample_seed, "sampling seed");
  smp->add_option("--out", sample_out, "output file (generation response)");
  add_guidance_flags(smp, sample_guidance, sample_no_guidance);

  // evaluate
  std::string eval_model, eval_codec, eval_stats, eval_test, eval_train, eval_evaluator, eval_out = "report.json";
  int eval_seeds = 5;
  EvalConfig eval_cfg;
  EvaluatorConfig evaluator_cfg;
  bool eval_no_guidance = false;
  auto* ev = app.add_subcommand("evaluate", "metrics over a test set");
  ev->add_option("--model", eval_model, "model checkpoint")->required();
  ev->add_option("--codec", eval_codec, "codec checkpoint")->required();
  ev->add_option("--stats", eval_stats, "feature stats for MD clipping");
  ev->add_option("--test", eval_test, "test dataset")->required();
  ev->add_option("--train", eval_train, "dataset for training the feature extractor");
  ev->add_option("--evaluator", eval_evaluator, "feature extractor checkpoint (trained and written here if missing)");
  ev->add_option("--seeds", eval_seeds, "number of sampling seeds");
  ev->add_option("--evaluator-steps", evaluator_cfg.steps, "training steps for a new feature extractor");
  ev->add_option("--out", eval_out, "output report");
  add_guidance_flags(ev, eval_cfg.guidance_config, eval_no_guidance);

  // report
  std::string report_in, report_out;
  auto* rep = app.add_subcommand("report", "print a saved metric report");
  rep->add_option("--in", report_in, "report file")->required();
  rep->add_option("--out", report_out, "write the parsed report back out");

  // serve
  std::string serve_model, serve_codec, serve_stats, host = "127.0.0.1";
  int port = 8080;
  ServerOptions server_opt;
  auto* srv = app.add_subcommand("serve", "HTTP service for the drawing UI");
  srv->add_option("--model", serve_model, "model checkpoint")->required();
  srv->add_option("--codec", serve_codec, "codec checkpoint")->required();
  srv->add_option("--stats", serve_stats, "feature stats for MD clipping");
  srv->add_option("--host", host, "bind address");
  srv->add_option("--port", port, "port");
  srv->add_option("--threads", server_opt.threads, "worker threads");
  srv->add_option("--queue", server_opt.max_queued, "pending requests beyond the workers before refusing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      log_config(app, gen);
      data_cfg.validate();
      const auto clips = generate_partition(data_cfg, static_cast<std::size_t>(data_begin),
                                            static_cast<std::size_t>(data_begin + data_cfg.sample_count));
      nn::write_json_file(data_out, dataset_to_json(data_cfg, clips));
      std::cerr << "wrote " << clips.size() << " clips to " << data_out << "\n";
    } else if (*tcodec) {
      log_config(app, tcodec);
      const auto poses = collect_poses(load_dataset(codec_data), pose_stride);
      StickmanCodec codec = StickmanCodec::create(codec_cfg, codec_train.seed);
      const auto log = pretrain_codec(codec, poses, codec_train);
      std::cerr << "candidate loss " << log.initial_loss << " -> " << log.final_loss << "\n";
      nn::write_json_file(codec_out, codec.to_checkpoint());
    } else if (*tmodel) {
      log_config(app, tmodel);
      const auto clips = load_dataset(model_data);
      const StickmanCodec codec = load_codec(model_codec);
      model_cfg.max_text_len = std::max(model_cfg.max_text_len, 1);
      McmModel model = McmModel::create(model_cfg, train_cfg.seed);
      std::cerr << "training " << model.params().scalar_count() << " parameters\n";
      const SnapshotFn snap = [&](int step, const McmModel& m) {
        nn::write_json_file(model_out + "." + std::to_string(step), m.to_checkpoint());
      };
      const auto log = train_model(model, codec, clips, train_cfg, snap, snapshot_every);
      for (std::size_t i = 0; i < log.losses.size(); ++i) {
        std::cerr << "step " << (i + 1) * static_cast<std::size_t>(train_cfg.log_every) << " loss " << log.losses[i] << "\n";
      }
      nn::write_json_file(model_out, model.to_checkpoint());
    } else if (*est) {
      log_config(app, est);
      const McmModel model = load_model(stats_model);
      const StickmanCodec codec = load_codec(stats_codec);
      const auto clips = load_dataset(stats_data);
      std::vector<SampleJob> jobs;
      for (int i = 0; i < std::min<int>(stats_clips, static_cast<int>(clips.size())); ++i) {
        const MotionClip& c = clips[static_cast<std::size_t>(i)];
        SampleJob j;
        j.frames = c.motion.frames();
        j.seed = derive_seed(stats_seed, static_cast<std::uint64_t>(i));
        j.conditions.text = model.tokenize_text(c.caption);
        j.conditions.draw = make_draw_input(model, codec, c.motion, protocol_frames(j.frames), SgaStyle{},
                                            derive_seed(stats_seed, 1000 + static_cast<std::uint64_t>(i)));
        jobs.push_back(std::move(j));
      }
      const FeatureStats stats = estimate_feature_stats(model, jobs, model.schedule(), SamplerConfig{}, stats_layer);
      if (stats.rank_warning()) std::cerr << "warning: fewer feature rows than dimensions; ridge raised\n";
      nn::write_json_file(stats_out, stats.to_json());
      std::cerr << "stats over " << stats.count() << " feature rows\n";
    } else if (*smp) {
      log_config(app, smp);
      if (sample_model.empty()) throw std::runtime_error("checkpoint not found: --model is required");
      require_file(sample_model, "checkpoint");
      require_file(sample_codec, "checkpoint");
      Service service;
      service.load({sample_model, sample_codec, sample_stats});
      json req = json::object();
      if (!sample_traj.empty()) {
        require_file(sample_traj, "trajectory file");
        const json t = nn::read_json_file(sample_traj);
        if (t.is_object()) req = t;
        else req["trajectory"] = t;
      }
      if (!sample_text.empty()) req["text"] = sample_text;
      req["length"] = sample_len;
      req["resample_mode"] = sample_mode;
      req["seed"] = sample_seed;
      req["guidance"] = sample_guidance.hyper_to_json();
      req["guidance"]["enabled"] = !sample_no_guidance;
      const json resp = service.generate(req);
      nn::write_json_file(sample_out, resp);
      std::cerr << "wrote " << sample_out;
      if (!resp["guidance_loss"].is_null()) std::cerr << " (guidance loss " << resp["guidance_loss"].get<double>() << ")";
      std::cerr << "\n";
    } else if (*ev) {
      log_config(app, ev);
      const McmModel model = load_model(eval_model);
      const StickmanCodec codec = load_codec(eval_codec);
      const auto test = load_dataset(eval_test);
      ToyContrastiveModel evaluator;
      if (!eval_evaluator.empty() && std::filesystem::exists(eval_evaluator)) {
        evaluator = ToyContrastiveModel::from_checkpoint(nn::read_json_file(eval_evaluator));
      } else {
        if (eval_train.empty()) throw ConfigError("evaluate: --train is needed to fit the feature extractor");
        evaluator = ToyContrastiveModel::create(model.config().vocabulary, evaluator_cfg.seed);
        train_evaluator(evaluator, load_dataset(eval_train), evaluator_cfg);
        if (!eval_evaluator.empty()) nn::write_json_file(eval_evaluator, evaluator.to_checkpoint());
      }
      std::optional<FeatureStats> stats;
      if (!eval_stats.empty()) {
        require_file(eval_stats, "stats file");
        stats = FeatureStats::from_json(nn::read_json_file(eval_stats));
      }
      eval_cfg.guidance = !eval_no_guidance;
      eval_cfg.seeds.clear();
      for (int s = 0; s < eval_seeds; ++s) eval_cfg.seeds.push_back(static_cast<std::uint64_t>(s));
      const MetricReport report = evaluate(model, codec, evaluator, test, eval_cfg, stats ? &*stats : nullptr);
      nn::write_json_file(eval_out, report.to_json());
      std::cout << report.table();
    } else if (*rep) {
      require_file(report_in, "report");
      const MetricReport report = MetricReport::from_json(nn::read_json_file(report_in));
      if (!report_out.empty()) nn::write_json_file(report_out, report.to_json());
      std::cout << report.table();
    } else if (*srv) {
      log_config(app, srv);
      Service service;
      httplib::Server server;
      bind_routes(server, service, server_opt);
      if (!server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
      std::thread loader([&] {
        try {
          service.load({serve_model, serve_codec, serve_stats});
          std::cerr << "ready: " << service.health().dump() << "\n";
        } catch (const std::exception& e) {
          std::cerr << "error: " << e.what() << "\n";
          server.stop();
        }
      });
      std::cerr << "listening on " << host << ":" << port << "\n";
      server.listen_after_bind();
      loader.join();
      if (!service.ready()) return 1;
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.field() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
