#include "tivode/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tivode/config.hpp"
#include "tivode/errors.hpp"
#include "tivode/metrics.hpp"
#include "tivode/model.hpp"
#include "tivode/serialize.hpp"
#include "tivode/shapes.hpp"

namespace tivode {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt_time4(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", t);
  return buf;
}

std::size_t thread_cap() {
  const char* env = std::getenv("TIVODE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw InputError("TIVODE_THREADS must be a positive integer");
  return static_cast<std::size_t>(std::min(v, 64L));
}

// "fps:<n>" expands to n+1 uniform times on [0,1]; otherwise a comma list of
// strictly increasing floats in [0,1].
TimeGrid parse_times(const std::string& text) {
  std::vector<double> ts;
  if (text.rfind("fps:", 0) == 0) {
    char* end = nullptr;
    const long n = std::strtol(text.c_str() + 4, &end, 10);
    if (*end != '\0' || n < 1) throw InputError("bad fps shorthand: " + text);
    for (long i = 0; i <= n; ++i) ts.push_back(static_cast<double>(i) / static_cast<double>(n));
  } else {
    std::istringstream is(text);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      errno = 0;
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (errno != 0 || end == tok.c_str() || *end != '\0') {
        throw InputError("bad time value: " + tok);
      }
      ts.push_back(v);
    }
    if (ts.empty()) throw InputError("empty time grid");
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i] < 0.0 || ts[i] > 1.0) throw InputError("times must lie in [0,1]");
    if (i > 0 && ts[i] <= ts[i - 1]) throw InputError("times must be strictly increasing");
  }
  return TimeGrid(std::move(ts));
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << content;
  if (!os) throw IoError("write failed: " + path.string());
}

void append_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw IoError("cannot append to " + path.string());
  os << content;
  if (!os) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

const char* pattern_key(MotionPattern p) {
  switch (p) {
    case MotionPattern::up_then_down: return "up_then_down";
    case MotionPattern::left_then_right: return "left_then_right";
    case MotionPattern::down_then_up: return "down_then_up";
    case MotionPattern::right_then_left: return "right_then_left";
    case MotionPattern::still: return "still";
  }
  return "?";
}

constexpr MotionPattern kAllPatterns[] = {
    MotionPattern::up_then_down, MotionPattern::left_then_right, MotionPattern::down_then_up,
    MotionPattern::right_then_left, MotionPattern::still};

// Keys any of the config-driven commands understands.
const std::vector<std::string> kKnownKeys = {
    "model.augment_channels", "model.dyn_width", "model.dyn_groups",
    "model.freeze_vqvae", "model.freeze_codebook",
    "vq.in_channels", "vq.base_width", "vq.latent_dim", "vq.codebook_size", "vq.gn_groups",
    "vq.beta", "vq.decay", "vq.eps_count", "vq.dead_threshold", "vq.dead_patience", "vq.ema",
    "fusion.d_model", "fusion.blocks", "fusion.heads", "fusion.ffn_width", "fusion.max_len",
    "solver.method", "solver.rtol", "solver.atol", "solver.h_init", "solver.h_min",
    "solver.h_max", "solver.max_steps", "solver.safety",
    "train.lr", "train.beta1", "train.beta2", "train.adam_eps", "train.grad_clip",
    "train.epochs", "train.batch_size", "train.beta", "train.loss_space",
    "train.latent_weight", "train.seed", "train.baseline", "train.vqvae_ckpt",
    "pretrain.lr", "pretrain.grad_clip", "pretrain.epochs", "pretrain.batch_size",
    "pretrain.seed",
};

VqConfig vq_config_from(const RunConfig& cfg) {
  VqConfig vq;
  vq.in_channels = cfg.get_size("vq.in_channels", vq.in_channels);
  vq.base_width = cfg.get_size("vq.base_width", vq.base_width);
  vq.latent_dim = cfg.get_size("vq.latent_dim", vq.latent_dim);
  vq.codebook_size = cfg.get_size("vq.codebook_size", vq.codebook_size);
  vq.gn_groups = static_cast<int>(cfg.get_size("vq.gn_groups", vq.gn_groups));
  vq.beta = cfg.get_double("vq.beta", vq.beta);
  vq.decay = cfg.get_double("vq.decay", vq.decay);
  vq.eps_count = cfg.get_double("vq.eps_count", vq.eps_count);
  vq.dead_threshold = cfg.get_double("vq.dead_threshold", vq.dead_threshold);
  vq.dead_patience = static_cast<int>(cfg.get_size("vq.dead_patience", vq.dead_patience));
  vq.ema = cfg.get_bool("vq.ema", vq.ema);
  return vq;
}

// Latent geometry follows the dataset: its grid is H/4 x W/4 and the token
// width is the codebook dimension.
ModelConfig model_config_from(const RunConfig& cfg, ModelKind kind, std::size_t frame_h,
                              std::size_t frame_w) {
  ModelConfig mc;
  mc.vq = vq_config_from(cfg);
  mc.kind = kind;
  mc.augment_channels = cfg.get_size("model.augment_channels", mc.augment_channels);
  mc.dyn_width = cfg.get_size("model.dyn_width", mc.dyn_width);
  mc.dyn_groups = cfg.get_size("model.dyn_groups", mc.dyn_groups);
  mc.freeze_vqvae = cfg.get_bool("model.freeze_vqvae", true);
  mc.freeze_codebook = cfg.get_bool("model.freeze_codebook", true);
  mc.fusion.d_model = cfg.get_size("fusion.d_model", mc.fusion.d_model);
  mc.fusion.blocks = cfg.get_size("fusion.blocks", mc.fusion.blocks);
  mc.fusion.heads = cfg.get_size("fusion.heads", mc.fusion.heads);
  mc.fusion.ffn_width = cfg.get_size("fusion.ffn_width", mc.fusion.ffn_width);
  mc.fusion.max_len = cfg.get_size("fusion.max_len", mc.fusion.max_len);
  mc.fusion.latent_dim = mc.vq.latent_dim;
  if (frame_h % 4 != 0 || frame_w % 4 != 0) {
    throw InputError("frame size must be divisible by 4");
  }
  mc.fusion.grid_h = frame_h / 4;
  mc.fusion.grid_w = frame_w / 4;
  const std::string method = cfg.get_string("solver.method", "dopri5");
  if (method == "rk4") {
    mc.solver.method = OdeMethod::rk4_fixed;
  } else if (method == "dopri5") {
    mc.solver.method = OdeMethod::dopri5;
  } else {
    throw InputError("unknown solver.method: " + method);
  }
  mc.solver.rtol = cfg.get_double("solver.rtol", mc.solver.rtol);
  mc.solver.atol = cfg.get_double("solver.atol", mc.solver.atol);
  mc.solver.h_init = cfg.get_double("solver.h_init", mc.solver.h_init);
  mc.solver.h_min = cfg.get_double("solver.h_min", mc.solver.h_min);
  mc.solver.h_max = cfg.get_double("solver.h_max", mc.solver.h_max);
  mc.solver.max_steps = cfg.get_size("solver.max_steps", mc.solver.max_steps);
  mc.solver.safety = cfg.get_double("solver.safety", mc.solver.safety);
  mc.validate();
  return mc;
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig tc;
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.beta1 = cfg.get_double("train.beta1", tc.beta1);
  tc.beta2 = cfg.get_double("train.beta2", tc.beta2);
  tc.adam_eps = cfg.get_double("train.adam_eps", tc.adam_eps);
  tc.grad_clip = cfg.get_double("train.grad_clip", tc.grad_clip);
  tc.epochs = cfg.get_size("train.epochs", tc.epochs);
  tc.batch_size = cfg.get_size("train.batch_size", tc.batch_size);
  tc.beta = cfg.get_double("train.beta", tc.beta);
  tc.loss_space = loss_space_from_name(cfg.get_string("train.loss_space", "pixel"));
  tc.latent_weight = cfg.get_double("train.latent_weight", tc.latent_weight);
  tc.seed = cfg.get_u64("train.seed", tc.seed);
  tc.validate();
  return tc;
}

struct PretrainConfig {
  double lr = 1e-3;
  double grad_clip = 1.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

PretrainConfig pretrain_config_from(const RunConfig& cfg) {
  PretrainConfig pc;
  pc.lr = cfg.get_double("pretrain.lr", pc.lr);
  pc.grad_clip = cfg.get_double("pretrain.grad_clip", pc.grad_clip);
  pc.epochs = cfg.get_size("pretrain.epochs", pc.epochs);
  pc.batch_size = cfg.get_size("pretrain.batch_size", pc.batch_size);
  pc.seed = cfg.get_u64("pretrain.seed", pc.seed);
  return pc;
}

// The effective configuration, defaults included, archived next to outputs.
std::string resolved_config_text(const ModelConfig* mc, const TrainConfig* tc,
                               const PretrainConfig* pc, const std::string& vqvae_ckpt,
                               ModelKind kind) {
  std::ostringstream os;
  if (mc) {
    std::istringstream lines(mc->text());
    std::string line;
    while (std::getline(lines, line)) {
      if (line.rfind("kind=", 0) == 0) continue;  // recorded as train.baseline
      if (line.rfind("dyn_", 0) == 0 || line.rfind("augment_", 0) == 0 ||
          line.rfind("freeze_", 0) == 0) {
        os << "model." << line << '\n';
      } else {
        os << line << '\n';
      }
    }
  }
  if (tc) {
    os << "train.lr=" << fmt(tc->lr) << '\n'
       << "train.beta1=" << fmt(tc->beta1) << '\n'
       << "train.beta2=" << fmt(tc->beta2) << '\n'
       << "train.adam_eps=" << fmt(tc->adam_eps) << '\n'
       << "train.grad_clip=" << fmt(tc->grad_clip) << '\n'
       << "train.epochs=" << tc->epochs << '\n'
       << "train.batch_size=" << tc->batch_size << '\n'
       << "train.beta=" << fmt(tc->beta) << '\n'
       << "train.loss_space=" << loss_space_name(tc->loss_space) << '\n'
       << "train.latent_weight=" << fmt(tc->latent_weight) << '\n'
       << "train.seed=" << tc->seed << '\n'
       << "train.baseline=" << model_kind_name(kind) << '\n'
       << "train.vqvae_ckpt=" << vqvae_ckpt << '\n';
  }
  if (pc) {
    os << "pretrain.lr=" << fmt(pc->lr) << '\n'
       << "pretrain.grad_clip=" << fmt(pc->grad_clip) << '\n'
       << "pretrain.epochs=" << pc->epochs << '\n'
       << "pretrain.batch_size=" << pc->batch_size << '\n'
       << "pretrain.seed=" << pc->seed << '\n';
  }
  return os.str();
}

std::string vocab_hash_hex(const Vocabulary& vocab) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, vocab_hash(vocab));
  return buf;
}

// ---- commands ----

struct GenDataArgs {
  std::string out;
  std::size_t samples = 200;
  int shapes = 1;
  int frames = 8;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

void cmd_gen_data(const GenDataArgs& a) {
  if (a.shapes < 1 || a.shapes > 3) throw InputError("--shapes must be between 1 and 3");
  if (a.frames < 2) throw InputError("--frames must be at least 2");
  if (a.size < 16) throw InputError("--size must be at least 16");
  if (a.samples == 0) throw InputError("--samples must be positive");

  const std::size_t threads = std::min(thread_cap(), a.samples);
  Dataset ds;
  if (threads <= 1) {
    ds = generate_dataset(a.samples, a.shapes, a.frames, a.size, a.size, a.seed);
  } else {
    // Samples are pure functions of their own seed, so rendering order does
    // not affect the bytes written.
    ds.meta.count = a.samples;
    ds.meta.height = a.size;
    ds.meta.width = a.size;
    ds.meta.frames = static_cast<std::size_t>(a.frames);
    ds.meta.vocab = caption_vocabulary();
    ds.samples.resize(a.samples);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < a.samples; i += threads) {
          ds.samples[i] =
              make_sample(mix_seed(a.seed, i), a.shapes, a.frames, a.size, a.size).sample;
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  write_dataset(a.out, ds);
  std::cout << read_text_file(fs::path(a.out) / "manifest.txt");
}

struct PretrainArgs {
  std::string config, data, out, resume;
};

void cmd_pretrain_vqvae(const PretrainArgs& a) {
  RunConfig cfg = RunConfig::parse_file(a.config);
  cfg.check_known(kKnownKeys);
  const VqConfig vc = vq_config_from(cfg);
  const PretrainConfig pc = pretrain_config_from(cfg);
  Dataset ds = read_dataset(a.data);

  std::vector<Tensor> frames;
  for (const VideoSample& s : ds.samples) {
    frames.insert(frames.end(), s.frames.begin(), s.frames.end());
  }

  Rng init_rng(mix_seed(pc.seed, 0x12171217ULL));
  VqVae vq(vc, init_rng);
  VqTrainer trainer(vq, pc.lr, pc.grad_clip, pc.seed);
  if (!a.resume.empty()) trainer.load(a.resume);

  make_dir(a.out);
  write_text_file(fs::path(a.out) / "config.resolved.txt",
                  resolved_config_text(nullptr, nullptr, &pc, "", ModelKind::node) +
                      [&] {
                        std::ostringstream os;
                        os << "vq.in_channels=" << vc.in_channels << '\n'
                           << "vq.base_width=" << vc.base_width << '\n'
                           << "vq.latent_dim=" << vc.latent_dim << '\n'
                           << "vq.codebook_size=" << vc.codebook_size << '\n'
                           << "vq.gn_groups=" << vc.gn_groups << '\n'
                           << "vq.beta=" << fmt(vc.beta) << '\n'
                           << "vq.decay=" << fmt(vc.decay) << '\n'
                           << "vq.eps_count=" << fmt(vc.eps_count) << '\n'
                           << "vq.dead_threshold=" << fmt(vc.dead_threshold) << '\n'
                           << "vq.dead_patience=" << vc.dead_patience << '\n'
                           << "vq.ema=" << (vc.ema ? 1 : 0) << '\n';
                        return os.str();
                      }());

  const fs::path log_path = fs::path(a.out) / "pretrain.log";
  for (std::size_t e = trainer.epochs_done(); e < pc.epochs; ++e) {
    const std::uint64_t step_base = trainer.steps_done();
    std::vector<VqStepResult> rs = trainer.run_epoch(frames, pc.batch_size, e);
    std::ostringstream log;
    double sum = 0.0;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      log << "step=" << step_base + i + 1 << " epoch=" << e << " total=" << fmt(rs[i].total)
          << " recon=" << fmt(rs[i].recon) << " commit=" << fmt(rs[i].commit)
          << " align=" << fmt(rs[i].align) << '\n';
      sum += rs[i].total;
    }
    log << "epoch=" << e << " mean_total=" << fmt(sum / static_cast<double>(rs.size())) << '\n';
    append_text_file(log_path, log.str());

    char name[32];
    std::snprintf(name, sizeof name, "epoch-%04zu.ckpt", e + 1);
    trainer.save((fs::path(a.out) / name).string());
    trainer.save((fs::path(a.out) / "vqvae.ckpt").string());
    std::cout << "epoch " << e << " mean loss " << fmt(sum / static_cast<double>(rs.size()))
              << "\n";
  }
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::string baseline_override;  // set by ablate
};

void run_training(const TrainArgs& a) {
  RunConfig cfg = RunConfig::parse_file(a.config);
  cfg.check_known(kKnownKeys);
  Dataset ds = read_dataset(a.data);
  const Vocabulary vocab = Vocabulary::standard();

  std::string kind_name = cfg.get_string("train.baseline", "node");
  if (!a.baseline_override.empty()) kind_name = a.baseline_override;
  const ModelKind kind = model_kind_from_name(kind_name);

  ModelConfig mc = model_config_from(cfg, kind, ds.meta.height, ds.meta.width);
  TrainConfig tc = train_config_from(cfg);
  const std::string vqvae_ckpt = cfg.get_string("train.vqvae_ckpt", "");
  if (mc.freeze_vqvae && vqvae_ckpt.empty()) {
    throw InputError(
        "train.vqvae_ckpt is required while model.freeze_vqvae=1 (a frozen random "
        "quantizer cannot reconstruct anything)");
  }

  Rng init_rng(mix_seed(tc.seed, 0x12171217ULL));
  TivOdeModel model(mc, init_rng);
  if (!vqvae_ckpt.empty()) {
    Checkpoint vck = Checkpoint::load(vqvae_ckpt);
    model.vq.load(vck, "vq");
  }

  Trainer trainer(model, vocab, tc);
  if (!a.resume.empty()) trainer.load(a.resume);

  make_dir(a.out);
  write_text_file(fs::path(a.out) / "config.resolved.txt",
                  resolved_config_text(&mc, &tc, nullptr, vqvae_ckpt, kind));

  const fs::path log_path = fs::path(a.out) / "train.log";
  for (std::size_t e = trainer.epochs_done(); e < tc.epochs; ++e) {
    const std::uint64_t step_base = trainer.steps_done();
    std::vector<StepResult> rs = trainer.run_epoch(ds.samples, e);
    std::ostringstream log;
    double sum = 0.0;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      log << "step=" << step_base + i + 1 << " epoch=" << e << " total=" << fmt(rs[i].total)
          << " recon=" << fmt(rs[i].recon) << " commit=" << fmt(rs[i].commit)
          << " latent=" << fmt(rs[i].latent) << '\n';
      sum += rs[i].total;
    }
    log << "epoch=" << e << " mean_total=" << fmt(sum / static_cast<double>(rs.size())) << '\n';
    append_text_file(log_path, log.str());

    char name[32];
    std::snprintf(name, sizeof name, "epoch-%04zu.ckpt", e + 1);
    trainer.save((fs::path(a.out) / name).string());
    trainer.save((fs::path(a.out) / "latest.ckpt").string());
    std::cout << "epoch " << e << " mean loss " << fmt(sum / static_cast<double>(rs.size()))
              << "\n";
  }
}

struct GenerateArgs {
  std::string ckpt, image, caption, times, out_dir;
};

void cmd_generate(const GenerateArgs& a) {
  const TimeGrid grid = parse_times(a.times);
  Checkpoint ck = Checkpoint::load(a.ckpt);
  TivOdeModel model = TivOdeModel::load_from(ck);
  const Vocabulary vocab = Vocabulary::standard();
  if (auto it = ck.meta.find("vocab.hash");
      it != ck.meta.end() && it->second != vocab_hash_hex(vocab)) {
    throw InputError("checkpoint was trained with a different vocabulary");
  }

  Tensor frame0 = read_pgm(a.image);
  std::vector<int> ids = tokenize(a.caption, vocab, model.config().fusion.max_len);
  std::vector<Tensor> frames = model.generate(frame0, ids, grid);

  make_dir(a.out_dir);
  std::ostringstream manifest;
  manifest << "ckpt=" << a.ckpt << '\n'
           << "caption=" << a.caption << '\n'
           << "times=" << a.times << '\n'
           << "frames=" << frames.size() << '\n';
  if (auto it = ck.meta.find("config.hash"); it != ck.meta.end()) {
    manifest << "config.hash=" << it->second << '\n';
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string name = "frame_" + fmt_time4(grid.times[i]) + ".pgm";
    write_pgm(fs::path(a.out_dir) / name, frames[i]);
    manifest << "frame." << i << "=" << name << '\n';
  }
  write_text_file(fs::path(a.out_dir) / "manifest.txt", manifest.str());
  std::cout << manifest.str();
}

struct EvaluateArgs {
  std::string ckpt, data, report;
};

struct EvalSummary {
  double mean_mse = 0.0;
  double mean_ssim = 0.0;
  std::string report_text;
};

EvalSummary evaluate_checkpoint(const std::string& ckpt_path, const Dataset& ds) {
  Checkpoint ck = Checkpoint::load(ckpt_path);
  TivOdeModel model = TivOdeModel::load_from(ck);
  const Vocabulary vocab = Vocabulary::standard();
  if (auto it = ck.meta.find("vocab.hash");
      it != ck.meta.end() && it->second != vocab_hash_hex(vocab)) {
    throw InputError("checkpoint was trained with a different vocabulary");
  }

  std::map<std::string, std::vector<double>> by_pattern;
  std::ostringstream per_sample;
  double mse_sum = 0.0, ssim_sum = 0.0;
  double psnr_sum = 0.0;
  std::size_t psnr_n = 0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const VideoSample& s = ds.samples[i];
    std::vector<int> ids = tokenize(s.caption, vocab, model.config().fusion.max_len);
    std::vector<Tensor> pred = model.generate(s.frames[0], ids, s.times);
    MetricReport rep = evaluate_frames(pred, s.frames);
    mse_sum += rep.mean_mse();
    ssim_sum += rep.mean_ssim();
    if (auto p = rep.mean_psnr()) {
      psnr_sum += *p;
      ++psnr_n;
    }
    per_sample << "sample." << i << ".mse=" << fmt(rep.mean_mse()) << '\n'
               << "sample." << i << ".ssim=" << fmt(rep.mean_ssim()) << '\n'
               << "sample." << i << ".psnr="
               << (rep.mean_psnr() ? fmt(*rep.mean_psnr()) : "inf") << '\n';
    // A sample counts toward every motion pattern its caption mentions.
    std::vector<MotionPattern> seen;
    for (const auto& [glyph, pattern] : parse_caption(s.caption)) {
      if (std::find(seen.begin(), seen.end(), pattern) == seen.end()) {
        seen.push_back(pattern);
        by_pattern[pattern_key(pattern)].push_back(rep.mean_ssim());
      }
    }
  }

  const auto n = static_cast<double>(ds.samples.size());
  EvalSummary out;
  out.mean_mse = mse_sum / n;
  out.mean_ssim = ssim_sum / n;

  std::ostringstream rep;
  rep << "samples=" << ds.samples.size() << '\n'
      << "mean_mse=" << fmt(out.mean_mse) << '\n'
      << "mean_ssim=" << fmt(out.mean_ssim) << '\n'
      << "mean_psnr=" << (psnr_n > 0 ? fmt(psnr_sum / static_cast<double>(psnr_n)) : "inf")
      << '\n';
  for (MotionPattern p : kAllPatterns) {
    const auto& v = by_pattern[pattern_key(p)];
    rep << "pattern." << pattern_key(p) << ".count=" << v.size() << '\n';
    double s = 0.0;
    for (double x : v) s += x;
    rep << "pattern." << pattern_key(p)
        << ".ssim=" << (v.empty() ? "nan" : fmt(s / static_cast<double>(v.size()))) << '\n';
  }
  rep << per_sample.str();
  out.report_text = rep.str();
  return out;
}

void cmd_evaluate(const EvaluateArgs& a) {
  Dataset ds = read_dataset(a.data);
  EvalSummary summary = evaluate_checkpoint(a.ckpt, ds);
  write_text_file(a.report, summary.report_text);
  std::istringstream head(summary.report_text);
  std::string line;
  for (int i = 0; i < 4 && std::getline(head, line); ++i) std::cout << line << '\n';
}

struct AblateArgs {
  std::string config, data, out, eval_data;
};

void cmd_ablate(const AblateArgs& a) {
  struct Variant {
    const char* row;
    const char* dir;
    ModelKind kind;
  };
  const Variant variants[] = {
      {"TiV-TransAll", "trans_all", ModelKind::trans_all},
      {"TiV-TransNext", "trans_next", ModelKind::trans_next},
      {"TiV-ODE", "node", ModelKind::node},
  };
  make_dir(a.out);
  Dataset eval_ds = read_dataset(a.eval_data.empty() ? a.data : a.eval_data);

  std::ostringstream table;
  table << "model\tssim\tmse\n";
  for (const Variant& v : variants) {
    TrainArgs ta;
    ta.config = a.config;
    ta.data = a.data;
    ta.out = (fs::path(a.out) / v.dir).string();
    ta.baseline_override = model_kind_name(v.kind);
    run_training(ta);
    EvalSummary s =
        evaluate_checkpoint((fs::path(ta.out) / "latest.ckpt").string(), eval_ds);
    write_text_file(fs::path(ta.out) / "eval-report.txt", s.report_text);
    char row[128];
    std::snprintf(row, sizeof row, "%s\t%.4f\t%.6f\n", v.row, s.mean_ssim, s.mean_mse);
    table << row;
  }
  write_text_file(fs::path(a.out) / "ablation.tsv", table.str());
  std::cout << table.str();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TrainingError*>(&e)) return 4;
  if (dynamic_cast<const IntegrationError*>(&e)) return 5;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 3;
  return 2;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"controllable video generation on a learned latent dynamical system"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen_data = app.add_subcommand("gen-data", "render a synthetic moving-shapes dataset");
  gen_data->add_option("--out", gd.out, "output dataset directory")->required();
  gen_data->add_option("--samples", gd.samples, "number of videos");
  gen_data->add_option("--shapes", gd.shapes, "shapes per video (1-3)");
  gen_data->add_option("--frames", gd.frames, "frames per video");
  gen_data->add_option("--size", gd.size, "frame height and width");
  gen_data->add_option("--seed", gd.seed, "base seed");

  PretrainArgs pa;
  auto* pretrain = app.add_subcommand("pretrain-vqvae", "pretrain the frame quantizer");
  pretrain->add_option("--config", pa.config, "run config file")->required();
  pretrain->add_option("--data", pa.data, "dataset directory")->required();
  pretrain->add_option("--out", pa.out, "output directory")->required();
  pretrain->add_option("--resume", pa.resume, "checkpoint to continue from");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train the latent dynamics model");
  train->add_option("--config", tr.config, "run config file")->required();
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--resume", tr.resume, "checkpoint to continue from");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "generate frames from one image + caption");
  generate->add_option("--ckpt", ga.ckpt, "model checkpoint")->required();
  generate->add_option("--image", ga.image, "first frame (PGM)")->required();
  generate->add_option("--caption", ga.caption, "motion caption")->required();
  generate->add_option("--times", ga.times, "comma times in [0,1] or fps:<n>")->required();
  generate->add_option("--out-dir", ga.out_dir, "output frame directory")->required();

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint against a dataset");
  evaluate->add_option("--ckpt", ea.ckpt, "model checkpoint")->required();
  evaluate->add_option("--data", ea.data, "dataset directory")->required();
  evaluate->add_option("--report", ea.report, "report file to write")->required();

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "train and compare all model variants");
  ablate->add_option("--config", aa.config, "run config file")->required();
  ablate->add_option("--data", aa.data, "training dataset directory")->required();
  ablate->add_option("--out", aa.out, "output directory")->required();
  ablate->add_option("--eval-data", aa.eval_data, "held-out dataset (defaults to --data)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_data->parsed()) {
      cmd_gen_data(gd);
    } else if (pretrain->parsed()) {
      cmd_pretrain_vqvae(pa);
    } else if (train->parsed()) {
      run_training(tr);
    } else if (generate->parsed()) {
      cmd_generate(ga);
    } else if (evaluate->parsed()) {
      cmd_evaluate(ea);
    } else if (ablate->parsed()) {
      cmd_ablate(aa);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace tivode
