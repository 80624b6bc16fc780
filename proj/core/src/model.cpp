#include "tivode/model.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <sstream>

#include "tivode/errors.hpp"
#include "tivode/ops.hpp"

namespace tivode {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Exact fp64 round trip for learned metadata.
std::string fmt_hex(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::string method_name(OdeMethod m) {
  return m == OdeMethod::rk4_fixed ? "rk4" : "dopri5";
}

OdeMethod method_from_name(const std::string& s) {
  if (s == "rk4") return OdeMethod::rk4_fixed;
  if (s == "dopri5") return OdeMethod::dopri5;
  throw InputError("unknown solver method: " + s);
}

const std::string& meta_at(const std::map<std::string, std::string>& meta,
                           const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint meta missing key: " + key);
  return it->second;
}

double meta_double(const std::map<std::string, std::string>& meta, const std::string& key) {
  return std::strtod(meta_at(meta, key).c_str(), nullptr);
}

std::size_t meta_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  return static_cast<std::size_t>(std::strtoull(meta_at(meta, key).c_str(), nullptr, 10));
}

bool meta_bool(const std::map<std::string, std::string>& meta, const std::string& key) {
  return meta_at(meta, key) == "1";
}

std::uint64_t hash_string(const std::string& s) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::node: return "node";
    case ModelKind::trans_all: return "trans_all";
    case ModelKind::trans_next: return "trans_next";
  }
  throw ContractError("bad ModelKind");
}

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "node") return ModelKind::node;
  if (name == "trans_all") return ModelKind::trans_all;
  if (name == "trans_next") return ModelKind::trans_next;
  throw InputError("unknown model kind: " + name);
}

std::string loss_space_name(LossSpace space) {
  return space == LossSpace::pixel ? "pixel" : "pixel+latent";
}

LossSpace loss_space_from_name(const std::string& name) {
  if (name == "pixel") return LossSpace::pixel;
  if (name == "pixel+latent") return LossSpace::pixel_latent;
  throw InputError("unknown loss space: " + name);
}

std::uint64_t vocab_hash(const Vocabulary& vocab) {
  std::uint64_t h = fnv1a64(std::span<const std::uint8_t>{});
  for (const auto& w : vocab.words()) {
    h = fnv1a64_update(h, std::span(reinterpret_cast<const std::uint8_t*>(w.data()), w.size()));
    const std::uint8_t nl = '\n';
    h = fnv1a64_update(h, std::span(&nl, 1));
  }
  return h;
}

void ModelConfig::validate() const {
  if (dyn_width == 0 || dyn_width % dyn_groups != 0) {
    throw ContractError("dyn_width must be a positive multiple of dyn_groups");
  }
  if (fusion.latent_dim != vq.latent_dim) {
    throw ContractError("fusion.latent_dim must equal vq.latent_dim");
  }
  solver.validate();
}

std::string ModelConfig::text() const {
  std::ostringstream os;
  os << "kind=" << model_kind_name(kind) << '\n'
     << "augment_channels=" << augment_channels << '\n'
     << "dyn_width=" << dyn_width << '\n'
     << "dyn_groups=" << dyn_groups << '\n'
     << "freeze_vqvae=" << (freeze_vqvae ? 1 : 0) << '\n'
     << "freeze_codebook=" << (freeze_codebook ? 1 : 0) << '\n'
     << "vq.in_channels=" << vq.in_channels << '\n'
     << "vq.base_width=" << vq.base_width << '\n'
     << "vq.latent_dim=" << vq.latent_dim << '\n'
     << "vq.codebook_size=" << vq.codebook_size << '\n'
     << "vq.gn_groups=" << vq.gn_groups << '\n'
     << "vq.beta=" << fmt_double(vq.beta) << '\n'
     << "vq.decay=" << fmt_double(vq.decay) << '\n'
     << "vq.eps_count=" << fmt_double(vq.eps_count) << '\n'
     << "vq.dead_threshold=" << fmt_double(vq.dead_threshold) << '\n'
     << "vq.dead_patience=" << vq.dead_patience << '\n'
     << "vq.ema=" << (vq.ema ? 1 : 0) << '\n'
     << "fusion.d_model=" << fusion.d_model << '\n'
     << "fusion.blocks=" << fusion.blocks << '\n'
     << "fusion.heads=" << fusion.heads << '\n'
     << "fusion.ffn_width=" << fusion.ffn_width << '\n'
     << "fusion.max_len=" << fusion.max_len << '\n'
     << "fusion.latent_dim=" << fusion.latent_dim << '\n'
     << "fusion.grid_h=" << fusion.grid_h << '\n'
     << "fusion.grid_w=" << fusion.grid_w << '\n'
     << "solver.method=" << method_name(solver.method) << '\n'
     << "solver.rtol=" << fmt_double(solver.rtol) << '\n'
     << "solver.atol=" << fmt_double(solver.atol) << '\n'
     << "solver.h_init=" << fmt_double(solver.h_init) << '\n'
     << "solver.h_min=" << fmt_double(solver.h_min) << '\n'
     << "solver.h_max=" << fmt_double(solver.h_max) << '\n'
     << "solver.max_steps=" << solver.max_steps << '\n'
     << "solver.safety=" << fmt_double(solver.safety) << '\n';
  return os.str();
}

std::uint64_t ModelConfig::hash() const { return hash_string(text()); }

TivOdeModel::TivOdeModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  vq = VqVae(cfg_.vq, rng);
  fusion = Fusion(cfg_.fusion, Vocabulary::standard().size(), rng);
  const std::size_t ca = cfg_.state_channels();
  const int g = static_cast<int>(cfg_.dyn_groups);
  if (cfg_.kind == ModelKind::node) {
    dyn1 = nn::Conv2d::make(ca + 1, cfg_.dyn_width, 3, 1, 1, rng);
    dyn_gn1 = nn::GroupNorm::make(cfg_.dyn_width, g);
    dyn2 = nn::Conv2d::make(cfg_.dyn_width, cfg_.dyn_width, 3, 1, 1, rng);
    dyn_gn2 = nn::GroupNorm::make(cfg_.dyn_width, g);
    dyn3 = nn::Conv2d::make(cfg_.dyn_width, ca, 3, 1, 1, rng);
    // Zero last layer: the field starts at 0, so the initial flow is the
    // identity and early training is not fighting a random drift.
    dyn3.w = Tensor::zeros(dyn3.w.shape());
    dyn3.b = Tensor::zeros(dyn3.b.shape());
  } else {
    step1 = nn::Conv2d::make(ca, cfg_.dyn_width, 3, 1, 1, rng);
    step_gn1 = nn::GroupNorm::make(cfg_.dyn_width, g);
    step2 = nn::Conv2d::make(cfg_.dyn_width, cfg_.dyn_width, 3, 1, 1, rng);
    step_gn2 = nn::GroupNorm::make(cfg_.dyn_width, g);
    step3 = nn::Conv2d::make(cfg_.dyn_width, ca, 3, 1, 1, rng);
    step3.w = Tensor::zeros(step3.w.shape());
    step3.b = Tensor::zeros(step3.b.shape());
  }
}

Tensor TivOdeModel::dynamics(double t, const Tensor& xi) const {
  if (cfg_.kind != ModelKind::node) throw ContractError("dynamics() on an ablation model");
  if (xi.rank() != 4) throw DimensionError("dynamics expects [B x C x h x w]");
  const auto& s = xi.shape();
  Tensor tch = Tensor::full({s[0], 1, s[2], s[3]}, t);
  Tensor x = concat({xi, tch}, 1);
  Tensor h1 = silu(dyn_gn1(dyn1(x)));
  Tensor h2 = silu(dyn_gn2(dyn2(h1)));
  return dyn3(h2);
}

Tensor TivOdeModel::transition(const Tensor& xi) const {
  if (cfg_.kind == ModelKind::node) throw ContractError("transition() on the ODE model");
  if (xi.rank() != 4) throw DimensionError("transition expects [B x C x h x w]");
  Tensor h1 = silu(step_gn1(step1(xi)));
  Tensor h2 = silu(step_gn2(step2(h1)));
  return add(xi, step3(h2));
}

Tensor TivOdeModel::initial_state(const Tensor& frames0,
                                  const std::vector<std::vector<int>>& tokens) const {
  if (frames0.rank() != 4) throw DimensionError("initial_state expects [B x 1 x H x W]");
  const std::size_t b = frames0.shape()[0];
  if (tokens.size() != b) throw DimensionError("one token sequence per batch sample");
  Tensor z_e = vq.encode(frames0);
  const auto& zs = z_e.shape();  // [B x c x h x w]
  std::vector<Tensor> fused;
  fused.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    Tensor zi = reshape(slice(z_e, 0, i, i + 1), {zs[1], zs[2], zs[3]});
    Tensor fi = fusion.fuse_caption(zi, tokens[i]);
    fused.push_back(reshape(fi, {1, zs[1], zs[2], zs[3]}));
  }
  Tensor xi = b == 1 ? fused[0] : concat(fused, 0);
  return augment(xi, cfg_.augment_channels);
}

Tensor TivOdeModel::project(const Tensor& xi) const {
  if (xi.rank() != 4) throw DimensionError("project expects [B x C x h x w]");
  return slice(xi, 1, 0, cfg_.vq.latent_dim);
}

Tensor TivOdeModel::decode_state(const Tensor& xi) const {
  Tensor z = project(xi);
  QuantizeResult q = vq.quantize(z);
  return vq.decode(q.z_q);
}

std::vector<Tensor> TivOdeModel::rollout(const Tensor& xi0, std::size_t n_steps) const {
  std::vector<Tensor> states{xi0};
  states.reserve(n_steps + 1);
  for (std::size_t i = 0; i < n_steps; ++i) states.push_back(transition(states.back()));
  return states;
}

std::vector<Tensor> TivOdeModel::states_at(const Tensor& xi0, const TimeGrid& grid,
                                           OdeStats* stats) const {
  if (cfg_.kind == ModelKind::node) {
    auto f = [this](double t, const Tensor& y) { return dynamics(t, y); };
    OdeTrajectory traj = solve_at(f, xi0, grid, cfg_.solver);
    if (stats) *stats = traj.stats;
    return std::move(traj.states);
  }
  // The transition map only knows the discrete grid it was trained on:
  // every requested time must be an integer number of training steps.
  if (train_dt <= 0.0) {
    throw ContractError("transition model has no recorded training grid spacing");
  }
  std::vector<std::size_t> ks;
  ks.reserve(grid.size());
  for (double t : grid.times) {
    const double k = t / train_dt;
    const auto kr = static_cast<long long>(std::llround(k));
    if (kr < 0 || std::abs(t - static_cast<double>(kr) * train_dt) > 1e-9) {
      throw UnsupportedGridError("time " + fmt_double(t) +
                                 " is not a multiple of the training step " +
                                 fmt_double(train_dt));
    }
    ks.push_back(static_cast<std::size_t>(kr));
  }
  std::vector<Tensor> all = rollout(xi0, ks.back());
  if (stats) stats->fevals += ks.back();
  std::vector<Tensor> out;
  out.reserve(ks.size());
  for (std::size_t k : ks) out.push_back(all[k]);
  return out;
}

std::vector<Tensor> TivOdeModel::generate(const Tensor& frame0, const std::vector<int>& ids,
                                          const TimeGrid& grid, OdeStats* stats) const {
  if (frame0.rank() != 2) throw DimensionError("generate expects a [H x W] first frame");
  PauseTape pause;
  const std::size_t hh = frame0.shape()[0], ww = frame0.shape()[1];
  Tensor x0 = reshape(frame0, {1, 1, hh, ww});
  Tensor xi0 = initial_state(x0, {ids});
  std::vector<Tensor> states = states_at(xi0, grid, stats);
  std::vector<Tensor> frames;
  frames.reserve(states.size());
  for (const Tensor& s : states) {
    frames.push_back(reshape(decode_state(s), {hh, ww}));
  }
  return frames;
}

std::vector<Tensor*> TivOdeModel::parameters() {
  std::vector<Tensor*> ps;
  auto take = [&](std::vector<Tensor*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
  if (cfg_.kind == ModelKind::node) {
    dyn1.params(ps);
    dyn_gn1.params(ps);
    dyn2.params(ps);
    dyn_gn2.params(ps);
    dyn3.params(ps);
  } else {
    step1.params(ps);
    step_gn1.params(ps);
    step2.params(ps);
    step_gn2.params(ps);
    step3.params(ps);
  }
  take(fusion.parameters());
  if (!cfg_.freeze_vqvae) {
    take(vq.encoder_parameters());
    take(vq.decoder_parameters());
  }
  if (!cfg_.freeze_codebook && !cfg_.vq.ema) ps.push_back(&vq.codebook.vectors);
  return ps;
}

std::vector<Tensor*> TivOdeModel::all_parameters() {
  std::vector<Tensor*> ps;
  auto take = [&](std::vector<Tensor*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
  if (cfg_.kind == ModelKind::node) {
    dyn1.params(ps);
    dyn_gn1.params(ps);
    dyn2.params(ps);
    dyn_gn2.params(ps);
    dyn3.params(ps);
  } else {
    step1.params(ps);
    step_gn1.params(ps);
    step2.params(ps);
    step_gn2.params(ps);
    step3.params(ps);
  }
  take(fusion.parameters());
  take(vq.encoder_parameters());
  take(vq.decoder_parameters());
  ps.push_back(&vq.codebook.vectors);
  return ps;
}

void TivOdeModel::save_into(Checkpoint& ck) const {
  // One meta line per config field; the hash pins the whole architecture.
  std::istringstream lines(cfg_.text());
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    ck.meta["config." + line.substr(0, eq)] = line.substr(eq + 1);
  }
  char hash_buf[24];
  std::snprintf(hash_buf, sizeof hash_buf, "%016" PRIx64, cfg_.hash());
  ck.meta["config.hash"] = hash_buf;
  ck.meta["model.format"] = std::to_string(kCheckpointVersion);
  ck.meta["model.train_dt"] = fmt_hex(train_dt);
  vq.save(ck, "vq");
  fusion.save(ck, "fusion");
  if (cfg_.kind == ModelKind::node) {
    dyn1.save(ck, "dyn1");
    dyn_gn1.save(ck, "dyn_gn1");
    dyn2.save(ck, "dyn2");
    dyn_gn2.save(ck, "dyn_gn2");
    dyn3.save(ck, "dyn3");
  } else {
    step1.save(ck, "step1");
    step_gn1.save(ck, "step_gn1");
    step2.save(ck, "step2");
    step_gn2.save(ck, "step_gn2");
    step3.save(ck, "step3");
  }
}

void TivOdeModel::save(const std::string& path,
                       const std::map<std::string, std::string>& extra_meta) const {
  Checkpoint ck;
  save_into(ck);
  for (const auto& [k, v] : extra_meta) ck.meta[k] = v;
  ck.save(path);
}

TivOdeModel TivOdeModel::load_from(const Checkpoint& ck) {
  const auto& meta = ck.meta;
  ModelConfig cfg;
  cfg.kind = model_kind_from_name(meta_at(meta, "config.kind"));
  cfg.augment_channels = meta_size(meta, "config.augment_channels");
  cfg.dyn_width = meta_size(meta, "config.dyn_width");
  cfg.dyn_groups = meta_size(meta, "config.dyn_groups");
  cfg.freeze_vqvae = meta_bool(meta, "config.freeze_vqvae");
  cfg.freeze_codebook = meta_bool(meta, "config.freeze_codebook");
  cfg.vq.in_channels = meta_size(meta, "config.vq.in_channels");
  cfg.vq.base_width = meta_size(meta, "config.vq.base_width");
  cfg.vq.latent_dim = meta_size(meta, "config.vq.latent_dim");
  cfg.vq.codebook_size = meta_size(meta, "config.vq.codebook_size");
  cfg.vq.gn_groups = static_cast<int>(meta_size(meta, "config.vq.gn_groups"));
  cfg.vq.beta = meta_double(meta, "config.vq.beta");
  cfg.vq.decay = meta_double(meta, "config.vq.decay");
  cfg.vq.eps_count = meta_double(meta, "config.vq.eps_count");
  cfg.vq.dead_threshold = meta_double(meta, "config.vq.dead_threshold");
  cfg.vq.dead_patience = static_cast<int>(meta_size(meta, "config.vq.dead_patience"));
  cfg.vq.ema = meta_bool(meta, "config.vq.ema");
  cfg.fusion.d_model = meta_size(meta, "config.fusion.d_model");
  cfg.fusion.blocks = meta_size(meta, "config.fusion.blocks");
  cfg.fusion.heads = meta_size(meta, "config.fusion.heads");
  cfg.fusion.ffn_width = meta_size(meta, "config.fusion.ffn_width");
  cfg.fusion.max_len = meta_size(meta, "config.fusion.max_len");
  cfg.fusion.latent_dim = meta_size(meta, "config.fusion.latent_dim");
  cfg.fusion.grid_h = meta_size(meta, "config.fusion.grid_h");
  cfg.fusion.grid_w = meta_size(meta, "config.fusion.grid_w");
  cfg.solver.method = method_from_name(meta_at(meta, "config.solver.method"));
  cfg.solver.rtol = meta_double(meta, "config.solver.rtol");
  cfg.solver.atol = meta_double(meta, "config.solver.atol");
  cfg.solver.h_init = meta_double(meta, "config.solver.h_init");
  cfg.solver.h_min = meta_double(meta, "config.solver.h_min");
  cfg.solver.h_max = meta_double(meta, "config.solver.h_max");
  cfg.solver.max_steps = meta_size(meta, "config.solver.max_steps");
  cfg.solver.safety = meta_double(meta, "config.solver.safety");

  Rng rng(0);
  TivOdeModel m(cfg, rng);
  m.train_dt = meta_double(meta, "model.train_dt");
  m.vq.load(ck, "vq");
  m.fusion.load(ck, "fusion");
  if (cfg.kind == ModelKind::node) {
    m.dyn1.load(ck, "dyn1");
    m.dyn_gn1.load(ck, "dyn_gn1");
    m.dyn2.load(ck, "dyn2");
    m.dyn_gn2.load(ck, "dyn_gn2");
    m.dyn3.load(ck, "dyn3");
  } else {
    m.step1.load(ck, "step1");
    m.step_gn1.load(ck, "step_gn1");
    m.step2.load(ck, "step2");
    m.step_gn2.load(ck, "step_gn2");
    m.step3.load(ck, "step3");
  }
  return m;
}

TivOdeModel TivOdeModel::load(const std::string& path) {
  return load_from(Checkpoint::load(path));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("lr must be positive");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  if (beta < 0.0 || latent_weight < 0.0) throw ContractError("negative loss weight");
}

Trainer::Trainer(TivOdeModel& model, const Vocabulary& vocab, const TrainConfig& cfg)
    : model_(model), vocab_(vocab), cfg_(cfg) {
  cfg_.validate();
  opt_ = Adam(cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
  opt_.attach(model_.parameters());
}

StepResult Trainer::step(const std::vector<const VideoSample*>& batch,
                         std::uint64_t step_seed) {
  if (batch.empty()) throw ContractError("empty training batch");
  const std::size_t bsz = batch.size();
  const std::size_t t_len = batch[0]->times.size();
  for (const VideoSample* s : batch) {
    if (s->times.times != batch[0]->times.times) {
      throw ContractError("batch samples must share one time grid");
    }
  }
  const TimeGrid& grid = batch[0]->times;

  // Record the native spacing; the ablations cannot run without it and the
  // discrete map is only meaningful on a uniform grid.
  const double dt = grid.times.size() > 1 ? grid.times[1] - grid.times[0] : 0.0;
  bool uniform = grid.times.size() > 1 && dt > 0.0;
  for (std::size_t i = 1; uniform && i + 1 < grid.times.size(); ++i) {
    if (std::abs(grid.times[i + 1] - grid.times[i] - dt) > 1e-9) uniform = false;
  }
  if (!uniform && model_.kind() != ModelKind::node) {
    throw UnsupportedGridError("transition baselines train on uniform grids only");
  }
  if (uniform) model_.train_dt = dt;

  const auto& mcfg = model_.config();
  const std::size_t hh = batch[0]->frames[0].shape()[0];
  const std::size_t ww = batch[0]->frames[0].shape()[1];
  auto stack_frames = [&](std::size_t ti) {
    std::vector<Tensor> fs;
    fs.reserve(bsz);
    for (const VideoSample* s : batch) fs.push_back(reshape(s->frames[ti], {1, 1, hh, ww}));
    return bsz == 1 ? fs[0] : concat(fs, 0);
  };

  std::vector<std::vector<int>> tokens;
  tokens.reserve(bsz);
  for (const VideoSample* s : batch) {
    tokens.push_back(tokenize(s->caption, vocab_, mcfg.fusion.max_len));
  }

  Tape tape;
  for (Tensor* p : opt_.params()) tape.watch(*p);

  Tensor x0 = stack_frames(0);
  Tensor xi0 = model_.initial_state(x0, tokens);

  std::vector<Tensor> states;
  switch (model_.kind()) {
    case ModelKind::node: {
      OdeTrajectory traj = differentiable_solve(
          [this](double t, const Tensor& y) { return model_.dynamics(t, y); }, xi0, grid,
          mcfg.solver);
      states = std::move(traj.states);
      break;
    }
    case ModelKind::trans_all: {
      states.push_back(xi0);
      for (std::size_t i = 1; i < t_len; ++i) states.push_back(model_.transition(states.back()));
      break;
    }
    case ModelKind::trans_next: {
      // Teacher forcing: each step starts from the encoded true previous
      // frame rather than the model's own prediction.
      states.push_back(xi0);
      Tensor prev_in = xi0;
      for (std::size_t i = 1; i < t_len; ++i) {
        states.push_back(model_.transition(prev_in));
        if (i + 1 < t_len) {
          Tensor ze = model_.vq.encode(stack_frames(i));
          prev_in = augment(ze, mcfg.augment_channels);
        }
      }
      break;
    }
  }

  const bool track_codebook = !mcfg.freeze_codebook && !mcfg.vq.ema;
  Tensor recon_sum, commit_sum, align_sum, latent_sum;
  std::vector<double> ema_sites;
  std::vector<int> ema_indices;
  Shape z_shape;
  for (std::size_t i = 0; i < t_len; ++i) {
    Tensor z = model_.project(states[i]);
    if (i == 0) z_shape = z.shape();
    QuantizeResult q = model_.vq.quantize(z);
    Tensor x_hat = model_.vq.decode(q.z_q);
    Tensor recon_i = mse(x_hat, stack_frames(i));
    Tensor commit_i = mse(z, stop_gradient(q.z_q_table));
    recon_sum = i == 0 ? recon_i : add(recon_sum, recon_i);
    commit_sum = i == 0 ? commit_i : add(commit_sum, commit_i);
    if (track_codebook) {
      Tensor align_i = mse(stop_gradient(z), q.z_q_table);
      align_sum = i == 0 ? align_i : add(align_sum, align_i);
    }
    if (cfg_.loss_space == LossSpace::pixel_latent) {
      Tensor target = stop_gradient(model_.vq.encode(stack_frames(i)));
      Tensor latent_i = mse(z, target);
      latent_sum = i == 0 ? latent_i : add(latent_sum, latent_i);
    }
    if (!mcfg.freeze_codebook && mcfg.vq.ema) {
      const auto& zv = z.values();
      ema_sites.insert(ema_sites.end(), zv.begin(), zv.end());
      ema_indices.insert(ema_indices.end(), q.indices.begin(), q.indices.end());
    }
  }

  const double inv_t = 1.0 / static_cast<double>(t_len);
  Tensor loss = add(scale(recon_sum, inv_t), scale(commit_sum, cfg_.beta * inv_t));
  if (track_codebook) loss = add(loss, scale(align_sum, inv_t));
  if (cfg_.loss_space == LossSpace::pixel_latent) {
    loss = add(loss, scale(latent_sum, cfg_.latent_weight * inv_t));
  }

  StepResult r;
  r.total = loss.item();
  r.recon = recon_sum.item() * inv_t;
  r.commit = commit_sum.item() * cfg_.beta * inv_t;
  r.latent = cfg_.loss_space == LossSpace::pixel_latent ? latent_sum.item() * inv_t : 0.0;
  if (!std::isfinite(r.total)) {
    throw TrainingError("non-finite training loss", step_seed);
  }

  tape.backward(loss);
  opt_.step(tape, cfg_.grad_clip);

  if (!ema_sites.empty()) {
    // One EMA update over every solved latent site of the step.
    Tensor all = Tensor::from(std::move(ema_sites),
                              {t_len * z_shape[0], z_shape[1], z_shape[2], z_shape[3]});
    Rng reseed_rng(step_seed);
    model_.vq.codebook.ema_update(all, ema_indices, reseed_rng);
  }

  ++steps_done_;
  return r;
}

std::vector<StepResult> Trainer::run_epoch(const std::vector<VideoSample>& data,
                                           std::size_t epoch) {
  if (data.empty()) throw ContractError("empty training set");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(cfg_.seed, 0xE70C0000ULL + epoch));
  shuffle_rng.shuffle(order);

  // Group by frame count so every batch shares one grid, preserving the
  // shuffled order inside each group.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t idx : order) by_len[data[idx].times.size()].push_back(idx);

  std::vector<StepResult> results;
  std::size_t step_index = 0;
  for (auto& [len, idxs] : by_len) {
    for (std::size_t at = 0; at < idxs.size(); at += cfg_.batch_size) {
      std::vector<const VideoSample*> batch;
      const std::size_t hi = std::min(at + cfg_.batch_size, idxs.size());
      for (std::size_t j = at; j < hi; ++j) batch.push_back(&data[idxs[j]]);
      const std::uint64_t step_seed =
          mix_seed(mix_seed(cfg_.seed, epoch + 1), ++step_index);
      results.push_back(step(batch, step_seed));
    }
  }
  epochs_done_ = epoch + 1;
  return results;
}

std::vector<double> Trainer::fit(const std::vector<VideoSample>& data) {
  std::vector<double> epoch_means;
  for (std::size_t e = epochs_done_; e < cfg_.epochs; ++e) {
    std::vector<StepResult> rs = run_epoch(data, e);
    double sum = 0.0;
    for (const auto& r : rs) sum += r.total;
    epoch_means.push_back(sum / static_cast<double>(rs.size()));
  }
  return epoch_means;
}

void Trainer::save(const std::string& path) const {
  Checkpoint ck;
  model_.save_into(ck);
  opt_.save(ck, "opt");
  ck.meta["trainer.epochs_done"] = std::to_string(epochs_done_);
  ck.meta["trainer.steps_done"] = std::to_string(steps_done_);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, vocab_hash(vocab_));
  ck.meta["vocab.hash"] = buf;
  ck.save(path);
}

void Trainer::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, vocab_hash(vocab_));
  if (meta_at(ck.meta, "vocab.hash") != buf) {
    throw ContractError("checkpoint was trained with a different vocabulary");
  }
  TivOdeModel loaded = TivOdeModel::load_from(ck);
  if (loaded.config().hash() != model_.config().hash()) {
    throw ContractError("checkpoint architecture differs from the current model config");
  }
  model_ = loaded;
  opt_.attach(model_.parameters());
  opt_.load(ck, "opt");
  epochs_done_ = meta_size(ck.meta, "trainer.epochs_done");
  steps_done_ = meta_size(ck.meta, "trainer.steps_done");
}

}  // namespace tivode
