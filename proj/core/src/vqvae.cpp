#include "tivode/vqvae.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "op_common.hpp"

namespace tivode {

namespace {

// Gathers codebook rows into a [B x N x h x w] grid. Gradient scatter-adds
// into the table (the align-loss path toward the codebook).
Tensor codebook_gather(const Tensor& table, const std::vector<int>& indices, std::size_t b,
                       std::size_t h, std::size_t w) {
  const std::size_t n = table.dim(1);
  const auto& tv = table.values();
  std::vector<double> out(b * n * h * w);
  const std::size_t hw = h * w;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t s = 0; s < hw; ++s) {
      const double* row = tv.data() + static_cast<std::size_t>(indices[bi * hw + s]) * n;
      double* dst = out.data() + bi * n * hw + s;
      for (std::size_t c = 0; c < n; ++c) dst[c * hw] = row[c];
    }
  }
  Tensor y = Tensor::from(std::move(out), {b, n, h, w});
  if (detail::tracked(table)) {
    int pt = table.node;
    std::size_t tsize = table.size();
    std::vector<int> saved = indices;
    detail::attach(y, [pt, tsize, saved, b, n, hw](std::span<const double> g, Tape& tape) {
      std::vector<double> gt(tsize, 0.0);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t s = 0; s < hw; ++s) {
          double* row = gt.data() + static_cast<std::size_t>(saved[bi * hw + s]) * n;
          const double* src = g.data() + bi * n * hw + s;
          for (std::size_t c = 0; c < n; ++c) row[c] += src[c * hw];
        }
      }
      tape.accumulate(pt, gt);
    });
  }
  return y;
}

}  // namespace

Codebook::Codebook(std::size_t k, std::size_t n, const VqConfig& cfg, Rng& rng)
    : decay(cfg.decay),
      eps_count(cfg.eps_count),
      dead_threshold(cfg.dead_threshold),
      dead_patience(cfg.dead_patience) {
  if (k < 2) throw ContractError("codebook needs at least 2 entries");
  vectors = randn({k, n}, rng, 0.2);
  ema_counts = Tensor::full({k}, 1.0);
  ema_sums = vectors;
  dead_streak.assign(k, 0);
}

void Codebook::ema_update(const Tensor& z_e, const std::vector<int>& indices, Rng& rng) {
  const std::size_t k = size(), n = dim();
  if (z_e.rank() != 4 || z_e.dim(1) != n) {
    throw DimensionError("ema_update: latents " + shape_str(z_e.shape()) +
                         " do not match codebook dim " + std::to_string(n));
  }
  const std::size_t b = z_e.dim(0), hw = z_e.dim(2) * z_e.dim(3);
  if (indices.size() != b * hw) throw ContractError("ema_update: index count mismatch");

  std::vector<double> batch_count(k, 0.0);
  std::vector<double> batch_sum(k * n, 0.0);
  const auto& zv = z_e.values();
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t s = 0; s < hw; ++s) {
      const auto code = static_cast<std::size_t>(indices[bi * hw + s]);
      batch_count[code] += 1.0;
      const double* site = zv.data() + bi * n * hw + s;
      double* dst = batch_sum.data() + code * n;
      for (std::size_t c = 0; c < n; ++c) dst[c] += site[c * hw];
    }
  }

  auto& counts = ema_counts.mutable_values();
  auto& sums = ema_sums.mutable_values();
  auto& vecs = vectors.mutable_values();
  for (std::size_t code = 0; code < k; ++code) {
    counts[code] = decay * counts[code] + (1.0 - decay) * batch_count[code];
    for (std::size_t c = 0; c < n; ++c) {
      sums[code * n + c] =
          decay * sums[code * n + c] + (1.0 - decay) * batch_sum[code * n + c];
    }
    const double denom = std::max(counts[code], eps_count);
    for (std::size_t c = 0; c < n; ++c) vecs[code * n + c] = sums[code * n + c] / denom;
  }

  for (std::size_t code = 0; code < k; ++code) {
    if (counts[code] < dead_threshold) {
      if (++dead_streak[code] >= dead_patience) {
        const std::size_t pick = rng.index(b * hw);
        const std::size_t bi = pick / hw, s = pick % hw;
        const double* site = zv.data() + bi * n * hw + s;
        for (std::size_t c = 0; c < n; ++c) {
          vecs[code * n + c] = site[c * hw];
          sums[code * n + c] = site[c * hw];
        }
        counts[code] = 1.0;
        dead_streak[code] = 0;
      }
    } else {
      dead_streak[code] = 0;
    }
  }
}

void Codebook::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put(prefix + ".vectors", vectors);
  ck.put(prefix + ".ema_counts", ema_counts);
  ck.put(prefix + ".ema_sums", ema_sums);
  std::vector<double> streak(dead_streak.begin(), dead_streak.end());
  ck.put(prefix + ".dead_streak", Tensor::from(std::move(streak), {dead_streak.size()}));
}

void Codebook::load(const Checkpoint& ck, const std::string& prefix) {
  vectors = ck.get(prefix + ".vectors");
  if (vectors.rank() != 2) throw FormatError("codebook vectors must be 2-D");
  ema_counts = ck.get(prefix + ".ema_counts");
  ema_sums = ck.get(prefix + ".ema_sums");
  const Tensor& streak = ck.get(prefix + ".dead_streak");
  if (ema_counts.shape() != Shape{vectors.dim(0)} || ema_sums.shape() != vectors.shape() ||
      streak.shape() != Shape{vectors.dim(0)}) {
    throw FormatError("codebook tensors have inconsistent shapes");
  }
  dead_streak.clear();
  for (double v : streak.values()) dead_streak.push_back(static_cast<int>(v));
}

QuantizeResult quantize(const Tensor& z_e, const Tensor& codebook_vectors) {
  if (z_e.rank() != 4) {
    throw DimensionError("quantize expects [B x N x h x w], got " + shape_str(z_e.shape()));
  }
  if (codebook_vectors.rank() != 2 || codebook_vectors.dim(1) != z_e.dim(1)) {
    throw DimensionError("latent channels " + std::to_string(z_e.dim(1)) +
                         " do not match codebook " + shape_str(codebook_vectors.shape()));
  }
  const std::size_t b = z_e.dim(0), n = z_e.dim(1), h = z_e.dim(2), w = z_e.dim(3);
  const std::size_t k = codebook_vectors.dim(0), hw = h * w;
  const auto& zv = z_e.values();
  const auto& cv = codebook_vectors.values();

  QuantizeResult r;
  r.indices.resize(b * hw);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t s = 0; s < hw; ++s) {
      const double* site = zv.data() + bi * n * hw + s;
      double best = 0.0;
      std::size_t best_k = 0;
      for (std::size_t code = 0; code < k; ++code) {
        const double* row = cv.data() + code * n;
        double d = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double diff = site[c * hw] - row[c];
          d += diff * diff;
        }
        if (code == 0 || d < best) {
          best = d;
          best_k = code;
        }
      }
      r.indices[bi * hw + s] = static_cast<int>(best_k);
    }
  }
  r.z_q_table = codebook_gather(codebook_vectors, r.indices, b, h, w);
  r.z_q = straight_through(r.z_q_table, z_e);
  return r;
}

VqLosses vq_loss(const Tensor& x, const Tensor& x_hat, const Tensor& z_e,
                 const QuantizeResult& q, double beta, bool ema_mode) {
  if (beta < 0) throw ContractError("beta must be non-negative");
  VqLosses l;
  l.recon = mse(x, x_hat);
  l.align = mse(stop_gradient(z_e), q.z_q_table);
  l.commit = scale(mse(z_e, stop_gradient(q.z_q_table)), beta);
  l.total = add(l.recon, l.commit);
  if (!ema_mode) l.total = add(l.total, l.align);
  return l;
}

VqVae::VqVae(const VqConfig& c, Rng& rng) : cfg(c) {
  const std::size_t w1 = cfg.base_width, w2 = 2 * cfg.base_width;
  enc1 = nn::Conv2d::make(cfg.in_channels, w1, 3, 2, 1, rng);
  egn1 = nn::GroupNorm::make(w1, cfg.gn_groups);
  enc2 = nn::Conv2d::make(w1, w2, 3, 2, 1, rng);
  egn2 = nn::GroupNorm::make(w2, cfg.gn_groups);
  enc3 = nn::Conv2d::make(w2, cfg.latent_dim, 3, 1, 1, rng);
  dec1 = nn::Conv2d::make(cfg.latent_dim, w2, 3, 1, 1, rng);
  dgn1 = nn::GroupNorm::make(w2, cfg.gn_groups);
  dec2 = nn::Conv2d::make(w2, w1, 3, 1, 1, rng);
  dgn2 = nn::GroupNorm::make(w1, cfg.gn_groups);
  dec3 = nn::Conv2d::make(w1, cfg.in_channels, 3, 1, 1, rng);
  codebook = Codebook(cfg.codebook_size, cfg.latent_dim, cfg, rng);
}

Tensor VqVae::encode(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw DimensionError("encode expects [B x " + std::to_string(cfg.in_channels) +
                         " x H x W], got " + shape_str(x.shape()));
  }
  if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
    throw DimensionError("encode: spatial dims of " + shape_str(x.shape()) +
                         " are not divisible by the downsampling ratio 4");
  }
  Tensor h1 = silu(egn1(enc1(x)));
  Tensor h2 = silu(egn2(enc2(h1)));
  return enc3(h2);
}

Tensor VqVae::decode(const Tensor& z) const {
  if (z.rank() != 4 || z.dim(1) != cfg.latent_dim) {
    throw DimensionError("decode expects [B x " + std::to_string(cfg.latent_dim) +
                         " x h x w], got " + shape_str(z.shape()));
  }
  Tensor h1 = upsample_nearest2x(silu(dgn1(dec1(z))));
  Tensor h2 = upsample_nearest2x(silu(dgn2(dec2(h1))));
  return sigmoid(dec3(h2));
}

VqVae::Forward VqVae::forward(const Tensor& x) const {
  Forward f;
  f.z_e = encode(x);
  f.q = quantize(f.z_e);
  f.x_hat = decode(f.q.z_q);
  f.losses = vq_loss(x, f.x_hat, f.z_e, f.q, cfg.beta, cfg.ema);
  return f;
}

std::vector<Tensor*> VqVae::parameters() {
  std::vector<Tensor*> out = encoder_parameters();
  for (Tensor* p : decoder_parameters()) out.push_back(p);
  if (!cfg.ema) out.push_back(&codebook.vectors);
  return out;
}

std::vector<Tensor*> VqVae::encoder_parameters() {
  std::vector<Tensor*> out;
  enc1.params(out);
  egn1.params(out);
  enc2.params(out);
  egn2.params(out);
  enc3.params(out);
  return out;
}

std::vector<Tensor*> VqVae::decoder_parameters() {
  std::vector<Tensor*> out;
  dec1.params(out);
  dgn1.params(out);
  dec2.params(out);
  dgn2.params(out);
  dec3.params(out);
  return out;
}

void VqVae::save(Checkpoint& ck, const std::string& prefix) const {
  enc1.save(ck, prefix + ".enc1");
  egn1.save(ck, prefix + ".egn1");
  enc2.save(ck, prefix + ".enc2");
  egn2.save(ck, prefix + ".egn2");
  enc3.save(ck, prefix + ".enc3");
  dec1.save(ck, prefix + ".dec1");
  dgn1.save(ck, prefix + ".dgn1");
  dec2.save(ck, prefix + ".dec2");
  dgn2.save(ck, prefix + ".dgn2");
  dec3.save(ck, prefix + ".dec3");
  codebook.save(ck, prefix + ".codebook");
}

void VqVae::load(const Checkpoint& ck, const std::string& prefix) {
  enc1.load(ck, prefix + ".enc1");
  egn1.load(ck, prefix + ".egn1");
  enc2.load(ck, prefix + ".enc2");
  egn2.load(ck, prefix + ".egn2");
  enc3.load(ck, prefix + ".enc3");
  dec1.load(ck, prefix + ".dec1");
  dgn1.load(ck, prefix + ".dgn1");
  dec2.load(ck, prefix + ".dec2");
  dgn2.load(ck, prefix + ".dgn2");
  dec3.load(ck, prefix + ".dec3");
  codebook.load(ck, prefix + ".codebook");
}

VqTrainer::VqTrainer(VqVae& vq, double lr, double grad_clip, std::uint64_t seed)
    : vq_(vq), clip_(grad_clip), seed_(seed) {
  opt_ = Adam(lr);
  opt_.attach(vq_.parameters());
}

VqStepResult VqTrainer::step(const Tensor& images, std::uint64_t step_seed) {
  Tape tape;
  for (Tensor* p : opt_.params()) tape.watch(*p);
  VqVae::Forward f = vq_.forward(images);
  VqStepResult r;
  r.total = f.losses.total.item();
  r.recon = f.losses.recon.item();
  r.commit = f.losses.commit.item();
  r.align = f.losses.align.item();
  if (!std::isfinite(r.total)) throw TrainingError("non-finite pretraining loss", step_seed);
  tape.backward(f.losses.total);
  opt_.step(tape, clip_);
  if (vq_.cfg.ema) {
    Rng reseed_rng(step_seed);
    vq_.codebook.ema_update(f.z_e, f.q.indices, reseed_rng);
  }
  ++steps_done_;
  return r;
}

std::vector<VqStepResult> VqTrainer::run_epoch(const std::vector<Tensor>& frames,
                                               std::size_t batch_size, std::size_t epoch) {
  if (frames.empty()) throw ContractError("empty pretraining set");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(seed_, 0xE70C0000ULL + epoch));
  shuffle_rng.shuffle(order);

  std::vector<VqStepResult> results;
  std::size_t step_index = 0;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t hi = std::min(at + batch_size, order.size());
    std::vector<Tensor> stack;
    stack.reserve(hi - at);
    for (std::size_t j = at; j < hi; ++j) {
      const Tensor& fr = frames[order[j]];
      stack.push_back(reshape(fr, {1, 1, fr.dim(0), fr.dim(1)}));
    }
    Tensor batch = stack.size() == 1 ? stack[0] : concat(stack, 0);
    const std::uint64_t step_seed = mix_seed(mix_seed(seed_, epoch + 1), ++step_index);
    results.push_back(step(batch, step_seed));
  }
  epochs_done_ = epoch + 1;
  return results;
}

std::vector<double> VqTrainer::fit(const std::vector<Tensor>& frames, std::size_t batch_size,
                                   std::size_t epochs) {
  std::vector<double> epoch_means;
  for (std::size_t e = epochs_done_; e < epochs; ++e) {
    std::vector<VqStepResult> rs = run_epoch(frames, batch_size, e);
    double sum = 0.0;
    for (const auto& r : rs) sum += r.total;
    epoch_means.push_back(sum / static_cast<double>(rs.size()));
  }
  return epoch_means;
}

void VqTrainer::save(const std::string& path) const {
  Checkpoint ck;
  vq_.save(ck, "vq");
  opt_.save(ck, "opt");
  ck.meta["vq.latent_dim"] = std::to_string(vq_.cfg.latent_dim);
  ck.meta["vq.codebook_size"] = std::to_string(vq_.cfg.codebook_size);
  ck.meta["vq.base_width"] = std::to_string(vq_.cfg.base_width);
  ck.meta["vq.in_channels"] = std::to_string(vq_.cfg.in_channels);
  ck.meta["vq.ema"] = vq_.cfg.ema ? "1" : "0";
  ck.meta["trainer.epochs_done"] = std::to_string(epochs_done_);
  ck.meta["trainer.steps_done"] = std::to_string(steps_done_);
  ck.save(path);
}

void VqTrainer::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  auto want = [&](const std::string& key, const std::string& val) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw FormatError("checkpoint meta missing key: " + key);
    if (it->second != val) {
      throw ContractError("checkpoint " + key + "=" + it->second +
                          " does not match the configured " + val);
    }
  };
  want("vq.latent_dim", std::to_string(vq_.cfg.latent_dim));
  want("vq.codebook_size", std::to_string(vq_.cfg.codebook_size));
  want("vq.base_width", std::to_string(vq_.cfg.base_width));
  want("vq.in_channels", std::to_string(vq_.cfg.in_channels));
  want("vq.ema", vq_.cfg.ema ? "1" : "0");
  vq_.load(ck, "vq");
  opt_.attach(vq_.parameters());
  opt_.load(ck, "opt");
  epochs_done_ = static_cast<std::size_t>(
      std::stoull(ck.meta.at("trainer.epochs_done")));
  steps_done_ = std::stoull(ck.meta.at("trainer.steps_done"));
}

}  // namespace tivode
