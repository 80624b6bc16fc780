// VQ-VAE: convolutional encoder/decoder around a discrete codebook with
// straight-through quantization and EMA (EM-style) codebook updates.
#pragma once

#include <vector>

#include "tivode/nn.hpp"
#include "tivode/optim.hpp"
#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"
#include "tivode/tensor.hpp"

namespace tivode {

struct VqConfig {
  std::size_t in_channels = 1;
  std::size_t base_width = 32;    // first encoder block; second is 2x
  std::size_t latent_dim = 32;    // codebook dimension N == latent channels c
  std::size_t codebook_size = 64; // K
  int gn_groups = 8;
  double beta = 0.25;
  double decay = 0.99;
  double eps_count = 1e-5;
  double dead_threshold = 1e-3;
  int dead_patience = 50;
  bool ema = true;  // EM codebook; false trains the codebook by the align loss
};

class Codebook {
 public:
  Codebook() = default;
  // Vectors drawn N(0, 0.2^2); EMA stats start as counts = 1, sums = vectors,
  // which makes the update formula keep unassigned codes in place.
  Codebook(std::size_t k, std::size_t n, const VqConfig& cfg, Rng& rng);

  std::size_t size() const { return vectors.dim(0); }
  std::size_t dim() const { return vectors.dim(1); }

  // One EM update from a batch of latents and their assignments. Counts and
  // sums decay toward the batch statistics; vectors[k] is always
  // ema_sums[k] / max(ema_counts[k], eps_count). Codes whose count stays
  // under dead_threshold for dead_patience consecutive updates are reseeded
  // to a random site of z_e.
  void ema_update(const Tensor& z_e, const std::vector<int>& indices, Rng& rng);

  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);

  Tensor vectors;     // [K x N]
  Tensor ema_counts;  // [K]
  Tensor ema_sums;    // [K x N]
  std::vector<int> dead_streak;  // consecutive low-count updates per code

  double decay = 0.99;
  double eps_count = 1e-5;
  double dead_threshold = 1e-3;
  int dead_patience = 50;
};

struct QuantizeResult {
  // Forward values are the assigned codebook rows exactly; gradient passes
  // straight through to z_e (identity Jacobian). Feed this to the decoder.
  Tensor z_q;
  // Same values, but differentiable toward the codebook. The align loss term
  // uses this path.
  Tensor z_q_table;
  std::vector<int> indices;  // B*h*w site assignments, row-major
};

// Nearest codebook row per spatial site of z_e: [B x N x h x w].
// Euclidean distance, ties to the lowest index.
QuantizeResult quantize(const Tensor& z_e, const Tensor& codebook_vectors);

struct VqLosses {
  Tensor total;   // recon + commit (+ align when the codebook trains by gradient)
  Tensor recon;   // mean (x - x_hat)^2
  Tensor align;   // mean (sg[z_e] - e)^2, monitored under EMA
  Tensor commit;  // beta * mean (z_e - sg[e])^2
};

VqLosses vq_loss(const Tensor& x, const Tensor& x_hat, const Tensor& z_e,
                 const QuantizeResult& q, double beta, bool ema_mode);

class VqVae {
 public:
  VqVae() = default;
  VqVae(const VqConfig& cfg, Rng& rng);

  // [B x in x H x W] -> [B x N x H/4 x W/4]; H, W divisible by 4.
  Tensor encode(const Tensor& x) const;
  // [B x N x h x w] -> [B x in x 4h x 4w], through a final sigmoid.
  Tensor decode(const Tensor& z) const;
  QuantizeResult quantize(const Tensor& z_e) const { return tivode::quantize(z_e, codebook.vectors); }

  struct Forward {
    Tensor z_e;
    QuantizeResult q;
    Tensor x_hat;
    VqLosses losses;
  };
  Forward forward(const Tensor& x) const;

  // Encoder+decoder weights; plus the codebook vectors when ema is off.
  std::vector<Tensor*> parameters();
  std::vector<Tensor*> encoder_parameters();
  std::vector<Tensor*> decoder_parameters();

  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);

  VqConfig cfg;
  nn::Conv2d enc1, enc2, enc3;
  nn::GroupNorm egn1, egn2;
  nn::Conv2d dec1, dec2, dec3;
  nn::GroupNorm dgn1, dgn2;
  Codebook codebook;
};

struct VqStepResult {
  double total = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  double align = 0.0;
};

// Reconstruction pretraining of the quantizer alone. Deterministic for a
// fixed (seed, data) pair; resumable at epoch boundaries.
class VqTrainer {
 public:
  VqTrainer(VqVae& vq, double lr, double grad_clip, std::uint64_t seed);

  // One optimization step on a stacked image batch [B x in x H x W].
  VqStepResult step(const Tensor& images, std::uint64_t step_seed);
  // One pass over single-channel frames [H x W] in seeded shuffled order.
  std::vector<VqStepResult> run_epoch(const std::vector<Tensor>& frames,
                                      std::size_t batch_size, std::size_t epoch);
  // Runs epochs [epochs_done, epochs); returns mean total loss per epoch.
  std::vector<double> fit(const std::vector<Tensor>& frames, std::size_t batch_size,
                          std::size_t epochs);

  void save(const std::string& path) const;
  void load(const std::string& path);

  std::size_t epochs_done() const { return epochs_done_; }
  std::uint64_t steps_done() const { return steps_done_; }
  Adam& optimizer() { return opt_; }

 private:
  VqVae& vq_;
  double clip_;
  std::uint64_t seed_;
  Adam opt_;
  std::size_t epochs_done_ = 0;
  std::uint64_t steps_done_ = 0;
};

}  // namespace tivode
