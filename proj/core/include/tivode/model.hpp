// Latent video dynamics over the quantizer's pre-quantization space. The
// main model integrates a learned vector field with the ODE solvers; the
// ablation variants replace it with a discrete transition map that can only
// step on the grid it was trained on.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tivode/fusion.hpp"
#include "tivode/nn.hpp"
#include "tivode/ode.hpp"
#include "tivode/optim.hpp"
#include "tivode/rng.hpp"
#include "tivode/shapes.hpp"
#include "tivode/vqvae.hpp"

namespace tivode {

enum class ModelKind { node, trans_all, trans_next };
enum class LossSpace { pixel, pixel_latent };

std::string model_kind_name(ModelKind kind);
ModelKind model_kind_from_name(const std::string& name);  // InputError on unknown
std::string loss_space_name(LossSpace space);
LossSpace loss_space_from_name(const std::string& name);

// Fingerprint of the word list; checkpoints carry it so a model is never
// silently decoded with the wrong vocabulary.
std::uint64_t vocab_hash(const Vocabulary& vocab);

struct ModelConfig {
  VqConfig vq;
  FusionConfig fusion;
  std::size_t augment_channels = 4;  // extra zero-initialized state channels
  std::size_t dyn_width = 48;        // hidden width of the dynamics stack
  std::size_t dyn_groups = 8;
  SolverConfig solver;
  ModelKind kind = ModelKind::node;
  bool freeze_vqvae = false;     // encoder + decoder
  bool freeze_codebook = false;  // EMA statistics stop updating too

  std::size_t state_channels() const { return vq.latent_dim + augment_channels; }
  void validate() const;
  // Canonical key=value dump; its hash identifies the architecture.
  std::string text() const;
  std::uint64_t hash() const;
};

class TivOdeModel {
 public:
  TivOdeModel() = default;
  TivOdeModel(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.kind; }
  // The integrator is an inference-time choice; swapping it does not touch
  // any weights.
  void set_solver(const SolverConfig& solver) {
    solver.validate();
    cfg_.solver = solver;
  }

  // Vector field over the augmented latent state [B x c_aug x h x w]; t is
  // fed as one extra constant input channel.
  Tensor dynamics(double t, const Tensor& xi) const;
  // Residual discrete map xi_{t+1} = xi_t + g(xi_t) for the ablations.
  Tensor transition(const Tensor& xi) const;

  // encode + fuse + augment for a batch of first frames [B x 1 x H x W].
  Tensor initial_state(const Tensor& frames0,
                       const std::vector<std::vector<int>>& tokens) const;
  // Drops the augmentation channels: [B x c_aug x h x w] -> [B x c x h x w].
  Tensor project(const Tensor& xi) const;
  // project -> quantize -> decode; returns frames [B x 1 x H x W].
  Tensor decode_state(const Tensor& xi) const;

  // Latent states at the requested times. The main model integrates the
  // vector field; ablations roll the transition map and therefore accept
  // only times that sit on their training grid (see train_dt).
  std::vector<Tensor> states_at(const Tensor& xi0, const TimeGrid& grid,
                                OdeStats* stats = nullptr) const;

  // Full pipeline for one sample: first frame [H x W] + token ids -> frames
  // [H x W] at grid times. Inference only, nothing is recorded.
  std::vector<Tensor> generate(const Tensor& frame0, const std::vector<int>& ids,
                               const TimeGrid& grid, OdeStats* stats = nullptr) const;

  // Trainable parameters honoring the freeze flags.
  std::vector<Tensor*> parameters();
  // Every weight tensor, for checkpoints.
  std::vector<Tensor*> all_parameters();

  void save_into(Checkpoint& ck) const;
  void save(const std::string& path,
            const std::map<std::string, std::string>& extra_meta = {}) const;
  static TivOdeModel load_from(const Checkpoint& ck);
  static TivOdeModel load(const std::string& path);

  VqVae vq;
  Fusion fusion;
  // Dynamics stack (kind == node): c_aug+1 -> w -> w -> c_aug.
  nn::Conv2d dyn1, dyn2, dyn3;
  nn::GroupNorm dyn_gn1, dyn_gn2;
  // Transition stack (ablations): c_aug -> w -> w -> c_aug, residual.
  nn::Conv2d step1, step2, step3;
  nn::GroupNorm step_gn1, step_gn2;

  // Spacing of the uniform grid the model was trained on; < 0 until set.
  // The ablations need it to interpret requested times as step counts.
  double train_dt = -1.0;

 private:
  std::vector<Tensor> rollout(const Tensor& xi0, std::size_t n_steps) const;
  ModelConfig cfg_;
};

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double beta = 0.25;  // commitment weight in the training loss
  LossSpace loss_space = LossSpace::pixel;
  double latent_weight = 1.0;  // weight of the auxiliary latent-space MSE
  std::uint64_t seed = 0;
  void validate() const;
};

struct StepResult {
  double total = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  double latent = 0.0;  // auxiliary term, 0 under LossSpace::pixel
};

// Drives optimization of a TivOdeModel on VideoSamples. Epoch order, batch
// composition and every weight update are functions of (config seed, epoch,
// step), so a run interrupted at an epoch boundary and resumed from its
// checkpoint reproduces the uninterrupted run bit for bit.
class Trainer {
 public:
  Trainer(TivOdeModel& model, const Vocabulary& vocab, const TrainConfig& cfg);

  // One optimization step on an explicit batch. All samples must share one
  // time grid. step_seed feeds any stochastic bookkeeping (codebook reseed)
  // and is reported on failure for replay.
  StepResult step(const std::vector<const VideoSample*>& batch, std::uint64_t step_seed);

  // One pass over the dataset in seeded shuffled order.
  std::vector<StepResult> run_epoch(const std::vector<VideoSample>& data, std::size_t epoch);

  // Runs epochs [epochs_done, cfg.epochs). Returns mean total loss per epoch.
  std::vector<double> fit(const std::vector<VideoSample>& data);

  void save(const std::string& path) const;  // model + optimizer + progress
  void load(const std::string& path);

  std::size_t epochs_done() const { return epochs_done_; }
  std::uint64_t steps_done() const { return steps_done_; }
  const TrainConfig& config() const { return cfg_; }
  Adam& optimizer() { return opt_; }

 private:
  TivOdeModel& model_;
  const Vocabulary& vocab_;
  TrainConfig cfg_;
  Adam opt_;
  std::size_t epochs_done_ = 0;
  std::uint64_t steps_done_ = 0;
};

}  // namespace tivode
