#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "testutil.hpp"
#include "tivode/errors.hpp"
#include "tivode/model.hpp"
#include "tivode/ops.hpp"
#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"
#include "tivode/shapes.hpp"

using namespace tivode;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg(ModelKind kind = ModelKind::node) {
  ModelConfig cfg;
  cfg.vq.in_channels = 1;
  cfg.vq.base_width = 4;
  cfg.vq.latent_dim = 4;
  cfg.vq.codebook_size = 8;
  cfg.vq.gn_groups = 2;
  cfg.fusion.d_model = 8;
  cfg.fusion.blocks = 1;
  cfg.fusion.heads = 2;
  cfg.fusion.ffn_width = 16;
  cfg.fusion.max_len = 8;
  cfg.fusion.latent_dim = 4;
  cfg.fusion.grid_h = 4;
  cfg.fusion.grid_w = 4;
  cfg.augment_channels = 2;
  cfg.dyn_width = 8;
  cfg.dyn_groups = 2;
  cfg.solver.method = OdeMethod::rk4_fixed;
  cfg.solver.h_init = 0.5;
  cfg.kind = kind;
  return cfg;
}

TrainConfig tiny_train(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.seed = seed;
  return cfg;
}

std::vector<VideoSample> tiny_dataset(std::size_t count, int t_frames = 3) {
  std::vector<VideoSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_sample(mix_seed(400, i), 1, t_frames, 16, 16).sample);
  }
  return out;
}

std::vector<int> ids_for(const std::string& caption, const ModelConfig& cfg) {
  return tokenize(caption, Vocabulary::standard(), cfg.fusion.max_len);
}

}  // namespace

TEST_CASE("model config text and hash are stable and sensitive") {
  ModelConfig a = tiny_cfg();
  ModelConfig b = tiny_cfg();
  CHECK(a.text() == b.text());
  CHECK(a.hash() == b.hash());
  b.dyn_width = 16;
  CHECK(a.hash() != b.hash());
  ModelConfig c = tiny_cfg();
  c.kind = ModelKind::trans_all;
  CHECK(a.hash() != c.hash());
  CHECK_NOTHROW(a.validate());
  ModelConfig bad = tiny_cfg();
  bad.dyn_groups = 3;  // does not divide dyn_width 8
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("vocab_hash fingerprints the word list") {
  CHECK(vocab_hash(Vocabulary::standard()) == vocab_hash(Vocabulary::standard()));
  Vocabulary other(std::vector<std::string>{"alpha", "beta"});
  CHECK(vocab_hash(Vocabulary::standard()) != vocab_hash(other));
}

TEST_CASE("dynamics preserves the state shape and starts at zero") {
  Rng rng(81);
  TivOdeModel model(tiny_cfg(), rng);
  Tensor xi = randn({1, 6, 4, 4}, rng);
  Tensor f = model.dynamics(0.3, xi);
  CHECK(f.shape() == xi.shape());
  // The last convolution is zero-initialized: the initial flow is identically
  // zero, so untrained solves are the identity.
  for (double v : f.values()) CHECK(v == 0.0);
  std::vector<Tensor> states =
      model.states_at(xi, TimeGrid({0.0, 0.5, 1.0}), nullptr);
  CHECK(states[2].values() == xi.values());
}

TEST_CASE("the time channel is live once the output layer is nonzero") {
  Rng rng(82);
  TivOdeModel model(tiny_cfg(), rng);
  model.dyn3.w = randn({6, 8, 3, 3}, rng, 0.3);
  model.dyn3.b = randn({6}, rng, 0.1);
  Tensor xi = randn({1, 6, 4, 4}, rng);
  Tensor f1 = model.dynamics(0.3, xi);
  Tensor f2 = model.dynamics(0.7, xi);
  CHECK(f1.shape() == f2.shape());
  CHECK(testutil::max_abs_diff(f1, f2) > 1e-10);
}

TEST_CASE("dynamics gradients match finite differences") {
  Rng rng(83);
  TivOdeModel model(tiny_cfg(), rng);
  model.dyn3.w = randn({6, 8, 3, 3}, rng, 0.3);
  Tensor xi = randn({1, 6, 4, 4}, rng);
  Tensor probe = randn({1, 6, 4, 4}, rng);
  auto loss = [&]() { return sum(mul(model.dynamics(0.4, xi), probe)); };

  Tensor fd_xi = testutil::fd_gradient(xi, [&]() { return loss().item(); });
  Tensor fd_w = testutil::fd_gradient(model.dyn1.w, [&]() { return loss().item(); });
  Tape tape;
  tape.watch(xi);
  tape.watch(model.dyn1.w);
  tape.backward(loss());
  CHECK(testutil::rel_err(tape.grad(xi), fd_xi) < 1e-4);
  CHECK(testutil::rel_err(tape.grad(model.dyn1.w), fd_w) < 1e-4);
}

TEST_CASE("gradients flow end to end through the integrated loss") {
  Rng rng(84);
  TivOdeModel model(tiny_cfg(), rng);
  model.dyn3.w = randn({6, 8, 3, 3}, rng, 0.2);
  SampleDraw draw = make_sample(901, 1, 3, 16, 16);
  Tensor frame0 = reshape(draw.sample.frames[0], {1, 1, 16, 16});
  Tensor target = reshape(draw.sample.frames[2], {1, 1, 16, 16});
  std::vector<std::vector<int>> tokens = {ids_for(draw.sample.caption, model.config())};

  auto loss = [&]() {
    Tensor xi0 = model.initial_state(frame0, tokens);
    std::vector<Tensor> states = model.states_at(xi0, TimeGrid({0.0, 1.0}), nullptr);
    return mse(model.decode_state(states[1]), target);
  };
  Tensor fd = testutil::fd_gradient(model.dyn1.w, [&]() { return loss().item(); });
  Tape tape;
  tape.watch(model.dyn1.w);
  tape.backward(loss());
  CHECK(testutil::rel_err(tape.grad(model.dyn1.w), fd) < 1e-3);
}

TEST_CASE("initial_state fuses per sample and augments") {
  Rng rng(85);
  TivOdeModel model(tiny_cfg(), rng);
  Tensor frames0 = rand_uniform({2, 1, 16, 16}, rng, 0.0, 1.0);
  std::vector<std::vector<int>> tokens = {
      ids_for("the square moves up then down", model.config()),
      ids_for("the circle stays still", model.config())};
  Tensor xi0 = model.initial_state(frames0, tokens);
  CHECK(xi0.shape() == Shape{2, 6, 4, 4});
  // The trailing augmentation channels start at zero.
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 4; c < 6; ++c) {
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(xi0.values()[(b * 6 + c) * 16 + i] == 0.0);
      }
    }
  }
  CHECK(xi0.values() == model.initial_state(frames0, tokens).values());
}

TEST_CASE("generate produces one frame per grid time in [0,1]") {
  Rng rng(86);
  TivOdeModel model(tiny_cfg(), rng);
  SampleDraw draw = make_sample(902, 1, 3, 16, 16);
  std::vector<int> ids = ids_for(draw.sample.caption, model.config());

  std::vector<Tensor> one = model.generate(draw.sample.frames[0], ids, TimeGrid({0.0}));
  REQUIRE(one.size() == 1);
  CHECK(one[0].shape() == Shape{16, 16});

  TimeGrid odd({0.0, 0.05, 0.1, 0.15, 0.2, 0.6, 1.0});
  SolverConfig adaptive;  // dopri5 accepts arbitrary grids
  adaptive.rtol = 1e-5;
  adaptive.atol = 1e-7;
  model.set_solver(adaptive);
  std::vector<Tensor> frames = model.generate(draw.sample.frames[0], ids, odd);
  REQUIRE(frames.size() == 7);
  for (const Tensor& f : frames) {
    CHECK(f.shape() == Shape{16, 16});
    for (double v : f.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  // Inference is deterministic.
  std::vector<Tensor> again = model.generate(draw.sample.frames[0], ids, odd);
  CHECK(frames[6].values() == again[6].values());
}

TEST_CASE("transition rollouts accept only multiples of the training spacing") {
  Rng rng(87);
  TivOdeModel model(tiny_cfg(ModelKind::trans_all), rng);
  model.train_dt = 0.5;
  Tensor xi = randn({1, 6, 4, 4}, rng);
  std::vector<Tensor> states = model.states_at(xi, TimeGrid({0.0, 0.5, 1.0}), nullptr);
  CHECK(states.size() == 3);
  CHECK(states[0].values() == xi.values());
  CHECK_THROWS_AS(model.states_at(xi, TimeGrid({0.0, 0.33}), nullptr), UnsupportedGridError);

  // Subsets of the training grid are fine; a 10-step rollout yields 10 states.
  model.train_dt = 0.1;
  std::vector<double> ts;
  for (int i = 0; i < 10; ++i) ts.push_back(0.1 * i);
  std::vector<Tensor> roll = model.states_at(xi, TimeGrid(ts), nullptr);
  CHECK(roll.size() == 10);
  std::vector<Tensor> sparse = model.states_at(xi, TimeGrid({0.0, 0.5}), nullptr);
  CHECK(sparse[1].values() == roll[5].values());
}

TEST_CASE("an untrained transition model cannot roll out") {
  Rng rng(88);
  TivOdeModel model(tiny_cfg(ModelKind::trans_next), rng);
  Tensor xi = randn({1, 6, 4, 4}, rng);
  CHECK_THROWS_AS(model.states_at(xi, TimeGrid({0.0, 0.5}), nullptr), ContractError);
}

TEST_CASE("transition is residual with a zero-initialized correction") {
  Rng rng(89);
  TivOdeModel model(tiny_cfg(ModelKind::trans_all), rng);
  Tensor xi = randn({1, 6, 4, 4}, rng);
  CHECK(model.transition(xi).values() == xi.values());
}

TEST_CASE("training steps are bit-deterministic in the seed") {
  std::vector<VideoSample> data = tiny_dataset(4);
  std::vector<const VideoSample*> batch = {&data[0], &data[1]};

  auto run3 = [&](std::uint64_t seed) {
    Rng rng(seed);
    TivOdeModel model(tiny_cfg(), rng);
    TrainConfig cfg = tiny_train(seed);
    Trainer trainer(model, Vocabulary::standard(), cfg);
    std::vector<double> losses;
    for (std::uint64_t s = 1; s <= 3; ++s) {
      losses.push_back(trainer.step(batch, mix_seed(seed, s)).total);
    }
    return losses;
  };
  std::vector<double> a = run3(7);
  std::vector<double> b = run3(7);
  CHECK(a == b);  // bit-exact, not approximately equal
  std::vector<double> c = run3(8);
  CHECK(a != c);
}

TEST_CASE("a training step moves only unfrozen parameters") {
  std::vector<VideoSample> data = tiny_dataset(2);
  std::vector<const VideoSample*> batch = {&data[0], &data[1]};
  ModelConfig cfg = tiny_cfg();
  cfg.freeze_vqvae = true;
  cfg.freeze_codebook = true;
  Rng rng(90);
  TivOdeModel model(cfg, rng);
  std::vector<double> enc_before = model.vq.enc1.w.values();
  std::vector<double> code_before = model.vq.codebook.vectors.values();
  std::vector<double> dyn_before = model.dyn1.w.values();
  Trainer trainer(model, Vocabulary::standard(), tiny_train(3));
  StepResult r = trainer.step(batch, 12345);
  CHECK(std::isfinite(r.total));
  CHECK(r.total > 0.0);
  CHECK(r.recon >= 0.0);
  CHECK(model.vq.enc1.w.values() == enc_before);
  CHECK(model.vq.codebook.vectors.values() == code_before);
  CHECK(model.dyn1.w.values() != dyn_before);
  CHECK(trainer.steps_done() == 1);
}

TEST_CASE("baseline training rejects non-uniform time grids") {
  SampleDraw draw = make_sample(903, 1, 3, 16, 16);
  VideoSample bad = draw.sample;
  bad.times = TimeGrid({0.0, 0.3, 1.0});
  bad.frames = {render_frame(draw.specs, 0.0, 16, 16), render_frame(draw.specs, 0.3, 16, 16),
                render_frame(draw.specs, 1.0, 16, 16)};
  std::vector<const VideoSample*> batch = {&bad};

  Rng rng(91);
  TivOdeModel trans(tiny_cfg(ModelKind::trans_all), rng);
  Trainer bad_trainer(trans, Vocabulary::standard(), tiny_train(4));
  CHECK_THROWS_AS(bad_trainer.step(batch, 1), UnsupportedGridError);

  Rng rng2(91);
  TivOdeModel node(tiny_cfg(ModelKind::node), rng2);
  Trainer ok_trainer(node, Vocabulary::standard(), tiny_train(4));
  CHECK_NOTHROW(ok_trainer.step(batch, 1));
}

TEST_CASE("training records the grid spacing for later rollouts") {
  std::vector<VideoSample> data = tiny_dataset(2);  // T = 3 over [0,1]: dt = 0.5
  std::vector<const VideoSample*> batch = {&data[0], &data[1]};
  Rng rng(92);
  TivOdeModel model(tiny_cfg(ModelKind::trans_next), rng);
  Trainer trainer(model, Vocabulary::standard(), tiny_train(5));
  trainer.step(batch, 99);
  CHECK(model.train_dt == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("run_epoch groups samples by frame count and advances progress") {
  std::vector<VideoSample> data = tiny_dataset(3, 3);
  std::vector<VideoSample> longer = tiny_dataset(2, 4);
  data.insert(data.end(), longer.begin(), longer.end());
  Rng rng(93);
  TivOdeModel model(tiny_cfg(), rng);
  TrainConfig cfg = tiny_train(6);
  cfg.batch_size = 2;
  Trainer trainer(model, Vocabulary::standard(), cfg);
  std::vector<StepResult> steps = trainer.run_epoch(data, 0);
  CHECK(steps.size() == 3);  // ceil(3/2) batches of T=3 plus one batch of T=4
  CHECK(trainer.epochs_done() == 1);
  CHECK(trainer.steps_done() == 3);
}

TEST_CASE("trainer save/load resumes bit-exactly") {
  std::vector<VideoSample> data = tiny_dataset(4);

  Rng rng_a(94);
  TivOdeModel a(tiny_cfg(), rng_a);
  TrainConfig cfg = tiny_train(11);
  Trainer ta(a, Vocabulary::standard(), cfg);
  ta.run_epoch(data, 0);
  ta.run_epoch(data, 1);

  Rng rng_b(94);
  TivOdeModel b(tiny_cfg(), rng_b);
  Trainer tb(b, Vocabulary::standard(), cfg);
  tb.run_epoch(data, 0);
  fs::path p = fs::temp_directory_path() / "tivode-trainer-resume.ckpt";
  tb.save(p.string());

  Rng rng_c(4242);
  TivOdeModel c(tiny_cfg(), rng_c);
  Trainer tc(c, Vocabulary::standard(), cfg);
  tc.load(p.string());
  CHECK(tc.epochs_done() == 1);
  CHECK(tc.steps_done() == tb.steps_done());
  tc.run_epoch(data, tc.epochs_done());

  auto pa = a.all_parameters();
  auto pc = c.all_parameters();
  REQUIRE(pa.size() == pc.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->values() == pc[i]->values());
}

TEST_CASE("loading rejects checkpoints from a different architecture or vocabulary") {
  std::vector<VideoSample> data = tiny_dataset(2);
  Rng rng(95);
  TivOdeModel model(tiny_cfg(), rng);
  Trainer trainer(model, Vocabulary::standard(), tiny_train(12));
  trainer.step({&data[0], &data[1]}, 1);
  fs::path p = fs::temp_directory_path() / "tivode-trainer-arch.ckpt";
  trainer.save(p.string());

  ModelConfig other_cfg = tiny_cfg();
  other_cfg.dyn_width = 16;
  Rng rng2(96);
  TivOdeModel other(other_cfg, rng2);
  Trainer wrong_arch(other, Vocabulary::standard(), tiny_train(12));
  CHECK_THROWS_AS(wrong_arch.load(p.string()), ContractError);

  Rng rng3(97);
  TivOdeModel same(tiny_cfg(), rng3);
  Vocabulary odd_vocab(std::vector<std::string>{"alpha", "beta"});
  Trainer wrong_vocab(same, odd_vocab, tiny_train(12));
  CHECK_THROWS_AS(wrong_vocab.load(p.string()), ContractError);
}

TEST_CASE("model save/load round trips generation") {
  Rng rng(98);
  TivOdeModel model(tiny_cfg(), rng);
  model.dyn3.w = randn({6, 8, 3, 3}, rng, 0.2);
  model.train_dt = 0.5;
  SampleDraw draw = make_sample(904, 1, 3, 16, 16);
  std::vector<int> ids = ids_for(draw.sample.caption, model.config());
  fs::path p = fs::temp_directory_path() / "tivode-model-roundtrip.ckpt";
  model.save(p.string());

  Checkpoint ck = Checkpoint::load(p);
  CHECK(ck.meta.count("config.hash") == 1);
  CHECK(ck.meta.count("model.train_dt") == 1);

  TivOdeModel back = TivOdeModel::load(p.string());
  CHECK(back.config().hash() == model.config().hash());
  CHECK(back.train_dt == model.train_dt);
  TimeGrid grid({0.0, 0.5, 1.0});
  std::vector<Tensor> want = model.generate(draw.sample.frames[0], ids, grid);
  std::vector<Tensor> got = back.generate(draw.sample.frames[0], ids, grid);
  REQUIRE(want.size() == got.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(want[i].values() == got[i].values());
}

TEST_CASE("adam follows the reference update with clipping") {
  // Independent reimplementation of the update rule, two steps.
  auto reference = [](std::vector<double> p, const std::vector<std::vector<double>>& grads,
                      double lr, double b1, double b2, double eps, double clip) {
    std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0);
    double t = 0.0;
    for (const auto& g_in : grads) {
      std::vector<double> g = g_in;
      double norm = 0.0;
      for (double x : g) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > clip) {
        for (double& x : g) x *= clip / norm;
      }
      t += 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        double mhat = m[i] / (1 - std::pow(b1, t));
        double vhat = v[i] / (1 - std::pow(b2, t));
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
    return p;
  };

  Tensor p = Tensor::from({1.0, 2.0}, {2});
  Tensor c1 = Tensor::from({3.0, -1.0}, {2});
  Tensor c2 = Tensor::from({-0.5, 2.5}, {2});
  Adam opt(0.1, 0.9, 0.999, 1e-8);
  opt.attach({&p});
  for (const Tensor& c : {c1, c2}) {
    Tape tape;
    tape.watch(p);
    tape.backward(sum(mul(p, c)));
    opt.step(tape, 1.0);
  }
  std::vector<double> want =
      reference({1.0, 2.0}, {{3.0, -1.0}, {-0.5, 2.5}}, 0.1, 0.9, 0.999, 1e-8, 1.0);
  CHECK(std::abs(p.values()[0] - want[0]) < 1e-12);
  CHECK(std::abs(p.values()[1] - want[1]) < 1e-12);
  CHECK(opt.step_count() == 2);
}
