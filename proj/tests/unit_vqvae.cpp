#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "testutil.hpp"
#include "tivode/errors.hpp"
#include "tivode/ops.hpp"
#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"
#include "tivode/vqvae.hpp"

using namespace tivode;
namespace fs = std::filesystem;

namespace {

VqConfig tiny_cfg() {
  VqConfig cfg;
  cfg.in_channels = 1;
  cfg.base_width = 4;
  cfg.latent_dim = 4;
  cfg.codebook_size = 8;
  cfg.gn_groups = 2;
  return cfg;
}

// Independent nearest-neighbour assignment: plain loops over sites and codes.
std::vector<int> brute_force_assign(const Tensor& z_e, const Tensor& vectors) {
  const std::size_t b = z_e.dim(0), n = z_e.dim(1), hw = z_e.dim(2) * z_e.dim(3);
  const std::size_t k = vectors.dim(0);
  std::vector<int> out(b * hw, -1);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t s = 0; s < hw; ++s) {
      double best = std::numeric_limits<double>::infinity();
      int arg = -1;
      for (std::size_t code = 0; code < k; ++code) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          double diff = z_e.values()[bi * n * hw + c * hw + s] - vectors.values()[code * n + c];
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          arg = static_cast<int>(code);
        }
      }
      out[bi * hw + s] = arg;
    }
  }
  return out;
}

Tensor site_tensor(const std::vector<std::vector<double>>& sites) {
  // Lay sites out as [1 x N x sites x 1].
  const std::size_t n = sites[0].size(), count = sites.size();
  std::vector<double> v(n * count);
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t c = 0; c < n; ++c) v[c * count + s] = sites[s][c];
  return Tensor::from(std::move(v), {1, n, count, 1});
}

}  // namespace

TEST_CASE("encode maps 32x32 to an 8x8 latent grid") {
  Rng rng(41);
  VqVae vq(tiny_cfg(), rng);
  Tensor x = rand_uniform({2, 1, 32, 32}, rng, 0.0, 1.0);
  Tensor z = vq.encode(x);
  CHECK(z.shape() == Shape{2, 4, 8, 8});
  Tensor x16 = rand_uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
  CHECK(vq.encode(x16).shape() == Shape{1, 4, 4, 4});
}

TEST_CASE("encode is deterministic") {
  Rng rng(42);
  VqVae vq(tiny_cfg(), rng);
  Tensor x = rand_uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
  CHECK(vq.encode(x).values() == vq.encode(x).values());
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(43);
  VqVae vq(tiny_cfg(), rng);
  Tensor x = rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  Tensor probe = randn({1, 4, 2, 2}, rng);
  auto loss = [&]() { return sum(mul(vq.encode(x), probe)); };
  Tensor& w = vq.enc1.w;
  Tensor fd = testutil::fd_gradient(w, [&]() { return loss().item(); });
  Tape tape;
  tape.watch(w);
  tape.backward(loss());
  CHECK(testutil::rel_err(tape.grad(w), fd) < 1e-4);
}

TEST_CASE("decoder output stays in [0,1] and differentiates") {
  Rng rng(44);
  VqVae vq(tiny_cfg(), rng);
  Tensor z = randn({1, 4, 2, 2}, rng, 2.0);
  Tensor x_hat = vq.decode(z);
  CHECK(x_hat.shape() == Shape{1, 1, 8, 8});
  for (double v : x_hat.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  Tensor probe = randn({1, 1, 8, 8}, rng);
  auto loss = [&]() { return sum(mul(vq.decode(z), probe)); };
  Tensor& w = vq.dec1.w;
  Tensor fd = testutil::fd_gradient(w, [&]() { return loss().item(); });
  Tape tape;
  tape.watch(w);
  tape.backward(loss());
  CHECK(testutil::rel_err(tape.grad(w), fd) < 1e-4);
}

TEST_CASE("quantize picks the nearest codebook vector") {
  Tensor vectors = Tensor::from({0.0, 0.0, 1.0, 1.0}, {2, 2});
  Tensor z = site_tensor({{0.1, 0.2}});
  QuantizeResult q = quantize(z, vectors);
  REQUIRE(q.indices.size() == 1);
  CHECK(q.indices[0] == 0);
  CHECK(q.z_q.values()[0] == 0.0);
  CHECK(q.z_q.values()[1] == 0.0);
}

TEST_CASE("equidistant sites resolve to the lowest index") {
  Tensor vectors = Tensor::from({0.0, 0.0, 1.0, 1.0}, {2, 2});
  Tensor z = site_tensor({{0.5, 0.5}});
  CHECK(quantize(z, vectors).indices[0] == 0);
}

TEST_CASE("quantize is idempotent on codebook vectors") {
  Rng rng(45);
  Tensor vectors = randn({6, 3}, rng);
  std::vector<std::vector<double>> sites;
  for (std::size_t k = 0; k < 6; ++k) {
    sites.push_back({vectors.values()[k * 3], vectors.values()[k * 3 + 1],
                     vectors.values()[k * 3 + 2]});
  }
  QuantizeResult q = quantize(site_tensor(sites), vectors);
  for (std::size_t k = 0; k < 6; ++k) CHECK(q.indices[k] == static_cast<int>(k));
}

TEST_CASE("quantize matches brute force on a thousand random sites") {
  Rng rng(46);
  Tensor z = randn({2, 3, 10, 50}, rng);  // 1000 sites
  Tensor vectors = randn({16, 3}, rng);
  QuantizeResult q = quantize(z, vectors);
  std::vector<int> want = brute_force_assign(z, vectors);
  CHECK(q.indices == want);
  // z_q carries the assigned vectors exactly.
  const std::size_t hw = 500;
  for (std::size_t s = 0; s < 20; ++s) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(q.z_q.values()[c * hw + s] ==
            vectors.values()[static_cast<std::size_t>(want[s]) * 3 + c]);
    }
  }
}

TEST_CASE("quantize passes gradients straight through") {
  Rng rng(47);
  Tensor z = randn({1, 2, 3, 3}, rng);
  Tensor vectors = randn({4, 2}, rng);
  Tensor weights = randn({1, 2, 3, 3}, rng);
  Tape tape;
  tape.watch(z);
  QuantizeResult q = quantize(z, vectors);
  tape.backward(sum(mul(q.z_q, weights)));
  CHECK(tape.grad(z).values() == weights.values());  // exact identity Jacobian
}

TEST_CASE("vq_loss vanishes for a perfect reconstruction on the codebook") {
  Tensor vectors = Tensor::from({0.0, 0.0, 1.0, 1.0}, {2, 2});
  Tensor z = site_tensor({{1.0, 1.0}});
  QuantizeResult q = quantize(z, vectors);
  Rng rng(48);
  Tensor x = rand_uniform({1, 1, 4, 4}, rng, 0.0, 1.0);
  VqLosses l = vq_loss(x, x, z, q, 0.25, true);
  CHECK(l.total.item() == 0.0);
  CHECK(l.recon.item() == 0.0);
  CHECK(l.commit.item() == 0.0);
  CHECK(l.align.item() == 0.0);
}

TEST_CASE("commit term is zero at beta zero") {
  Tensor vectors = Tensor::from({0.0, 0.0, 1.0, 1.0}, {2, 2});
  Tensor z = site_tensor({{0.3, -0.7}});
  QuantizeResult q = quantize(z, vectors);
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  VqLosses l = vq_loss(x, x, z, q, 0.0, true);
  CHECK(l.commit.item() == 0.0);
}

TEST_CASE("commit hand case") {
  Tensor vectors = Tensor::from({0.0, 0.0, 1.0, 1.0}, {2, 2});
  Tensor z = site_tensor({{0.5, 0.0}});
  QuantizeResult q = quantize(z, vectors);
  REQUIRE(q.indices[0] == 0);
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  VqLosses l = vq_loss(x, x, z, q, 0.25, true);
  // mean((0.5,0) - (0,0))^2 = 0.125; commit = 0.25 * 0.125.
  CHECK(l.commit.item() == doctest::Approx(0.03125).epsilon(1e-14));
}

TEST_CASE("loss composition differs between ema and gradient codebooks") {
  Rng rng(49);
  Tensor vectors = randn({4, 2}, rng);
  Tensor z = randn({1, 2, 2, 2}, rng);
  QuantizeResult q = quantize(z, vectors);
  Tensor x = rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  Tensor x_hat = rand_uniform({1, 1, 8, 8}, rng, 0.0, 1.0);
  VqLosses ema = vq_loss(x, x_hat, z, q, 0.25, true);
  VqLosses grad = vq_loss(x, x_hat, z, q, 0.25, false);
  CHECK(ema.total.item() ==
        doctest::Approx(ema.recon.item() + ema.commit.item()).epsilon(1e-12));
  CHECK(grad.total.item() ==
        doctest::Approx(grad.recon.item() + grad.commit.item() + grad.align.item())
            .epsilon(1e-12));
  CHECK(grad.align.item() > 0.0);
}

TEST_CASE("ema update with decay zero is the k-means M-step") {
  VqConfig cfg = tiny_cfg();
  cfg.decay = 0.0;
  Rng rng(50);
  Codebook cb(4, 2, cfg, rng);
  Tensor z = site_tensor({{1.0, 1.0}, {1.2, 0.8}, {-1.0, -1.0}, {-0.8, -1.2}, {1.1, 1.1}});
  std::vector<int> idx = quantize(z, cb.vectors).indices;
  Rng reseed(51);
  cb.ema_update(z, idx, reseed);
  // Independent M-step over the same assignment.
  std::vector<double> sums(4 * 2, 0.0);
  std::vector<double> counts(4, 0.0);
  const std::vector<std::vector<double>> sites = {
      {1.0, 1.0}, {1.2, 0.8}, {-1.0, -1.0}, {-0.8, -1.2}, {1.1, 1.1}};
  for (std::size_t s = 0; s < sites.size(); ++s) {
    counts[static_cast<std::size_t>(idx[s])] += 1.0;
    sums[static_cast<std::size_t>(idx[s]) * 2] += sites[s][0];
    sums[static_cast<std::size_t>(idx[s]) * 2 + 1] += sites[s][1];
  }
  for (std::size_t k = 0; k < 4; ++k) {
    if (counts[k] == 0.0) continue;  // unassigned codes are not M-step targets
    CHECK(std::abs(cb.vectors.values()[k * 2] - sums[k * 2] / counts[k]) <= 1e-12);
    CHECK(std::abs(cb.vectors.values()[k * 2 + 1] - sums[k * 2 + 1] / counts[k]) <= 1e-12);
  }
}

TEST_CASE("unassigned codes keep their value under normal decay") {
  VqConfig cfg = tiny_cfg();
  cfg.decay = 0.99;
  Rng rng(52);
  Codebook cb(4, 2, cfg, rng);
  // Pull every site towards code argmin; find one code that gets nothing.
  Tensor z = site_tensor({{5.0, 5.0}, {5.1, 4.9}});
  std::vector<int> idx = quantize(z, cb.vectors).indices;
  std::vector<double> before = cb.vectors.values();
  Rng reseed(53);
  cb.ema_update(z, idx, reseed);
  for (std::size_t k = 0; k < 4; ++k) {
    bool assigned = false;
    for (int i : idx) assigned |= (i == static_cast<int>(k));
    if (assigned) continue;
    for (std::size_t c = 0; c < 2; ++c) {
      double now = cb.vectors.values()[k * 2 + c];
      CHECK(std::abs(now - before[k * 2 + c]) <=
            1e-12 * std::max(1.0, std::abs(before[k * 2 + c])));
    }
  }
}

TEST_CASE("repeated ema updates converge to the cluster means") {
  VqConfig cfg = tiny_cfg();
  cfg.decay = 0.5;
  cfg.dead_patience = 1000000;  // keep reseeding out of this test
  Rng rng(54);
  Codebook cb(2, 2, cfg, rng);
  // Place the two vectors near the clusters so the assignment is stable.
  cb.vectors = Tensor::from({0.5, 0.5, -0.5, -0.5}, {2, 2});
  cb.ema_sums = cb.vectors;
  cb.ema_counts = Tensor::full({2}, 1.0);
  const std::vector<std::vector<double>> sites = {
      {0.9, 1.1}, {1.1, 0.9}, {1.0, 1.0}, {-0.9, -1.1}, {-1.1, -0.9}, {-1.0, -1.0}};
  Tensor z = site_tensor(sites);
  Rng reseed(55);
  for (int it = 0; it < 40; ++it) {
    std::vector<int> idx = quantize(z, cb.vectors).indices;
    cb.ema_update(z, idx, reseed);
  }
  CHECK(std::abs(cb.vectors.values()[0] - 1.0) < 1e-3);
  CHECK(std::abs(cb.vectors.values()[1] - 1.0) < 1e-3);
  CHECK(std::abs(cb.vectors.values()[2] + 1.0) < 1e-3);
  CHECK(std::abs(cb.vectors.values()[3] + 1.0) < 1e-3);
}

TEST_CASE("dead codes are reseeded to a batch site") {
  VqConfig cfg = tiny_cfg();
  cfg.decay = 0.5;
  cfg.dead_patience = 3;
  Rng rng(56);
  Codebook cb(2, 2, cfg, rng);
  cb.vectors = Tensor::from({1.0, 1.0, 50.0, 50.0}, {2, 2});  // code 1 never wins
  cb.ema_sums = cb.vectors;
  cb.ema_counts = Tensor::full({2}, 1.0);
  const std::vector<std::vector<double>> sites = {{0.9, 1.1}, {1.1, 0.9}};
  Tensor z = site_tensor(sites);
  Rng reseed(57);
  bool reseeded = false;
  for (int it = 0; it < 40 && !reseeded; ++it) {
    std::vector<int> idx = quantize(z, cb.vectors).indices;
    cb.ema_update(z, idx, reseed);
    for (const auto& site : sites) {
      if (cb.vectors.values()[2] == site[0] && cb.vectors.values()[3] == site[1]) {
        reseeded = true;
      }
    }
  }
  CHECK(reseeded);
}

TEST_CASE("forward wires the losses together") {
  Rng rng(58);
  VqVae vq(tiny_cfg(), rng);
  Tensor x = rand_uniform({2, 1, 16, 16}, rng, 0.0, 1.0);
  VqVae::Forward f = vq.forward(x);
  CHECK(f.x_hat.shape() == x.shape());
  CHECK(f.z_e.shape() == Shape{2, 4, 4, 4});
  CHECK(f.q.indices.size() == 2 * 4 * 4);
  CHECK(f.losses.total.item() ==
        doctest::Approx(f.losses.recon.item() + f.losses.commit.item()).epsilon(1e-12));
}

TEST_CASE("vqvae save/load round trip preserves behaviour") {
  Rng rng(59);
  VqVae vq(tiny_cfg(), rng);
  Tensor x = rand_uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
  Checkpoint ck;
  vq.save(ck, "vq");

  Rng rng2(1234);
  VqVae other(tiny_cfg(), rng2);
  CHECK(other.encode(x).values() != vq.encode(x).values());
  other.load(ck, "vq");
  CHECK(other.encode(x).values() == vq.encode(x).values());
  CHECK(other.forward(x).x_hat.values() == vq.forward(x).x_hat.values());
  CHECK(other.codebook.vectors.values() == vq.codebook.vectors.values());
  CHECK(other.codebook.ema_counts.values() == vq.codebook.ema_counts.values());
}

TEST_CASE("pretraining steps are deterministic in the seed") {
  Rng rng_a(60), rng_b(60);
  VqVae a(tiny_cfg(), rng_a), b(tiny_cfg(), rng_b);
  VqTrainer ta(a, 1e-3, 1.0, 7), tb(b, 1e-3, 1.0, 7);
  std::vector<Tensor> frames;
  Rng data(61);
  for (int i = 0; i < 12; ++i) frames.push_back(rand_uniform({8, 8}, data, 0.0, 1.0));
  auto ra = ta.run_epoch(frames, 4, 0);
  auto rb = tb.run_epoch(frames, 4, 0);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].total == rb[i].total);
    CHECK(ra[i].recon == rb[i].recon);
  }
  CHECK(a.encode(reshape(frames[0], {1, 1, 8, 8})).values() ==
        b.encode(reshape(frames[0], {1, 1, 8, 8})).values());
}

TEST_CASE("pretraining resume matches an unbroken run") {
  std::vector<Tensor> frames;
  Rng data(62);
  for (int i = 0; i < 8; ++i) frames.push_back(rand_uniform({8, 8}, data, 0.0, 1.0));

  Rng rng_a(63);
  VqVae a(tiny_cfg(), rng_a);
  VqTrainer ta(a, 1e-3, 1.0, 9);
  ta.run_epoch(frames, 4, 0);
  ta.run_epoch(frames, 4, 1);

  Rng rng_b(63);
  VqVae b(tiny_cfg(), rng_b);
  VqTrainer tb(b, 1e-3, 1.0, 9);
  tb.run_epoch(frames, 4, 0);
  fs::path p = fs::temp_directory_path() / "tivode-vq-resume.ckpt";
  tb.save(p.string());

  Rng rng_c(999);
  VqVae c(tiny_cfg(), rng_c);
  VqTrainer tc(c, 1e-3, 1.0, 9);
  tc.load(p.string());
  CHECK(tc.epochs_done() == 1);
  tc.run_epoch(frames, 4, tc.epochs_done());

  auto pa = a.parameters();
  auto pc = c.parameters();
  REQUIRE(pa.size() == pc.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->values() == pc[i]->values());
}
