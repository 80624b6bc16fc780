#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <vector>

#include "testutil.hpp"
#include "tivode/errors.hpp"
#include "tivode/ops.hpp"
#include "tivode/rng.hpp"
#include "tivode/tensor.hpp"

using namespace tivode;

TEST_CASE("shape bookkeeping") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.dim(2) == 4);
  CHECK_THROWS_AS(t.dim(3), Error);
  CHECK_THROWS_AS(Tensor::from({1.0, 2.0, 3.0}, {2, 2}), Error);
  CHECK_THROWS_AS(t.item(), Error);
  CHECK(Tensor::full({1}, 7.5).item() == 7.5);
}

TEST_CASE("copies share until written") {
  Tensor a = Tensor::from({1.0, 2.0}, {2});
  Tensor b = a;
  b.mutable_values()[0] = 9.0;
  CHECK(a.values()[0] == 1.0);
  CHECK(b.values()[0] == 9.0);
}

TEST_CASE("backward through the identity gives gradient one") {
  Tensor x = Tensor::full({1}, 3.0);
  Tape tape;
  tape.watch(x);
  tape.backward(x);
  Tensor g = tape.grad(x);
  CHECK(g.size() == 1);
  CHECK(g.values()[0] == 1.0);
}

TEST_CASE("sum of a doubled tensor gives gradient two everywhere") {
  Tensor x = Tensor::from({1.0, -2.0, 0.5, 4.0}, {2, 2});
  Tape tape;
  tape.watch(x);
  Tensor loss = sum(scale(x, 2.0));
  tape.backward(loss);
  Tensor g = tape.grad(x);
  for (double v : g.values()) CHECK(v == 2.0);
}

TEST_CASE("fan-out accumulates") {
  Tensor x = Tensor::from({1.0, 2.0}, {2});
  Tape tape;
  tape.watch(x);
  Tensor loss = sum(add(x, x));
  tape.backward(loss);
  for (double v : tape.grad(x).values()) CHECK(v == 2.0);
}

TEST_CASE("stop_gradient blocks the path") {
  Tensor x = Tensor::from({1.0, 2.0}, {2});
  Tape tape;
  tape.watch(x);
  Tensor loss = sum(mul(x, stop_gradient(x)));
  tape.backward(loss);
  // Only the live factor contributes: d/dx sum(x * sg(x)) == sg(x).
  CHECK(tape.grad(x).values() == x.values());
}

TEST_CASE("grad contract violations throw") {
  Tensor x = Tensor::full({2}, 1.0);
  Tensor unwatched = Tensor::full({2}, 1.0);
  Tape tape;
  tape.watch(x);
  CHECK_THROWS_AS(tape.grad(x), ContractError);   // before backward
  CHECK_THROWS_AS(tape.backward(x), ContractError);  // non-scalar root
  Tensor loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.grad(unwatched), ContractError);
}

TEST_CASE("watched but unreached tensors get zero gradient") {
  Tensor x = Tensor::full({1}, 1.0);
  Tensor y = Tensor::from({1.0, 2.0}, {2});
  Tape tape;
  tape.watch(x);
  tape.watch(y);
  tape.backward(scale(x, 3.0));
  for (double v : tape.grad(y).values()) CHECK(v == 0.0);
  CHECK(tape.grad(x).values()[0] == 3.0);
}

TEST_CASE("PauseTape suspends recording") {
  Tensor x = Tensor::full({2}, 2.0);
  Tape tape;
  tape.watch(x);
  std::size_t before = tape.node_count();
  {
    PauseTape pause;
    Tensor dead = mul(x, x);
    CHECK(dead.values()[0] == 4.0);
  }
  CHECK(tape.node_count() == before);
}

TEST_CASE("composite conv -> group_norm -> attention matches finite differences") {
  Rng rng(11);
  Tensor x = randn({1, 2, 4, 4}, rng);
  Tensor w = randn({2, 2, 3, 3}, rng, 0.4);
  Tensor gamma = rand_uniform({2}, rng, 0.7, 1.3);
  Tensor beta = randn({2}, rng, 0.1);
  Tensor k = randn({3, 16}, rng, 0.5);
  Tensor v = randn({3, 16}, rng, 0.5);

  auto forward = [&]() {
    Tensor c = conv2d(x, w, 1, 1);
    Tensor n = group_norm(c, gamma, beta, 2, 1e-5);
    Tensor q = reshape(n, {2, 16});
    return sum(scaled_dot_attention(q, k, v)).item();
  };

  Tape tape;
  tape.watch(w);
  tape.watch(gamma);
  tape.watch(k);
  {
    Tensor c = conv2d(x, w, 1, 1);
    Tensor n = group_norm(c, gamma, beta, 2, 1e-5);
    Tensor q = reshape(n, {2, 16});
    tape.backward(sum(scaled_dot_attention(q, k, v)));
  }
  CHECK(testutil::rel_err(tape.grad(w), testutil::fd_gradient(w, forward)) < 1e-4);
  CHECK(testutil::rel_err(tape.grad(gamma), testutil::fd_gradient(gamma, forward)) < 1e-4);
  CHECK(testutil::rel_err(tape.grad(k), testutil::fd_gradient(k, forward)) < 1e-4);
}
