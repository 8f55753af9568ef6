#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "lovis/agent.hpp"
#include "lovis/tensor.hpp"
#include "lovis/world.hpp"

namespace lovis::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(shape), stddev, rng, requires_grad);
}

// Fixed random weights so that sum(w ⊙ y) exercises every output element.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Tensor w = random_tensor(y.shape(), seed ^ 0xABCDEFULL, 1.0, false);
  return sum(mul(y, w));
}

// A small model whose gradients are large enough for sharp finite differences.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.n_text = 1;
  c.n_cross = 1;
  c.d_ff = 8;
  c.d_v = 64;
  c.init_std = 0.25;
  return c;
}

inline Dataset small_dataset(std::uint64_t seed = 3, std::size_t houses = 4, std::size_t episodes = 20) {
  return make_dataset(houses, episodes, seed);
}

}  // namespace lovis::test
