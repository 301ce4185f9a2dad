// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace ecgpt {

// splitmix64 finalizer (Steele, Lea & Flood).
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based deterministic generator. Cheap to construct, so every
// (sample, block, mechanism) tuple gets its own independent stream; toggling
// one stochastic mechanism never shifts the draws of another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return splitmix64_mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t x = next_u64();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
      if (static_cast<std::uint64_t>(m) >= threshold) {
        return static_cast<std::uint64_t>(m >> 64);
      }
    }
  }

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  // Fresh independent stream keyed by this generator's seed and the id path.
  // Pure: does not consume state.
  Rng child(std::initializer_list<std::uint64_t> ids) const {
    std::uint64_t s = seed_;
    for (const std::uint64_t id : ids) {
      s = splitmix64_mix(s ^ (0x9e3779b97f4a7c15ull + splitmix64_mix(id)));
    }
    return Rng(s);
  }

  // Fresh stream keyed by an internal call counter; successive forks differ,
  // re-seeding reproduces the same fork sequence.
  Rng fork() { return child({0xf0f0f0f0ull, fork_counter_++}); }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  std::uint64_t fork_counter_ = 0;
};

// Stable stream ids for the independent randomness consumers.
namespace stream {
constexpr std::uint64_t kDropPath = 0x01;
constexpr std::uint64_t kDropout = 0x02;
constexpr std::uint64_t kInit = 0x03;
constexpr std::uint64_t kShuffle = 0x04;
constexpr std::uint64_t kBootstrap = 0x05;
constexpr std::uint64_t kSample = 0x06;
constexpr std::uint64_t kSubsample = 0x07;
constexpr std::uint64_t kHeadInit = 0x08;
constexpr std::uint64_t kEpoch = 0x09;
constexpr std::uint64_t kEval = 0x0a;
}  // namespace stream

}  // namespace ecgpt
