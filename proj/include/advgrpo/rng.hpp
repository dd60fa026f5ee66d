#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace advgrpo {

// SplitMix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  return mix64(mix64(mix64(master) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

// Deterministic random source. Every stochastic routine in the library takes
// one of these by reference; nothing reads ambient entropy.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // A child stream whose draws do not depend on how much of this stream
  // has been consumed afterwards.
  Rng substream(std::uint64_t a, std::uint64_t b = 0) const { return Rng(derive_seed(seed_of_state(), a, b)); }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return std::generate_canonical<double, 53>(engine_); }

  double normal() { return normal_(engine_); }

  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
  }

  void fill_normal(std::span<double> out, double sigma) {
    for (double& v : out) v = sigma * normal();
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_of_state() const {
    std::mt19937_64 copy = engine_;
    return copy();
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace advgrpo
