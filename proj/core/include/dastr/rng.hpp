#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace dastr {

// Deterministic random source.  One master seed drives a whole experiment;
// every consumer (stage, purpose, trajectory) derives its own independent
// substream from the master seed and a small integer path, so results do not
// depend on the order in which consumers happen to draw, and interrupted runs
// can resume exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Derives an independent generator from (seed, path) by hashing the path
  // elements into the seed with splitmix64 steps.  Identical (seed, path)
  // always yields an identical stream.
  static Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);
  static Rng substream(std::uint64_t seed, std::span<const std::uint64_t> path);

  // Uniform draw in [0, 1).
  double uniform();
  // Uniform draw in [lo, hi).
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller.  No cached spare: each call consumes two
  // uniforms, which keeps the stream position a pure function of call count.
  double normal();
  // Uniform integer in [0, n).  Uses rejection to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n);
  // Raw 64-bit draw.
  std::uint64_t next_u64();

  void fill_normal(std::span<double> out);
  void fill_uniform(std::span<double> out, double lo, double hi);

  // Fisher-Yates shuffle of an index vector, used for minibatch epochs.
  void shuffle(std::vector<std::int64_t>& indices);

 private:
  std::mt19937_64 gen_;
};

// splitmix64 stream hash step, exposed for tests of substream derivation.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace dastr
