#include "dastr/rng.hpp"

#include <cmath>
#include <numbers>

#include "dastr/common.hpp"

namespace dastr {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : gen_(seed) {}

Rng Rng::substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return substream(seed, std::span<const std::uint64_t>(path.begin(), path.size()));
}

Rng Rng::substream(std::uint64_t seed, std::span<const std::uint64_t> path) {
  std::uint64_t state = seed;
  std::uint64_t derived = splitmix64(state);
  for (std::uint64_t element : path) {
    state ^= element + 0x632be59bd9b4e019ULL + (state << 6) + (state >> 2);
    derived = splitmix64(state);
  }
  return Rng(derived);
}

double Rng::uniform() {
  // 53-bit mantissa construction: uniform on [0, 1).
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  if (!(lo < hi)) throw make_error("Rng::uniform: empty interval [", lo, ", ", hi, ")");
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log1p(-u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw make_error("Rng::uniform_index: n must be positive");
  std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % n;
  std::uint64_t draw;
  do {
    draw = gen_();
  } while (draw >= limit);
  return draw % n;
}

std::uint64_t Rng::next_u64() { return gen_(); }

void Rng::fill_normal(std::span<double> out) {
  for (double& value : out) value = normal();
}

void Rng::fill_uniform(std::span<double> out, double lo, double hi) {
  for (double& value : out) value = uniform(lo, hi);
}

void Rng::shuffle(std::vector<std::int64_t>& indices) {
  for (std::size_t i = indices.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_index(i));
    std::swap(indices[i - 1], indices[j]);
  }
}

}  // namespace dastr
