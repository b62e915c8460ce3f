#pragma once

// Named, deterministic random streams derived from a single master seed.
//
// A stream's seed is splitmix64(master ^ splitmix64(fnv1a(name))); substreams
// fold extra counters (epoch, sample index, view, ...) through further
// splitmix64 rounds. No wall-clock input is ever used.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "hash.hpp"

namespace deacl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

class SeedStreams {
 public:
  explicit SeedStreams(std::uint64_t master) : master_(master) {}

  std::uint64_t master() const { return master_; }

  std::uint64_t stream_seed(std::string_view name) const { return splitmix64(master_ ^ splitmix64(fnv1a64(name))); }

  /// Fresh generator for a named stream; callers own their state.
  Rng stream(std::string_view name) const { return Rng(stream_seed(name)); }

  Rng substream(std::string_view name, std::initializer_list<std::uint64_t> counters) const {
    std::uint64_t s = stream_seed(name);
    for (auto c : counters) s = splitmix64(s ^ splitmix64(c + 0x632be59bd9b4e019ULL));
    return Rng(s);
  }

 private:
  std::uint64_t master_;
};

}  // namespace deacl
