#pragma once

#include <cmath>
#include <cstdint>

namespace rlda {

// Counter-free deterministic RNG: xoshiro256++ state seeded from a 64-bit
// lineage key via splitmix64. The lineage key supports substream derivation,
// so independent units of work (trajectories, episodes, steps, particles) get
// their own streams and results do not depend on scheduling or worker count.
//
// std::normal_distribution is implementation-defined, so Gaussian draws use
// our own Box-Muller (pair cached per instance).
class Rng {
 public:
  explicit Rng(uint64_t seed) : lineage_(seed) { reseed(); }

  // Derive an independent child stream. Deterministic in (lineage, ids).
  Rng substream(uint64_t a) const { return Rng(mix(lineage_, a)); }
  Rng substream(uint64_t a, uint64_t b) const {
    return Rng(mix(mix(lineage_, a), b));
  }
  Rng substream(uint64_t a, uint64_t b, uint64_t c) const {
    return Rng(mix(mix(mix(lineage_, a), b), c));
  }

  uint64_t lineage() const { return lineage_; }

  uint64_t u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n), n >= 1. Rejection sampling keeps it exact.
  int64_t uniform_int(int64_t n) {
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v = u64();
    while (v >= limit) v = u64();
    return static_cast<int64_t>(v % un);
  }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // log(0) guard, p ~ 2^-53
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(double* out, int64_t n, double mean = 0.0,
                   double stddev = 1.0) {
    for (int64_t i = 0; i < n; ++i) out[i] = mean + stddev * normal();
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // One-way combine of a lineage key and a child id.
  static uint64_t mix(uint64_t lineage, uint64_t child) {
    uint64_t state = lineage ^ (0x9e3779b97f4a7c15ULL + (child << 1));
    uint64_t h = splitmix(state);
    state ^= child;
    h ^= splitmix(state);
    return h;
  }

  void reseed() {
    uint64_t state = lineage_;
    for (auto& s : s_) s = splitmix(state);
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t s_[4] = {};
  uint64_t lineage_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rlda
