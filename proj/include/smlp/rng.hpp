#pragma once

#include <cmath>
#include <cstdint>

namespace smlp {

namespace rngdetail {

// SplitMix64 finalizer: two xor-shift-multiplies and a final xor-shift.
inline std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace rngdetail

// Keyed 64-bit hash, fixed bit-exactly. This is the hash the hash router and
// corpus shuffling rely on, so the definition is part of the file-format/
// routing contract:
//   h = mix64(x ^ mix64(seed + 0x9E3779B97F4A7C15))
// where mix64 is the SplitMix64 finalizer above. The seed passes through the
// finalizer first so (x, seed) pairs with equal sums do not collide.
inline std::uint64_t hash64(std::uint64_t x, std::uint64_t seed) {
  return rngdetail::mix64(x ^ rngdetail::mix64(seed + 0x9E3779B97F4A7C15ull));
}

// Deterministic RNG with explicitly specified transforms. std:: distributions
// are implementation-defined, which would break cross-platform reproducibility
// of parameter init and batch shuffling, so both are done by hand here. The
// whole generator state is the single u64 counter, so snapshots are trivial.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : state_(seed) {}

  // SplitMix64 stream.
  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return rngdetail::mix64(state_);
  }

  // [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Marsaglia polar method; avoids trig for fewer libm portability surprises.
  // The second variate of each accepted pair is discarded so the output is a
  // pure function of the u64 stream position.
  double normal(double mean, double stddev) {
    double u, v, s;
    do {
      u = 2.0 * next_double() - 1.0;
      v = 2.0 * next_double() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return mean + stddev * u * std::sqrt(-2.0 * std::log(s) / s);
  }

  // Uniform integer in [0, n) by rejection, so the draw is unbiased and
  // reproducible independent of n's bit width.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace smlp
