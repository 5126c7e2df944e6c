#pragma once

#include <cmath>
#include <cstdint>

namespace mneme {

// Counter-based deterministic generator (splitmix64). The state advances by a
// fixed odd increment and each output is a pure mix of the counter, so streams
// are reproducible across platforms and stdlib versions. `fork` derives an
// independent stream from a label, which keeps weight init, data shuffling and
// per-(prompt, sample) sampling decoupled from each other.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; one value per call, deterministic.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Independent stream keyed by (current state, label).
  Rng fork(std::uint64_t label) const {
    std::uint64_t z = state_ ^ (label * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
    return Rng(z ^ (z >> 33));
  }

 private:
  std::uint64_t state_;
};

// FNV-1a over a string, for name-keyed rng forks.
inline std::uint64_t hash_label(const char* s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 1099511628211ULL;
  return h;
}

}  // namespace mneme
