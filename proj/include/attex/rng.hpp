#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace attex {

// Deterministic RNG wrapper. mt19937 output is fully specified by the
// standard; the derived draws below avoid std::*_distribution, whose
// sequences are implementation-defined. All reproducibility guarantees
// in this project reduce to this class plus a fixed draw order.
class Rng {
 public:
  explicit Rng(uint32_t seed) : gen_(seed) {}

  uint32_t next_u32() { return gen_(); }

  // Uniform integer in [0, n). n must be > 0.
  uint32_t below(uint32_t n) { return gen_() % n; }

  // Uniform in [0, 1) with 53 random bits.
  double unit() {
    const uint64_t hi = gen_() >> 6;  // 26 bits
    const uint64_t lo = gen_() >> 5;  // 27 bits
    return static_cast<double>((hi << 27) | lo) * (1.0 / 9007199254740992.0);
  }

  template <typename S>
  S uniform(S lo, S hi) {
    return lo + static_cast<S>(unit()) * (hi - lo);
  }

  // Fisher-Yates; draw order is fixed so shuffles replay identically.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = below(static_cast<uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937 gen_;
};

}  // namespace attex
