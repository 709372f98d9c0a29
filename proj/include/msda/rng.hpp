#pragma once

#include <cstdint>
#include <vector>

namespace msda {

// Deterministic RNG used everywhere in the project. Wraps a fixed 64-bit
// generator and does its own float/normal conversion so that streams are
// reproducible bit-for-bit for a given seed on one platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // xorshift* variant; period 2^64-1
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, second value cached
  double normal();

  // uniform integer in [0, n)
  int uniform_int(int n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(v[i], v[static_cast<std::size_t>(j)]);
    }
  }

  // Independent child stream; mixing is splitmix64-style so streams derived
  // from different tags do not overlap in practice.
  Rng fork(std::uint64_t tag);

 private:
  std::uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// stable 64-bit hash for strings (stream tags, subject ids)
std::uint64_t hash_tag(const char* s);

}  // namespace msda
