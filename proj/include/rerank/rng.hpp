#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace rerank {

// Deterministic RNG. mt19937_64 gives a sequence fixed by the standard; the
// distribution transforms below are hand-rolled because the std:: ones are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n). Rejection sampling on the top bits.
  int64_t uniform_int(int64_t n);

  // Standard normal via Box-Muller. One value per call; the spare is cached.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // First k entries of a shuffle of [0, n): a partial Fisher-Yates draw.
  std::vector<int> sample_without_replacement(int n, int k);

  void shuffle(std::vector<int>& v);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// FNV-1a, used for config hashes and seed derivation.
uint64_t fnv1a(std::string_view data, uint64_t h = 1469598103934665603ull);
uint64_t fnv1a_mix(uint64_t a, uint64_t b);

// Derives an independent stream seed from a base seed and a label/index.
uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index = 0);

}  // namespace rerank
