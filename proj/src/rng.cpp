#include "rerank/rng.hpp"

#include <stdexcept>

namespace rerank {

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(uniform_int(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

void Rng::shuffle(std::vector<int>& v) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    const int j = static_cast<int>(uniform_int(i + 1));
    std::swap(v[i], v[j]);
  }
}

uint64_t fnv1a(std::string_view data, uint64_t h) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a_mix(uint64_t a, uint64_t b) {
  char buf[16];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>(a >> (8 * i));
  for (int i = 0; i < 8; ++i) buf[8 + i] = static_cast<char>(b >> (8 * i));
  return fnv1a(std::string_view(buf, 16));
}

uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index) {
  return fnv1a_mix(fnv1a(label, base ^ 0x9e3779b97f4a7c15ull), index);
}

}  // namespace rerank
