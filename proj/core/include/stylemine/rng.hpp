#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "stylemine/tensor.hpp"

namespace stylemine {

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer; used to derive independent seed streams.
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seeded RNG wrapper. stream(tag, k) derives a deterministic child generator,
// so each phase of a run (init, batching, sampling, ...) owns its own stream
// and consumption in one phase never perturbs another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(mix64(seed)) {}

  uint64_t seed() const { return seed_; }

  Rng stream(std::string_view tag, uint64_t k = 0) const {
    return Rng(mix64(seed_ ^ fnv1a64(tag) ^ (k * 0x9e3779b97f4a7c15ull)));
  }

  uint64_t draw_u64() { return eng_(); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
  }

  int64_t index(int64_t n) {
    std::uniform_int_distribution<int64_t> d(0, n - 1);
    return d(eng_);
  }

  template <class T>
  void fill_normal(TensorT<T>& t, double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    for (T& v : t.data) v = static_cast<T>(d(eng_));
  }

  template <class T>
  void fill_uniform(TensorT<T>& t, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    for (T& v : t.data) v = static_cast<T>(d(eng_));
  }

  template <class T>
  std::vector<T> normal_vec(size_t n, double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    std::vector<T> out(n);
    for (T& v : out) v = static_cast<T>(d(eng_));
    return out;
  }

  template <class I>
  void shuffle(std::vector<I>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace stylemine
