#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace slasim {

// splitmix64, used to derive independent stream seeds from a run seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(splitmix64(seed) ^ splitmix64(tag));
}

// Thin wrapper over mt19937_64 with explicit float conversions so the
// produced streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // unit-rate exponential, strictly positive
  double exponential() { return -std::log1p(-uniform()); }

  std::uint64_t index(std::uint64_t n) { return next_u64() % n; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  Rng derive(std::uint64_t tag) const { return Rng(mix_seed(seed_, tag)); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

// Stream tags used by the experiment harness to keep all randomness
// reproducible and independent per purpose.
namespace stream {
constexpr std::uint64_t env_params = 1;
constexpr std::uint64_t train_trace = 2;
constexpr std::uint64_t test_trace = 3;
constexpr std::uint64_t train_feedback = 4;
constexpr std::uint64_t test_feedback = 5;
constexpr std::uint64_t warmup_train = 6;
constexpr std::uint64_t warmup_test = 7;
constexpr std::uint64_t teacher_init = 8;
constexpr std::uint64_t student_init = 9;
constexpr std::uint64_t heuristic = 10;
constexpr std::uint64_t corruption = 11;
constexpr std::uint64_t offline_shuffle = 12;
}  // namespace stream

}  // namespace slasim
