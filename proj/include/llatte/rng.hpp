#ifndef LLATTE_RNG_HPP_
#define LLATTE_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <string_view>

namespace llatte {

// Counter-based generator: every draw is a stateless mix of (key, counter),
// so independent substreams can be derived by name and consumed in any
// order across threads with identical results.
class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t key, uint64_t ctr) {
    uint64_t z = key + 0x9e3779b97f4a7c15ULL * (ctr + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Derives a child stream key from a label and an index.
  static uint64_t derive(uint64_t key, std::string_view label, uint64_t index = 0) {
    uint64_t h = 0xcbf29ce484222325ULL ^ key;
    for (char c : label) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    return mix(h, index);
  }

  Rng sub(std::string_view label, uint64_t index = 0) const {
    return Rng(derive(key_, label, index));
  }

  uint64_t next_u64() { return mix(key_, ctr_++); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated to +/- 2 sigma by rejection.
  double truncated_normal(double sigma) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * sigma;
  }

  // Knuth's product method; fine for the small rates the generator uses.
  int poisson(double lambda) {
    double l = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  bool bernoulli(double p) { return uniform() < p; }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
  uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace llatte

#endif  // LLATTE_RNG_HPP_
