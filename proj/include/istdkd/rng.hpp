#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace istdkd {

// splitmix64, used to whiten seeds and to derive independent streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Seeded generator wrapper. All randomness in the project flows through
// this type so runs are reproducible from a single root seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  // Independent stream derived from this rng's seed lineage and a tag.
  Rng fork(const std::string& tag) { return Rng(splitmix64(eng_() ^ hash_str(tag))); }
  static Rng stream(std::uint64_t root, const std::string& tag) {
    return Rng(splitmix64(splitmix64(root) ^ hash_str(tag)));
  }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }

  std::mt19937_64& engine() { return eng_; }

  std::string state_str() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state_str(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace istdkd
