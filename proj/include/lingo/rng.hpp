#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace lingo {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent seed for a named purpose ("split", "init", ...)
/// so that each consumer of randomness draws from its own stream.
std::uint64_t substream_seed(std::uint64_t seed, std::string_view name);

/// Seeded generator with platform-independent draws. The standard
/// distributions are implementation-defined, so uniform, normal and integer
/// draws are derived directly from the engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  Rng substream(std::string_view name) const;

  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // standard normal, Box-Muller
  std::uint64_t below(std::uint64_t n);   // [0, n), unbiased

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

  /// Engine state as text, for checkpointing.
  std::string state() const;
  void set_state(const std::string& s);

  std::uint64_t seed() const noexcept { return seed_; }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace lingo
