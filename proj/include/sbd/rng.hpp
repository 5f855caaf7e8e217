#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace sbd {

// SplitMix64 finalizer; also the hash used for every derived seed.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// FNV-1a, for deriving streams from readable tags.
constexpr std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

// derive_seed(seed, tag) = mix64(seed ^ mix64(tag)).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag));
}
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return derive_seed(seed, hash_tag(tag));
}

// Counter-based generator: draw n is mix64(key + n * golden). The full state
// is (key, counter), so it can be checkpointed and restored exactly.
class Rng {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed = 0) : state_{mix64(seed), 0} {}
  static Rng from_state(State s) {
    Rng r;
    r.state_ = s;
    return r;
  }

  std::uint64_t next_u64() {
    const std::uint64_t n = state_.counter++;
    return mix64(state_.key + n * 0xD1B54A32D192ED03ULL);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    auto k = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return k < n ? k : n - 1;
  }

  // Standard normal via Box-Muller; consumes two draws.
  double normal();

  Rng fork(std::uint64_t tag) const { return Rng(derive_seed(state_.key, tag)); }
  Rng fork(std::string_view tag) const { return Rng(derive_seed(state_.key, tag)); }

  State state() const { return state_; }
  std::uint64_t draws() const { return state_.counter; }

 private:
  State state_;
};

}  // namespace sbd
