#pragma once

#include <cstdint>
#include <limits>

namespace moc {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator. The stream is fully determined by a key derived
/// from (seed, lane...) so draws for one (head, query) never depend on the
/// order in which other lanes were evaluated. Satisfies
/// UniformRandomBitGenerator, so the standard distributions work on it.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  constexpr explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  static constexpr CounterRng keyed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t domain = 0) noexcept {
    return CounterRng(mix64(mix64(mix64(seed ^ mix64(domain)) ^ a) ^ (b + 0x632be59bd9b4e019ULL)));
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace moc
