#pragma once

// Counter-based, splittable random streams.
//
// A stream is identified by a 64-bit key; the i-th draw is
// splitmix64(key + (i + 1) * golden_gamma), i.e. the SplitMix64 output
// function applied to a Weyl sequence. Child streams are derived by hashing
// the parent key with a tag, so any component (identity k, sample s, model
// "clean64", ...) owns an independent stream that does not depend on the
// order in which other streams were consumed. Only integer arithmetic and
// our own distribution transforms are used; std:: distributions are not
// portable across standard libraries and are avoided on purpose.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace pairguard {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over bytes; used to turn names into stream tags.
inline constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Stream {
 public:
  constexpr explicit Stream(std::uint64_t key) noexcept : key_(key) {}

  constexpr std::uint64_t key() const noexcept { return key_; }

  constexpr Stream split(std::uint64_t tag) const noexcept {
    return Stream(splitmix64(key_ ^ splitmix64(tag + kGoldenGamma)));
  }
  constexpr Stream split(std::string_view tag) const noexcept {
    return split(fnv1a(tag));
  }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return splitmix64(key_ + counter_ * kGoldenGamma);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, bound) by rejection; bound > 0.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % bound;
  }

  /// Standard normal via Box-Muller (one value per pair of uniforms).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace pairguard
