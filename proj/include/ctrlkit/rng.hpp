#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace ctrlkit {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Counter-based generator. The stream is a pure function of the key
/// (seed plus any number of stream ids such as step or layer) and the
/// draw counter, so any draw can be replayed without carrying state.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) noexcept
      : key_(splitmix64(seed)) {
    for (std::uint64_t s : stream) key_ = splitmix64(key_ ^ splitmix64(s + 0x632BE59BD9B4E019ULL));
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }
  void seek(std::uint64_t counter) noexcept { counter_ = counter; }

  std::uint64_t next_u64() noexcept { return at(counter_++); }

  // Draw number `index` without touching the counter.
  std::uint64_t at(std::uint64_t index) const noexcept {
    return splitmix64(key_ ^ (index * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return to_unit(next_u64()); }
  double uniform_at(std::uint64_t index) const noexcept { return to_unit(at(index)); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static double to_unit(std::uint64_t x) noexcept {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ctrlkit
