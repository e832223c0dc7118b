#pragma once

#include <array>
#include <cstdint>

#include "qsteady/types.hpp"

namespace qsteady {

// Counter-based generator (Philox 4x32, 10 rounds). Each trajectory owns a
// stream selected through the counter's high words, so draws are reproducible
// bit for bit regardless of scheduling or thread count, and a stream can be
// checkpointed as a handful of integers.

namespace detail {

inline constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
inline constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
inline constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 4> ctr,
                                                 std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(detail::kPhiloxM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(detail::kPhiloxM1) * ctr[2];
    const std::array<std::uint32_t, 4> next = {
        static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
        static_cast<std::uint32_t>(p1),
        static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
        static_cast<std::uint32_t>(p0)};
    ctr = next;
    key[0] += detail::kPhiloxW0;
    key[1] += detail::kPhiloxW1;
  }
  return ctr;
}

struct RngState {
  std::array<std::uint32_t, 2> key{};
  std::array<std::uint32_t, 4> ctr{};  // words 2,3 carry the stream id
  std::array<std::uint32_t, 4> buf{};
  std::uint32_t pos = 4;

  bool operator==(const RngState&) const = default;
};

class CounterRng {
 public:
  CounterRng() = default;
  CounterRng(std::uint64_t seed, std::uint64_t stream) {
    const std::uint64_t k = detail::splitmix64(seed);
    state_.key = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    state_.ctr = {0u, 0u, static_cast<std::uint32_t>(stream),
                  static_cast<std::uint32_t>(stream >> 32)};
  }
  explicit CounterRng(const RngState& s) : state_(s) {}

  std::uint32_t next_u32() {
    if (state_.pos >= 4) {
      state_.buf = philox_block(state_.ctr, state_.key);
      if (++state_.ctr[0] == 0u) ++state_.ctr[1];
      state_.pos = 0;
    }
    return state_.buf[state_.pos++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  // uniform in [0, 1) with 53 significant bits
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in (0, 1]; safe under a logarithm
  double next_open() { return 1.0 - next_double(); }

  const RngState& state() const { return state_; }
  void restore(const RngState& s) { state_ = s; }

 private:
  RngState state_{};
};

}  // namespace qsteady
