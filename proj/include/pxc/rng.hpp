#pragma once

#include <cstdint>
#include <random>

namespace pxc {

// Master seed for a run. Identical seed + identical config gives a
// bit-identical run within this implementation; cross-implementation
// bit-equality is not a goal.
using Seed = std::uint64_t;

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Purpose tags for independent substreams. Scene synthesis, fragmentation,
// augmentation, shuffling and parameter init each get their own stream so a
// resumed run can re-derive exactly the draws it needs.
namespace stream {
inline constexpr std::uint64_t kInit = 0x01;
inline constexpr std::uint64_t kScene = 0x02;
inline constexpr std::uint64_t kFragment = 0x03;
inline constexpr std::uint64_t kAugment = 0x04;
inline constexpr std::uint64_t kShuffle = 0x05;
inline constexpr std::uint64_t kMaskGen = 0x06;
}  // namespace stream

// Deterministic generator for (master, tag, index).
inline std::mt19937_64 substream(Seed master, std::uint64_t tag,
                                 std::uint64_t index = 0) {
  std::uint64_t s = master;
  const std::uint64_t a = splitmix64(s);
  s ^= tag * 0xD1B54A32D192ED03ull;
  const std::uint64_t b = splitmix64(s);
  s ^= index * 0x8CB92BA72F3D8DD7ull;
  const std::uint64_t c = splitmix64(s);
  return std::mt19937_64(a ^ (b * 0x2545F4914F6CDD1Dull) ^ c);
}

}  // namespace pxc
