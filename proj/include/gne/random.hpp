// Deterministic random streams.
//
// Every consumer of randomness derives its own engine from
// (master seed, purpose tag, up to two indices), so results do not depend on
// the order in which agents or cells are processed.

#pragma once

#include <cstdint>
#include <random>

namespace gne {

enum class StreamTag : std::uint32_t {
  instance = 1,
  oracle = 2,
  synthetic = 3,
  init = 4,
};

inline std::mt19937_64 make_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0,
                                   std::uint64_t b = 0) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), static_cast<std::uint32_t>(tag), lo(a), hi(a), lo(b), hi(b)};
  return std::mt19937_64(seq);
}

}  // namespace gne
