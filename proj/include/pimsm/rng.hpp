#pragma once

#include <cstdint>
#include <initializer_list>

namespace pimsm {

/// splitmix64 finaliser; mixes a stream of words into an independent seed so
/// per-sequence / per-channel generators do not share state.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> words) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (const auto w : words) h = mix(h ^ mix(w));
  return h;
}

}  // namespace pimsm
