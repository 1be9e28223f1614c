// Copyright 2026 The poolbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <random>

namespace poolbal {

// SplitMix64 finalizer; used to mix (seed, replicate, stage) into one engine
// seed so every replicate owns an independent stream regardless of how work
// is scheduled across threads.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Replicate-indexed stream. Identical (seed, replicate, stage) triples yield
// identical engines on every run and with any thread count.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t replicate,
                                   std::uint64_t stage) {
  std::uint64_t s = mix64(seed ^ mix64(replicate ^ mix64(stage)));
  return std::mt19937_64(s);
}

namespace stage {
inline constexpr std::uint64_t kCovariates = 1;
inline constexpr std::uint64_t kGroups = 2;
inline constexpr std::uint64_t kParams = 3;
inline constexpr std::uint64_t kTreatment = 4;
inline constexpr std::uint64_t kNoise = 5;
inline constexpr std::uint64_t kBootstrap = 6;
inline constexpr std::uint64_t kCrossValidation = 7;
}  // namespace stage

}  // namespace poolbal
