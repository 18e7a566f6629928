#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mmoe {

using Rng = std::mt19937_64;

// Independent named sub-stream of a run seed ("data", "init", "scheduler", ...),
// so adding draws to one consumer never shifts another.
inline Rng derive_rng(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed ^ h;  // splitmix64 finaliser
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  return Rng(z);
}

// Normal(0, std) truncated at two standard deviations by resampling.
template <typename T>
void fill_truncated_normal(std::span<T> out, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (T& v : out) {
    double x = dist(rng);
    while (x < -2.0 || x > 2.0) x = dist(rng);
    v = static_cast<T>(x * stddev);
  }
}

}  // namespace mmoe
