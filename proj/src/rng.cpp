#include "detgen/rng.hpp"

#include <cmath>

#include "detgen/common.hpp"

namespace detgen {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(mix64(seed ^ mix64(stream_id + kGolden))) {}

Rng::Rng(std::uint64_t seed, std::uint64_t stream_id, int)
    : seed_(seed), stream_id_(stream_id), key_(mix64(seed ^ mix64(stream_id + kGolden))) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

double Rng::normal() {
  // u in (0, 1] so the log never sees zero.
  const double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double v = uniform01();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * M_PI * v);
}

std::uint64_t Rng::below(std::uint64_t n) {
  require(n >= 1, "Rng::below requires n >= 1");
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

bool Rng::coin() { return (next_u64() & 1u) != 0; }

Rng Rng::stream(std::uint64_t substream) const {
  return Rng(seed_, mix64(stream_id_ ^ mix64(substream + kGolden)), 0);
}

Rng Rng::named(std::string_view name) const { return stream(hash_name(name)); }

std::uint64_t Rng::hash_name(std::string_view name) {
  // FNV-1a 64.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detgen
