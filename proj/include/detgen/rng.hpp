#pragma once

#include <cstdint>
#include <string_view>

namespace detgen {

// Splittable counter-based generator. State is (seed, stream-id, counter);
// identical (seed, stream-id, call sequence) gives identical outputs on every
// platform. Derived streams are independent: draws on one stream never move
// another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t next_u64();
  double uniform01();              // [0, 1)
  double uniform(double lo, double hi);
  double normal();                 // standard normal, Box-Muller (2 draws/call)
  std::uint64_t below(std::uint64_t n);  // uniform in [0, n), n >= 1
  bool coin();                     // fair coin

  // Independent child stream; the parent's counter is untouched.
  Rng stream(std::uint64_t substream) const;
  Rng named(std::string_view name) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  static std::uint64_t hash_name(std::string_view name);

 private:
  Rng(std::uint64_t seed, std::uint64_t stream_id, int);  // no re-derivation

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace detgen
