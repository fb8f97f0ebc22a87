#pragma once

#include <cstdint>
#include <string_view>

namespace clipin {

// Counter-based generator: output i of a stream is a pure function of
// (stream key, i). Sub-streams derived with split() are independent of each
// other, so reordering one consumer never perturbs another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal, Box-Muller
  std::uint64_t below(std::uint64_t n);  // uniform in [0, n), n > 0

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  Rng(std::uint64_t key, int) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace clipin
