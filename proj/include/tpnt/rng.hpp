#pragma once

#include <cstdint>
#include <initializer_list>

namespace tpnt {

// Counter-based generator: output i is a pure function of (seed, stream, i),
// so per-image draws can be keyed without any shared draw order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 24 random mantissa bits.
  float uniform01f();
  // Uniform in [lo, hi).
  float uniform(float lo, float hi);
  double uniform01();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t counter() const { return counter_; }

  // Order-sensitive hash of a key tuple, for deriving stream ids.
  static std::uint64_t key(std::initializer_list<std::uint64_t> parts);

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace tpnt
