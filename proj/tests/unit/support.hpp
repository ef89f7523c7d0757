#pragma once

#include <gtest/gtest.h>

#include <cmath>

#include "tpnt/error.hpp"
#include "tpnt/tensor.hpp"

// Expects `stmt` to throw tpnt::Error carrying `errc`.
#define EXPECT_ERRC(stmt, errc)                                                              \
  do {                                                                                       \
    bool thrown_ = false;                                                                    \
    try {                                                                                    \
      stmt;                                                                                  \
    } catch (const tpnt::Error& e_) {                                                        \
      thrown_ = true;                                                                        \
      EXPECT_EQ(e_.code(), errc) << tpnt::errc_name(e_.code()) << ": " << e_.what();         \
    }                                                                                        \
    EXPECT_TRUE(thrown_) << #stmt " did not throw";                                          \
  } while (0)

namespace tpnt::testing {

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed, 0x7465);
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

}  // namespace tpnt::testing
