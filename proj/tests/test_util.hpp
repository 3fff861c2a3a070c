#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>

#include "doctest.h"
#include "moba/tensor.hpp"

namespace testing {

inline moba::Tensor rnd(moba::Shape shape, std::uint64_t seed) {
  return moba::seeded_random<double>(shape, seed);
}

inline double max_gap(const moba::Tensor& got, std::span<const double> want) {
  REQUIRE(got.size() == want.size());
  double e = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) e = std::max(e, std::abs(got[i] - want[i]));
  return e;
}

inline void check_max_abs(const moba::Tensor& a, const moba::Tensor& b, double tol) {
  CHECK(moba::max_abs_diff(a, b) <= tol);
}

}  // namespace testing
