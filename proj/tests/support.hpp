#pragma once

#include <cmath>
#include <string>

#include "doctest.h"

#include "sctx/layers.hpp"
#include "sctx/rng.hpp"
#include "sctx/tensor.hpp"

namespace testing {

template <typename T = double>
sctx::Tensor<T> random_tensor(sctx::Shape shape, sctx::Rng& rng, double lo = -1, double hi = 1) {
  sctx::Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const sctx::Tensor<T>& a, const sctx::Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
void check_close(const sctx::Tensor<T>& a, const sctx::Tensor<T>& b, double tol) {
  CHECK(max_abs_diff(a, b) <= tol);
}

inline sctx::Tensor<double> tensor(sctx::Shape shape, std::vector<double> data) {
  return sctx::Tensor<double>(std::move(shape), std::move(data));
}

}  // namespace testing
