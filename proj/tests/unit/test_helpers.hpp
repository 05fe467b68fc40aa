#pragma once

#include <random>
#include <vector>

#include "fabricvs/ad/ops.hpp"
#include "fabricvs/ad/tensor.hpp"

namespace fabricvs::testing {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                         double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline ad::Tensor random_param(ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(shape);
  return ad::Tensor::parameter(std::move(shape), random_values(n, seed, lo, hi));
}

inline ad::Tensor random_const(ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(shape);
  return ad::Tensor::from(std::move(shape), random_values(n, seed, lo, hi));
}

/// Scalar probe sum(t * R) with a fixed random R, so every output coordinate
/// contributes a distinct weight to the gradient.
inline ad::Tensor probe(const ad::Tensor& t, std::uint64_t seed = 99) {
  return ad::sum(ad::mul(t, random_const(t.shape(), seed)));
}

}  // namespace fabricvs::testing
