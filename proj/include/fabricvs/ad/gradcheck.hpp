#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fabricvs/ad/tensor.hpp"

namespace fabricvs::ad {

/// The graph builder returned different values for identical inputs, so a
/// finite-difference comparison would be meaningless.
class OracleInvalidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-4;
  // Coordinates sampled across all inputs; 0 checks every coordinate.
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar-valued builder with central
/// finite differences on the given leaf parameters. The error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult check_gradients(const std::function<Tensor()>& builder,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});

}  // namespace fabricvs::ad
