#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fabricvs::net {

struct GradCheckRow {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double seconds = 0.0;
};

/// Central-difference check of every block type and of the toy network
/// (K = L = M = 1) for each variant. samples caps the coordinates per case (0 = all).
std::vector<GradCheckRow> gradient_check_suite(std::uint64_t seed = 0, std::size_t samples = 200);

}  // namespace fabricvs::net
