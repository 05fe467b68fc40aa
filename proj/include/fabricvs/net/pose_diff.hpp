#pragma once

#include <array>

#include "json.hpp"

namespace fabricvs {

using Vec6 = std::array<double, 6>;

/// Min/max ranges of the pose-difference label (mm for translation, rad for
/// rotation), used for min-max normalization to [0, 1].
struct LabelRanges {
  Vec6 lo{-20.0, -20.0, -1.0, -0.1745329251994330, -0.1745329251994330, -0.1745329251994330};
  Vec6 hi{20.0, 20.0, 1.0, 0.1745329251994330, 0.1745329251994330, 0.1745329251994330};

  [[nodiscard]] Vec6 normalize(const Vec6& diff) const;
  [[nodiscard]] Vec6 denormalize(const Vec6& unit) const;
  /// Throws std::invalid_argument when some lo >= hi.
  void validate() const;
};

void to_json(nlohmann::json& j, const LabelRanges& r);
void from_json(const nlohmann::json& j, LabelRanges& r);

}  // namespace fabricvs
