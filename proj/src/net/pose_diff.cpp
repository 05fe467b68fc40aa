#include "fabricvs/net/pose_diff.hpp"

#include <stdexcept>
#include <string>

namespace fabricvs {

void LabelRanges::validate() const {
  for (std::size_t i = 0; i < 6; ++i) {
    if (!(lo[i] <= hi[i])) throw std::invalid_argument("label range " + std::to_string(i) + " is inverted");
  }
}

// A zero-width axis maps to 0.5 and back to its single value.
Vec6 LabelRanges::normalize(const Vec6& diff) const {
  Vec6 out{};
  for (std::size_t i = 0; i < 6; ++i) {
    const double w = hi[i] - lo[i];
    out[i] = w > 0.0 ? (diff[i] - lo[i]) / w : 0.5;
  }
  return out;
}

Vec6 LabelRanges::denormalize(const Vec6& unit) const {
  Vec6 out{};
  for (std::size_t i = 0; i < 6; ++i) out[i] = lo[i] + unit[i] * (hi[i] - lo[i]);
  return out;
}

void to_json(nlohmann::json& j, const LabelRanges& r) { j = {{"lo", r.lo}, {"hi", r.hi}}; }

void from_json(const nlohmann::json& j, LabelRanges& r) {
  j.at("lo").get_to(r.lo);
  j.at("hi").get_to(r.hi);
}

}  // namespace fabricvs
