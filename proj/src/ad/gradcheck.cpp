#include "fabricvs/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace fabricvs::ad {

GradCheckResult check_gradients(const std::function<Tensor()>& builder,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  if (options.eps <= 0.0) throw ContractError("check_gradients: eps must be positive");
  for (const auto& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) {
      throw ContractError("check_gradients: inputs must be trainable leaves");
    }
  }

  const double base = builder().item();
  if (builder().item() != base) {
    throw OracleInvalidError("check_gradients: builder is not deterministic");
  }

  // Analytic pass; persistent leaf gradients are restored afterwards.
  std::vector<std::vector<double>> saved;
  for (const auto& t : inputs) saved.emplace_back(t.grad().begin(), t.grad().end());
  GradientMap grads;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor root = builder();
    grads = backward(tape, root);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].node()->grad = std::move(saved[i]);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.emplace_back(i, j);
  }
  if (options.max_samples != 0 && coords.size() > options.max_samples) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_samples);
  }

  GradCheckResult result;
  for (auto [i, j] : coords) {
    Tensor t = inputs[i];
    auto values = t.mutable_data();
    const double original = values[j];
    values[j] = original + options.eps;
    const double plus = builder().item();
    values[j] = original - options.eps;
    const double minus = builder().item();
    values[j] = original;
    const double numeric = (plus - minus) / (2.0 * options.eps);
    const double analytic = grads.contains(t) ? grads.at(t)[j] : 0.0;
    const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace fabricvs::ad
