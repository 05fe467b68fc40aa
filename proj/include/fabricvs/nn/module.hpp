#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fabricvs/ad/ops.hpp"
#include "fabricvs/ad/tensor.hpp"

namespace fabricvs::nn {

using ad::Shape;
using ad::Tensor;

/// Invalid block / network configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Owns every trainable parameter and batch-norm buffer of a model, in
/// creation order. Initialization draws from one seeded generator so a model
/// built twice with the same seed is identical.
class ParamStore {
 public:
  struct Buffer {
    std::string name;
    ad::BatchNormStats stats;
  };

  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  // Deque moves keep buffer addresses, so blocks' stats pointers stay valid.
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Tensor uniform(const std::string& name, Shape shape, double bound);
  Tensor normal(const std::string& name, Shape shape, double stddev);
  Tensor constant(const std::string& name, Shape shape, double value);
  ad::BatchNormStats* batch_norm_stats(const std::string& name, std::size_t channels);

  [[nodiscard]] const std::vector<Tensor>& params() const { return params_; }
  [[nodiscard]] std::deque<Buffer>& buffers() { return buffers_; }
  [[nodiscard]] const std::deque<Buffer>& buffers() const { return buffers_; }
  [[nodiscard]] std::size_t count() const;
  /// All parameter values concatenated in creation order.
  [[nodiscard]] std::vector<double> flat() const;
  void zero_grad();

 private:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);

  std::mt19937_64 rng_;
  std::vector<Tensor> params_;
  std::deque<Buffer> buffers_;
};

/// y = x W + b over the last axis; W is (in, out).
struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool bias = true);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

/// Pointwise convolution on (B, Cin, H, W).
struct Conv1x1 {
  Tensor w, b;
  Conv1x1() = default;
  Conv1x1(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool bias = false);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

struct BatchNorm2d {
  Tensor gamma, beta;  // undefined when affine is off
  ad::BatchNormStats* stats = nullptr;
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& name, std::size_t channels, bool affine = true);
  [[nodiscard]] Tensor operator()(const Tensor& x, bool training) const;
};

/// Normalizes the last axis.
struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

/// Layer norm over the channel axis of (B, C, H, W).
struct ChannelLayerNorm {
  LayerNorm ln;
  ChannelLayerNorm() = default;
  ChannelLayerNorm(ParamStore& ps, const std::string& name, std::size_t channels)
      : ln(ps, name, channels) {}
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

}  // namespace fabricvs::nn
