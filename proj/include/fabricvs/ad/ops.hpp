#pragma once

#include <span>
#include <vector>

#include "fabricvs/ad/tensor.hpp"

// Differentiable primitives. Every function checks its shape rule, computes the
// forward value, rejects non-finite results and records a backward closure on
// the active tape when any input requires a gradient.
namespace fabricvs::ad {

// Elementwise with right-aligned broadcasting (size-1 dims stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

Tensor gelu(const Tensor& x);  // exact x * Phi(x)
Tensor sigmoid(const Tensor& x);

/// Softmax over the last axis.
Tensor softmax(const Tensor& x);

/// Normalizes over the last axis; gamma/beta have that axis' length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

/// Per-channel normalization over all axes except 1. In training mode batch
/// statistics are used and `stats` is updated with `momentum`; in eval mode
/// `stats` is used as is. Undefined gamma/beta disable the affine part.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training, double momentum = 0.1, double eps = 1e-5);

/// (..., K) x (K, N) -> (..., N)
Tensor matmul(const Tensor& a, const Tensor& b);
/// (B, M, K) x (B, K, N) -> (B, M, N); with transpose_b, b is (B, N, K).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Stride-1 convolution of (B, Cin, H, W). `w` is (Cout, Cin, kh, kw) shared by
/// the batch or (B, Cout, Cin, kh, kw) with one kernel per sample.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad);
/// Depthwise stride-1 convolution, `w` is (C, 1, kh, kw).
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t pad);
/// 1-D convolution along the channel axis of (B, C) with zero "same" padding.
Tensor channel_conv1d(const Tensor& x, const Tensor& w);

/// (B, C, H, W) -> (B, C)
Tensor global_avg_pool(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Tensor parts[] = {a, b};
  return concat(parts, axis);
}
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Non-overlapping patches: (B, C, H, W) -> (B, ph*pw, H/ph * W/pw, C).
Tensor unfold_patches(const Tensor& x, std::size_t ph, std::size_t pw);
/// Inverse of unfold_patches.
Tensor fold_patches(const Tensor& x, std::size_t height, std::size_t width, std::size_t ph,
                    std::size_t pw);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);

/// Euclidean norm along `axis` (axis removed).
Tensor l2_norm(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = true);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

}  // namespace fabricvs::ad
