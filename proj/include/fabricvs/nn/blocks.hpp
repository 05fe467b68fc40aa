#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "fabricvs/nn/module.hpp"

namespace fabricvs::nn {

/// Channel-attention stage inside a Convolutional Block.
enum class AttentionKind { kDcab, kSe, kEca, kGrn };

AttentionKind parse_attention_kind(std::string_view name);
std::string_view to_string(AttentionKind kind);

struct BlockConfig {
  std::size_t channels_in = 8;
  std::size_t channels_expanded = 16;
  // Token width inside the Transformer Block.
  std::size_t embed_dim = 8;
  std::size_t num_dyn_kernels = 4;
  std::size_t patch_size = 1;
  std::size_t heads = 1;
  AttentionKind attention = AttentionKind::kDcab;
  bool bn_affine = true;

  void validate() const;
  /// Throws DimensionError when the patch grid does not tile (height, width).
  void check_grid(std::size_t height, std::size_t width) const;
};

/// ECA 1-D kernel size for a channel count: nearest odd to (log2 C + 1) / 2.
std::size_t eca_kernel_size(std::size_t channels);

/// Per-sample distribution over a kernel bank, routed from ECA channel
/// descriptors: softmax(conv1d(GAP(x)) W_route + b).
struct EcaScores {
  Tensor conv_w, conv_b, route;
  std::size_t bank_size = 1;
  EcaScores() = default;
  EcaScores(ParamStore& ps, const std::string& name, std::size_t channels, std::size_t bank_size);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;  // (B, K)
};

/// Per-sample convolution with the score-weighted kernel sum
/// sum_k scores[b, k] * bank[k]. bank is (K, Cout, Cin, 3, 3), scores (B, K).
Tensor dynamic_conv(const Tensor& x, const Tensor& bank, const Tensor& scores);

/// Dynamic convolution by attention: DynConv3x3 - BN - GELU.
struct Dcab {
  EcaScores eca;
  Tensor bank;
  BatchNorm2d bn;
  Dcab() = default;
  Dcab(ParamStore& ps, const std::string& name, std::size_t channels, std::size_t bank_size,
       bool bn_affine = true);
  [[nodiscard]] Tensor operator()(const Tensor& x, bool training) const;
};

/// SE / ECA / GRN channel attention, shape preserving.
struct AttentionBaseline {
  AttentionKind kind = AttentionKind::kSe;
  Linear fc1, fc2;      // SE
  Tensor eca_w, eca_b;  // ECA
  Tensor gamma, beta;   // GRN
  AttentionBaseline() = default;
  AttentionBaseline(ParamStore& ps, const std::string& name, std::size_t channels, AttentionKind kind);
  [[nodiscard]] Tensor operator()(const Tensor& x) const;
};

/// Conv1x1-BN-GELU expansion, DWConv3x3-BN-GELU, attention stage,
/// Conv1x1-BN projection back to channels_in.
struct ConvBlock {
  BlockConfig cfg;
  Conv1x1 expand;
  BatchNorm2d bn1;
  Tensor dw;
  BatchNorm2d bn2;
  std::optional<Dcab> dcab;
  std::optional<AttentionBaseline> attention;
  Conv1x1 project;
  BatchNorm2d bn3;

  ConvBlock() = default;
  ConvBlock(ParamStore& ps, const std::string& name, const BlockConfig& cfg);
  [[nodiscard]] Tensor operator()(const Tensor& x, bool training) const;
};

/// Separable cross-attention block on (B, A, H, W) maps. Context scores come
/// from the query source, keys and values from the key/value source.
struct TransformerBlock {
  BlockConfig cfg;
  LayerNorm ln_q, ln_kv, ln_ffn;
  Linear score, key, value, out;
  Linear ffn1, ffn2;

  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& name, const BlockConfig& cfg);
  [[nodiscard]] Tensor operator()(const Tensor& q_src, const Tensor& kv_src) const;
};

/// Exchanges the two halves of the batch axis: [a; b] -> [b; a].
Tensor swap_halves(const Tensor& x);

/// Shared Conv1x1-BN-GELU over concat(x, x - other) for both streams.
struct DifferenceExtraction {
  Conv1x1 proj;
  BatchNorm2d bn;

  DifferenceExtraction() = default;
  DifferenceExtraction(ParamStore& ps, const std::string& name, std::size_t channels,
                       bool bn_affine = true);
  /// x holds both streams stacked on the batch axis, [a; b]. When `diff` is
  /// given it receives the signed difference [a - b; b - a].
  [[nodiscard]] Tensor stacked(const Tensor& x, bool training, Tensor* diff = nullptr) const;
  [[nodiscard]] std::pair<Tensor, Tensor> operator()(const Tensor& a, const Tensor& b,
                                                     bool training) const;
};

}  // namespace fabricvs::nn
