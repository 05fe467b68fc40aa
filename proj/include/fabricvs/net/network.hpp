#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fabricvs/image.hpp"
#include "fabricvs/nn/blocks.hpp"
#include "json.hpp"

namespace fabricvs::net {

using ad::Tensor;

enum class Variant { kDcab, kSe, kEca, kGrn, kNoDiffBlock, kConcat };

Variant parse_variant(std::string_view name);
std::string_view to_string(Variant v);

struct BackboneConfig {
  std::size_t patch = 6;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
};

struct NetConfig {
  Variant variant = Variant::kDcab;
  std::size_t width = 96;
  std::size_t height = 54;
  BackboneConfig backbone;
  // Embedding channels after the backbone projection.
  std::size_t embed = 64;
  std::size_t expansion = 2;
  std::size_t dyn_kernels = 4;
  std::size_t unfold_patch = 1;
  std::size_t heads = 1;
  std::size_t layers = 1;            // K
  std::vector<std::size_t> conv_blocks{1};         // L per layer
  std::vector<std::size_t> transformer_blocks{1};  // M per layer
  std::vector<std::size_t> head_hidden{64};
  // Channel attention on backbone features of the Concat baseline: none, se, eca, grn.
  std::string concat_attention = "none";

  void validate() const;
  [[nodiscard]] nn::AttentionKind attention() const;
  [[nodiscard]] nn::BlockConfig block_config() const;
  /// FNV-1a hash of the canonical JSON form.
  [[nodiscard]] std::uint64_t digest() const;
};

void to_json(nlohmann::json& j, const NetConfig& c);
/// Missing keys keep their defaults; L and M accept an int or a per-layer list.
void from_json(const nlohmann::json& j, NetConfig& c);

struct Wiring {
  std::size_t layer;
  std::string branch;  // "desired" or "current"
  std::string query;
  std::string key_value;
};

/// Shared-weight two-stream pose-difference regressor. Both streams run as
/// one stacked batch [desired; current], so every weight and every
/// normalization statistic is shared between them.
class Network {
 public:
  Network(const NetConfig& cfg, std::uint64_t seed);

  /// (B, 1, H, W) image batches -> (B, 6) normalized pose difference.
  [[nodiscard]] Tensor forward(const Tensor& des, const Tensor& cur, bool training) const;
  /// Post-pooling, pre-head features (B, 2 * channels).
  [[nodiscard]] Tensor gap_features(const Tensor& des, const Tensor& cur, bool training) const;

  [[nodiscard]] std::array<double, 6> predict(const GrayImage& des, const GrayImage& cur) const;
  [[nodiscard]] std::vector<double> features(const GrayImage& des, const GrayImage& cur) const;

  [[nodiscard]] std::vector<Wiring> cross_attention_wiring() const;

  [[nodiscard]] const NetConfig& config() const { return cfg_; }
  [[nodiscard]] nn::ParamStore& params() { return ps_; }
  [[nodiscard]] const nn::ParamStore& params() const { return ps_; }
  /// Scalar count of parameters whose name starts with `prefix`.
  [[nodiscard]] std::size_t count_params(std::string_view prefix = {}) const;

  void save(const std::string& path) const;
  /// Loads weights into this network; the stored config digest must match.
  void load_weights(const std::string& path);

 private:
  struct EncoderLayer {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj, mlp1, mlp2;
  };
  struct DeamLayer {
    std::vector<nn::ConvBlock> conv;
    std::vector<nn::TransformerBlock> transformer;
    std::vector<nn::DifferenceExtraction> diff;  // empty for NoDiffBlock
  };

  [[nodiscard]] Tensor backbone(const Tensor& images) const;
  [[nodiscard]] Tensor attention(const Tensor& tokens, const EncoderLayer& layer) const;
  [[nodiscard]] Tensor trunk(const Tensor& des, const Tensor& cur, bool training) const;

  NetConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear patch_embed_;
  Tensor pos_;
  std::vector<EncoderLayer> encoder_;
  nn::LayerNorm encoder_norm_;
  nn::Conv1x1 proj_;
  nn::ChannelLayerNorm proj_norm_;
  std::vector<DeamLayer> deam_;
  std::vector<nn::AttentionBaseline> concat_attention_;
  std::vector<nn::Linear> head_;
};

/// Reads the config stored in a checkpoint and builds a network with its weights.
Network load_network(const std::string& path);

/// Packs images into a (B, 1, H, W) tensor.
Tensor image_batch(const std::vector<const GrayImage*>& images);

}  // namespace fabricvs::net
