#include "fabricvs/nn/blocks.hpp"

#include <cmath>

namespace fabricvs::nn {

using namespace ad;

AttentionKind parse_attention_kind(std::string_view name) {
  if (name == "dcab") return AttentionKind::kDcab;
  if (name == "se") return AttentionKind::kSe;
  if (name == "eca") return AttentionKind::kEca;
  if (name == "grn") return AttentionKind::kGrn;
  throw ConfigError("unknown attention kind: " + std::string(name));
}

std::string_view to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kDcab: return "dcab";
    case AttentionKind::kSe: return "se";
    case AttentionKind::kEca: return "eca";
    case AttentionKind::kGrn: return "grn";
  }
  return "?";
}

void BlockConfig::validate() const {
  if (channels_in == 0 || embed_dim == 0) throw ConfigError("block: channel counts must be positive");
  if (channels_expanded < channels_in) throw ConfigError("block: channels_expanded < channels_in");
  if (num_dyn_kernels < 1) throw ConfigError("block: num_dyn_kernels must be >= 1");
  if (patch_size < 1) throw ConfigError("block: patch_size must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) throw ConfigError("block: heads must divide embed_dim");
}

void BlockConfig::check_grid(std::size_t height, std::size_t width) const {
  if (height % patch_size != 0 || width % patch_size != 0) {
    throw DimensionError("block: patch " + std::to_string(patch_size) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
}

std::size_t eca_kernel_size(std::size_t channels) {
  const auto t = static_cast<std::size_t>(
      std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0));
  return t % 2 == 1 ? t : t + 1;
}

EcaScores::EcaScores(ParamStore& ps, const std::string& name, std::size_t channels,
                     std::size_t bank)
    : bank_size(bank) {
  const std::size_t k = eca_kernel_size(channels);
  conv_w = ps.uniform(name + ".conv_w", {k}, 1.0 / std::sqrt(static_cast<double>(k)));
  conv_b = ps.constant(name + ".conv_b", {1}, 0.0);
  route = ps.uniform(name + ".route", {channels, bank}, 1.0 / std::sqrt(static_cast<double>(channels)));
}

Tensor EcaScores::operator()(const Tensor& x) const {
  Tensor d = channel_conv1d(global_avg_pool(x), conv_w) + conv_b;
  return softmax(matmul(d, route));
}

Tensor dynamic_conv(const Tensor& x, const Tensor& bank, const Tensor& scores) {
  if (bank.rank() != 5 || scores.rank() != 2 || x.rank() != 4) {
    throw_dimension("dynamic_conv", bank.shape(), scores.shape());
  }
  if (scores.dim(1) != bank.dim(0) || scores.dim(0) != x.dim(0)) {
    throw_dimension("dynamic_conv", scores.shape(), bank.shape());
  }
  const Shape& s = bank.shape();
  Tensor flat = reshape(bank, {s[0], s[1] * s[2] * s[3] * s[4]});
  Tensor kernels = reshape(matmul(scores, flat), {x.dim(0), s[1], s[2], s[3], s[4]});
  return conv2d(x, kernels, s[3] / 2);
}

Dcab::Dcab(ParamStore& ps, const std::string& name, std::size_t channels, std::size_t bank_size,
           bool bn_affine)
    : eca(ps, name + ".eca", channels, bank_size) {
  bank = ps.uniform(name + ".bank", {bank_size, channels, channels, 3, 3},
                    1.0 / std::sqrt(9.0 * static_cast<double>(channels)));
  bn = BatchNorm2d(ps, name + ".bn", channels, bn_affine);
}

Tensor Dcab::operator()(const Tensor& x, bool training) const {
  return gelu(bn(dynamic_conv(x, bank, eca(x)), training));
}

AttentionBaseline::AttentionBaseline(ParamStore& ps, const std::string& name, std::size_t channels,
                                     AttentionKind k)
    : kind(k) {
  switch (kind) {
    case AttentionKind::kSe: {
      const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
      fc1 = Linear(ps, name + ".fc1", channels, hidden);
      fc2 = Linear(ps, name + ".fc2", hidden, channels);
      break;
    }
    case AttentionKind::kEca: {
      const std::size_t k = eca_kernel_size(channels);
      eca_w = ps.uniform(name + ".conv_w", {k}, 1.0 / std::sqrt(static_cast<double>(k)));
      eca_b = ps.constant(name + ".conv_b", {1}, 0.0);
      break;
    }
    case AttentionKind::kGrn:
      gamma = ps.constant(name + ".gamma", {1, channels, 1, 1}, 0.0);
      beta = ps.constant(name + ".beta", {1, channels, 1, 1}, 0.0);
      break;
    default:
      throw ConfigError("attention_baseline: kind must be se, eca or grn");
  }
}

Tensor AttentionBaseline::operator()(const Tensor& x) const {
  if (x.rank() != 4) throw DimensionError("attention_baseline: expected rank-4 input, got " +
                                          ad::to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1);
  switch (kind) {
    case AttentionKind::kSe: {
      Tensor gate = sigmoid(fc2(gelu(fc1(global_avg_pool(x)))));
      return x * reshape(gate, {b, c, 1, 1});
    }
    case AttentionKind::kEca: {
      Tensor gate = sigmoid(channel_conv1d(global_avg_pool(x), eca_w) + eca_b);
      return x * reshape(gate, {b, c, 1, 1});
    }
    default: {
      Tensor gx = l2_norm(reshape(x, {b, c, x.dim(2) * x.dim(3)}), 2);
      Tensor nx = div(gx, mean_axis(gx, 1) + Tensor::scalar(1e-6));
      return gamma * (x * reshape(nx, {b, c, 1, 1})) + beta + x;
    }
  }
}

ConvBlock::ConvBlock(ParamStore& ps, const std::string& name, const BlockConfig& c) : cfg(c) {
  cfg.validate();
  const std::size_t e = cfg.channels_in, x = cfg.channels_expanded;
  expand = Conv1x1(ps, name + ".expand", e, x);
  bn1 = BatchNorm2d(ps, name + ".bn1", x, cfg.bn_affine);
  dw = ps.uniform(name + ".dw", {x, 1, 3, 3}, 1.0 / 3.0);
  bn2 = BatchNorm2d(ps, name + ".bn2", x, cfg.bn_affine);
  if (cfg.attention == AttentionKind::kDcab) {
    dcab.emplace(ps, name + ".dcab", x, cfg.num_dyn_kernels, cfg.bn_affine);
  } else {
    attention.emplace(ps, name + ".attn", x, cfg.attention);
  }
  project = Conv1x1(ps, name + ".project", x, e);
  bn3 = BatchNorm2d(ps, name + ".bn3", e, cfg.bn_affine);
}

Tensor ConvBlock::operator()(const Tensor& x, bool training) const {
  if (x.rank() != 4 || x.dim(1) != cfg.channels_in) {
    throw_dimension("conv_block", x.shape(), {0, cfg.channels_in, 0, 0});
  }
  Tensor h = gelu(bn1(expand(x), training));
  h = gelu(bn2(depthwise_conv2d(h, dw, 1), training));
  h = dcab ? (*dcab)(h, training) : (*attention)(h);
  return bn3(project(h), training);
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& name, const BlockConfig& c)
    : cfg(c) {
  cfg.validate();
  const std::size_t a = cfg.embed_dim;
  ln_q = LayerNorm(ps, name + ".ln_q", a);
  ln_kv = LayerNorm(ps, name + ".ln_kv", a);
  score = Linear(ps, name + ".score", a, cfg.heads);
  key = Linear(ps, name + ".key", a, a);
  value = Linear(ps, name + ".value", a, a);
  out = Linear(ps, name + ".out", a, a);
  ln_ffn = LayerNorm(ps, name + ".ln_ffn", a);
  ffn1 = Linear(ps, name + ".ffn1", a, 2 * a);
  ffn2 = Linear(ps, name + ".ffn2", 2 * a, a);
}

Tensor TransformerBlock::operator()(const Tensor& q_src, const Tensor& kv_src) const {
  if (q_src.shape() != kv_src.shape()) throw_dimension("transformer_block", q_src.shape(), kv_src.shape());
  if (q_src.rank() != 4 || q_src.dim(1) != cfg.embed_dim) {
    throw_dimension("transformer_block", q_src.shape(), {0, cfg.embed_dim, 0, 0});
  }
  const std::size_t height = q_src.dim(2), width = q_src.dim(3), p = cfg.patch_size;
  cfg.check_grid(height, width);

  Tensor uq = unfold_patches(q_src, p, p);  // (B, P, N, A)
  Tensor ukv = unfold_patches(kv_src, p, p);
  const Shape& s = uq.shape();
  const std::size_t h = cfg.heads, d = cfg.embed_dim / h;

  // Context scores over the N patches, one distribution per head.
  Tensor sc = softmax(permute(score(ln_q(uq)), {0, 1, 3, 2}));
  sc = reshape(permute(sc, {0, 1, 3, 2}), {s[0], s[1], s[2], h, 1});

  Tensor kvn = ln_kv(ukv);
  Tensor k = reshape(key(kvn), {s[0], s[1], s[2], h, d});
  Tensor ctx = reshape(sum_axis(k * sc, 2), {s[0], s[1], 1, cfg.embed_dim});
  Tensor y = ukv + out(gelu(value(kvn)) * ctx);
  y = y + ffn2(gelu(ffn1(ln_ffn(y))));
  return fold_patches(y, height, width, p, p);
}

Tensor swap_halves(const Tensor& x) {
  if (x.rank() == 0 || x.dim(0) % 2 != 0) {
    throw DimensionError("swap_halves: batch must be even, got " + ad::to_string(x.shape()));
  }
  const std::size_t half = x.dim(0) / 2;
  return concat(slice(x, 0, half, half), slice(x, 0, 0, half), 0);
}

DifferenceExtraction::DifferenceExtraction(ParamStore& ps, const std::string& name,
                                           std::size_t channels, bool bn_affine) {
  proj = Conv1x1(ps, name + ".proj", 2 * channels, channels);
  bn = BatchNorm2d(ps, name + ".bn", channels, bn_affine);
}

Tensor DifferenceExtraction::stacked(const Tensor& x, bool training, Tensor* diff) const {
  Tensor d = x - swap_halves(x);
  if (diff) *diff = d;
  return gelu(bn(proj(concat(x, d, 1)), training));
}

std::pair<Tensor, Tensor> DifferenceExtraction::operator()(const Tensor& a, const Tensor& b,
                                                           bool training) const {
  if (a.shape() != b.shape()) throw_dimension("difference_extraction", a.shape(), b.shape());
  Tensor y = stacked(concat(a, b, 0), training);
  const std::size_t n = a.dim(0);
  return {slice(y, 0, 0, n), slice(y, 0, n, n)};
}

}  // namespace fabricvs::nn
