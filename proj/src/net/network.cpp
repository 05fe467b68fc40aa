#include "fabricvs/net/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace fabricvs::net {

using namespace ad;
using nn::ConfigError;

Variant parse_variant(std::string_view name) {
  if (name == "dcab") return Variant::kDcab;
  if (name == "se") return Variant::kSe;
  if (name == "eca") return Variant::kEca;
  if (name == "grn") return Variant::kGrn;
  if (name == "nodiff") return Variant::kNoDiffBlock;
  if (name == "concat") return Variant::kConcat;
  throw ConfigError("unknown variant: " + std::string(name));
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kDcab: return "dcab";
    case Variant::kSe: return "se";
    case Variant::kEca: return "eca";
    case Variant::kGrn: return "grn";
    case Variant::kNoDiffBlock: return "nodiff";
    case Variant::kConcat: return "concat";
  }
  return "?";
}

// ---- config ---------------------------------------------------------------

void NetConfig::validate() const {
  const auto& b = backbone;
  if (width == 0 || height == 0) throw ConfigError("net: resolution must be positive");
  if (b.patch == 0 || width % b.patch != 0 || height % b.patch != 0) {
    throw ConfigError("net: backbone patch " + std::to_string(b.patch) + " does not tile " +
                      std::to_string(width) + "x" + std::to_string(height));
  }
  if (b.dim == 0 || b.heads == 0 || b.dim % b.heads != 0) throw ConfigError("net: backbone heads must divide dim");
  if (b.mlp_ratio == 0) throw ConfigError("net: backbone mlp_ratio must be positive");
  if (embed == 0 || expansion == 0) throw ConfigError("net: embed and expansion must be positive");
  if (concat_attention != "none") (void)nn::parse_attention_kind(concat_attention);
  if (variant == Variant::kConcat) return;
  if (layers < 1) throw ConfigError("net: DEAM variants need at least one layer");
  if (conv_blocks.size() != layers || transformer_blocks.size() != layers) {
    throw ConfigError("net: per-layer block lists must have length K");
  }
  const std::size_t gw = width / b.patch, gh = height / b.patch;
  if (unfold_patch == 0 || gw % unfold_patch != 0 || gh % unfold_patch != 0) {
    throw ConfigError("net: unfold patch " + std::to_string(unfold_patch) + " does not tile the " +
                      std::to_string(gw) + "x" + std::to_string(gh) + " token grid");
  }
  block_config().validate();
}

nn::AttentionKind NetConfig::attention() const {
  switch (variant) {
    case Variant::kSe: return nn::AttentionKind::kSe;
    case Variant::kEca: return nn::AttentionKind::kEca;
    case Variant::kGrn: return nn::AttentionKind::kGrn;
    default: return nn::AttentionKind::kDcab;
  }
}

nn::BlockConfig NetConfig::block_config() const {
  nn::BlockConfig b;
  b.channels_in = embed;
  b.channels_expanded = embed * expansion;
  b.embed_dim = embed;
  b.num_dyn_kernels = dyn_kernels;
  b.patch_size = unfold_patch;
  b.heads = heads;
  b.attention = attention();
  return b;
}

std::uint64_t NetConfig::digest() const {
  const std::string text = nlohmann::json(*this).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"width", c.width},
       {"height", c.height},
       {"backbone",
        {{"patch", c.backbone.patch},
         {"dim", c.backbone.dim},
         {"layers", c.backbone.layers},
         {"heads", c.backbone.heads},
         {"mlp_ratio", c.backbone.mlp_ratio}}},
       {"embed", c.embed},
       {"expansion", c.expansion},
       {"dyn_kernels", c.dyn_kernels},
       {"unfold_patch", c.unfold_patch},
       {"heads", c.heads},
       {"K", c.layers},
       {"L", c.conv_blocks},
       {"M", c.transformer_blocks},
       {"head_hidden", c.head_hidden},
       {"concat_attention", c.concat_attention}};
}

namespace {

std::vector<std::size_t> per_layer(const nlohmann::json& v, std::size_t k) {
  if (v.is_number_integer()) return std::vector<std::size_t>(k, v.get<std::size_t>());
  return v.get<std::vector<std::size_t>>();
}

}  // namespace

void from_json(const nlohmann::json& j, NetConfig& c) {
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      c.backbone.patch = b.value("patch", c.backbone.patch);
      c.backbone.dim = b.value("dim", c.backbone.dim);
      c.backbone.layers = b.value("layers", c.backbone.layers);
      c.backbone.heads = b.value("heads", c.backbone.heads);
      c.backbone.mlp_ratio = b.value("mlp_ratio", c.backbone.mlp_ratio);
    }
    c.embed = j.value("embed", c.embed);
    c.expansion = j.value("expansion", c.expansion);
    c.dyn_kernels = j.value("dyn_kernels", c.dyn_kernels);
    c.unfold_patch = j.value("unfold_patch", c.unfold_patch);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("K", c.layers);
    c.conv_blocks = j.contains("L") ? per_layer(j.at("L"), c.layers)
                                    : std::vector<std::size_t>(c.layers, c.conv_blocks.at(0));
    c.transformer_blocks = j.contains("M") ? per_layer(j.at("M"), c.layers)
                                           : std::vector<std::size_t>(c.layers, c.transformer_blocks.at(0));
    if (j.contains("head_hidden")) c.head_hidden = j.at("head_hidden").get<std::vector<std::size_t>>();
    c.concat_attention = j.value("concat_attention", c.concat_attention);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("net config: ") + e.what());
  }
}

// ---- network --------------------------------------------------------------

Network::Network(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  const auto& b = cfg_.backbone;
  const std::size_t tokens = (cfg_.width / b.patch) * (cfg_.height / b.patch);
  patch_embed_ = nn::Linear(ps_, "backbone.patch_embed", b.patch * b.patch, b.dim);
  pos_ = ps_.normal("backbone.pos", {tokens, b.dim}, 0.02);
  for (std::size_t i = 0; i < b.layers; ++i) {
    const std::string n = "backbone.layer" + std::to_string(i);
    EncoderLayer layer;
    layer.ln1 = nn::LayerNorm(ps_, n + ".ln1", b.dim);
    layer.qkv = nn::Linear(ps_, n + ".qkv", b.dim, 3 * b.dim);
    layer.proj = nn::Linear(ps_, n + ".proj", b.dim, b.dim);
    layer.ln2 = nn::LayerNorm(ps_, n + ".ln2", b.dim);
    layer.mlp1 = nn::Linear(ps_, n + ".mlp1", b.dim, b.mlp_ratio * b.dim);
    layer.mlp2 = nn::Linear(ps_, n + ".mlp2", b.mlp_ratio * b.dim, b.dim);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = nn::LayerNorm(ps_, "backbone.norm", b.dim);
  proj_ = nn::Conv1x1(ps_, "proj.conv", b.dim, cfg_.embed, true);
  proj_norm_ = nn::ChannelLayerNorm(ps_, "proj.ln", cfg_.embed);

  if (cfg_.variant == Variant::kConcat) {
    if (cfg_.concat_attention != "none") {
      concat_attention_.emplace_back(ps_, "concat_attn", cfg_.embed,
                                     nn::parse_attention_kind(cfg_.concat_attention));
    }
  } else {
    const nn::BlockConfig bc = cfg_.block_config();
    for (std::size_t k = 0; k < cfg_.layers; ++k) {
      const std::string n = "deam" + std::to_string(k);
      DeamLayer layer;
      for (std::size_t l = 0; l < cfg_.conv_blocks[k]; ++l) {
        layer.conv.emplace_back(ps_, n + ".conv" + std::to_string(l), bc);
      }
      for (std::size_t m = 0; m < cfg_.transformer_blocks[k]; ++m) {
        layer.transformer.emplace_back(ps_, n + ".tf" + std::to_string(m), bc);
      }
      if (cfg_.variant != Variant::kNoDiffBlock) layer.diff.emplace_back(ps_, n + ".diff", cfg_.embed);
      deam_.push_back(std::move(layer));
    }
  }

  std::size_t in = 2 * cfg_.embed;
  for (std::size_t i = 0; i < cfg_.head_hidden.size(); ++i) {
    head_.emplace_back(ps_, "head.fc" + std::to_string(i), in, cfg_.head_hidden[i]);
    in = cfg_.head_hidden[i];
  }
  head_.emplace_back(ps_, "head.out", in, 6);
  // Start at the label center with a small output layer.
  for (double& w : head_.back().w.mutable_data()) w *= 0.1;
  for (double& b : head_.back().b.mutable_data()) b = 0.5;
}

Tensor Network::attention(const Tensor& x, const EncoderLayer& layer) const {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  const std::size_t h = cfg_.backbone.heads, dh = d / h;
  Tensor qkv = layer.qkv(layer.ln1(x));
  auto split = [&](std::size_t i) {
    Tensor t = reshape(slice(qkv, 2, i * d, d), {b, n, h, dh});
    return reshape(permute(t, {0, 2, 1, 3}), {b * h, n, dh});
  };
  Tensor att = softmax(scale(bmm(split(0), split(1), true), 1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor o = reshape(bmm(att, split(2)), {b, h, n, dh});
  return layer.proj(reshape(permute(o, {0, 2, 1, 3}), {b, n, d}));
}

Tensor Network::backbone(const Tensor& images) const {
  const std::size_t p = cfg_.backbone.patch, b = images.dim(0);
  const std::size_t gh = cfg_.height / p, gw = cfg_.width / p;
  Tensor patches = reshape(permute(unfold_patches(images, p, p), {0, 2, 1, 3}), {b, gh * gw, p * p});
  Tensor x = patch_embed_(patches) + pos_;
  for (const auto& layer : encoder_) {
    x = x + attention(x, layer);
    x = x + layer.mlp2(gelu(layer.mlp1(layer.ln2(x))));
  }
  x = encoder_norm_(x);
  // Tokens are row-major over the grid: (B, N, D) -> (B, D, gh, gw).
  return reshape(permute(x, {0, 2, 1}), {b, cfg_.backbone.dim, gh, gw});
}

Tensor Network::trunk(const Tensor& des, const Tensor& cur, bool training) const {
  if (des.shape() != cur.shape()) throw_dimension("network", des.shape(), cur.shape());
  const Shape want{des.rank() == 4 ? des.dim(0) : 0, 1, cfg_.height, cfg_.width};
  if (des.shape() != want) throw_dimension("network", des.shape(), want);
  const std::size_t b = des.dim(0);

  Tensor x = gelu(proj_norm_(proj_(backbone(concat(des, cur, 0)))));
  for (const auto& att : concat_attention_) x = att(x);
  for (const auto& layer : deam_) {
    for (const auto& block : layer.conv) x = block(x, training);
    // Each stream queries with the other stream's features.
    for (const auto& block : layer.transformer) x = block(nn::swap_halves(x), x);
    for (const auto& d : layer.diff) x = d.stacked(x, training);
  }
  Tensor pooled = global_avg_pool(x);  // (2B, C)
  return concat(slice(pooled, 0, 0, b), slice(pooled, 0, b, b), 1);
}

Tensor Network::gap_features(const Tensor& des, const Tensor& cur, bool training) const {
  return trunk(des, cur, training);
}

Tensor Network::forward(const Tensor& des, const Tensor& cur, bool training) const {
  Tensor x = trunk(des, cur, training);
  for (std::size_t i = 0; i + 1 < head_.size(); ++i) x = gelu(head_[i](x));
  return head_.back()(x);
}

std::array<double, 6> Network::predict(const GrayImage& des, const GrayImage& cur) const {
  Tensor y = forward(image_batch({&des}), image_batch({&cur}), false);
  std::array<double, 6> out{};
  std::copy(y.data().begin(), y.data().end(), out.begin());
  return out;
}

std::vector<double> Network::features(const GrayImage& des, const GrayImage& cur) const {
  Tensor f = gap_features(image_batch({&des}), image_batch({&cur}), false);
  return {f.data().begin(), f.data().end()};
}

std::vector<Wiring> Network::cross_attention_wiring() const {
  const std::array<std::string, 2> stream{"desired", "current"};
  std::vector<Wiring> out;
  for (std::size_t k = 0; k < deam_.size(); ++k) {
    if (deam_[k].transformer.empty()) continue;
    // swap_halves puts the other stream in the query slot of each half.
    for (std::size_t half = 0; half < 2; ++half) {
      out.push_back({k, stream[half], stream[1 - half], stream[half]});
    }
  }
  return out;
}

std::size_t Network::count_params(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : ps_.params()) {
    if (p.name().starts_with(prefix)) n += p.size();
  }
  return n;
}

Tensor image_batch(const std::vector<const GrayImage*>& images) {
  if (images.empty()) throw ContractError("image_batch: no images");
  const std::size_t w = images[0]->width, h = images[0]->height;
  std::vector<double> v;
  v.reserve(images.size() * w * h);
  for (const auto* img : images) {
    if (img->width != w || img->height != h) {
      throw_dimension("image_batch", {h, w}, {img->height, img->width});
    }
    v.insert(v.end(), img->data.begin(), img->data.end());
  }
  return Tensor::from({images.size(), 1, h, w}, std::move(v));
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'V', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& path) {
  const auto n = get<std::uint32_t>(in, path);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return s;
}

void put_blob(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> v) {
  put_string(out, name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

struct Blob {
  Shape shape;
  std::vector<double> values;
};

struct Header {
  std::uint64_t digest;
  std::string config;
};

Header read_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a checkpoint: " + path);
  if (get<std::uint32_t>(in, path) != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);
  Header h;
  h.digest = get<std::uint64_t>(in, path);
  h.config = get_string(in, path);
  return h;
}

}  // namespace

void Network::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, 8);
  put(out, kVersion);
  put(out, cfg_.digest());
  put_string(out, nlohmann::json(cfg_).dump());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ps_.params().size() + 2 * ps_.buffers().size()));
  for (const auto& p : ps_.params()) put_blob(out, p.name(), p.shape(), p.data());
  for (const auto& b : ps_.buffers()) {
    put_blob(out, b.name + ".running_mean", {b.stats.mean.size()}, b.stats.mean);
    put_blob(out, b.name + ".running_var", {b.stats.var.size()}, b.stats.var);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void Network::load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  const Header h = read_header(in, path);
  if (h.digest != cfg_.digest()) throw ConfigError("checkpoint config digest mismatch: " + path);
  std::map<std::string, Blob> blobs;
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in, path);
    Blob blob;
    const auto rank = get<std::uint32_t>(in, path);
    for (std::uint32_t r = 0; r < rank; ++r) blob.shape.push_back(get<std::uint64_t>(in, path));
    blob.values.resize(numel(blob.shape));
    in.read(reinterpret_cast<char*>(blob.values.data()),
            static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    blobs.emplace(name, std::move(blob));
  }
  auto take = [&](const std::string& name, const Shape& shape) -> std::vector<double>& {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw std::runtime_error("checkpoint is missing " + name + ": " + path);
    if (it->second.shape != shape) throw_dimension("checkpoint " + name, it->second.shape, shape);
    return it->second.values;
  };
  for (auto& p : ps_.params()) {
    const auto& v = take(p.name(), p.shape());
    auto dst = Tensor(p).mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
  for (auto& b : ps_.buffers()) {
    b.stats.mean = take(b.name + ".running_mean", {b.stats.mean.size()});
    b.stats.var = take(b.name + ".running_var", {b.stats.var.size()});
  }
}

Network load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  const Header h = read_header(in, path);
  NetConfig cfg = nlohmann::json::parse(h.config).get<NetConfig>();
  Network net(cfg, 0);
  net.load_weights(path);
  return net;
}

}  // namespace fabricvs::net
