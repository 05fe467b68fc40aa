#include "fabricvs/net/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "fabricvs/ad/gradcheck.hpp"
#include "fabricvs/ad/ops.hpp"
#include "fabricvs/net/network.hpp"
#include "fabricvs/nn/blocks.hpp"

namespace fabricvs::net {
namespace {

using ad::Tensor;

std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

Tensor leaf(ad::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(s);
  return Tensor::parameter(std::move(s), uniform(n, seed, lo, hi));
}

// sum(t * R) with a fixed random R
Tensor probe(const Tensor& t, std::uint64_t seed) {
  return ad::sum(ad::mul(t, Tensor::from(t.shape(), uniform(t.size(), seed, -1.0, 1.0))));
}

nn::BlockConfig block_config(std::size_t c, std::size_t e, nn::AttentionKind kind) {
  nn::BlockConfig b;
  b.channels_in = c;
  b.channels_expanded = e;
  b.embed_dim = c;
  b.attention = kind;
  return b;
}

}  // namespace

std::vector<GradCheckRow> gradient_check_suite(std::uint64_t seed, std::size_t samples) {
  std::vector<GradCheckRow> rows;
  ad::GradCheckOptions opt;
  opt.max_samples = samples;
  opt.seed = seed;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                 const nn::ParamStore* ps) {
    if (ps != nullptr) inputs.insert(inputs.end(), ps->params().begin(), ps->params().end());
    const auto t0 = std::chrono::steady_clock::now();
    const ad::GradCheckResult r = ad::check_gradients(f, inputs, opt);
    rows.push_back({name, r.max_rel_error, r.checked,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  };
  const std::uint64_t s = seed * 1000;

  {
    nn::ParamStore ps(s + 1);
    nn::Linear lin(ps, "lin", 5, 4);
    auto x = leaf({3, 5}, s + 2);
    run("linear", [&] { return probe(lin(x), s + 3); }, {x}, &ps);
  }
  {
    nn::ParamStore ps(s + 4);
    nn::Conv1x1 conv(ps, "c1", 4, 6, true);
    auto x = leaf({2, 4, 3, 3}, s + 5);
    run("conv1x1", [&] { return probe(conv(x), s + 6); }, {x}, &ps);
  }
  {
    nn::ParamStore ps(s + 7);
    nn::BatchNorm2d bn(ps, "bn", 4);
    auto x = leaf({3, 4, 3, 3}, s + 8);
    run("batch_norm", [&] { return probe(bn(x, true), s + 9); }, {x}, &ps);
  }
  {
    nn::ParamStore ps(s + 10);
    nn::LayerNorm ln(ps, "ln", 6);
    auto x = leaf({4, 6}, s + 11);
    run("layer_norm", [&] { return probe(ln(x), s + 12); }, {x}, &ps);
  }
  {
    nn::ParamStore ps(s + 13);
    nn::EcaScores eca(ps, "eca", 8, 4);
    auto x = leaf({2, 8, 4, 4}, s + 14);
    run("eca_scores", [&] { return probe(eca(x), s + 15); }, {x}, &ps);
  }
  {
    auto x = leaf({2, 3, 5, 6}, s + 16);
    auto bank = leaf({3, 4, 3, 3, 3}, s + 17);
    auto logits = leaf({2, 3}, s + 18);
    run("dynamic_conv", [&] { return probe(nn::dynamic_conv(x, bank, ad::softmax(logits)), s + 19); },
        {x, bank, logits}, nullptr);
  }
  {
    nn::ParamStore ps(s + 20);
    nn::Dcab dcab(ps, "dcab", 6, 4);
    auto x = leaf({2, 6, 5, 5}, s + 21);
    run("dcab", [&] { return probe(dcab(x, true), s + 22); }, {x}, &ps);
  }
  for (auto kind : {nn::AttentionKind::kSe, nn::AttentionKind::kEca, nn::AttentionKind::kGrn}) {
    nn::ParamStore ps(s + 23);
    nn::AttentionBaseline att(ps, "att", 8, kind);
    auto x = leaf({2, 8, 4, 4}, s + 24);
    run(std::string("attention_") + std::string(nn::to_string(kind)), [&] { return probe(att(x), s + 25); }, {x},
        &ps);
  }
  for (auto kind : {nn::AttentionKind::kDcab, nn::AttentionKind::kSe, nn::AttentionKind::kEca,
                    nn::AttentionKind::kGrn}) {
    nn::ParamStore ps(s + 26);
    nn::ConvBlock block(ps, "cb", block_config(4, 8, kind));
    auto x = leaf({1, 4, 8, 8}, s + 27);
    run(std::string("conv_block_") + std::string(nn::to_string(kind)), [&] { return probe(block(x, true), s + 28); },
        {x}, &ps);
  }
  {
    nn::ParamStore ps(s + 29);
    nn::TransformerBlock block(ps, "tb", block_config(8, 8, nn::AttentionKind::kDcab));
    auto q = leaf({2, 8, 4, 4}, s + 30);
    auto kv = leaf({2, 8, 4, 4}, s + 31);
    run("transformer_block", [&] { return probe(block(q, kv), s + 32); }, {q, kv}, &ps);
  }
  {
    nn::ParamStore ps(s + 33);
    nn::DifferenceExtraction de(ps, "de", 6);
    auto a = leaf({1, 6, 4, 4}, s + 34);
    auto b = leaf({1, 6, 4, 4}, s + 35);
    run("difference_extraction", [&] {
      auto [x, y] = de(a, b, true);
      return ad::add(probe(x, s + 36), probe(y, s + 37));
    }, {a, b}, &ps);
  }
  for (auto v : {Variant::kDcab, Variant::kNoDiffBlock, Variant::kConcat}) {
    NetConfig c;
    c.variant = v;
    c.width = 32;
    c.height = 32;
    c.backbone.patch = 4;
    c.backbone.dim = 16;
    c.backbone.layers = 1;
    c.embed = 8;
    c.unfold_patch = 2;
    c.head_hidden = {16};
    Network net(c, s + 38);
    auto des = leaf({2, 1, 32, 32}, s + 39, 0.0, 1.0);
    auto cur = leaf({2, 1, 32, 32}, s + 40, 0.0, 1.0);
    auto target = Tensor::from({2, 6}, uniform(12, s + 41, 0.0, 1.0));
    run(std::string("network_") + std::string(to_string(v)), [&] {
      auto d = ad::sub(net.forward(des, cur, true), target);
      return ad::add(ad::sum(ad::l2_norm(ad::slice(d, 1, 0, 3), 1)), ad::sum(ad::l2_norm(ad::slice(d, 1, 3, 3), 1)));
    }, {des, cur}, &net.params());
  }
  return rows;
}

}  // namespace fabricvs::net
