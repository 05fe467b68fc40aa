#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fabricvs/ad/gradcheck.hpp"
#include "fabricvs/net/network.hpp"
#include "fabricvs/net/pose_diff.hpp"
#include "test_helpers.hpp"

using namespace fabricvs;
using namespace fabricvs::net;
using ad::Tensor;
using testing::probe;
using testing::random_const;

namespace {

NetConfig small(Variant v = Variant::kDcab) {
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
  return c;
}

NetConfig toy(Variant v = Variant::kDcab) {
  NetConfig c;
  c.variant = v;
  c.backbone.dim = 32;
  c.backbone.layers = 1;
  c.embed = 16;
  c.head_hidden = {32};
  return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("build_network determinism and parameter counts") {
  Network a(toy(), 3), b(toy(), 3), c(toy(), 4);
  CHECK(a.params().flat() == b.params().flat());
  CHECK(a.params().flat() != c.params().flat());

  Network concat(toy(Variant::kConcat), 3);
  CHECK(concat.count_params("deam") == 0);
  CHECK(a.count_params("deam") > 0);

  Network nodiff(toy(Variant::kNoDiffBlock), 3);
  CHECK(a.count_params() > nodiff.count_params());
  CHECK(a.count_params() - nodiff.count_params() == a.count_params("deam0.diff"));

  for (auto v : {Variant::kSe, Variant::kEca, Variant::kGrn}) {
    Network n(toy(v), 3);
    CHECK(n.count_params("deam0.conv0.dcab") == 0);
    CHECK(n.count_params("deam0.conv0.attn") > 0);
  }
}

TEST_CASE("config validation and JSON") {
  auto bad = toy();
  bad.backbone.patch = 8;  // 54 is not a multiple of 8
  CHECK_THROWS_AS(Network(bad, 0), nn::ConfigError);
  bad = toy();
  bad.conv_blocks = {1, 1};
  CHECK_THROWS_AS(Network(bad, 0), nn::ConfigError);
  bad = toy();
  bad.layers = 0;
  bad.conv_blocks = {};
  bad.transformer_blocks = {};
  CHECK_THROWS_AS(Network(bad, 0), nn::ConfigError);
  CHECK_THROWS_AS(parse_variant("resnet"), nn::ConfigError);

  auto deploy = nlohmann::json::parse(R"({"K": 5, "L": [2,2,3,3,3], "M": [2,2,3,3,4], "variant": "dcab"})")
                    .get<NetConfig>();
  CHECK(deploy.layers == 5);
  CHECK(deploy.transformer_blocks.back() == 4);
  auto scalar = nlohmann::json::parse(R"({"K": 3, "L": 2})").get<NetConfig>();
  CHECK(scalar.conv_blocks == std::vector<std::size_t>{2, 2, 2});
  CHECK(scalar.transformer_blocks == std::vector<std::size_t>{1, 1, 1});

  auto round = nlohmann::json(toy()).get<NetConfig>();
  CHECK(round.digest() == toy().digest());
  CHECK(toy().digest() != toy(Variant::kSe).digest());
}

TEST_CASE("forward shape, finiteness and determinism") {
  Network net(toy(), 1);
  auto des = random_const({2, 1, 54, 96}, 1, 0.0, 1.0);
  auto cur = random_const({2, 1, 54, 96}, 2, 0.0, 1.0);
  auto y = net.forward(des, cur, false);
  CHECK(y.shape() == ad::Shape{2, 6});
  for (double v : y.data()) CHECK(std::isfinite(v));
  auto y2 = net.forward(des, cur, false);
  CHECK(std::equal(y.data().begin(), y.data().end(), y2.data().begin()));

  GrayImage a(96, 54, 0.3), b(96, 54, 0.6);
  CHECK(net.predict(a, b) == net.predict(a, b));

  CHECK_THROWS_AS((void)net.forward(random_const({1, 1, 48, 96}, 3), random_const({1, 1, 48, 96}, 4), false),
                  ad::DimensionError);
  CHECK_THROWS_AS((void)net.forward(des, random_const({1, 1, 54, 96}, 5), false), ad::DimensionError);

  // Any resolution divisible by the patch sizes yields a 6-vector.
  for (auto [w, h] : {std::pair<std::size_t, std::size_t>{48, 24}, {36, 60}, {24, 24}}) {
    auto c = toy();
    c.width = w;
    c.height = h;
    Network n(c, 2);
    CHECK(n.forward(random_const({1, 1, h, w}, 6), random_const({1, 1, h, w}, 7), true).shape() ==
          ad::Shape{1, 6});
  }
}

TEST_CASE("every parameter receives gradient") {
  for (auto v : {Variant::kDcab, Variant::kNoDiffBlock, Variant::kSe, Variant::kEca, Variant::kGrn,
                 Variant::kConcat}) {
    CAPTURE(to_string(v));
    Network net(toy(v), 5);
    auto des = random_const({2, 1, 54, 96}, 1, 0.0, 1.0);
    auto cur = random_const({2, 1, 54, 96}, 2, 0.0, 1.0);
    ad::Tape tape;
    ad::TapeScope scope(tape);
    auto grads = ad::backward(tape, probe(net.forward(des, cur, true)));
    for (const auto& p : net.params().params()) {
      CAPTURE(p.name());
      REQUIRE(grads.contains(p));
      double norm = 0.0;
      for (double g : grads.at(p)) norm += g * g;
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("full toy network gradient check") {
  Network net(small(), 11);
  auto des = ad::Tensor::parameter({2, 1, 32, 32}, testing::random_values(2048, 1, 0.0, 1.0));
  auto cur = ad::Tensor::parameter({2, 1, 32, 32}, testing::random_values(2048, 2, 0.0, 1.0));
  auto target = random_const({2, 6}, 3, 0.0, 1.0);
  auto f = [&] {
    auto d = net.forward(des, cur, true) - target;
    return ad::sum(ad::l2_norm(ad::slice(d, 1, 0, 3), 1)) + ad::sum(ad::l2_norm(ad::slice(d, 1, 3, 3), 1));
  };
  std::vector<Tensor> inputs = net.params().params();
  ad::GradCheckOptions opt;
  opt.max_samples = 50;
  opt.seed = 5;
  CHECK(ad::check_gradients(f, inputs, opt).max_rel_error < 1e-4);
}

TEST_CASE("gap features") {
  Network net(toy(), 2);
  GrayImage a(96, 54), b(96, 54), c(96, 54);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = 0.5 + 0.4 * std::sin(0.3 * i);
    b.data[i] = 0.5 + 0.4 * std::cos(0.11 * i);
    c.data[i] = 0.5 + 0.3 * std::sin(0.05 * i * i);
  }
  auto f1 = net.features(a, b);
  CHECK(f1.size() == 2 * toy().embed);
  CHECK(f1 == net.features(a, b));
  auto f2 = net.features(a, c);
  CHECK(max_abs_diff(f1, f2) > 0.0);

  // Shared weights: swapping the inputs swaps the two stream halves.
  auto s = net.features(b, a);
  const std::size_t e = toy().embed;
  CHECK(max_abs_diff(std::span(f1).subspan(0, e), std::span(s).subspan(e, e)) < 1e-12);
  CHECK(max_abs_diff(std::span(f1).subspan(e, e), std::span(s).subspan(0, e)) < 1e-12);
}

TEST_CASE("cross-attention wiring") {
  auto c = toy();
  Network one(c, 1);
  auto w = one.cross_attention_wiring();
  REQUIRE(w.size() == 2);
  CHECK(w[0].branch == "desired");
  CHECK(w[0].query == "current");
  CHECK(w[0].key_value == "desired");
  CHECK(w[1].branch == "current");
  CHECK(w[1].query == "desired");
  CHECK(w[1].key_value == "current");

  c.layers = 3;
  c.conv_blocks = {1, 1, 1};
  c.transformer_blocks = {1, 2, 1};
  Network three(c, 1);
  auto w3 = three.cross_attention_wiring();
  REQUIRE(w3.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(w3[i].layer == i / 2);
    CHECK(w3[i].branch == w[i % 2].branch);
    CHECK(w3[i].query == w[i % 2].query);
    CHECK(w3[i].key_value == w[i % 2].key_value);
  }
  CHECK(Network(toy(Variant::kConcat), 1).cross_attention_wiring().empty());

  // The desired branch depends on the current image through its queries.
  GrayImage des(96, 54), cur(96, 54), zero(96, 54, 0.0);
  for (std::size_t i = 0; i < des.data.size(); ++i) {
    des.data[i] = 0.5 + 0.4 * std::sin(0.3 * i);
    cur.data[i] = 0.5 + 0.4 * std::cos(0.2 * i);
  }
  auto base = one.features(des, cur);
  auto zeroed = one.features(des, zero);
  const std::size_t e = toy().embed;
  CHECK(max_abs_diff(std::span(base).subspan(0, e), std::span(zeroed).subspan(0, e)) > 0.0);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fabricvs_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "net.ckpt").string();

  Network net(toy(), 9);
  auto des = random_const({2, 1, 54, 96}, 1, 0.0, 1.0);
  auto cur = random_const({2, 1, 54, 96}, 2, 0.0, 1.0);
  (void)net.forward(des, cur, true);  // moves the running statistics
  net.save(path);

  Network other(toy(), 1);
  other.load_weights(path);
  CHECK(other.params().flat() == net.params().flat());
  auto y1 = net.forward(des, cur, false);
  auto y2 = other.forward(des, cur, false);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));

  Network loaded = load_network(path);
  auto y3 = loaded.forward(des, cur, false);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y3.data().begin()));

  Network wrong(toy(Variant::kNoDiffBlock), 9);
  CHECK_THROWS_AS(wrong.load_weights(path), nn::ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("label normalization") {
  LabelRanges r;
  const Vec6 x{12.5, -19.0, 0.3, 0.01, -0.02, 0.17};
  auto n = r.normalize(x);
  for (double v : n) CHECK((v >= 0.0 && v <= 1.0));
  auto back = r.denormalize(n);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(back[i] - x[i]) < 1e-12);

  r.lo[2] = r.hi[2] = 0.0;
  CHECK(r.normalize(x)[2] == 0.5);
  CHECK(r.denormalize(r.normalize({0, 0, 0, 0, 0, 0}))[2] == 0.0);
  r.lo[0] = 5.0;
  r.hi[0] = 4.0;
  CHECK_THROWS(r.validate());
}
