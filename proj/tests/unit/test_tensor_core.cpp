#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "fabricvs/ad/gradcheck.hpp"
#include "fabricvs/ad/ops.hpp"
#include "test_helpers.hpp"

using namespace fabricvs::ad;
using fabricvs::testing::probe;
using fabricvs::testing::random_const;
using fabricvs::testing::random_param;

namespace {

double check(const std::function<Tensor()>& f, const std::vector<Tensor>& in, double eps = 1e-4) {
  GradCheckOptions opt;
  opt.eps = eps;
  return check_gradients(f, in, opt).max_rel_error;
}

}  // namespace

TEST_CASE("primitive forward examples") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);

  auto s = softmax(Tensor::full({4}, 0.7));
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  auto x = random_const({2, 3, 5, 4}, 1);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  auto y = conv2d(x, Tensor::from({3, 3, 1, 1}, eye), 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("backward basics") {
  auto x = random_param({2, 3, 4}, 2);
  {
    Tape tape;
    TapeScope scope(tape);
    auto g = backward(tape, sum(x));
    for (double v : g.at(x)) CHECK(v == 1.0);
  }
  auto v = Tensor::parameter({3}, {1.0, 2.0, 3.0});
  Tape tape;
  TapeScope scope(tape);
  auto g = backward(tape, sum(mul(v, v)));
  CHECK(g.at(v) == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("backward contract errors") {
  auto x = random_param({3}, 3);
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS_AS(backward(tape, scale(x, 2.0)), ContractError);
  auto detached = sum(random_const({3}, 4));
  CHECK(backward(tape, detached).empty());
}

TEST_CASE("backward twice accumulates exactly twice") {
  auto w = random_param({4, 3}, 5);
  auto x = random_param({2, 4}, 6);
  Tape tape;
  TapeScope scope(tape);
  auto root = sum(gelu(matmul(x, w)) * gelu(matmul(x, w)));
  auto once = backward(tape, root);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  backward(tape, root);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(w.grad()[i] == 2.0 * first[i]);
  CHECK(once.at(w) == first);
}

TEST_CASE("shape and numeric errors") {
  CHECK_THROWS_AS(add(random_const({2, 3}, 1), random_const({3, 2}, 2)), DimensionError);
  CHECK_THROWS_AS(matmul(random_const({2, 3}, 1), random_const({2, 3}, 2)), DimensionError);
  CHECK_THROWS_AS(conv2d(random_const({1, 2, 4, 4}, 1), random_const({3, 3, 3, 3}, 2), 1),
                  DimensionError);
  try {
    (void)mul(Tensor::full({2}, 1e200), Tensor::full({2}, 1e200));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
  try {
    (void)add(random_const({2, 3}, 1), random_const({4}, 2));
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4)") != std::string::npos);
  }
}

TEST_CASE("no recording without an active tape") {
  auto x = random_param({3}, 7);
  auto y = gelu(x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  {
    TapeScope scope(tape);
    auto z = gelu(x);
    CHECK(z.requires_grad());
  }
  CHECK(tape.size() == 1);
  CHECK(active_tape() == nullptr);
}

// Every primitive against central finite differences on three shapes.
TEST_CASE("primitive gradients match finite differences") {
  const double tol = 1e-4;
  const std::vector<Shape> shapes = {{3}, {2, 5}, {2, 3, 4}};
  for (std::size_t si = 0; si < shapes.size(); ++si) {
    const Shape& s = shapes[si];
    CAPTURE(si);
    auto a = random_param(s, 10 + si);
    auto b = random_param(s, 20 + si);
    CHECK(check([&] { return probe(add(a, b)); }, {a, b}) < tol);
    CHECK(check([&] { return probe(sub(a, b)); }, {a, b}) < tol);
    CHECK(check([&] { return probe(mul(a, b)); }, {a, b}) < tol);
    CHECK(check([&] { return probe(scale(a, -1.7)); }, {a}) < tol);
    CHECK(check([&] { return probe(gelu(a)); }, {a}) < tol);
    CHECK(check([&] { return probe(sigmoid(a)); }, {a}) < tol);
    CHECK(check([&] { return probe(softmax(a)); }, {a}) < tol);
    CHECK(check([&] { return sum(a); }, {a}) < tol);
    CHECK(check([&] { return probe(sum_axis(a, 0)); }, {a}) < tol);
    CHECK(check([&] { return probe(mean_axis(a, s.size() - 1)); }, {a}) < tol);
    CHECK(check([&] { return probe(l2_norm(a, s.size() - 1)); }, {a}) < tol);
    CHECK(check([&] { return probe(slice(a, s.size() - 1, 1, 2)); }, {a}) < tol);
    CHECK(check([&] { return probe(concat(a, b, 0)); }, {a, b}) < tol);
    CHECK(check([&] { return probe(reshape(a, {numel(s)})); }, {a}) < tol);
    auto g = random_param({s.back()}, 30 + si);
    auto be = random_param({s.back()}, 40 + si);
    CHECK(check([&] { return probe(layer_norm(a, g, be)); }, {a, g, be}) < tol);
  }
}

TEST_CASE("broadcasting gradients") {
  const std::vector<std::pair<Shape, Shape>> cases = {
      {{2, 3, 4, 4}, {1, 3, 1, 1}}, {{2, 5, 3}, {5, 3}}, {{2, 4, 3, 3}, {2, 4, 1, 1}}};
  for (const auto& [sa, sb] : cases) {
    auto a = random_param(sa, 1);
    auto b = random_param(sb, 2);
    CHECK(check([&] { return probe(add(a, b)); }, {a, b}) < 1e-4);
    CHECK(check([&] { return probe(mul(a, b)); }, {a, b}) < 1e-4);
    CHECK(check([&] { return probe(sub(b, a)); }, {a, b}) < 1e-4);
    auto pos = random_param(sb, 3, 0.5, 2.0);
    CHECK(check([&] { return probe(div(a, pos)); }, {a, pos}) < 1e-4);
  }
}

TEST_CASE("matmul and bmm gradients") {
  for (std::size_t k : {1u, 3u, 6u}) {
    auto a = random_param({2, 4, k}, k);
    auto w = random_param({k, 5}, k + 1);
    CHECK(check([&] { return probe(matmul(a, w)); }, {a, w}) < 1e-4);
    auto b = random_param({2, k, 3}, k + 2);
    CHECK(check([&] { return probe(bmm(a, b)); }, {a, b}) < 1e-4);
    auto bt = random_param({2, 3, k}, k + 3);
    CHECK(check([&] { return probe(bmm(a, bt, true)); }, {a, bt}) < 1e-4);
  }
}

TEST_CASE("convolution gradients") {
  const std::vector<Shape> inputs = {{1, 2, 5, 5}, {2, 3, 4, 6}, {3, 1, 3, 3}};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape& s = inputs[i];
    auto x = random_param(s, 50 + i);
    auto w3 = random_param({4, s[1], 3, 3}, 60 + i);
    auto w1 = random_param({4, s[1], 1, 1}, 70 + i);
    auto dw = random_param({s[1], 1, 3, 3}, 80 + i);
    auto ws = random_param({s[0], 2, s[1], 3, 3}, 90 + i);
    CHECK(check([&] { return probe(conv2d(x, w3, 1)); }, {x, w3}) < 1e-4);
    CHECK(check([&] { return probe(conv2d(x, w3, 0)); }, {x, w3}) < 1e-4);
    CHECK(check([&] { return probe(conv2d(x, w1, 0)); }, {x, w1}) < 1e-4);
    CHECK(check([&] { return probe(depthwise_conv2d(x, dw, 1)); }, {x, dw}) < 1e-4);
    CHECK(check([&] { return probe(conv2d(x, ws, 1)); }, {x, ws}) < 1e-4);
    CHECK(check([&] { return probe(global_avg_pool(x)); }, {x}) < 1e-4);
    CHECK(check([&] { return probe(permute(x, {0, 2, 3, 1})); }, {x}) < 1e-4);
    auto k = random_param({i % 2 == 0 ? 3u : 5u}, 100 + i);
    auto v = random_param({s[0], 6}, 110 + i);
    CHECK(check([&] { return probe(channel_conv1d(v, k)); }, {v, k}) < 1e-4);
  }
}

TEST_CASE("unfold and fold") {
  auto x = random_param({2, 3, 4, 6}, 5);
  for (auto [ph, pw] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 2}, {2, 3}}) {
    auto u = unfold_patches(x, ph, pw);
    CHECK(u.shape() == Shape{2, ph * pw, (4 / ph) * (6 / pw), 3});
    auto back = fold_patches(u, 4, 6, ph, pw);
    CHECK(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
    CHECK(check([&] { return probe(unfold_patches(x, ph, pw)); }, {x}) < 1e-4);
  }
  CHECK_THROWS_AS(unfold_patches(x, 3, 4), DimensionError);
}

TEST_CASE("batch norm gradients and running statistics") {
  for (const Shape& s : {Shape{4, 3}, Shape{4, 2, 3, 3}, Shape{2, 3, 2, 5}}) {
    auto x = random_param(s, 7);
    auto g = random_param({s[1]}, 8, 0.5, 1.5);
    auto b = random_param({s[1]}, 9);
    BatchNormStats stats(s[1]);
    GradCheckOptions opt;
    double err = check_gradients([&] { return probe(batch_norm(x, g, b, stats, true)); }, {x, g, b}, opt)
                     .max_rel_error;
    CHECK(err < 1e-5);
    CHECK(check([&] { return probe(batch_norm(x, g, b, stats, false)); }, {x, g, b}) < 1e-4);
  }
  BatchNormStats stats(1);
  auto x = Tensor::from({4, 1}, {1.0, 2.0, 3.0, 4.0});
  (void)batch_norm(x, {}, {}, stats, true);
  CHECK(stats.mean[0] == doctest::Approx(0.25));
  CHECK(stats.var[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
}

TEST_CASE("check_gradients on a linear layer is exact to roundoff") {
  auto x = random_param({5, 4}, 1);
  auto w = random_param({4, 3}, 2);
  auto b = random_param({3}, 3);
  CHECK(check([&] { return probe(add(matmul(x, w), b)); }, {x, w, b}) < 1e-8);
}

TEST_CASE("check_gradients rejects a non-deterministic builder") {
  auto x = random_param({3}, 1);
  int calls = 0;
  auto flaky = [&] { return sum(scale(x, 1.0 + 0.1 * (calls++))); };
  CHECK_THROWS_AS(check_gradients(flaky, {x}), OracleInvalidError);
}

TEST_CASE("evaluation is deterministic") {
  auto x = random_const({2, 3, 6, 6}, 11);
  auto w = random_const({4, 3, 3, 3}, 12);
  auto y1 = gelu(conv2d(x, w, 1));
  auto y2 = gelu(conv2d(x, w, 1));
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}
