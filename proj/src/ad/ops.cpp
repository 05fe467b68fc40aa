#include "fabricvs/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace fabricvs::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using BackwardFn = std::function<void(Node&)>;

Tensor finish(std::string_view op, Shape shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, BackwardFn bw) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;

  Tape* tape = active_tape();
  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad |= t.defined() && t.requires_grad();
  if (tape != nullptr && needs_grad) {
    node->requires_grad = true;
    Tape::Entry entry;
    entry.op = op;
    for (const auto& t : inputs) {
      if (t.defined()) entry.inputs.push_back(t.shared());
    }
    entry.output = node;
    entry.backward = std::move(bw);
    tape->record(std::move(entry));
  }
  return Tensor(std::move(node));
}

bool wants(const Node* n) { return n != nullptr && n->requires_grad; }

void require_rank(std::string_view op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(x.shape()));
  }
}

// ---- broadcasting --------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  Broadcast bc;
  bc.out.resize(r);
  auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  bc.a_stride.resize(r);
  bc.b_stride.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) throw_dimension(op, a, b);
    bc.out[i] = std::max(pa[i], pb[i]);
    bc.a_stride[i] = pa[i] == 1 ? 0 : sa[i];
    bc.b_stride[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t n = numel(bc.out);
  if (n == 0) return;
  const std::size_t inner = bc.out[r - 1];
  const std::size_t sa = bc.a_stride[r - 1], sb = bc.b_stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(i + j, ia + j * sa, ib + j * sb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.a_stride[d];
      ib += bc.b_stride[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.a_stride[d] * bc.out[d];
      ib -= bc.b_stride[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul, kDiv };

Tensor binary(std::string_view op, Binary kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  Broadcast bc = same ? Broadcast{a.shape(), {}, {}} : broadcast(op, a.shape(), b.shape());
  std::vector<double> out(numel(bc.out));
  const auto av = a.data(), bv = b.data();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case Binary::kAdd: return x + y;
      case Binary::kSub: return x - y;
      case Binary::kMul: return x * y;
      default: return x / y;
    }
  };
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      out[i] = apply(av[ia], bv[ib]);
    });
  }
  Node* na = a.node();
  Node* nb = b.node();
  return finish(op, bc.out, std::move(out), {a, b}, [=](Node& o) {
    const auto& g = o.pass_grad;
    std::span<double> ga, gb;
    if (wants(na)) ga = na->ensure_pass_grad();
    if (wants(nb)) gb = nb->ensure_pass_grad();
    auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::kAdd:
          if (!ga.empty()) ga[ia] += g[i];
          if (!gb.empty()) gb[ib] += g[i];
          break;
        case Binary::kSub:
          if (!ga.empty()) ga[ia] += g[i];
          if (!gb.empty()) gb[ib] -= g[i];
          break;
        case Binary::kMul:
          if (!ga.empty()) ga[ia] += g[i] * nb->value[ib];
          if (!gb.empty()) gb[ib] += g[i] * na->value[ia];
          break;
        case Binary::kDiv: {
          const double inv = 1.0 / nb->value[ib];
          if (!ga.empty()) ga[ia] += g[i] * inv;
          if (!gb.empty()) gb[ib] -= g[i] * na->value[ia] * inv * inv;
          break;
        }
      }
    };
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
    } else {
      for_each_broadcast(bc, step);
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Node* nx = x.node();
  return finish(op, x.shape(), std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += o.pass_grad[i] * deriv(nx->value[i], o.value[i]);
    }
  });
}

// Splits a shape around `axis` into (outer, axis, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

// Gather-style primitive: out[i] = x[index[i]], a pure permutation.
Tensor gather(std::string_view op, const Tensor& x, Shape shape, std::vector<std::size_t> index) {
  const auto xv = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[index[i]];
  Node* nx = x.node();
  return finish(op, std::move(shape), std::move(out), {x},
                [nx, index = std::move(index)](Node& o) {
                  if (!wants(nx)) return;
                  auto gx = nx->ensure_pass_grad();
                  for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += o.pass_grad[i];
                });
}

void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t pad, std::size_t oh, std::size_t ow, double* cols) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t u = 0; u < kh; ++u) {
      for (std::size_t v = 0; v < kw; ++v) {
        double* row = cols + ((ci * kh + u) * kw + v) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + u) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + v) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * ow + ox] = inside ? x[(ci * h + iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t pad, std::size_t oh, std::size_t ow, double* gx) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t u = 0; u < kh; ++u) {
      for (std::size_t v = 0; v < kw; ++v) {
        const double* row = cols + ((ci * kh + u) * kw + v) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + u) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + v) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            gx[(ci * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", Binary::kDiv, a, b); }

Tensor scale(const Tensor& x, double s) {
  return unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      "gelu", x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [=](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = d == 0 ? 0 : x.size() / d;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* y = out.data() + r * d;
    const double m = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  Node* nx = x.node();
  return finish("softmax", x.shape(), std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.value.data() + r * d;
      const double* g = o.pass_grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) throw_dimension("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.size() / d;
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * inv_std[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  Node *nx = x.node(), *ng = gamma.node(), *nb = beta.node();
  return finish("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
                  const auto& g = o.pass_grad;
                  if (wants(ng)) {
                    auto gg = ng->ensure_pass_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                  }
                  if (wants(nb)) {
                    auto gb = nb->ensure_pass_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                  }
                  if (!wants(nx)) return;
                  auto gx = nx->ensure_pass_grad();
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double gh = g[r * d + j] * ng->value[j];
                      m1 += gh;
                      m2 += gh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double gh = g[r * d + j] * ng->value[j];
                      gx[r * d + j] += inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
                    }
                  }
                });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training, double momentum, double eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm: rank < 2, shape " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (batch * c);
  const std::size_t count = batch * inner;
  const bool affine = gamma.defined();
  if (stats.mean.size() != c || (affine && (gamma.size() != c || beta.size() != c))) {
    throw DimensionError("batch_norm: channel count " + std::to_string(c) +
                         " does not match parameters");
  }
  if (training && count < 2) throw DimensionError("batch_norm: training needs > 1 value per channel");
  const auto xv = x.data();
  std::vector<double> mean(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double mu = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) mu += p[i];
      }
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const double unbiased = var / static_cast<double>(count - 1);
      var /= static_cast<double>(count);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mu;
      stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
    } else {
      mean[ch] = stats.mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + eps);
    }
  }
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      const double gm = affine ? gamma.data()[ch] : 1.0;
      const double bt = affine ? beta.data()[ch] : 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (xv[base + i] - mean[ch]) * inv_std[ch];
        out[base + i] = gm * xhat[base + i] + bt;
      }
    }
  }
  Node *nx = x.node(), *ng = gamma.node(), *nb = beta.node();
  return finish("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
                  const auto& g = o.pass_grad;
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * inner;
                      for (std::size_t i = 0; i < inner; ++i) {
                        sum_g[ch] += g[base + i];
                        sum_gx[ch] += g[base + i] * xhat[base + i];
                      }
                    }
                  }
                  if (wants(ng)) {
                    auto gg = ng->ensure_pass_grad();
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                  }
                  if (wants(nb)) {
                    auto gb = nb->ensure_pass_grad();
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                  }
                  if (!wants(nx)) return;
                  auto gx = nx->ensure_pass_grad();
                  const double inv_n = 1.0 / static_cast<double>(count);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * inner;
                      const double gm = ng != nullptr ? ng->value[ch] : 1.0;
                      const double k = gm * inv_std[ch];
                      for (std::size_t i = 0; i < inner; ++i) {
                        if (training) {
                          gx[base + i] += k * (g[base + i] - sum_g[ch] * inv_n -
                                               xhat[base + i] * sum_gx[ch] * inv_n);
                        } else {
                          gx[base + i] += k * g[base + i];
                        }
                      }
                    }
                  }
                });
}

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw_dimension("matmul", a.shape(), b.shape());
  }
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  Node *na = a.node(), *nb = b.node();
  return finish("matmul", std::move(shape), std::move(out), {a, b}, [=](Node& o) {
    ConstMatMap g(o.pass_grad.data(), m, n);
    if (wants(na)) {
      MatMap(na->ensure_pass_grad().data(), m, k).noalias() +=
          g * ConstMatMap(nb->value.data(), k, n).transpose();
    }
    if (wants(nb)) {
      MatMap(nb->ensure_pass_grad().data(), k, n).noalias() +=
          ConstMatMap(na->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) throw_dimension("bmm", a.shape(), b.shape());
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) throw_dimension("bmm", a.shape(), b.shape());
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap am(a.data().data() + i * m * k, m, k);
    MatMap om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMatMap(b.data().data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMatMap(b.data().data() + i * k * n, k, n);
    }
  }
  Node *na = a.node(), *nb = b.node();
  return finish("bmm", {batch, m, n}, std::move(out), {a, b}, [=](Node& o) {
    std::span<double> ga, gb;
    if (wants(na)) ga = na->ensure_pass_grad();
    if (wants(nb)) gb = nb->ensure_pass_grad();
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap g(o.pass_grad.data() + i * m * n, m, n);
      ConstMatMap am(na->value.data() + i * m * k, m, k);
      if (transpose_b) {
        ConstMatMap bm(nb->value.data() + i * n * k, n, k);
        if (!ga.empty()) MatMap(ga.data() + i * m * k, m, k).noalias() += g * bm;
        if (!gb.empty()) MatMap(gb.data() + i * n * k, n, k).noalias() += g.transpose() * am;
      } else {
        ConstMatMap bm(nb->value.data() + i * k * n, k, n);
        if (!ga.empty()) MatMap(ga.data() + i * m * k, m, k).noalias() += g * bm.transpose();
        if (!gb.empty()) MatMap(gb.data() + i * k * n, k, n).noalias() += am.transpose() * g;
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  require_rank("conv2d", x, 4);
  const bool per_sample = w.rank() == 5;
  if (!per_sample && w.rank() != 4) throw_dimension("conv2d", x.shape(), w.shape());
  const std::size_t off = per_sample ? 1 : 0;
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(off), kh = w.dim(off + 2), kw = w.dim(off + 3);
  if (w.dim(off + 1) != cin || (per_sample && w.dim(0) != batch) || h + 2 * pad < kh ||
      wd + 2 * pad < kw) {
    throw_dimension("conv2d", x.shape(), w.shape());
  }
  const std::size_t oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  const std::size_t ck = cin * kh * kw, hw = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && pad == 0;
  std::vector<double> out(batch * cout * hw);
  std::vector<double> cols(pointwise ? 0 : ck * hw);
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = xv + b * cin * h * wd;
    if (!pointwise) im2col(src, cin, h, wd, kh, kw, pad, oh, ow, cols.data());
    ConstMatMap wm(wv + (per_sample ? b * cout * ck : 0), cout, ck);
    ConstMatMap cm(pointwise ? src : cols.data(), ck, hw);
    MatMap(out.data() + b * cout * hw, cout, hw).noalias() = wm * cm;
  }
  Node *nx = x.node(), *nw = w.node();
  return finish("conv2d", {batch, cout, oh, ow}, std::move(out), {x, w}, [=](Node& o) {
    std::span<double> gx, gw;
    if (wants(nx)) gx = nx->ensure_pass_grad();
    if (wants(nw)) gw = nw->ensure_pass_grad();
    std::vector<double> col_buf(pointwise ? 0 : ck * hw), gcol(pointwise ? 0 : ck * hw);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* src = nx->value.data() + b * cin * h * wd;
      ConstMatMap g(o.pass_grad.data() + b * cout * hw, cout, hw);
      const std::size_t woff = per_sample ? b * cout * ck : 0;
      if (!gw.empty()) {
        if (!pointwise) im2col(src, cin, h, wd, kh, kw, pad, oh, ow, col_buf.data());
        ConstMatMap cm(pointwise ? src : col_buf.data(), ck, hw);
        MatMap(gw.data() + woff, cout, ck).noalias() += g * cm.transpose();
      }
      if (!gx.empty()) {
        ConstMatMap wm(nw->value.data() + woff, cout, ck);
        if (pointwise) {
          MatMap(gx.data() + b * cin * h * wd, ck, hw).noalias() += wm.transpose() * g;
        } else {
          MatMap(gcol.data(), ck, hw).noalias() = wm.transpose() * g;
          col2im(gcol.data(), cin, h, wd, kh, kw, pad, oh, ow, gx.data() + b * cin * h * wd);
        }
      }
    }
  });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  require_rank("depthwise_conv2d", x, 4);
  require_rank("depthwise_conv2d", w, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != c || w.dim(1) != 1 || h + 2 * pad < kh || wd + 2 * pad < kw) {
    throw_dimension("depthwise_conv2d", x.shape(), w.shape());
  }
  const std::size_t oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  const auto xv = x.data(), wv = w.data();
  std::vector<double> out(batch * c * oh * ow, 0.0);
  // Visits each (output, kernel tap, input) triple that lies inside the image.
  auto for_taps = [=](auto&& f) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t ib = (b * c + ch) * h * wd, ob = (b * c + ch) * oh * ow;
        for (std::size_t u = 0; u < kh; ++u) {
          for (std::size_t v = 0; v < kw; ++v) {
            const std::size_t wi = (ch * kh + u) * kw + v;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + u) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + v) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                f(ob + oy * ow + ox, wi, ib + iy * wd + ix);
              }
            }
          }
        }
      }
    }
  };
  for_taps([&](std::size_t o, std::size_t wi, std::size_t i) { out[o] += wv[wi] * xv[i]; });
  Node *nx = x.node(), *nw = w.node();
  return finish("depthwise_conv2d", {batch, c, oh, ow}, std::move(out), {x, w}, [=](Node& o) {
    std::span<double> gx, gw;
    if (wants(nx)) gx = nx->ensure_pass_grad();
    if (wants(nw)) gw = nw->ensure_pass_grad();
    const auto& g = o.pass_grad;
    for_taps([&](std::size_t oi, std::size_t wi, std::size_t i) {
      if (!gx.empty()) gx[i] += g[oi] * nw->value[wi];
      if (!gw.empty()) gw[wi] += g[oi] * nx->value[i];
    });
  });
}

Tensor channel_conv1d(const Tensor& x, const Tensor& w) {
  require_rank("channel_conv1d", x, 2);
  require_rank("channel_conv1d", w, 1);
  const std::size_t batch = x.dim(0), c = x.dim(1), k = w.dim(0);
  if (k % 2 == 0) throw DimensionError("channel_conv1d: kernel size must be odd, got " + std::to_string(k));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  auto for_taps = [=](auto&& f) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(ch + j) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(c)) continue;
          f(b * c + ch, j, b * c + static_cast<std::size_t>(src));
        }
      }
    }
  };
  const auto xv = x.data(), wv = w.data();
  std::vector<double> out(batch * c, 0.0);
  for_taps([&](std::size_t o, std::size_t j, std::size_t i) { out[o] += wv[j] * xv[i]; });
  Node *nx = x.node(), *nw = w.node();
  return finish("channel_conv1d", x.shape(), std::move(out), {x, w}, [=](Node& o) {
    std::span<double> gx, gw;
    if (wants(nx)) gx = nx->ensure_pass_grad();
    if (wants(nw)) gw = nw->ensure_pass_grad();
    for_taps([&](std::size_t oi, std::size_t j, std::size_t i) {
      if (!gx.empty()) gx[i] += o.pass_grad[oi] * nw->value[j];
      if (!gw.empty()) gw[j] += o.pass_grad[oi] * nx->value[i];
    });
  });
}

// ---- reductions and layout -----------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xv = x.data();
  std::vector<double> out(batch * c);
  for (std::size_t i = 0; i < batch * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += xv[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  Node* nx = x.node();
  return finish("global_avg_pool", {batch, c}, std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < batch * c; ++i) {
      for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += o.pass_grad[i] * inv;
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw_dimension("concat", shape, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) throw_dimension("concat", shape, s);
    }
    total += s[axis];
  }
  shape[axis] = total;
  const AxisSplit sp = split_axis("concat", shape, axis);
  std::vector<double> out;
  out.reserve(numel(shape));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t slab = p.dim(axis) * sp.inner;
      const double* src = p.data().data() + o * slab;
      out.insert(out.end(), src, src + slab);
    }
  }
  std::vector<Node*> nodes;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(p.dim(axis) * sp.inner);
  }
  auto node = finish("concat", shape, std::move(out), {}, {});
  // Recording needs a variable input list, so it is done by hand here.
  Tape* tape = active_tape();
  bool needs_grad = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape != nullptr && needs_grad) {
    node.node()->requires_grad = true;
    Tape::Entry entry;
    entry.op = "concat";
    for (const auto& p : parts) entry.inputs.push_back(p.shared());
    entry.output = node.shared();
    entry.backward = [=, outer = sp.outer](Node& o) {
      std::size_t pos = 0;
      for (std::size_t oi = 0; oi < outer; ++oi) {
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          if (wants(nodes[pi])) {
            auto g = nodes[pi]->ensure_pass_grad();
            for (std::size_t j = 0; j < lens[pi]; ++j) g[oi * lens[pi] + j] += o.pass_grad[pos + j];
          }
          pos += lens[pi];
        }
      }
    };
    tape->record(std::move(entry));
  }
  return node;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit sp = split_axis("slice", x.shape(), axis);
  if (start + length > sp.len) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis of shape " +
                         to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<std::size_t> index;
  index.reserve(numel(shape));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t a = start; a < start + length; ++a) {
      for (std::size_t i = 0; i < sp.inner; ++i) index.push_back((o * sp.len + a) * sp.inner + i);
    }
  }
  return gather("slice", x, std::move(shape), std::move(index));
}

Tensor unfold_patches(const Tensor& x, std::size_t ph, std::size_t pw) {
  require_rank("unfold_patches", x, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0) {
    throw DimensionError("unfold_patches: patch " + std::to_string(ph) + "x" + std::to_string(pw) +
                         " does not tile " + to_string(x.shape()));
  }
  const std::size_t nw = w / pw, p = ph * pw, n = (h / ph) * nw;
  std::vector<std::size_t> index(batch * p * n * c);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const std::size_t pi = (y % ph) * pw + xx % pw;
          const std::size_t ni = (y / ph) * nw + xx / pw;
          index[((b * p + pi) * n + ni) * c + ch] = ((b * c + ch) * h + y) * w + xx;
        }
      }
    }
  }
  return gather("unfold_patches", x, {batch, p, n, c}, std::move(index));
}

Tensor fold_patches(const Tensor& x, std::size_t height, std::size_t width, std::size_t ph,
                    std::size_t pw) {
  require_rank("fold_patches", x, 4);
  const std::size_t batch = x.dim(0), p = x.dim(1), n = x.dim(2), c = x.dim(3);
  if (ph == 0 || pw == 0 || height % ph != 0 || width % pw != 0 || p != ph * pw ||
      n != (height / ph) * (width / pw)) {
    throw DimensionError("fold_patches: " + to_string(x.shape()) + " does not fold to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t nw = width / pw;
  std::vector<std::size_t> index(batch * c * height * width);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t xx = 0; xx < width; ++xx) {
          const std::size_t pi = (y % ph) * pw + xx % pw;
          const std::size_t ni = (y / ph) * nw + xx / pw;
          index[((b * c + ch) * height + y) * width + xx] = ((b * p + pi) * n + ni) * c + ch;
        }
      }
    }
  }
  return gather("fold_patches", x, {batch, c, height, width}, std::move(index));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) throw_dimension("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  Node* nx = x.node();
  return finish("reshape", std::move(shape), std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.pass_grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  Shape shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw DimensionError("permute: invalid permutation");
    seen[perm[i]] = true;
    shape[i] = in[perm[i]];
  }
  const auto in_strides = contiguous_strides(in);
  std::vector<std::size_t> index(x.size());
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) src += idx[d] * in_strides[perm[d]];
    index[i] = src;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return gather("permute", x, std::move(shape), std::move(index));
}

Tensor l2_norm(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis("l2_norm", x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto xv = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t a = 0; a < sp.len; ++a) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double v = xv[(o * sp.len + a) * sp.inner + i];
        out[o * sp.inner + i] += v * v;
      }
    }
  }
  for (double& v : out) v = std::sqrt(v);
  Node* nx = x.node();
  return finish("l2_norm", std::move(shape), std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (std::size_t oo = 0; oo < sp.outer; ++oo) {
      for (std::size_t a = 0; a < sp.len; ++a) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double norm = o.value[oo * sp.inner + i];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          const std::size_t xi = (oo * sp.len + a) * sp.inner + i;
          gx[xi] += o.pass_grad[oo * sp.inner + i] * nx->value[xi] / norm;
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node* nx = x.node();
  return finish("sum", {}, {s}, {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (double& g : gx) g += o.pass_grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit sp = split_axis("sum_axis", x.shape(), axis);
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto xv = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t a = 0; a < sp.len; ++a) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        out[o * sp.inner + i] += xv[(o * sp.len + a) * sp.inner + i];
      }
    }
  }
  Node* nx = x.node();
  return finish("sum_axis", std::move(shape), std::move(out), {x}, [=](Node& o) {
    if (!wants(nx)) return;
    auto gx = nx->ensure_pass_grad();
    for (std::size_t oo = 0; oo < sp.outer; ++oo) {
      for (std::size_t a = 0; a < sp.len; ++a) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          gx[(oo * sp.len + a) * sp.inner + i] += o.pass_grad[oo * sp.inner + i];
        }
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t len = split_axis("mean_axis", x.shape(), axis).len;
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

}  // namespace fabricvs::ad
