#include "fabricvs/nn/module.hpp"

#include <cmath>

namespace fabricvs::nn {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  for (const auto& p : params_) {
    if (p.name() == name) throw ConfigError("duplicate parameter name: " + name);
  }
  params_.push_back(Tensor::parameter(std::move(shape), std::move(values), name));
  return params_.back();
}

Tensor ParamStore::uniform(const std::string& name, Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng_);
  return add(name, std::move(shape), std::move(v));
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng_);
  return add(name, std::move(shape), std::move(v));
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  std::vector<double> v(ad::numel(shape), value);
  return add(name, std::move(shape), std::move(v));
}

ad::BatchNormStats* ParamStore::batch_norm_stats(const std::string& name, std::size_t channels) {
  for (const auto& b : buffers_) {
    if (b.name == name) throw ConfigError("duplicate buffer name: " + name);
  }
  buffers_.push_back({name, ad::BatchNormStats(channels)});
  return &buffers_.back().stats;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<double> ParamStore::flat() const {
  std::vector<double> out;
  out.reserve(count());
  for (const auto& p : params_) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool bias) {
  w = ps.uniform(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  if (bias) b = ps.constant(name + ".b", {out}, 0.0);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ad::matmul(x, w);
  return b.defined() ? ad::add(y, b) : y;
}

Conv1x1::Conv1x1(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool bias) {
  w = ps.uniform(name + ".w", {out, in, 1, 1}, 1.0 / std::sqrt(static_cast<double>(in)));
  if (bias) b = ps.constant(name + ".b", {1, out, 1, 1}, 0.0);
}

Tensor Conv1x1::operator()(const Tensor& x) const {
  Tensor y = ad::conv2d(x, w, 0);
  return b.defined() ? ad::add(y, b) : y;
}

BatchNorm2d::BatchNorm2d(ParamStore& ps, const std::string& name, std::size_t channels, bool affine) {
  if (affine) {
    gamma = ps.constant(name + ".gamma", {channels}, 1.0);
    beta = ps.constant(name + ".beta", {channels}, 0.0);
  }
  stats = ps.batch_norm_stats(name, channels);
}

Tensor BatchNorm2d::operator()(const Tensor& x, bool training) const {
  return ad::batch_norm(x, gamma, beta, *stats, training);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim) {
  gamma = ps.constant(name + ".gamma", {dim}, 1.0);
  beta = ps.constant(name + ".beta", {dim}, 0.0);
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }

Tensor ChannelLayerNorm::operator()(const Tensor& x) const {
  if (x.rank() != 4) throw ad::DimensionError("channel_layer_norm: expected rank-4 input, got " +
                                              ad::to_string(x.shape()));
  return ad::permute(ln(ad::permute(x, {0, 2, 3, 1})), {0, 3, 1, 2});
}

}  // namespace fabricvs::nn
