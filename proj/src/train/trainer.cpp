#include "fabricvs/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "fabricvs/ad/ops.hpp"
#include "fabricvs/nn/module.hpp"
#include "fabricvs/scene/scene.hpp"

namespace fabricvs::train {

using nn::ConfigError;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("train: warmup_epochs outside [0, epochs]");
  if (!(lr_start >= 0.0) || !(lr_end >= 0.0)) throw ConfigError("train: learning rates must be >= 0");
  if (lr_start > lr_peak) throw ConfigError("train: lr_start > lr_peak");
  if (lr_end > lr_peak) throw ConfigError("train: lr_end > lr_peak");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("train: alpha and beta must be >= 0");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ConfigError("train: adam betas must be in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw ConfigError("train: eps must be > 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
  if (!(augment_noise >= 0.0)) throw ConfigError("train: augment_noise must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"warmup_epochs", c.warmup_epochs},
       {"lr_start", c.lr_start},
       {"lr_peak", c.lr_peak},
       {"lr_end", c.lr_end},
       {"alpha", c.alpha},
       {"beta", c.beta},
       {"seed", c.seed},
       {"weight_decay", c.optimizer.weight_decay},
       {"adam_beta1", c.optimizer.beta1},
       {"adam_beta2", c.optimizer.beta2},
       {"adam_eps", c.optimizer.eps},
       {"decay_norm_and_bias", c.optimizer.decay_norm_and_bias},
       {"grad_clip", c.grad_clip},
       {"augment_noise", c.augment_noise}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.lr_start = j.value("lr_start", c.lr_start);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.lr_end = j.value("lr_end", c.lr_end);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.seed = j.value("seed", c.seed);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = j.value("adam_beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("adam_beta2", c.optimizer.beta2);
    c.optimizer.eps = j.value("adam_eps", c.optimizer.eps);
    c.optimizer.decay_norm_and_bias = j.value("decay_norm_and_bias", c.optimizer.decay_norm_and_bias);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.augment_noise = j.value("augment_noise", c.augment_noise);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

double loss_e(const Vec6& pred, const Vec6& gt, double alpha, double beta) {
  double t = 0.0, r = 0.0;
  for (int i = 0; i < 3; ++i) {
    t += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    r += (pred[i + 3] - gt[i + 3]) * (pred[i + 3] - gt[i + 3]);
  }
  return alpha * std::sqrt(t) + beta * std::sqrt(r);
}

Tensor loss_e(const Tensor& pred, const Tensor& gt, double alpha, double beta) {
  if (pred.shape().size() != 2 || pred.shape()[1] != 6 || pred.shape() != gt.shape())
    throw ad::DimensionError("loss_e expects matching (B, 6) tensors");
  const Tensor d = ad::sub(pred, gt);
  const Tensor t = ad::l2_norm(ad::slice(d, 1, 0, 3), 1);
  const Tensor r = ad::l2_norm(ad::slice(d, 1, 3, 3), 1);
  return ad::add(ad::scale(t, alpha), ad::scale(r, beta));
}

double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
  const std::size_t total = static_cast<std::size_t>(cfg.epochs) * steps_per_epoch;
  const std::size_t warm = static_cast<std::size_t>(cfg.warmup_epochs) * steps_per_epoch;
  if (total == 0) return cfg.lr_end;
  const std::size_t last = total - 1;
  if (step >= last) return cfg.lr_end;
  if (step < warm) {
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const double span = static_cast<double>(last - warm);
  const double x = static_cast<double>(step - warm) / span;
  return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + std::cos(std::numbers::pi * x));
}

void adamw_step(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                AdamState& state, double lr, const OptimizerConfig& opt) {
  if (params.size() != grads.size()) throw ad::DimensionError("adamw_step: params / grads count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size())
      throw ad::DimensionError("adamw_step: gradient size mismatch for " + params[i].name());
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NonFiniteGradient(params[i].name().empty() ? "#" + std::to_string(i) : params[i].name());
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto w = p.mutable_data();
    const bool decay = opt.decay_norm_and_bias || p.shape().size() >= 2;
    const double shrink = decay ? lr * opt.weight_decay : 0.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g * g;
      const double step = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opt.eps);
      w[k] -= shrink * w[k];
      w[k] -= lr * step;
    }
  }
}

double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

std::vector<Sample> Dataset::all() const {
  std::vector<Sample> out = train;
  out.insert(out.end(), val.begin(), val.end());
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream in(root / "manifest.jsonl");
  if (!in) throw ConfigError("dataset: cannot read " + (root / "manifest.jsonl").string());
  Dataset d;
  bool first = true;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Sample s;
      s.id = rec.at("id").get<std::string>();
      s.label = rec.at("label").get<Vec6>();
      s.diff = rec.at("diff").get<Vec6>();
      s.des = read_pgm((root / rec.at("des").get<std::string>()).string());
      s.cur = read_pgm((root / rec.at("cur").get<std::string>()).string());
      const LabelRanges r = rec.at("ranges").get<LabelRanges>();
      if (first) {
        d.ranges = r;
        d.width = s.des.width;
        d.height = s.des.height;
        first = false;
      } else if (r.lo != d.ranges.lo || r.hi != d.ranges.hi) {
        throw ConfigError("dataset: label ranges differ between records");
      }
      if (s.des.width != d.width || s.des.height != d.height || s.cur.width != d.width || s.cur.height != d.height)
        throw ConfigError("dataset: image size differs in record " + s.id);
      (rec.value("split", std::string("train")) == "val" ? d.val : d.train).push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset: manifest line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      if (dynamic_cast<const ConfigError*>(&e) != nullptr) throw;
      throw ConfigError("dataset: manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (first) throw ConfigError("dataset: empty manifest in " + dir);
  return d;
}

namespace {

Tensor label_batch(const std::vector<const Sample*>& batch) {
  std::vector<double> v;
  v.reserve(batch.size() * 6);
  for (const Sample* s : batch) v.insert(v.end(), s->label.begin(), s->label.end());
  return Tensor::from({batch.size(), 6}, std::move(v));
}

Tensor images(const std::vector<const Sample*>& batch, bool current) {
  std::vector<const GrayImage*> imgs;
  imgs.reserve(batch.size());
  for (const Sample* s : batch) imgs.push_back(current ? &s->cur : &s->des);
  return net::image_batch(imgs);
}

void add_noise(Tensor& t, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  for (double& v : t.mutable_data()) v = std::clamp(v + n(rng), 0.0, 1.0);
}

void check_resolution(const net::Network& net, const Dataset& data) {
  const auto& c = net.config();
  if (c.width != data.width || c.height != data.height)
    throw ConfigError("train: dataset is " + std::to_string(data.width) + "x" + std::to_string(data.height) +
                      " but the network expects " + std::to_string(c.width) + "x" + std::to_string(c.height));
}

}  // namespace

double mean_loss(const net::Network& net, const std::vector<Sample>& samples, double alpha, double beta) {
  if (samples.empty()) return 0.0;
  constexpr std::size_t kChunk = 32;
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += kChunk) {
    std::vector<const Sample*> batch;
    for (std::size_t k = i; k < std::min(samples.size(), i + kChunk); ++k) batch.push_back(&samples[k]);
    const Tensor e = loss_e(net.forward(images(batch, false), images(batch, true), false), label_batch(batch), alpha, beta);
    for (double v : e.data()) total += v;
  }
  return total / static_cast<double>(samples.size());
}

void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw std::runtime_error("cannot write " + path);
  std::fprintf(f, "epoch,lr,train_loss,val_loss,wall_seconds\n");
  for (const auto& h : history)
    std::fprintf(f, "%d,%.17g,%.17g,%.17g,%.6f\n", h.epoch, h.lr, h.train_loss, h.val_loss, h.wall_seconds);
  std::fclose(f);
}

TrainResult train(net::Network& net, const Dataset& data, const TrainConfig& cfg, const std::string& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  namespace fs = std::filesystem;
  cfg.validate();
  check_resolution(net, data);
  if (data.train.empty()) throw ConfigError("train: no training samples");
  if (!out_dir.empty()) fs::create_directories(out_dir);

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t spe = (data.train.size() + bs - 1) / bs;
  std::mt19937_64 shuffle_rng(scene::mix_seed(cfg.seed, 0x5eed));
  std::mt19937_64 noise_rng(scene::mix_seed(cfg.seed, 0x0a06));
  const std::vector<Tensor>& params = net.params().params();
  AdamState adam;
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  result.initial_train_loss = mean_loss(net, data.train, cfg.alpha, cfg.beta);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  const std::string best_path = out_dir.empty() ? "" : (fs::path(out_dir) / "best.ckpt").string();
  std::vector<double> best_weights;
  std::vector<ad::BatchNormStats> best_stats;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double epoch_lr = lr_at(step, spe, cfg);
    double running = 0.0;
    for (std::size_t b = 0; b < spe; ++b) {
      std::vector<const Sample*> batch;
      for (std::size_t k = b * bs; k < std::min(order.size(), (b + 1) * bs); ++k) batch.push_back(&data.train[order[k]]);
      Tensor des = images(batch, false);
      Tensor cur = images(batch, true);
      if (cfg.augment_noise > 0.0) {
        add_noise(des, cfg.augment_noise, noise_rng);
        add_noise(cur, cfg.augment_noise, noise_rng);
      }
      ad::Tape tape;
      std::vector<std::vector<double>> grads(params.size());
      double batch_loss = 0.0;
      {
        ad::TapeScope scope(tape);
        const Tensor per = loss_e(net.forward(des, cur, true), label_batch(batch), cfg.alpha, cfg.beta);
        const Tensor loss = ad::mean(per);
        batch_loss = loss.item();
        if (!std::isfinite(batch_loss)) throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch));
        const auto gm = ad::backward(tape, loss);
        for (std::size_t i = 0; i < params.size(); ++i)
          grads[i] = gm.contains(params[i]) ? gm.at(params[i]) : std::vector<double>(params[i].size(), 0.0);
      }
      clip_grad_norm(grads, cfg.grad_clip);
      adamw_step(params, grads, adam, lr_at(step, spe, cfg), cfg.optimizer);
      running += batch_loss * static_cast<double>(batch.size());
      ++step;
    }
    net.params().zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = epoch_lr;
    rec.train_loss = running / static_cast<double>(data.train.size());
    rec.val_loss = data.val.empty() ? rec.train_loss : mean_loss(net, data.val, cfg.alpha, cfg.beta);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.val_loss)) throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.history.push_back(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      result.best_epoch = epoch;
      result.best_val = rec.val_loss;
      best_weights = net.params().flat();
      best_stats.clear();
      for (const auto& buf : net.params().buffers()) best_stats.push_back(buf.stats);
      if (!best_path.empty()) net.save(best_path);
    }
    if (!out_dir.empty()) write_history((fs::path(out_dir) / "history.csv").string(), result.history);
    if (on_epoch) on_epoch(rec);
  }
  if (!out_dir.empty()) net.save((fs::path(out_dir) / "last.ckpt").string());

  std::size_t off = 0;
  for (const auto& p : params) {
    Tensor q = p;
    auto w = q.mutable_data();
    std::copy_n(best_weights.begin() + static_cast<std::ptrdiff_t>(off), w.size(), w.begin());
    off += w.size();
  }
  std::size_t k = 0;
  for (auto& buf : net.params().buffers()) buf.stats = best_stats[k++];
  return result;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"count", r.count},
       {"loss", r.loss},
       {"loss_std", r.loss_std},
       {"trans_rmse_mm", r.trans_rmse_mm},
       {"rot_rmse_deg", r.rot_rmse_deg},
       {"latency_s", r.latency_s},
       {"losses", r.losses}};
}

EvalReport evaluate(const PredictFn& predict, const std::vector<Sample>& testset, const LabelRanges& ranges,
                    double alpha, double beta) {
  if (testset.empty()) throw ConfigError("evaluate: empty test set");
  EvalReport r;
  r.count = testset.size();
  double st = 0.0, sr = 0.0, total_time = 0.0;
  for (const Sample& s : testset) {
    const auto t0 = std::chrono::steady_clock::now();
    const Vec6 p = predict(s);
    total_time += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.losses.push_back(loss_e(p, s.label, alpha, beta));
    const Vec6 pd = ranges.denormalize(p);
    const Vec6 gd = ranges.denormalize(s.label);
    for (int i = 0; i < 3; ++i) {
      st += (pd[i] - gd[i]) * (pd[i] - gd[i]);
      sr += (pd[i + 3] - gd[i + 3]) * (pd[i + 3] - gd[i + 3]);
    }
  }
  const double n = static_cast<double>(r.count);
  r.loss = std::accumulate(r.losses.begin(), r.losses.end(), 0.0) / n;
  double var = 0.0;
  for (double e : r.losses) var += (e - r.loss) * (e - r.loss);
  r.loss_std = std::sqrt(var / n);
  r.trans_rmse_mm = std::sqrt(st / n);
  r.rot_rmse_deg = std::sqrt(sr / n) * 180.0 / std::numbers::pi;
  r.latency_s = total_time / n;
  return r;
}

EvalReport evaluate(const net::Network& net, const std::vector<Sample>& testset, const LabelRanges& ranges,
                    double alpha, double beta) {
  return evaluate([&](const Sample& s) { return net.predict(s.des, s.cur); }, testset, ranges, alpha, beta);
}

}  // namespace fabricvs::train

namespace fabricvs::train {

std::vector<AblationRow> ablate(const Dataset& data, const std::vector<Sample>& testset, const net::NetConfig& base,
                                const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                                const TrainConfig& cfg, const std::string& out_dir,
                                const std::function<void(const AblationRow&)>& on_row) {
  namespace fs = std::filesystem;
  if (variants.size() < 2) throw ConfigError("ablate: need at least two variants");
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
  if (testset.empty()) throw ConfigError("ablate: empty test set");
  for (const auto& v : variants) (void)net::parse_variant(v);
  cfg.validate();
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    for (std::uint64_t seed : seeds) {
      AblationRow row;
      row.variant = v;
      row.seed = seed;
      try {
        net::NetConfig nc = base;
        nc.variant = net::parse_variant(v);
        TrainConfig tc = cfg;
        tc.seed = seed;
        net::Network n(nc, seed);
        const std::string dir = out_dir.empty() ? "" : (fs::path(out_dir) / (v + "_s" + std::to_string(seed))).string();
        const TrainResult r = train(n, data, tc, dir);
        row.best_epoch = r.best_epoch;
        row.best_val = r.best_val;
        row.report = evaluate(n, testset, data.ranges, tc.alpha, tc.beta);
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      rows.push_back(row);
      if (on_row) on_row(row);
    }
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw std::runtime_error("cannot write " + path);
  std::fprintf(f, "variant,seed,status,loss,loss_std,trans_rmse_mm,rot_rmse_deg,latency_s,best_epoch,best_val\n");
  for (const auto& r : rows) {
    if (r.ok) {
      std::fprintf(f, "%s,%llu,ok,%.17g,%.17g,%.17g,%.17g,%.6g,%d,%.17g\n", r.variant.c_str(),
                   static_cast<unsigned long long>(r.seed), r.report.loss, r.report.loss_std, r.report.trans_rmse_mm,
                   r.report.rot_rmse_deg, r.report.latency_s, r.best_epoch, r.best_val);
    } else {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      std::fprintf(f, "%s,%llu,failed: %s,nan,nan,nan,nan,nan,0,nan\n", r.variant.c_str(),
                   static_cast<unsigned long long>(r.seed), msg.c_str());
    }
  }
  std::fclose(f);
}

std::vector<std::pair<std::string, double>> mean_loss_by_variant(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<int> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.variant; });
    if (it == out.end()) {
      out.emplace_back(r.variant, 0.0);
      counts.push_back(0);
      it = out.end() - 1;
    }
    if (!r.ok) continue;
    const auto i = static_cast<std::size_t>(it - out.begin());
    it->second += r.report.loss;
    ++counts[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].second = counts[i] > 0 ? out[i].second / counts[i] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace fabricvs::train
