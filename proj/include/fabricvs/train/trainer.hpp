#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fabricvs/image.hpp"
#include "fabricvs/net/network.hpp"
#include "fabricvs/net/pose_diff.hpp"
#include "json.hpp"

namespace fabricvs::train {

using ad::Tensor;

/// Non-finite loss or gradient during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteGradient : public DivergenceError {
 public:
  NonFiniteGradient(const std::string& param)
      : DivergenceError("non-finite gradient in " + param), param_(param) {}
  [[nodiscard]] const std::string& param() const { return param_; }

 private:
  std::string param_;
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  bool decay_norm_and_bias = false;  // rank < 2 parameters are not decayed by default
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  int warmup_epochs = 5;
  double lr_start = 1e-6;
  double lr_peak = 1e-4;
  double lr_end = 1e-5;
  double alpha = 1.0;
  double beta = 1.0;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  double grad_clip = 1.0;        // global norm, 0 disables
  double augment_noise = 0.0;    // extra pixel noise sigma on training images

  /// Throws nn::ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// E on normalized 6-vectors.
double loss_e(const Vec6& pred, const Vec6& gt, double alpha, double beta);
/// Per-sample E for (B, 6) tensors, shape (B).
Tensor loss_e(const Tensor& pred, const Tensor& gt, double alpha, double beta);

/// Warmup then cosine decay over epochs * steps_per_epoch steps; clamps to lr_end beyond.
double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg);

struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Throws NonFiniteGradient before touching any parameter or moment.
void adamw_step(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                AdamState& state, double lr, const OptimizerConfig& opt);

/// Scales grads in place to global norm <= max_norm; returns the norm before clipping.
double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct Sample {
  std::string id;
  GrayImage des;
  GrayImage cur;
  Vec6 label{};  // normalized
  Vec6 diff{};   // mm / rad
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  LabelRanges ranges;
  std::size_t width = 0;
  std::size_t height = 0;

  [[nodiscard]] std::vector<Sample> all() const;
};

/// Reads manifest.jsonl and the referenced images. Throws nn::ConfigError on a bad manifest.
Dataset load_dataset(const std::string& dir);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val = 0.0;
  double initial_train_loss = 0.0;  // mean E over the training set before the first step
};

/// Mean E of the network over samples in eval mode.
double mean_loss(const net::Network& net, const std::vector<Sample>& samples, double alpha, double beta);

/// Trains in place and leaves the best-validation weights loaded. With a
/// non-empty out_dir writes history.csv, best.ckpt and last.ckpt.
TrainResult train(net::Network& net, const Dataset& data, const TrainConfig& cfg, const std::string& out_dir = "",
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_history(const std::string& path, const std::vector<EpochRecord>& history);

struct EvalReport {
  std::size_t count = 0;
  double loss = 0.0;
  double loss_std = 0.0;
  double trans_rmse_mm = 0.0;
  double rot_rmse_deg = 0.0;
  double latency_s = 0.0;
  std::vector<double> losses;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Normalized prediction for one pair.
using PredictFn = std::function<Vec6(const Sample&)>;

/// Metrics over testset; RMSE over the translation and rotation components after denormalization.
EvalReport evaluate(const PredictFn& predict, const std::vector<Sample>& testset, const LabelRanges& ranges,
                    double alpha = 1.0, double beta = 1.0);
EvalReport evaluate(const net::Network& net, const std::vector<Sample>& testset, const LabelRanges& ranges,
                    double alpha = 1.0, double beta = 1.0);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  double best_val = 0.0;
  EvalReport report;
};

/// Trains every variant once per seed on the same data and evaluates on testset.
/// A failed run is recorded with ok = false and the table is still produced.
/// With a non-empty out_dir each run writes into out_dir/<variant>_s<seed>/.
std::vector<AblationRow> ablate(const Dataset& data, const std::vector<Sample>& testset, const net::NetConfig& base,
                                const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                                const TrainConfig& cfg, const std::string& out_dir = "",
                                const std::function<void(const AblationRow&)>& on_row = {});

/// variant,seed,status,loss,loss_std,trans_rmse_mm,rot_rmse_deg,latency_s,best_epoch,best_val
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

/// Mean test loss per variant over successful runs, in first-seen order.
std::vector<std::pair<std::string, double>> mean_loss_by_variant(const std::vector<AblationRow>& rows);

}  // namespace fabricvs::train
