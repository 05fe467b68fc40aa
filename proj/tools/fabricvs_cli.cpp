#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fabricvs/net/gradcheck_suite.hpp"
#include "fabricvs/net/network.hpp"
#include "fabricvs/nn/module.hpp"
#include "fabricvs/plant/plant.hpp"
#include "fabricvs/scene/scene.hpp"
#include "fabricvs/train/trainer.hpp"
#include "json.hpp"

using namespace fabricvs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kConfigError = 2;
constexpr int kDiverged = 3;

struct Resolved {
  scene::SceneConfig scene;
  net::NetConfig net;
  train::TrainConfig train;
  plant::ServoConfig servo;
  std::size_t n = 2000;
  double val_fraction = 0.1;
  std::vector<std::string> variants{"dcab", "nodiff", "concat"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int runs = 1;
  std::size_t grad_samples = 500;
  double grad_tolerance = 1e-4;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw nn::ConfigError("cannot read config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw nn::ConfigError("config " + path + ": " + e.what());
  }
}

Resolved resolve(const json& j) {
  Resolved r;
  try {
    if (j.contains("scene")) r.scene = j.at("scene").get<scene::SceneConfig>();
    if (j.contains("net")) r.net = j.at("net").get<net::NetConfig>();
    if (j.contains("train")) r.train = j.at("train").get<train::TrainConfig>();
    json servo = j.value("servo", json::object());
    if (!servo.contains("scene")) servo["scene"] = r.scene;
    r.servo = servo.get<plant::ServoConfig>();
    const json gen = j.value("gen_data", json::object());
    r.n = gen.value("n", r.n);
    r.val_fraction = gen.value("val_fraction", r.val_fraction);
    const json ab = j.value("ablate", json::object());
    r.variants = ab.value("variants", r.variants);
    r.seeds = ab.value("seeds", r.seeds);
    r.runs = j.value("servo_runs", r.runs);
    const json gc = j.value("grad_check", json::object());
    r.grad_samples = gc.value("samples", r.grad_samples);
    r.grad_tolerance = gc.value("tolerance", r.grad_tolerance);
  } catch (const json::exception& e) {
    throw nn::ConfigError(std::string("config: ") + e.what());
  }
  r.scene.validate();
  r.net.validate();
  r.train.validate();
  return r;
}

json snapshot(const Resolved& r, const std::string& command, std::uint64_t seed, const json& args) {
  return {{"command", command},
          {"seed", seed},
          {"args", args},
          {"scene", r.scene},
          {"net", r.net},
          {"train", r.train},
          {"servo", r.servo},
          {"gen_data", {{"n", r.n}, {"val_fraction", r.val_fraction}}},
          {"ablate", {{"variants", r.variants}, {"seeds", r.seeds}}},
          {"servo_runs", r.runs},
          {"grad_check", {{"samples", r.grad_samples}, {"tolerance", r.grad_tolerance}}}};
}

void write_run_json(const std::string& out, const json& snap) {
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "run.json") << snap.dump(2) << '\n';
}

std::vector<std::vector<double>> read_csv_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw nn::ConfigError("cannot read " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    try {
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    } catch (const std::exception&) {
      if (rows.empty() && row.empty()) continue;  // header
      throw nn::ConfigError("non-numeric cell in " + path);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fabric alignment: data generation, training, evaluation and closed-loop servo simulation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out = "out";
  app.add_option("--config", config_path, "JSON config");
  app.add_option("--seed", seed, "Seed");
  app.add_option("--out", out, "Output directory");

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic image-pair dataset");
  std::optional<std::size_t> n_opt;
  gen->add_option("--n", n_opt, "Number of pairs");

  auto* tr = app.add_subcommand("train", "Train a network on a dataset");
  std::string data_dir, test_dir, checkpoint, variant;
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--variant", variant, "Network variant override");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  ev->add_option("--data", data_dir, "Test dataset directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train and compare variants over seeds");
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  ab->add_option("--data", data_dir, "Training dataset directory")->required();
  ab->add_option("--test", test_dir, "Test dataset directory (defaults to the validation split)");
  ab->add_option("--variants", variants, "Variants")->delimiter(',');
  ab->add_option("--seeds", seeds, "Seeds")->delimiter(',');

  auto* sv = app.add_subcommand("servo", "Closed-loop servo runs");
  std::optional<int> runs;
  std::optional<std::uint64_t> held_out;
  std::optional<double> lighting, occluder;
  sv->add_option("--checkpoint", checkpoint, "Network checkpoint (selects the network predictor)");
  sv->add_option("--runs", runs, "Number of randomized runs");
  sv->add_option("--held-out-texture", held_out, "Held-out texture index");
  sv->add_option("--lighting-gain", lighting, "Lighting gain");
  sv->add_option("--occluder-frac", occluder, "Occluder radius as a fraction of image height");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient check of blocks and network");
  std::optional<std::size_t> grad_samples;
  gc->add_option("--samples", grad_samples, "Checked entries per parameter");

  auto* pc = app.add_subcommand("pca", "Two-component PCA of a feature dump");
  std::string features;
  pc->add_option("--features", features, "features.csv from a servo run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    const json cfg_json = config_path.empty() ? json::object() : read_json(config_path);
    Resolved r = resolve(cfg_json);

    if (*gen) {
      if (n_opt) r.n = *n_opt;
      write_run_json(out, snapshot(r, "gen-data", seed, {{"n", r.n}}));
      const auto m = scene::generate_dataset(r.scene, seed, r.n, out, r.val_fraction);
      std::printf("wrote %zu pairs (%zu train, %zu val) to %s\n", m.records.size(), m.train, m.val, out.c_str());
      return kOk;
    }

    if (*tr) {
      if (!variant.empty()) r.net.variant = net::parse_variant(variant);
      r.train.seed = seed;
      write_run_json(out, snapshot(r, "train", seed, {{"data", data_dir}}));
      const train::Dataset data = train::load_dataset(data_dir);
      net::Network n(r.net, seed);
      const auto res = train::train(n, data, r.train, out, [](const train::EpochRecord& e) {
        std::printf("epoch %d lr %.3g train %.5f val %.5f\n", e.epoch, e.lr, e.train_loss, e.val_loss);
        std::fflush(stdout);
      });
      if (!data.val.empty()) {
        json rep = train::evaluate(n, data.val, data.ranges, r.train.alpha, r.train.beta);
        rep["best_epoch"] = res.best_epoch;
        std::ofstream(fs::path(out) / "val_report.json") << rep.dump(2) << '\n';
      }
      std::printf("best epoch %d val %.5f\n", res.best_epoch, res.best_val);
      return kOk;
    }

    if (*ev) {
      write_run_json(out, snapshot(r, "eval", seed, {{"checkpoint", checkpoint}, {"data", data_dir}}));
      const net::Network n = net::load_network(checkpoint);
      const train::Dataset data = train::load_dataset(data_dir);
      if (n.config().width != data.width || n.config().height != data.height)
        throw nn::ConfigError("eval: checkpoint resolution does not match the dataset");
      const json rep = train::evaluate(n, data.all(), data.ranges, r.train.alpha, r.train.beta);
      std::ofstream(fs::path(out) / "report.json") << rep.dump(2) << '\n';
      std::printf("E %.5f std %.5f trans %.4f mm rot %.4f deg latency %.4f s\n", rep["loss"].get<double>(),
                  rep["loss_std"].get<double>(), rep["trans_rmse_mm"].get<double>(), rep["rot_rmse_deg"].get<double>(),
                  rep["latency_s"].get<double>());
      return kOk;
    }

    if (*ab) {
      if (!variants.empty()) r.variants = variants;
      if (!seeds.empty()) r.seeds = seeds;
      write_run_json(out, snapshot(r, "ablate", seed, {{"data", data_dir}, {"test", test_dir}}));
      const train::Dataset data = train::load_dataset(data_dir);
      const std::vector<train::Sample> test = test_dir.empty() ? data.val : train::load_dataset(test_dir).all();
      const auto rows = train::ablate(data, test, r.net, r.variants, r.seeds, r.train, out, [](const auto& row) {
        std::printf("%s seed %llu: %s E %.5f\n", row.variant.c_str(), static_cast<unsigned long long>(row.seed),
                    row.ok ? "ok" : row.error.c_str(), row.report.loss);
        std::fflush(stdout);
      });
      train::write_ablation_csv((fs::path(out) / "ablation.csv").string(), rows);
      json means = json::object();
      for (const auto& [v, e] : train::mean_loss_by_variant(rows)) means[v] = e;
      std::ofstream(fs::path(out) / "ablation_summary.json") << json{{"mean_loss", means}}.dump(2) << '\n';
      return kOk;
    }

    if (*sv) {
      if (!checkpoint.empty()) {
        r.servo.predictor = "network";
        r.servo.checkpoint = checkpoint;
      }
      if (runs) r.runs = *runs;
      if (held_out) r.servo.held_out_texture = *held_out;
      if (lighting) r.servo.lighting_gain = *lighting;
      if (occluder) r.servo.occluder_radius_frac = *occluder;
      r.servo.validate();
      write_run_json(out, snapshot(r, "servo", seed, json::object()));
      const plant::ServoConfig cfg = r.servo;
      const auto rows = plant::run_servo_batch(cfg, seed, r.runs,
                                               [&](std::uint64_t s) { return plant::make_predictor(cfg, s); }, out);
      plant::write_servo_summary_csv((fs::path(out) / "servo_summary.csv").string(), rows);
      int converged = 0, diverged = 0;
      for (const auto& row : rows) {
        converged += row.converged ? 1 : 0;
        diverged += row.diverged ? 1 : 0;
      }
      std::printf("%d/%zu converged, %d diverged\n", converged, rows.size(), diverged);
      return diverged > 0 ? kDiverged : kOk;
    }

    if (*gc) {
      if (grad_samples) r.grad_samples = *grad_samples;
      write_run_json(out, snapshot(r, "grad-check", seed, json::object()));
      const auto rows = net::gradient_check_suite(seed, r.grad_samples);
      std::FILE* f = std::fopen((fs::path(out) / "gradcheck.csv").c_str(), "w");
      if (f == nullptr) throw std::runtime_error("cannot write gradcheck.csv");
      std::fprintf(f, "case,max_rel_error,checked,seconds,pass\n");
      bool ok = true;
      for (const auto& row : rows) {
        const bool pass = row.max_rel_error < r.grad_tolerance;
        ok = ok && pass;
        std::fprintf(f, "%s,%.6e,%zu,%.3f,%d\n", row.name.c_str(), row.max_rel_error, row.checked, row.seconds,
                     pass ? 1 : 0);
        std::printf("%-24s %.3e %s\n", row.name.c_str(), row.max_rel_error, pass ? "ok" : "FAIL");
      }
      std::fclose(f);
      return ok ? kOk : kFailed;
    }

    if (*pc) {
      write_run_json(out, snapshot(r, "pca", seed, {{"features", features}}));
      const auto rows = read_csv_rows(features);
      const plant::PcaResult p = plant::pca_features(rows);
      std::FILE* f = std::fopen((fs::path(out) / "pca.csv").c_str(), "w");
      if (f == nullptr) throw std::runtime_error("cannot write pca.csv");
      std::fprintf(f, "step,pc1,pc2\n");
      for (std::size_t i = 0; i < p.projection.size(); ++i)
        std::fprintf(f, "%zu,%.17g,%.17g\n", i, p.projection[i][0], p.projection[i][1]);
      std::fclose(f);
      auto dist = [&](std::size_t a, std::size_t b) {
        return std::hypot(p.projection[a][0] - p.projection[b][0], p.projection[a][1] - p.projection[b][1]);
      };
      std::vector<double> step, random;
      for (std::size_t i = 1; i < p.projection.size(); ++i) step.push_back(dist(i - 1, i));
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<std::size_t> u(0, p.projection.size() - 1);
      for (int k = 0; k < 1000; ++k) random.push_back(dist(u(rng), u(rng)));
      const json summary = {{"explained", p.explained},
                            {"total_variance", p.total_variance},
                            {"zero_variance", p.zero_variance},
                            {"median_step_distance", median(step)},
                            {"median_random_distance", median(random)}};
      std::ofstream(fs::path(out) / "pca.json") << summary.dump(2) << '\n';
      std::printf("explained %.4f %.4f\n", p.explained[0], p.explained[1]);
      return kOk;
    }
  } catch (const nn::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const train::DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailed;
  }
  return kFailed;
}
