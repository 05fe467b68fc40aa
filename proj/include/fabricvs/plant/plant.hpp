#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fabricvs/control/impedance.hpp"
#include "fabricvs/control/servo.hpp"
#include "fabricvs/image.hpp"
#include "fabricvs/scene/scene.hpp"
#include "json.hpp"

namespace fabricvs::net {
class Network;
}

namespace fabricvs::plant {

using control::Wrench6;

struct PlantParams {
  double z_table = 0.0;       // mm
  double rest_length = 100.0;  // grasp-to-grasp, mm; servo runs use twice the scene grasp offset
  double k_f = 1.5;           // fabric, N/mm
  double k_c = 5.0;           // table contact per effector, N/mm
  double tau = 0.05;          // effector tracking lag, s (0 = ideal tracking)
};

struct PlantState {
  Pose6d e1;
  Pose6d e2;
  PlantParams params;

  /// Fabric A frame: effector midpoint, x toward e2, z toward world z.
  [[nodiscard]] Pose6d fabric() const;
  [[nodiscard]] double separation() const { return (e2.t - e1.t).norm(); }
};

struct PlantOutput {
  PlantState state;
  Wrench6 f1 = Wrench6::Zero();  // effector 1 frame
  Wrench6 f2 = Wrench6::Zero();
};

/// Wrenches the fabric and the table exert on each effector at `state`.
std::pair<Wrench6, Wrench6> plant_wrenches(const PlantState& state);

/// First-order lag toward the desired poses, then contact and tension wrenches.
PlantOutput plant_step(const PlantState& state, const std::pair<Pose6d, Pose6d>& desired, double dt);

/// Scene with fabric A at the plant's fabric pose and occluders at the effectors.
scene::SceneState observed_scene(const PlantState& state, const scene::SceneState& base, double occluder_radius_mm);

/// Renders observed_scene with the given noise seed.
GrayImage observe(const PlantState& state, const scene::SceneState& base, double occluder_radius_mm,
                  const GrayImage& texture, scene::Resolution res, std::uint64_t noise_seed);

/// Camera-frame pose difference estimate from (desired, current) images.
struct Predictor {
  std::function<Vec6(const GrayImage& des, const GrayImage& cur, const Vec6& true_diff)> predict;
  // Optional GAP feature dump for PCA.
  std::function<std::vector<double>(const GrayImage& des, const GrayImage& cur)> features;
};

/// True difference plus N(0, sigma) noise per axis (sigma in mm / rad), optionally clipped to +-saturation.
Predictor oracle_predictor(double sigma_mm, double sigma_rad, std::uint64_t seed, double saturation = 0.0);
/// Network output denormalized through `ranges`.
Predictor network_predictor(const net::Network& net, const LabelRanges& ranges);

struct ServoConfig {
  double period = 0.1;  // vision cycle, s
  double dt = 0.001;    // inner loop, s
  int max_cycles = 250;
  control::Gains gains;
  control::ImpedanceParams external = control::default_external();
  control::ImpedanceParams internal = control::default_internal();
  PlantParams plant;
  double start_height = 2.0;  // effector height above the table at start, mm

  double converge_mm = 0.5;
  double converge_rad = 0.00174533;  // 0.1 deg
  bool stop_on_convergence = false;
  double divergence_factor = 5.0;
  int divergence_cycles = 10;

  // Rig and appearance; the camera, fabric B, lighting and texture are drawn with sample_scene(seed).
  scene::SceneConfig scene;
  bool nominal_camera = false;  // drop camera and fabric B jitter
  std::optional<double> lighting_gain;
  std::optional<double> occluder_radius_frac;
  std::optional<std::uint64_t> held_out_texture;  // index into the held-out family
  // Initial fabric A offset (camera-frame tx, ty [mm], rz [rad]); drawn from initial_range when absent.
  std::optional<std::array<double, 3>> initial_offset;
  std::array<double, 3> initial_range{15.0, 15.0, 0.1396263};  // 8 deg
  double initial_min_mm = 5.0;  // lower bound on the drawn translation magnitude

  // Predictor.
  std::string predictor = "oracle";  // or "network"
  double oracle_sigma_mm = 0.0;
  double oracle_sigma_rad = 0.0;
  double oracle_saturation = 0.0;
  std::string checkpoint;

  bool log_wrench = true;
  bool dump_features = false;

  /// Throws nn::ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const ServoConfig& c);
void from_json(const nlohmann::json& j, ServoConfig& c);

struct CycleRecord {
  double time = 0.0;
  Vec6 error{};  // true camera-frame difference
  Vec6 predicted{};
  double trans_error = 0.0;  // |(tx, ty)| mm
  double rot_error = 0.0;    // |rz| rad
  double ssd = 0.0;
  bool contact = false;
  double contact_force = 0.0;  // total upward table force, N
  double tension = 0.0;        // N
  double separation = 0.0;     // mm
  Pose6d reference;            // object reference after this cycle's update
};

struct RunMetrics {
  std::vector<CycleRecord> cycles;
  int convergence_step = -1;
  bool converged = false;  // final error under both thresholds
  bool diverged = false;
  double initial_ssd = 0.0;
  double final_ssd = 0.0;
  std::vector<std::vector<double>> features;  // per cycle when dumped

  [[nodiscard]] const CycleRecord& final() const { return cycles.back(); }
  [[nodiscard]] nlohmann::json summary() const;
};

/// Closed loop: observe, predict, servo reference, impedance inner loop, plant.
/// With a non-empty out_dir writes trajectory.csv, wrench.csv, metrics.csv,
/// summary.json and the desired / first / last images.
RunMetrics run_servo_loop(const ServoConfig& cfg, std::uint64_t seed, const Predictor& predictor,
                          const std::string& out_dir = "");

/// Builds the predictor named in the config (loads the checkpoint for "network").
Predictor make_predictor(const ServoConfig& cfg, std::uint64_t seed);

struct ServoRunSummary {
  std::uint64_t seed = 0;
  bool converged = false;
  bool diverged = false;
  int convergence_step = -1;
  double final_trans_mm = 0.0;
  double final_rot_rad = 0.0;
  double initial_ssd = 0.0;
  double final_ssd = 0.0;
  double contact_force = 0.0;
  double tension = 0.0;
};

ServoRunSummary summarize(const RunMetrics& m, std::uint64_t seed);

/// Runs seeds seed, seed + 1, ... with a fresh predictor per run; run i logs to out_dir/run_<i>.
std::vector<ServoRunSummary> run_servo_batch(const ServoConfig& cfg, std::uint64_t seed, int runs,
                                             const std::function<Predictor(std::uint64_t)>& make,
                                             const std::string& out_dir = "");

void write_servo_summary_csv(const std::string& path, const std::vector<ServoRunSummary>& rows);

struct PcaResult {
  std::vector<std::array<double, 2>> projection;
  std::array<double, 2> explained{};  // fraction of total variance per component
  double total_variance = 0.0;
  bool zero_variance = false;
};

/// Top-two principal components of row vectors. Throws std::invalid_argument for fewer than 3 rows.
PcaResult pca_features(const std::vector<std::vector<double>>& rows);

}  // namespace fabricvs::plant
