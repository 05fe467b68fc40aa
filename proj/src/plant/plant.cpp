#include "fabricvs/plant/plant.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>

#include "fabricvs/net/network.hpp"
#include "fabricvs/nn/module.hpp"

namespace fabricvs::plant {

using control::FrameGraph;
using nn::ConfigError;

Pose6d PlantState::fabric() const { return Pose6d::from_matrix(control::object_frame(e1.t, e2.t)); }

namespace {

Pose6d relax(const Pose6d& cur, const Pose6d& des, double alpha) {
  if (alpha >= 1.0) return des;
  const Vec3d t = cur.t + alpha * (des.t - cur.t);
  const Mat3d R = cur.rotation();
  const Eigen::AngleAxisd delta(des.rotation() * R.transpose());
  const Mat3d step = Eigen::AngleAxisd(alpha * delta.angle(), delta.axis()).toRotationMatrix();
  return {t, matrix_to_euler<double>(step * R)};
}

Vector6d to_vector(const Vec6& a) {
  Vector6d v;
  for (int i = 0; i < 6; ++i) v[i] = a[i];
  return v;
}

}  // namespace

std::pair<Wrench6, Wrench6> plant_wrenches(const PlantState& s) {
  const PlantParams& p = s.params;
  const Vec3d d = s.e2.t - s.e1.t;
  const double sep = d.norm();
  const double tension = sep > 0.0 ? p.k_f * std::max(0.0, sep - p.rest_length) : 0.0;
  Vec3d f1 = Vec3d::Zero(), f2 = Vec3d::Zero();
  if (tension > 0.0) {
    f1 = tension * d / sep;
    f2 = -f1;
  }
  f1.z() += p.k_c * std::max(0.0, p.z_table - s.e1.t.z());
  f2.z() += p.k_c * std::max(0.0, p.z_table - s.e2.t.z());
  Wrench6 w1 = Wrench6::Zero(), w2 = Wrench6::Zero();
  w1.head<3>() = s.e1.rotation().transpose() * f1;
  w2.head<3>() = s.e2.rotation().transpose() * f2;
  return {w1, w2};
}

PlantOutput plant_step(const PlantState& state, const std::pair<Pose6d, Pose6d>& desired, double dt) {
  if (!(dt > 0.0)) throw ConfigError("plant: dt must be positive");
  const double alpha = state.params.tau > 0.0 ? 1.0 - std::exp(-dt / state.params.tau) : 1.0;
  PlantOutput out;
  out.state = state;
  out.state.e1 = relax(state.e1, desired.first, alpha);
  out.state.e2 = relax(state.e2, desired.second, alpha);
  std::tie(out.f1, out.f2) = plant_wrenches(out.state);
  return out;
}

scene::SceneState observed_scene(const PlantState& state, const scene::SceneState& base, double occluder_radius_mm) {
  scene::SceneState s = base;
  s.fabric_a = state.fabric();
  s.occluders = {{state.e1.t, occluder_radius_mm}, {state.e2.t, occluder_radius_mm}};
  return s;
}

GrayImage observe(const PlantState& state, const scene::SceneState& base, double occluder_radius_mm,
                  const GrayImage& texture, scene::Resolution res, std::uint64_t noise_seed) {
  scene::SceneState s = observed_scene(state, base, occluder_radius_mm);
  s.noise_seed = noise_seed;
  return scene::render(s, texture, res);
}

// ---- predictors -----------------------------------------------------------

Predictor oracle_predictor(double sigma_mm, double sigma_rad, std::uint64_t seed, double saturation) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  Predictor p;
  p.predict = [=](const GrayImage&, const GrayImage&, const Vec6& truth) {
    Vec6 out = truth;
    for (int i = 0; i < 6; ++i) {
      const double sigma = i < 3 ? sigma_mm : sigma_rad;
      if (sigma > 0.0) out[i] += std::normal_distribution<double>(0.0, sigma)(*rng);
      if (saturation > 0.0) out[i] = std::clamp(out[i], -saturation, saturation);
    }
    return out;
  };
  return p;
}

Predictor network_predictor(const net::Network& net, const LabelRanges& ranges) {
  Predictor p;
  p.predict = [&net, ranges](const GrayImage& des, const GrayImage& cur, const Vec6&) {
    return ranges.denormalize(net.predict(des, cur));
  };
  p.features = [&net](const GrayImage& des, const GrayImage& cur) { return net.features(des, cur); };
  return p;
}

Predictor make_predictor(const ServoConfig& cfg, std::uint64_t seed) {
  if (cfg.predictor == "oracle") {
    return oracle_predictor(cfg.oracle_sigma_mm, cfg.oracle_sigma_rad, scene::mix_seed(seed, 0x0AC1E),
                            cfg.oracle_saturation);
  }
  if (cfg.predictor == "network") {
    if (cfg.checkpoint.empty()) throw ConfigError("servo: network predictor needs a checkpoint");
    auto net = std::make_shared<net::Network>(net::load_network(cfg.checkpoint));
    Predictor inner = network_predictor(*net, cfg.scene.diff);
    Predictor p;
    p.predict = [net, inner](const GrayImage& d, const GrayImage& c, const Vec6& t) { return inner.predict(d, c, t); };
    p.features = [net, inner](const GrayImage& d, const GrayImage& c) { return inner.features(d, c); };
    return p;
  }
  throw ConfigError("servo: unknown predictor '" + cfg.predictor + "'");
}

// ---- config ---------------------------------------------------------------

void ServoConfig::validate() const {
  if (!(period > 0.0) || !(dt > 0.0) || dt > period) throw ConfigError("servo: need 0 < dt <= period");
  if (std::abs(period / dt - std::round(period / dt)) > 1e-9) throw ConfigError("servo: period must be a multiple of dt");
  if (max_cycles < 1) throw ConfigError("servo: max_cycles must be positive");
  try {
    gains.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("servo: ") + e.what());
  }
  external.validate();
  internal.validate();
  control::validate_axis_partition(gains, external, internal);
  if (plant.tau < 0.0 || plant.k_f < 0.0 || plant.k_c < 0.0) {
    throw ConfigError("servo: invalid plant parameters");
  }
  if (lighting_gain && *lighting_gain <= 0.0) throw ConfigError("servo: lighting gain must be positive");
  if (occluder_radius_frac && *occluder_radius_frac < 0.0) throw ConfigError("servo: negative occluder radius");
  if (predictor != "oracle" && predictor != "network") throw ConfigError("servo: unknown predictor '" + predictor + "'");
  for (double r : initial_range) {
    if (r < 0.0) throw ConfigError("servo: negative initial range");
  }
  if (initial_min_mm > std::hypot(initial_range[0], initial_range[1])) {
    throw ConfigError("servo: initial_min_mm exceeds the initial range");
  }
  scene.validate();
}

namespace {

nlohmann::json impedance_json(const control::ImpedanceParams& p) {
  auto vec = [](const Vector6d& v) { return std::vector<double>(v.data(), v.data() + 6); };
  return {{"M", vec(p.M)}, {"D", vec(p.D)}, {"K", vec(p.K)}, {"S", p.S}, {"F_desired", vec(p.F_desired)}};
}

void read_impedance(const nlohmann::json& j, control::ImpedanceParams& p) {
  auto vec = [&](const char* key, Vector6d& v) {
    if (!j.contains(key)) return;
    const auto a = j.at(key).get<std::array<double, 6>>();
    for (int i = 0; i < 6; ++i) v[i] = a[i];
  };
  vec("M", p.M);
  vec("D", p.D);
  vec("K", p.K);
  vec("F_desired", p.F_desired);
  if (j.contains("S")) p.S = j.at("S").get<std::array<bool, 6>>();
}

}  // namespace

void to_json(nlohmann::json& j, const ServoConfig& c) {
  j = {{"period", c.period},
       {"dt", c.dt},
       {"max_cycles", c.max_cycles},
       {"gains", c.gains.lambda},
       {"external", impedance_json(c.external)},
       {"internal", impedance_json(c.internal)},
       {"plant",
        {{"z_table", c.plant.z_table},
         {"k_f", c.plant.k_f},
         {"k_c", c.plant.k_c},
         {"tau", c.plant.tau}}},
       {"start_height", c.start_height},
       {"converge_mm", c.converge_mm},
       {"converge_rad", c.converge_rad},
       {"stop_on_convergence", c.stop_on_convergence},
       {"divergence_factor", c.divergence_factor},
       {"divergence_cycles", c.divergence_cycles},
       {"scene", c.scene},
       {"nominal_camera", c.nominal_camera},
       {"lighting_gain", c.lighting_gain ? nlohmann::json(*c.lighting_gain) : nlohmann::json(nullptr)},
       {"occluder_radius_frac",
        c.occluder_radius_frac ? nlohmann::json(*c.occluder_radius_frac) : nlohmann::json(nullptr)},
       {"held_out_texture", c.held_out_texture ? nlohmann::json(*c.held_out_texture) : nlohmann::json(nullptr)},
       {"initial_offset", c.initial_offset ? nlohmann::json(*c.initial_offset) : nlohmann::json(nullptr)},
       {"initial_range", c.initial_range},
       {"initial_min_mm", c.initial_min_mm},
       {"predictor", c.predictor},
       {"oracle_sigma_mm", c.oracle_sigma_mm},
       {"oracle_sigma_rad", c.oracle_sigma_rad},
       {"oracle_saturation", c.oracle_saturation},
       {"checkpoint", c.checkpoint},
       {"log_wrench", c.log_wrench},
       {"dump_features", c.dump_features}};
}

void from_json(const nlohmann::json& j, ServoConfig& c) {
  try {
    c.period = j.value("period", c.period);
    c.dt = j.value("dt", c.dt);
    c.max_cycles = j.value("max_cycles", c.max_cycles);
    if (j.contains("gains")) c.gains.lambda = j.at("gains").get<std::array<double, 6>>();
    if (j.contains("external")) read_impedance(j.at("external"), c.external);
    if (j.contains("internal")) read_impedance(j.at("internal"), c.internal);
    if (j.contains("plant")) {
      const auto& p = j.at("plant");
      c.plant.z_table = p.value("z_table", c.plant.z_table);
      c.plant.k_f = p.value("k_f", c.plant.k_f);
      c.plant.k_c = p.value("k_c", c.plant.k_c);
      c.plant.tau = p.value("tau", c.plant.tau);
    }
    c.start_height = j.value("start_height", c.start_height);
    c.converge_mm = j.value("converge_mm", c.converge_mm);
    c.converge_rad = j.value("converge_rad", c.converge_rad);
    c.stop_on_convergence = j.value("stop_on_convergence", c.stop_on_convergence);
    c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
    c.divergence_cycles = j.value("divergence_cycles", c.divergence_cycles);
    if (j.contains("scene")) c.scene = j.at("scene").get<scene::SceneConfig>();
    c.nominal_camera = j.value("nominal_camera", c.nominal_camera);
    auto opt = [&](const char* key, auto& field) {
      if (!j.contains(key)) return;
      if (j.at(key).is_null()) {
        field.reset();
      } else {
        field = j.at(key).get<typename std::remove_reference_t<decltype(field)>::value_type>();
      }
    };
    opt("lighting_gain", c.lighting_gain);
    opt("occluder_radius_frac", c.occluder_radius_frac);
    opt("held_out_texture", c.held_out_texture);
    opt("initial_offset", c.initial_offset);
    if (j.contains("initial_range")) c.initial_range = j.at("initial_range").get<std::array<double, 3>>();
    c.initial_min_mm = j.value("initial_min_mm", c.initial_min_mm);
    c.predictor = j.value("predictor", c.predictor);
    c.oracle_sigma_mm = j.value("oracle_sigma_mm", c.oracle_sigma_mm);
    c.oracle_sigma_rad = j.value("oracle_sigma_rad", c.oracle_sigma_rad);
    c.oracle_saturation = j.value("oracle_saturation", c.oracle_saturation);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.log_wrench = j.value("log_wrench", c.log_wrench);
    c.dump_features = j.value("dump_features", c.dump_features);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("servo config: ") + e.what());
  }
  c.validate();
}

// ---- closed loop ----------------------------------------------------------

nlohmann::json RunMetrics::summary() const {
  const auto& f = final();
  return {{"cycles", cycles.size()},
          {"convergence_step", convergence_step},
          {"converged", converged},
          {"diverged", diverged},
          {"initial_ssd", initial_ssd},
          {"final_ssd", final_ssd},
          {"final_error", f.error},
          {"final_trans_error_mm", f.trans_error},
          {"final_rot_error_rad", f.rot_error},
          {"final_contact_force", f.contact_force},
          {"final_tension", f.tension},
          {"final_separation", f.separation}};
}

namespace {

class Csv {
 public:
  explicit Csv(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  Csv& header(const std::string& h) {
    out_ << h << '\n';
    return *this;
  }
  Csv& row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::snprintf(buf_, sizeof buf_, "%.17g", values[i]);
      out_ << (i ? "," : "") << buf_;
    }
    out_ << '\n';
    return *this;
  }

 private:
  std::ofstream out_;
  char buf_[40];
};

std::string columns(const std::string& prefix, int n = 6) {
  static const char* axes[] = {"tx", "ty", "tz", "rx", "ry", "rz"};
  std::string s;
  for (int i = 0; i < n; ++i) s += "," + prefix + "_" + axes[i];
  return s;
}

void append(std::vector<double>& v, const Vector6d& x) { v.insert(v.end(), x.data(), x.data() + 6); }
void append(std::vector<double>& v, const Vec6& x) { v.insert(v.end(), x.begin(), x.end()); }

}  // namespace

RunMetrics run_servo_loop(const ServoConfig& cfg, std::uint64_t seed, const Predictor& predictor,
                          const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();

  // Rig and appearance.
  scene::SceneConfig scfg = cfg.scene;
  if (cfg.nominal_camera) {
    scfg.camera_jitter_mm = scfg.camera_jitter_rad = 0.0;
    scfg.fabric_b_jitter_mm = scfg.fabric_b_jitter_rad = 0.0;
  }
  const scene::ScenePair pair = scene::sample_scene(seed, scfg);
  scene::SceneState base = pair.desired;
  if (cfg.lighting_gain) base.lighting.gain = *cfg.lighting_gain;
  scene::TextureSpec tspec = cfg.held_out_texture ? scene::held_out_texture(*cfg.held_out_texture, scfg) : pair.texture;
  const GrayImage texture = scene::load_texture(tspec);
  const double frac = cfg.occluder_radius_frac.value_or(scfg.occluder_radius_frac.lo);
  const double radius_mm = scfg.occluders ? frac * scfg.resolution.height * scfg.camera_height / scfg.focal : 0.0;
  const GrayImage desired = scene::render(base, texture, scfg.resolution);

  // Initial fabric A placement.
  std::array<double, 3> offset{};
  if (cfg.initial_offset) {
    offset = *cfg.initial_offset;
  } else {
    std::mt19937_64 rng(scene::mix_seed(seed, 0x1417));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    do {
      offset = {u(rng) * cfg.initial_range[0], u(rng) * cfg.initial_range[1], u(rng) * cfg.initial_range[2]};
    } while (std::hypot(offset[0], offset[1]) < cfg.initial_min_mm);
  }
  scene::SceneState start = base;
  scene::place_fabric_a(start, {offset[0], offset[1], 0.0, 0.0, 0.0, offset[2]});
  const Pose6d a0 = *start.fabric_a;
  const Vec3d axis = a0.rotation().col(0);
  PlantState plant;
  plant.params = cfg.plant;
  plant.params.rest_length = 2.0 * scfg.grasp_offset_mm;
  Vec3d p1 = a0.t - scfg.grasp_offset_mm * axis, p2 = a0.t + scfg.grasp_offset_mm * axis;
  p1.z() = p2.z() = cfg.plant.z_table + cfg.start_height;
  const Mat4d obj0 = control::object_frame(p1, p2);
  const Pose6d obj_pose = Pose6d::from_matrix(obj0);
  plant.e1 = Pose6d(p1, obj_pose.r);
  plant.e2 = Pose6d(p2, obj_pose.r);
  auto [f1, f2] = plant_wrenches(plant);

  FrameGraph ref_frames = FrameGraph::symmetric(scfg.grasp_offset_mm);
  ref_frames.world_camera = base.camera.pose.matrix();
  Pose6d q_ref = obj_pose;
  control::VirtualState ext, in;

  // Logs.
  std::unique_ptr<Csv> traj, wrench, metrics;
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir + ": " + ec.message());
    traj = std::make_unique<Csv>(fs::path(out_dir) / "trajectory.csv");
    traj->header("time" + columns("q_obj_ref") + columns("pred_diff") + columns("true_diff"));
    if (cfg.log_wrench) {
      wrench = std::make_unique<Csv>(fs::path(out_dir) / "wrench.csv");
      wrench->header("time" + columns("F_ext") + columns("F_int") + columns("dq_ext") + columns("dq_int"));
    }
    metrics = std::make_unique<Csv>(fs::path(out_dir) / "metrics.csv");
    metrics->header("cycle,time,ssd,trans_error,rot_error,contact,contact_force,tension,separation" +
                    columns("err"));
    write_pgm((fs::path(out_dir) / "desired.pgm").string(), desired);
  }

  RunMetrics m;
  const int inner = static_cast<int>(std::lround(cfg.period / cfg.dt));
  int above = 0;
  double initial_trans = 0.0;
  GrayImage last;
  for (int k = 0; k <= cfg.max_cycles; ++k) {
    const double time = k * cfg.period;
    const scene::SceneState seen = observed_scene(plant, base, radius_mm);
    const GrayImage img = observe(plant, base, radius_mm, texture, scfg.resolution, scene::mix_seed(seed, 1000 + k));
    CycleRecord rec;
    rec.time = time;
    rec.error = scene::camera_frame_difference(seen);
    rec.trans_error = std::hypot(rec.error[0], rec.error[1]);
    rec.rot_error = std::abs(rec.error[5]);
    rec.ssd = ssd(img, desired);
    rec.contact = std::min(plant.e1.t.z(), plant.e2.t.z()) < cfg.plant.z_table;
    rec.contact_force = cfg.plant.k_c * (std::max(0.0, cfg.plant.z_table - plant.e1.t.z()) +
                                          std::max(0.0, cfg.plant.z_table - plant.e2.t.z()));
    rec.separation = plant.separation();
    rec.tension = cfg.plant.k_f * std::max(0.0, rec.separation - plant.params.rest_length);
    if (k == 0) {
      m.initial_ssd = rec.ssd;
      initial_trans = rec.trans_error;
      if (!out_dir.empty()) write_pgm((fs::path(out_dir) / "initial.pgm").string(), img);
    }
    const bool inside = rec.trans_error < cfg.converge_mm && rec.rot_error < cfg.converge_rad;
    if (inside && m.convergence_step < 0) m.convergence_step = k;
    above = rec.trans_error > cfg.divergence_factor * initial_trans ? above + 1 : 0;
    if (above >= cfg.divergence_cycles) m.diverged = true;
    last = img;

    const bool stop = k == cfg.max_cycles || m.diverged || (cfg.stop_on_convergence && inside);
    if (!stop) {
      rec.predicted = predictor.predict(desired, img, rec.error);
      if (cfg.dump_features && predictor.features) m.features.push_back(predictor.features(desired, img));
      const Vector6d v = control::twist_camera_to_world(control::control_law(to_vector(rec.predicted), cfg.gains),
                                                        ref_frames);
      q_ref = control::integrate_reference(q_ref, v, cfg.period);
    }
    rec.reference = q_ref;
    if (metrics) {
      std::vector<double> row{double(k), time, rec.ssd, rec.trans_error, rec.rot_error, rec.contact ? 1.0 : 0.0,
                              rec.contact_force, rec.tension, rec.separation};
      append(row, rec.error);
      metrics->row(row);
    }
    if (traj && !stop) {
      std::vector<double> row{time};
      append(row, q_ref.vector());
      append(row, rec.predicted);
      append(row, rec.error);
      traj->row(row);
    }
    m.cycles.push_back(rec);
    if (stop) break;

    // Impedance inner loop until the next image.
    ref_frames.world_object = q_ref.matrix();
    const auto refs = control::object_to_effector_refs(q_ref, ref_frames);
    for (int s = 0; s < inner; ++s) {
      const FrameGraph actual = FrameGraph::from_effectors(plant.e1.matrix(), plant.e2.matrix());
      const Wrench6 F_ext = control::external_wrench(f1, f2, actual);
      const Wrench6 F_int = control::internal_wrench(f1, f2, actual);
      ext = control::impedance_step(ext, cfg.external, F_ext, cfg.dt);
      in = control::impedance_step(in, cfg.internal, F_int, cfg.dt);
      const auto d = control::distribute_displacement(ext.dq, in.dq, ref_frames);
      const std::pair<Pose6d, Pose6d> target{control::compose_desired(refs.first, d[0].ext, d[0].in),
                                             control::compose_desired(refs.second, d[1].ext, d[1].in)};
      PlantOutput o = plant_step(plant, target, cfg.dt);
      plant = o.state;
      f1 = o.f1;
      f2 = o.f2;
      if (wrench) {
        std::vector<double> row{time + (s + 1) * cfg.dt};
        append(row, F_ext);
        append(row, F_int);
        append(row, ext.dq);
        append(row, in.dq);
        wrench->row(row);
      }
    }
  }
  const auto& f = m.final();
  m.final_ssd = f.ssd;
  m.converged = !m.diverged && f.trans_error < cfg.converge_mm && f.rot_error < cfg.converge_rad;
  if (!out_dir.empty()) {
    write_pgm((fs::path(out_dir) / "final.pgm").string(), last);
    std::ofstream(fs::path(out_dir) / "summary.json") << m.summary().dump(2) << '\n';
    if (!m.features.empty()) {
      Csv feats(fs::path(out_dir) / "features.csv");
      for (const auto& row : m.features) feats.row(row);
    }
  }
  return m;
}

ServoRunSummary summarize(const RunMetrics& m, std::uint64_t seed) {
  const auto& f = m.final();
  ServoRunSummary r;
  r.seed = seed;
  r.converged = m.converged;
  r.diverged = m.diverged;
  r.convergence_step = m.convergence_step;
  r.final_trans_mm = f.trans_error;
  r.final_rot_rad = f.rot_error;
  r.initial_ssd = m.initial_ssd;
  r.final_ssd = m.final_ssd;
  r.contact_force = f.contact_force;
  r.tension = f.tension;
  return r;
}

std::vector<ServoRunSummary> run_servo_batch(const ServoConfig& cfg, std::uint64_t seed, int runs,
                                             const std::function<Predictor(std::uint64_t)>& make,
                                             const std::string& out_dir) {
  if (runs < 1) throw ConfigError("servo: runs must be positive");
  std::vector<ServoRunSummary> rows;
  for (int i = 0; i < runs; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof name, "run_%03d", i);
    const std::string dir = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / name).string();
    rows.push_back(summarize(run_servo_loop(cfg, s, make(s), dir), s));
  }
  return rows;
}

void write_servo_summary_csv(const std::string& path, const std::vector<ServoRunSummary>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw std::runtime_error("cannot write " + path);
  std::fprintf(f, "seed,converged,diverged,convergence_step,final_trans_mm,final_rot_deg,initial_ssd,final_ssd,"
                  "ssd_ratio,contact_force,tension\n");
  for (const auto& r : rows) {
    std::fprintf(f, "%llu,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.seed),
                 r.converged ? 1 : 0, r.diverged ? 1 : 0, r.convergence_step, r.final_trans_mm,
                 r.final_rot_rad * 180.0 / std::numbers::pi, r.initial_ssd, r.final_ssd,
                 r.initial_ssd > 0.0 ? r.final_ssd / r.initial_ssd : 0.0, r.contact_force, r.tension);
  }
  std::fclose(f);
}

// ---- PCA ------------------------------------------------------------------

PcaResult pca_features(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 3) throw std::invalid_argument("pca: need at least 3 feature vectors");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  if (d == 0) throw std::invalid_argument("pca: empty feature vectors");
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw std::invalid_argument("pca: ragged feature rows");
    X.row(i) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), d);
  }
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd C = X.transpose() * X / static_cast<double>(n - 1);
  PcaResult r;
  r.total_variance = C.trace();
  r.projection.assign(rows.size(), {0.0, 0.0});
  if (!(r.total_variance > 1e-300)) {
    r.zero_variance = true;
    return r;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
  const Eigen::VectorXd vals = eig.eigenvalues();
  for (int c = 0; c < 2 && c < d; ++c) {
    const Eigen::Index col = d - 1 - c;
    Eigen::VectorXd axis = eig.eigenvectors().col(col);
    // Sign convention: largest-magnitude loading positive.
    Eigen::Index imax;
    axis.cwiseAbs().maxCoeff(&imax);
    if (axis[imax] < 0) axis = -axis;
    const Eigen::VectorXd proj = X * axis;
    for (Eigen::Index i = 0; i < n; ++i) r.projection[i][c] = proj[i];
    r.explained[c] = std::max(0.0, vals[col]) / r.total_variance;
  }
  return r;
}

}  // namespace fabricvs::plant
