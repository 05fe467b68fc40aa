#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fabricvs/net/network.hpp"
#include "fabricvs/plant/plant.hpp"

using namespace fabricvs;
using namespace fabricvs::plant;

namespace {

namespace fs = std::filesystem;

constexpr double kDeg = std::numbers::pi / 180.0;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PlantState flat_pair(double sep, double z) {
  PlantState s;
  s.e1 = Pose6d(Vec3d(-sep / 2, 0.0, z), Vec3d::Zero());
  s.e2 = Pose6d(Vec3d(sep / 2, 0.0, z), Vec3d::Zero());
  return s;
}

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("plant equilibrium, Hooke tension and unilateral contact") {
  const PlantState rest = flat_pair(100.0, 5.0);
  const PlantOutput o = plant_step(rest, {rest.e1, rest.e2}, 1e-3);
  CHECK(o.f1.isZero(0.0));
  CHECK(o.f2.isZero(0.0));
  CHECK(o.state.e1.t == rest.e1.t);
  CHECK(o.state.e2.t == rest.e2.t);

  const auto [t1, t2] = plant_wrenches(flat_pair(102.0, 5.0));
  CHECK(t1[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(t2[0] == doctest::Approx(-3.0).epsilon(1e-12));
  CHECK((t1 + t2).isZero(1e-12));

  const auto [h1, h2] = plant_wrenches(flat_pair(100.0, 0.5));
  CHECK(h1[2] == 0.0);
  CHECK(h2[2] == 0.0);
  const auto [c1, c2] = plant_wrenches(flat_pair(100.0, -0.2));
  CHECK(c1[2] == doctest::Approx(1.0));
  CHECK(c2[2] == doctest::Approx(1.0));

  // lag: one step moves alpha of the way
  PlantState lag = rest;
  const Pose6d goal(Vec3d(-50.0 + 10.0, 0.0, 5.0), Vec3d::Zero());
  const PlantOutput moved = plant_step(lag, {goal, rest.e2}, 1e-3);
  CHECK(moved.state.e1.t.x() == doctest::Approx(-50.0 + 10.0 * (1.0 - std::exp(-1e-3 / 0.05))));
  CHECK_THROWS_AS(plant_step(lag, {goal, rest.e2}, 0.0), nn::ConfigError);
}

TEST_CASE("observation is a masked identity when aligned and deterministic") {
  scene::SceneConfig sc;
  const scene::ScenePair pair = scene::sample_scene(21, sc);
  const GrayImage tex = scene::load_texture(pair.texture);
  scene::SceneState base = pair.desired;
  base.occluders.clear();
  const GrayImage desired = scene::render(base, tex, sc.resolution);

  const Pose6d a = base.fabric_a_target();
  const Vec3d axis = a.rotation().col(0);
  PlantState s;
  s.e1 = Pose6d(a.t - sc.grasp_offset_mm * axis, a.r);
  s.e2 = Pose6d(a.t + sc.grasp_offset_mm * axis, a.r);
  // the plant frame rebuilds fabric A from the grasp points
  const Vec6 diff = scene::camera_frame_difference(observed_scene(s, base, 6.0));
  for (double d : diff) CHECK(std::abs(d) < 1e-9);

  const GrayImage img = observe(s, base, 6.0, tex, sc.resolution, base.noise_seed);
  const scene::SceneState seen = observed_scene(s, base, 6.0);
  scene::SceneState no_occ = seen;
  no_occ.occluders.clear();
  const GrayImage clean = scene::render(no_occ, tex, sc.resolution);
  std::size_t masked = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    if (img.data[i] != clean.data[i]) {
      ++masked;
    } else {
      worst = std::max(worst, std::abs(img.data[i] - desired.data[i]));
    }
  }
  CHECK(masked > 0);
  CHECK(masked < img.data.size() / 20);
  CHECK(worst < 1e-9);
  CHECK(ssd(img, desired) > 0.0);

  const GrayImage again = observe(s, base, 6.0, tex, sc.resolution, base.noise_seed);
  CHECK(again.data == img.data);
}

TEST_CASE("oracle servo contracts by 1 - lambda T before contact") {
  ServoConfig c;
  c.nominal_camera = true;
  c.plant.tau = 0.0;
  c.initial_offset = std::array<double, 3>{20.0, 20.0, 10.0 * kDeg};
  c.max_cycles = 60;
  const RunMetrics m = run_servo_loop(c, 5, oracle_predictor(0.0, 0.0, 1));
  int checked = 0;
  for (std::size_t k = 1; k < m.cycles.size(); ++k) {
    if (m.cycles[k].contact || m.cycles[k - 1].contact) break;
    CHECK(m.cycles[k].trans_error / m.cycles[k - 1].trans_error == doctest::Approx(0.97).epsilon(1e-6));
    ++checked;
  }
  CHECK(checked >= 5);
}

TEST_CASE("oracle servo converges and regulates force and tension") {
  ServoConfig c;
  c.initial_offset = std::array<double, 3>{20.0, 20.0, 10.0 * kDeg};
  const fs::path a = fs::temp_directory_path() / "fabricvs_plant_run_a";
  const fs::path b = fs::temp_directory_path() / "fabricvs_plant_run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const RunMetrics m = run_servo_loop(c, 5, oracle_predictor(0.0, 0.0, 1), a.string());
  REQUIRE(m.converged);
  CHECK(m.convergence_step >= 0);
  CHECK(m.convergence_step <= 250);
  CHECK(!m.diverged);
  const CycleRecord& f = m.final();
  CHECK(f.contact);
  CHECK(std::abs(f.contact_force - 2.0) < 0.2);
  CHECK(std::abs(f.tension - 3.0) < 0.15);
  const double sep_target = 2.0 * c.scene.grasp_offset_mm + 3.0 / c.plant.k_f;
  CHECK(std::abs(f.separation - sep_target) < 0.05 * (sep_target - 2.0 * c.scene.grasp_offset_mm));
  CHECK(m.final_ssd < m.initial_ssd);

  run_servo_loop(c, 5, oracle_predictor(0.0, 0.0, 1), b.string());
  for (const char* name : {"trajectory.csv", "wrench.csv", "metrics.csv", "summary.json", "final.pgm"}) {
    CHECK_MESSAGE(slurp(a / name) == slurp(b / name), name);
    CHECK(!slurp(a / name).empty());
  }
  std::ifstream traj(a / "trajectory.csv");
  std::string header;
  std::getline(traj, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 18);
}

TEST_CASE("servo config validation and divergence") {
  ServoConfig c;
  c.period = 0.0;
  CHECK_THROWS_AS(c.validate(), nn::ConfigError);
  c = ServoConfig{};
  c.predictor = "crystal-ball";
  CHECK_THROWS_AS(make_predictor(c, 0), nn::ConfigError);

  // an inverted predictor drives the error away
  ServoConfig d;
  d.nominal_camera = true;
  d.initial_offset = std::array<double, 3>{10.0, 0.0, 0.0};
  d.gains.lambda = {3.0, 3.0, 0.0, 0.0, 0.0, 3.0};
  Predictor bad;
  bad.predict = [](const GrayImage&, const GrayImage&, const Vec6& t) {
    Vec6 o = t;
    for (double& v : o) v = -v;
    return o;
  };
  const RunMetrics m = run_servo_loop(d, 3, bad);
  CHECK(m.diverged);
  CHECK(!m.converged);
  CHECK(m.cycles.size() < 250);

  nlohmann::json j = ServoConfig{};
  const ServoConfig back = j.get<ServoConfig>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("pca on synthetic features") {
  std::vector<std::vector<double>> line;
  const std::vector<double> dir{1, -2, 0.5, 3, 0, 1, -1, 2};
  for (int i = 0; i < 10; ++i) {
    std::vector<double> row(8);
    for (int k = 0; k < 8; ++k) row[k] = 4.0 + (i * 0.37 - 1.1) * dir[k];
    line.push_back(row);
  }
  const PcaResult r = pca_features(line);
  CHECK(r.explained[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.explained[1] < 1e-12);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(3.0, 2.0);
  std::vector<std::vector<double>> cloud(40, std::vector<double>(5));
  for (auto& row : cloud)
    for (double& v : row) v = n(rng);
  const PcaResult p = pca_features(cloud);
  double m0 = 0.0, m1 = 0.0;
  for (const auto& xy : p.projection) {
    m0 += xy[0];
    m1 += xy[1];
  }
  CHECK(std::abs(m0 / 40) < 1e-12);
  CHECK(std::abs(m1 / 40) < 1e-12);
  CHECK(p.explained[0] >= p.explained[1]);

  const PcaResult z = pca_features(std::vector<std::vector<double>>(5, {1.0, 2.0, 3.0}));
  CHECK(z.zero_variance);
  CHECK_THROWS_AS(pca_features({{1.0}, {2.0}}), std::invalid_argument);
}

TEST_CASE("servo feature trajectory is continuous in the PCA plane") {
  net::NetConfig nc;
  nc.backbone.dim = 16;
  nc.backbone.layers = 1;
  nc.embed = 16;
  nc.head_hidden = {16};
  const net::Network net(nc, 4);
  ServoConfig c;
  c.initial_offset = std::array<double, 3>{15.0, -10.0, 6.0 * kDeg};
  c.max_cycles = 60;
  c.dump_features = true;
  Predictor p = oracle_predictor(0.0, 0.0, 1);
  p.features = [&net](const GrayImage& d, const GrayImage& cur) { return net.features(d, cur); };
  const RunMetrics m = run_servo_loop(c, 8, p);
  REQUIRE(m.features.size() == 60);
  const PcaResult r = pca_features(m.features);
  auto dist = [&](std::size_t i, std::size_t j) {
    return std::hypot(r.projection[i][0] - r.projection[j][0], r.projection[i][1] - r.projection[j][1]);
  };
  std::vector<double> step, random;
  for (std::size_t i = 1; i < r.projection.size(); ++i) step.push_back(dist(i - 1, i));
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> u(0, r.projection.size() - 1);
  for (int k = 0; k < 500; ++k) random.push_back(dist(u(rng), u(rng)));
  CHECK(median(step) < median(random));
}
