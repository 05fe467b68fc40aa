#include "fabricvs/scene/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "fabricvs/nn/module.hpp"

namespace fabricvs::scene {

using nn::ConfigError;

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---- camera ---------------------------------------------------------------

Mat3d Camera::intrinsics() const {
  Mat3d K;
  K << focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0;
  return K;
}

Vec2d Camera::project(const Vec3d& world) const {
  const Vec3d p = (world_to_camera() * world.homogeneous()).head<3>();
  if (p.z() <= 1e-9) throw GeometryError("point is behind the camera");
  return {focal * p.x() / p.z() + cx, focal * p.y() / p.z() + cy};
}

Mat3d plane_homography(const Camera& cam, const Pose6d& plane) {
  const Mat4d M = cam.world_to_camera() * plane.matrix();
  Mat3d P;
  P.col(0) = M.block<3, 1>(0, 0);
  P.col(1) = M.block<3, 1>(0, 1);
  P.col(2) = M.block<3, 1>(0, 3);
  return cam.intrinsics() * P;
}

Pose6d SceneState::fabric_a_target() const {
  return Pose6d::from_matrix(fabric_b.matrix() * alignment.matrix());
}

Vec6 camera_frame_difference(const SceneState& s) {
  if (!s.fabric_a) throw GeometryError("scene has no fabric A");
  const Mat4d Hcw = s.camera.world_to_camera();
  const Pose6d a = Pose6d::from_matrix(Hcw * s.fabric_a->matrix());
  const Pose6d t = Pose6d::from_matrix(Hcw * s.fabric_a_target().matrix());
  const Vector6d d = pose_difference(a, t);
  Vec6 out{};
  for (int i = 0; i < 6; ++i) out[i] = d[i];
  return out;
}

// ---- rendering ------------------------------------------------------------

namespace {

// Inverse homography after checking the camera sees the plane's front side.
Mat3d pixel_to_plane(const Camera& cam, const Pose6d& plane) {
  const Vec3d c = (invert_rigid<double>(plane.matrix()) * cam.pose.t.homogeneous()).head<3>();
  if (c.z() <= 1e-9) throw GeometryError("camera is behind the plane");
  const Mat3d H = plane_homography(cam, plane);
  if (std::abs(H.determinant()) < 1e-12) throw GeometryError("degenerate homography");
  return H.inverse();
}

double sample_texture(const GrayImage& tex, double x, double y, double background) {
  const double fx = x / tex.pitch_mm + 0.5 * static_cast<double>(tex.width - 1);
  const double fy = y / tex.pitch_mm + 0.5 * static_cast<double>(tex.height - 1);
  if (!(fx >= 0.0 && fy >= 0.0 && fx <= tex.width - 1.0 && fy <= tex.height - 1.0)) return background;
  const auto x0 = std::min(static_cast<std::size_t>(fx), tex.width - 2);
  const auto y0 = std::min(static_cast<std::size_t>(fy), tex.height - 2);
  const double ax = fx - x0, ay = fy - y0;
  const double top = (1 - ax) * tex.at(x0, y0) + ax * tex.at(x0 + 1, y0);
  const double bot = (1 - ax) * tex.at(x0, y0 + 1) + ax * tex.at(x0 + 1, y0 + 1);
  return (1 - ay) * top + ay * bot;
}

// 2-D homography taking the four `from` points to `to` (DLT, h33 = 1).
Mat3d four_point_homography(const std::array<Vec2d, 4>& from, const std::array<Vec2d, 4>& to) {
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = from[i].x(), y = from[i].y(), u = to[i].x(), v = to[i].y();
    A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(b);
  Mat3d H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return H;
}

Vec2d apply(const Mat3d& H, const Vec2d& p) {
  const Vec3d q = H * p.homogeneous();
  return q.head<2>() / q.z();
}

}  // namespace

GrayImage render(const SceneState& s, const GrayImage& texture, Resolution res) {
  if (texture.empty() || texture.width < 2 || texture.height < 2) throw std::invalid_argument("render: empty texture");
  if (res.width == 0 || res.height == 0) throw std::invalid_argument("render: resolution must be positive");

  const Camera& cam = s.camera;
  const Mat3d to_b = pixel_to_plane(cam, s.fabric_b);
  // Fabric A material coordinates map onto B's texture through the alignment pose.
  const double ca = std::cos(s.alignment.r.z()), sa = std::sin(s.alignment.r.z());
  Eigen::Matrix2d align_rot;
  align_rot << ca, -sa, sa, ca;
  const Vec2d align_t = s.alignment.t.head<2>();

  bool has_a = s.fabric_a.has_value();
  bool aligned = false;
  Mat3d to_a = Mat3d::Identity(), warp = Mat3d::Identity();
  const bool jitter = std::any_of(s.corner_jitter.begin(), s.corner_jitter.end(), [](double v) { return v != 0.0; });
  if (has_a) {
    const Mat4d offset = invert_rigid<double>(s.fabric_a_target().matrix()) * s.fabric_a->matrix();
    aligned = !jitter && (offset - Mat4d::Identity()).cwiseAbs().maxCoeff() < 1e-12;
    to_a = pixel_to_plane(cam, *s.fabric_a);
    if (jitter) {
      const double hw = s.fabric_a_width / 2, hh = s.fabric_a_height / 2;
      const std::array<Vec2d, 4> nominal{Vec2d(-hw, -hh), Vec2d(hw, -hh), Vec2d(hw, hh), Vec2d(-hw, hh)};
      std::array<Vec2d, 4> moved;
      for (int i = 0; i < 4; ++i) moved[i] = nominal[i] + Vec2d(s.corner_jitter[2 * i], s.corner_jitter[2 * i + 1]);
      warp = four_point_homography(moved, nominal);
    }
  }

  struct Disc {
    double u, v, r2;
  };
  std::vector<Disc> discs;
  const Mat4d Hcw = cam.world_to_camera();
  for (const auto& o : s.occluders) {
    const Vec2d p = cam.project(o.center);
    const double depth = (Hcw * o.center.homogeneous()).z();
    const double r = o.radius_mm * cam.focal / depth;
    discs.push_back({p.x(), p.y(), r * r});
  }

  GrayImage img(res.width, res.height);
  img.pitch_mm = cam.pose.t.z() / cam.focal;
  const double half_w = 0.5 * static_cast<double>(res.width);
  const double gx = std::cos(s.lighting.angle), gy = std::sin(s.lighting.angle);
  for (std::size_t v = 0; v < res.height; ++v) {
    for (std::size_t u = 0; u < res.width; ++u) {
      const Vec3d px(static_cast<double>(u), static_cast<double>(v), 1.0);
      const Vec3d bh = to_b * px;
      double value = s.background;
      Vec2d b = Vec2d::Zero();
      if (bh.z() > 0.0) {
        b = bh.head<2>() / bh.z();
        value = sample_texture(texture, b.x(), b.y(), s.background);
      }
      if (has_a) {
        Vec2d m, tex;
        if (aligned) {
          m = align_rot.transpose() * (b - align_t);
          tex = b;
        } else {
          const Vec3d ah = to_a * px;
          m = apply(warp, ah.head<2>() / ah.z());
          tex = align_rot * m + align_t;
        }
        if (std::abs(m.x()) <= s.fabric_a_width / 2 && std::abs(m.y()) <= s.fabric_a_height / 2) {
          value = sample_texture(texture, tex.x(), tex.y(), s.background);
        }
      }
      for (const auto& d : discs) {
        const double du = u - d.u, dv = v - d.v;
        if (du * du + dv * dv <= d.r2) value = s.occluder_intensity;
      }
      const double shade = 1.0 + s.lighting.gradient * ((u - cam.cx) * gx + (v - cam.cy) * gy) / half_w;
      img.at(u, v) = std::clamp(value * s.lighting.gain * shade, 0.0, 1.0);
    }
  }
  if (s.noise_sigma > 0.0) {
    std::mt19937_64 rng(s.noise_seed);
    std::normal_distribution<double> noise(0.0, s.noise_sigma);
    for (auto& x : img.data) x = std::clamp(x + noise(rng), 0.0, 1.0);
  }
  return img;
}

// ---- textures -------------------------------------------------------------

GrayImage procedural_texture(const TextureSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = spec.size;
  const double extent = spec.pitch_mm * static_cast<double>(n);
  std::vector<double> acc(n * n, 0.0);

  // Value-noise octaves, smoothstep interpolation.
  const std::array<double, 3> cells{24.0, 12.0, 6.0};
  const std::array<double, 3> weights{1.0, 0.6, 0.35};
  for (std::size_t o = 0; o < cells.size(); ++o) {
    const auto g = static_cast<std::size_t>(std::ceil(extent / cells[o])) + 2;
    std::vector<double> grid(g * g);
    for (auto& x : grid) x = 2.0 * unit(rng) - 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double fy = j * spec.pitch_mm / cells[o];
      const auto y0 = static_cast<std::size_t>(fy);
      double ty = fy - y0;
      ty = ty * ty * (3 - 2 * ty);
      for (std::size_t i = 0; i < n; ++i) {
        const double fx = i * spec.pitch_mm / cells[o];
        const auto x0 = static_cast<std::size_t>(fx);
        double tx = fx - x0;
        tx = tx * tx * (3 - 2 * tx);
        const double top = (1 - tx) * grid[y0 * g + x0] + tx * grid[y0 * g + x0 + 1];
        const double bot = (1 - tx) * grid[(y0 + 1) * g + x0] + tx * grid[(y0 + 1) * g + x0 + 1];
        acc[j * n + i] += weights[o] * ((1 - ty) * top + ty * bot);
      }
    }
  }
  // Straight strokes with a soft profile.
  for (std::size_t l = 0; l < spec.lines; ++l) {
    const double px = unit(rng) * extent, py = unit(rng) * extent;
    const double ang = unit(rng) * std::numbers::pi;
    const double width = 1.5 + 2.0 * unit(rng);
    const double amp = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.6 + 0.6 * unit(rng));
    const double nx = -std::sin(ang), ny = std::cos(ang);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::abs((i * spec.pitch_mm - px) * nx + (j * spec.pitch_mm - py) * ny);
        if (d < width) acc[j * n + i] += amp * (1.0 - d / width);
      }
    }
  }
  // Standardize, then +-2 sigma spans `contrast`.
  double mean = 0.0, var = 0.0;
  for (double v : acc) mean += v;
  mean /= static_cast<double>(acc.size());
  for (double v : acc) var += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(acc.size())), 1e-12);
  GrayImage tex(n, n);
  tex.pitch_mm = spec.pitch_mm;
  for (std::size_t k = 0; k < acc.size(); ++k) {
    tex.data[k] = std::clamp(0.5 + spec.contrast * (acc[k] - mean) / (4.0 * sd), 0.0, 1.0);
  }
  return tex;
}

GrayImage load_texture(const TextureSpec& spec) {
  if (spec.file.empty()) return procedural_texture(spec);
  GrayImage tex = read_pgm(spec.file);
  tex.pitch_mm = spec.pitch_mm;
  return tex;
}

// ---- sampling -------------------------------------------------------------

void SceneConfig::validate() const {
  auto range = [](const char* name, double lo, double hi) {
    if (!(lo <= hi)) throw ConfigError(std::string("scene: inverted range ") + name);
  };
  try {
    diff.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  range("lighting_gain", lighting_gain.lo, lighting_gain.hi);
  range("lighting_gradient", lighting_gradient.lo, lighting_gradient.hi);
  range("occluder_radius_frac", occluder_radius_frac.lo, occluder_radius_frac.hi);
  range("noise_sigma", noise_sigma.lo, noise_sigma.hi);
  range("texture_contrast", texture_contrast.lo, texture_contrast.hi);
  if (lighting_gain.lo <= 0.0) throw ConfigError("scene: lighting gain must be positive");
  if (resolution.width == 0 || resolution.height == 0) throw ConfigError("scene: empty resolution");
  if (camera_height <= 0.0 || focal <= 0.0) throw ConfigError("scene: camera geometry must be positive");
  if (texture_size < 2 || texture_pitch_mm <= 0.0) throw ConfigError("scene: bad texture size");
}

Camera SceneConfig::nominal_camera() const {
  Camera c;
  c.focal = focal;
  c.cx = 0.5 * static_cast<double>(resolution.width - 1);
  c.cy = 0.5 * static_cast<double>(resolution.height - 1);
  c.pose = Pose6d(Vec3d(0.0, 0.0, camera_height), Vec3d(std::numbers::pi, 0.0, 0.0));
  return c;
}

std::array<Vec3d, 2> grasp_points(const Pose6d& fabric_a, double offset_mm) {
  const Mat4d H = fabric_a.matrix();
  return {(H * Vec3d(-offset_mm, 0, 0).homogeneous()).head<3>(),
          (H * Vec3d(offset_mm, 0, 0).homogeneous()).head<3>()};
}

void place_fabric_a(SceneState& s, const Vec6& diff) {
  const Mat4d Hcw = s.camera.world_to_camera();
  const Mat4d target = Hcw * s.fabric_a_target().matrix();
  Mat4d cur = Mat4d::Identity();
  cur.block<3, 3>(0, 0) = euler_to_matrix<double>(Vec3d(diff[3], diff[4], diff[5])) * target.block<3, 3>(0, 0);
  cur.block<3, 1>(0, 3) = target.block<3, 1>(0, 3) + Vec3d(diff[0], diff[1], diff[2]);
  s.fabric_a = Pose6d::from_matrix(s.camera.pose.matrix() * cur);
}

ScenePair sample_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto sym = [&](double a) { return uni(-a, a); };

  ScenePair pair;
  SceneState& base = pair.desired;
  base.camera = cfg.nominal_camera();
  base.camera.pose.t += Vec3d(sym(cfg.camera_jitter_mm), sym(cfg.camera_jitter_mm), sym(cfg.camera_jitter_mm));
  base.camera.pose.r += Vec3d(sym(cfg.camera_jitter_rad), sym(cfg.camera_jitter_rad), sym(cfg.camera_jitter_rad));
  base.fabric_b = Pose6d(Vec3d(sym(cfg.fabric_b_jitter_mm), sym(cfg.fabric_b_jitter_mm), 0.0),
                         Vec3d(0.0, 0.0, sym(cfg.fabric_b_jitter_rad)));
  base.fabric_a_width = cfg.fabric_a_width;
  base.fabric_a_height = cfg.fabric_a_height;
  base.lighting.gain = uni(cfg.lighting_gain.lo, cfg.lighting_gain.hi);
  base.lighting.gradient = uni(cfg.lighting_gradient.lo, cfg.lighting_gradient.hi);
  base.lighting.angle = uni(0.0, 2.0 * std::numbers::pi);
  base.noise_sigma = uni(cfg.noise_sigma.lo, cfg.noise_sigma.hi);

  const bool low = uni(0.0, 1.0) < cfg.low_saliency_prob;
  pair.texture.seed = mix_seed(seed, 3);
  pair.texture.contrast = low ? cfg.low_saliency_contrast : uni(cfg.texture_contrast.lo, cfg.texture_contrast.hi);
  pair.texture.size = cfg.texture_size;
  pair.texture.pitch_mm = cfg.texture_pitch_mm;
  if (!cfg.texture_files.empty()) {
    const auto k = std::uniform_int_distribution<std::size_t>(0, cfg.texture_files.size() - 1)(rng);
    pair.texture.file = cfg.texture_files[k];
  }

  for (int i = 0; i < 6; ++i) pair.diff[i] = uni(cfg.diff.lo[i], cfg.diff.hi[i]);
  const double radius_mm =
      uni(cfg.occluder_radius_frac.lo, cfg.occluder_radius_frac.hi) * cfg.resolution.height * cfg.camera_height / cfg.focal;

  SceneState& cur = pair.current;
  cur = base;
  for (auto& c : cur.corner_jitter) c = sym(cfg.corner_jitter_mm);
  base.noise_seed = mix_seed(seed, 1);
  cur.noise_seed = mix_seed(seed, 2);
  place_fabric_a(cur, pair.diff);
  if (cfg.occluders) {
    for (const auto& g : grasp_points(*cur.fabric_a, cfg.grasp_offset_mm)) cur.occluders.push_back({g, radius_mm});
  }
  return pair;
}

TextureSpec held_out_texture(std::uint64_t index, const SceneConfig& cfg) {
  TextureSpec t;
  t.seed = mix_seed(0x5eedf00dull, index) ^ 0xa5a5a5a5a5a5a5a5ull;
  t.contrast = 0.5 * (cfg.texture_contrast.lo + cfg.texture_contrast.hi);
  t.size = cfg.texture_size;
  t.pitch_mm = cfg.texture_pitch_mm;
  return t;
}

// ---- JSON -----------------------------------------------------------------

nlohmann::json pose_to_json(const Pose6d& p) {
  return {{"t", {p.t.x(), p.t.y(), p.t.z()}}, {"r", {p.r.x(), p.r.y(), p.r.z()}}};
}

Pose6d pose_from_json(const nlohmann::json& j) {
  const auto t = j.at("t").get<std::array<double, 3>>();
  const auto r = j.at("r").get<std::array<double, 3>>();
  return {Vec3d(t[0], t[1], t[2]), Vec3d(r[0], r[1], r[2])};
}

void to_json(nlohmann::json& j, const SceneState& s) {
  j = {{"fabric_b", pose_to_json(s.fabric_b)},
       {"alignment", pose_to_json(s.alignment)},
       {"fabric_a", s.fabric_a ? pose_to_json(*s.fabric_a) : nlohmann::json(nullptr)},
       {"fabric_a_size", {s.fabric_a_width, s.fabric_a_height}},
       {"corner_jitter", s.corner_jitter},
       {"camera",
        {{"focal", s.camera.focal}, {"cx", s.camera.cx}, {"cy", s.camera.cy}, {"pose", pose_to_json(s.camera.pose)}}},
       {"lighting", {{"gain", s.lighting.gain}, {"gradient", s.lighting.gradient}, {"angle", s.lighting.angle}}},
       {"occluder_intensity", s.occluder_intensity},
       {"noise_sigma", s.noise_sigma},
       {"noise_seed", s.noise_seed},
       {"background", s.background}};
  auto& occ = j["occluders"] = nlohmann::json::array();
  for (const auto& o : s.occluders) {
    occ.push_back({{"center", {o.center.x(), o.center.y(), o.center.z()}}, {"radius_mm", o.radius_mm}});
  }
}

void from_json(const nlohmann::json& j, SceneState& s) {
  s.fabric_b = pose_from_json(j.at("fabric_b"));
  s.alignment = pose_from_json(j.at("alignment"));
  if (j.at("fabric_a").is_null()) {
    s.fabric_a.reset();
  } else {
    s.fabric_a = pose_from_json(j.at("fabric_a"));
  }
  const auto size = j.at("fabric_a_size").get<std::array<double, 2>>();
  s.fabric_a_width = size[0];
  s.fabric_a_height = size[1];
  s.corner_jitter = j.at("corner_jitter").get<std::array<double, 8>>();
  const auto& c = j.at("camera");
  s.camera.focal = c.at("focal");
  s.camera.cx = c.at("cx");
  s.camera.cy = c.at("cy");
  s.camera.pose = pose_from_json(c.at("pose"));
  const auto& l = j.at("lighting");
  s.lighting = {l.at("gain"), l.at("gradient"), l.at("angle")};
  s.occluders.clear();
  for (const auto& o : j.at("occluders")) {
    const auto c3 = o.at("center").get<std::array<double, 3>>();
    s.occluders.push_back({Vec3d(c3[0], c3[1], c3[2]), o.at("radius_mm")});
  }
  s.occluder_intensity = j.at("occluder_intensity");
  s.noise_sigma = j.at("noise_sigma");
  s.noise_seed = j.at("noise_seed");
  s.background = j.at("background");
}

namespace {

nlohmann::json range_json(const Range<double>& r) { return {r.lo, r.hi}; }

void read_range(const nlohmann::json& j, const char* key, Range<double>& r) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::array<double, 2>>();
  r = {v[0], v[1]};
}

}  // namespace

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"width", c.resolution.width},
       {"height", c.resolution.height},
       {"camera_height", c.camera_height},
       {"focal", c.focal},
       {"camera_jitter_mm", c.camera_jitter_mm},
       {"camera_jitter_rad", c.camera_jitter_rad},
       {"fabric_b_jitter_mm", c.fabric_b_jitter_mm},
       {"fabric_b_jitter_rad", c.fabric_b_jitter_rad},
       {"fabric_a_size", {c.fabric_a_width, c.fabric_a_height}},
       {"grasp_offset_mm", c.grasp_offset_mm},
       {"diff_ranges", c.diff},
       {"lighting_gain", range_json(c.lighting_gain)},
       {"lighting_gradient", range_json(c.lighting_gradient)},
       {"occluder_radius_frac", range_json(c.occluder_radius_frac)},
       {"occluders", c.occluders},
       {"noise_sigma", range_json(c.noise_sigma)},
       {"corner_jitter_mm", c.corner_jitter_mm},
       {"texture_contrast", range_json(c.texture_contrast)},
       {"low_saliency_prob", c.low_saliency_prob},
       {"low_saliency_contrast", c.low_saliency_contrast},
       {"texture_size", c.texture_size},
       {"texture_pitch_mm", c.texture_pitch_mm},
       {"texture_files", c.texture_files}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  try {
    c.resolution.width = j.value("width", c.resolution.width);
    c.resolution.height = j.value("height", c.resolution.height);
    c.camera_height = j.value("camera_height", c.camera_height);
    c.focal = j.value("focal", c.focal);
    c.camera_jitter_mm = j.value("camera_jitter_mm", c.camera_jitter_mm);
    c.camera_jitter_rad = j.value("camera_jitter_rad", c.camera_jitter_rad);
    c.fabric_b_jitter_mm = j.value("fabric_b_jitter_mm", c.fabric_b_jitter_mm);
    c.fabric_b_jitter_rad = j.value("fabric_b_jitter_rad", c.fabric_b_jitter_rad);
    if (j.contains("fabric_a_size")) {
      const auto s = j.at("fabric_a_size").get<std::array<double, 2>>();
      c.fabric_a_width = s[0];
      c.fabric_a_height = s[1];
    }
    c.grasp_offset_mm = j.value("grasp_offset_mm", c.grasp_offset_mm);
    if (j.contains("diff_ranges")) c.diff = j.at("diff_ranges").get<LabelRanges>();
    read_range(j, "lighting_gain", c.lighting_gain);
    read_range(j, "lighting_gradient", c.lighting_gradient);
    read_range(j, "occluder_radius_frac", c.occluder_radius_frac);
    c.occluders = j.value("occluders", c.occluders);
    read_range(j, "noise_sigma", c.noise_sigma);
    c.corner_jitter_mm = j.value("corner_jitter_mm", c.corner_jitter_mm);
    read_range(j, "texture_contrast", c.texture_contrast);
    c.low_saliency_prob = j.value("low_saliency_prob", c.low_saliency_prob);
    c.low_saliency_contrast = j.value("low_saliency_contrast", c.low_saliency_contrast);
    c.texture_size = j.value("texture_size", c.texture_size);
    c.texture_pitch_mm = j.value("texture_pitch_mm", c.texture_pitch_mm);
    c.texture_files = j.value("texture_files", c.texture_files);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene config: ") + e.what());
  }
  c.validate();
}

// ---- dataset --------------------------------------------------------------

Manifest generate_dataset(const SceneConfig& cfg, std::uint64_t seed, std::size_t n,
                          const std::string& out_dir, double val_fraction) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (val_fraction < 0.0 || val_fraction > 1.0) throw ConfigError("dataset: val_fraction outside [0, 1]");
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + (root / "images").string() + ": " + ec.message());

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 split_rng(mix_seed(seed, 0xffff));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  std::vector<bool> is_val(n, false);
  for (std::size_t k = 0; k < n_val; ++k) is_val[order[k]] = true;

  const std::string digest = std::to_string(std::hash<std::string>{}(nlohmann::json(cfg).dump()));
  Manifest m;
  const fs::path manifest_path = root / "manifest.jsonl";
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    const ScenePair pair = sample_scene(s, cfg);
    const GrayImage tex = load_texture(pair.texture);
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", i);
    const std::string des = std::string("images/") + id + "_des.pgm";
    const std::string cur = std::string("images/") + id + "_cur.pgm";
    write_pgm((root / des).string(), render(pair.desired, tex, cfg.resolution));
    write_pgm((root / cur).string(), render(pair.current, tex, cfg.resolution));
    nlohmann::json rec = {{"id", id},
                          {"seed", s},
                          {"dataset_seed", seed},
                          {"config_digest", digest},
                          {"split", is_val[i] ? "val" : "train"},
                          {"label", cfg.diff.normalize(pair.diff)},
                          {"diff", pair.diff},
                          {"ranges", cfg.diff},
                          {"des", des},
                          {"cur", cur},
                          {"texture", {{"seed", pair.texture.seed}, {"contrast", pair.texture.contrast}, {"file", pair.texture.file}}},
                          {"desired", pair.desired},
                          {"current", pair.current}};
    out << rec.dump() << '\n';
    (is_val[i] ? m.val : m.train)++;
    m.records.push_back(std::move(rec));
  }
  if (!out) throw std::runtime_error("write failed: " + manifest_path.string());
  return m;
}

}  // namespace fabricvs::scene
