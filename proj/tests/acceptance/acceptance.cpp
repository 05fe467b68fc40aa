// End-to-end acceptance run: one PASS/FAIL line per criterion.
// usage: acceptance <cli> <work_dir> [criterion ...]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fabricvs/control/impedance.hpp"
#include "fabricvs/net/gradcheck_suite.hpp"
#include "fabricvs/plant/plant.hpp"
#include "fabricvs/scene/scene.hpp"
#include "fabricvs/train/trainer.hpp"
#include "json.hpp"

using namespace fabricvs;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string g_cli;
fs::path g_work;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Toy network and schedule shared by the ablation and the servo model.
net::NetConfig toy_net() {
  return json::parse(R"({"backbone":{"dim":32,"layers":1},"embed":32,"head_hidden":[64]})").get<net::NetConfig>();
}

train::TrainConfig toy_schedule() {
  train::TrainConfig t;
  t.epochs = 8;
  t.warmup_epochs = 1;
  t.lr_peak = 1e-3;
  t.lr_end = 1e-4;
  return t;
}

const fs::path& ablation_dir() {
  static const fs::path p = g_work / "ablation";
  return p;
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = net::gradient_check_suite(0, 200);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : rows) {
    if (!(r.max_rel_error <= worst)) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  return {worst < 1e-4 && secs < 300.0,
          fmt("%zu cases, worst %.2e (%s), %.1f s", rows.size(), worst, worst_name.c_str(), secs)};
}

Outcome ablation_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  scene::SceneConfig sc;
  scene::generate_dataset(sc, 1, 2000, (g_work / "data2000").string(), 0.1);
  scene::generate_dataset(sc, 2, 500, (g_work / "test500").string(), 0.0);
  const train::Dataset data = train::load_dataset((g_work / "data2000").string());
  const auto test = train::load_dataset((g_work / "test500").string()).all();
  const auto rows = train::ablate(data, test, toy_net(), {"dcab", "nodiff", "concat"}, {0, 1, 2}, toy_schedule(),
                                  ablation_dir().string(), [](const train::AblationRow& r) {
                                    std::printf("  %-7s seed %llu E %.4f trans %.2f mm rot %.2f deg%s\n",
                                                r.variant.c_str(), static_cast<unsigned long long>(r.seed),
                                                r.report.loss, r.report.trans_rmse_mm, r.report.rot_rmse_deg,
                                                r.ok ? "" : (" " + r.error).c_str());
                                    std::fflush(stdout);
                                  });
  train::write_ablation_csv((ablation_dir() / "ablation.csv").string(), rows);
  const double secs = seconds_since(t0);
  std::map<std::string, double> e;
  for (const auto& [v, m] : train::mean_loss_by_variant(rows)) e[v] = m;
  bool all_ok = true;
  for (const auto& r : rows) all_ok = all_ok && r.ok;
  const bool order = all_ok && e.size() == 3 && e["dcab"] < e["nodiff"] && e["dcab"] < e["concat"];
  return {order && secs < 3600.0, fmt("E dcab %.4f nodiff %.4f concat %.4f, %.0f s", e["dcab"], e["nodiff"],
                                      e["concat"], secs)};
}

Outcome controller_contraction() {
  plant::ServoConfig c;
  c.nominal_camera = true;
  c.plant.tau = 0.0;
  c.initial_offset = std::array<double, 3>{20.0, 20.0, 10.0 * kDeg};
  const plant::RunMetrics m = plant::run_servo_loop(c, 5, plant::oracle_predictor(0.0, 0.0, 1));
  double worst = 0.0;
  int checked = 0;
  for (std::size_t k = 1; k < m.cycles.size(); ++k) {
    if (m.cycles[k].contact || m.cycles[k - 1].contact) break;
    worst = std::max(worst, std::abs(m.cycles[k].trans_error / m.cycles[k - 1].trans_error - 0.97));
    ++checked;
  }
  const bool ratio_ok = checked >= 5 && worst < 1e-6;
  const bool conv = m.converged && m.convergence_step >= 0 && m.convergence_step <= 250;
  return {ratio_ok && conv, fmt("ratio dev %.1e over %d cycles, converged at cycle %d (%.3f mm, %.4f deg)", worst,
                                checked, m.convergence_step, m.final().trans_error, m.final().rot_error / kDeg)};
}

// Learned servo setup: the seed-0 DCAB model from the ablation, held-out texture.
plant::ServoConfig learned_servo() {
  plant::ServoConfig c;
  c.predictor = "network";
  c.checkpoint = (ablation_dir() / "dcab_s0" / "best.ckpt").string();
  c.held_out_texture = 0;
  c.converge_mm = 0.02 * 160.0;  // 2% of the 160 mm image width at the table
  c.converge_rad = std::numbers::pi;
  return c;
}

std::vector<plant::ServoRunSummary> servo_runs(const plant::ServoConfig& c, const std::string& name) {
  const fs::path out = g_work / "servo" / name;
  const auto rows =
      plant::run_servo_batch(c, 100, 10, [&](std::uint64_t s) { return plant::make_predictor(c, s); }, out.string());
  plant::write_servo_summary_csv((out / "servo_summary.csv").string(), rows);
  return rows;
}

int converged_count(const std::vector<plant::ServoRunSummary>& rows) {
  int n = 0;
  for (const auto& r : rows) n += r.converged ? 1 : 0;
  return n;
}

std::vector<plant::ServoRunSummary> g_nominal;

Outcome learned_servo_accuracy() {
  if (!fs::exists(learned_servo().checkpoint)) return {false, "no DCAB checkpoint (criterion 2 not run)"};
  g_nominal = servo_runs(learned_servo(), "nominal");
  const int n = converged_count(g_nominal);
  double worst_ratio = 0.0, worst_mm = 0.0;
  for (const auto& r : g_nominal) {
    if (!r.converged) continue;
    worst_ratio = std::max(worst_ratio, r.final_ssd / r.initial_ssd);
    worst_mm = std::max(worst_mm, r.final_trans_mm);
  }
  const bool ssd_ok = worst_ratio < 0.05;
  return {n >= 8 && ssd_ok, fmt("%d/10 converged below 3.2 mm (worst %.2f mm), worst SSD ratio %.3f (needs < 0.05)",
                                n, worst_mm, worst_ratio)};
}

Outcome impedance_analytics() {
  using namespace control;
  bool ok = true;
  double err_ext = 0.0, err_int = 0.0;
  {
    const auto p = default_external();
    Wrench6 F = p.F_desired;
    F[0] += 5.0;  // unselected
    F[2] += 0.004;
    F[3] += 30.0;
    F[4] -= 15.0;
    VirtualState s;
    for (int k = 0; k < 6'000'000; ++k) s = impedance_step(s, p, F, 1e-3);
    for (int i = 0; i < 6; ++i) {
      const double expected = p.S[i] ? (F[i] - p.F_desired[i]) / p.K[i] : 0.0;
      err_ext = std::max(err_ext, std::abs(s.dq[i] - expected));
      if (!p.S[i]) ok = ok && s.dq[i] == 0.0 && s.dq_dot[i] == 0.0;
    }
  }
  {
    const auto p = default_internal();
    Wrench6 F = p.F_desired;
    F[0] += 1.5;
    F[1] += 7.0;
    VirtualState s;
    for (int k = 0; k < 5000; ++k) s = impedance_step(s, p, F, 1e-3);
    for (int i = 0; i < 6; ++i) {
      const double expected = p.S[i] ? (F[i] - p.F_desired[i]) / p.D[i] : 0.0;
      err_int = std::max(err_int, std::abs(s.dq_dot[i] - expected));
      if (!p.S[i]) ok = ok && s.dq[i] == 0.0 && s.dq_dot[i] == 0.0;
    }
  }
  bool lyap = true;
  for (const auto& p : {default_external(), default_internal()}) {
    VirtualState s;
    s.dq << 3, -2, 1.5, 0.02, -0.03, 0.1;
    s.dq_dot << -4, 1, 2, 0.5, 0.1, -0.2;
    double v = lyapunov(s, p);
    for (int k = 0; k < 100000; ++k) {
      s = impedance_step(s, p, p.F_desired, 1e-3);
      const double next = lyapunov(s, p);
      lyap = lyap && next <= v;
      v = next;
    }
  }
  ok = ok && err_ext < 1e-6 && err_int < 1e-6 && lyap;
  return {ok, fmt("displacement err %.1e, velocity err %.1e, unselected zero and Lyapunov non-increase %s", err_ext,
                  err_int, ok ? "hold" : "checked")};
}

Outcome force_regulation() {
  const double f_ext = std::abs(control::default_external().F_desired[2]);
  const double f_int = std::abs(control::default_internal().F_desired[0]);
  plant::ServoConfig c;
  c.converge_mm = 0.02 * 160.0;
  c.converge_rad = std::numbers::pi;
  auto rows = servo_runs(c, "oracle");
  if (!g_nominal.empty()) rows.insert(rows.end(), g_nominal.begin(), g_nominal.end());
  double worst_f = 0.0, worst_t = 0.0;
  for (const auto& r : rows) {
    worst_f = std::max(worst_f, std::abs(r.contact_force - f_ext) / f_ext);
    worst_t = std::max(worst_t, std::abs(r.tension - f_int) / f_int);
  }
  return {worst_f < 0.10 && worst_t < 0.05,
          fmt("%zu runs, worst contact force dev %.2f%%, worst tension dev %.2f%%", rows.size(), 100 * worst_f,
              100 * worst_t)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Nondeterministic columns (timings) are dropped before comparing.
std::string comparable(const fs::path& p) {
  const std::string name = p.filename().string();
  if (name == "history.csv") {
    std::stringstream in(slurp(p)), out;
    std::string line;
    while (std::getline(in, line)) out << line.substr(0, line.rfind(',')) << '\n';
    return out.str();
  }
  if (name == "val_report.json" || name == "report.json") {
    json j = json::parse(slurp(p));
    j.erase("latency_s");
    return j.dump();
  }
  return slurp(p);
}

int run_cli(const std::string& args) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > /dev/null";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<std::string> diff_trees(const fs::path& a, const fs::path& b) {
  std::set<std::string> names;
  for (const auto& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  std::vector<std::string> bad;
  for (const auto& n : names)
    if (!fs::exists(a / n) || !fs::exists(b / n) || comparable(a / n) != comparable(b / n)) bad.push_back(n);
  return bad;
}

Outcome determinism() {
  const fs::path root = g_work / "determinism";
  fs::create_directories(root);
  const fs::path cfg = root / "config.json";
  std::ofstream(cfg) << json{{"net", {{"backbone", {{"dim", 16}, {"layers", 1}}}, {"embed", 16}, {"head_hidden", {32}}}},
                             {"train", {{"epochs", 2}, {"warmup_epochs", 1}, {"batch_size", 8}, {"lr_peak", 1e-3}}},
                             {"servo", {{"max_cycles", 40}}}}
                             .dump();
  std::vector<std::string> bad;
  int failures = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run;
    const std::string base = "--config \"" + cfg.string() + "\" --seed 7 --out \"";
    failures += run_cli(base + (d / "data").string() + "\" gen-data --n 64") != 0;
    failures += run_cli(base + (d / "train").string() + "\" train --data \"" + (root / "a" / "data").string() + "\"") != 0;
    failures += run_cli(base + (d / "servo_oracle").string() + "\" servo --runs 2") != 0;
    failures += run_cli(base + (d / "servo_net").string() + "\" servo --runs 2 --checkpoint \"" +
                        (root / "a" / "train" / "best.ckpt").string() + "\"") != 0;
  }
  if (failures == 0) bad = diff_trees(root / "a", root / "b");
  std::string which;
  for (const auto& n : bad) which += " " + n;
  return {failures == 0 && bad.empty(),
          failures ? fmt("%d CLI invocations failed", failures)
                   : (bad.empty() ? std::string("gen-data, train and servo outputs identical (timings excluded)")
                                  : "differing:" + which)};
}

Outcome robustness() {
  if (g_nominal.empty()) return {false, "needs the criterion 4 nominal runs"};
  const int nominal = converged_count(g_nominal);
  std::string detail = fmt("nominal %d/10;", nominal);
  bool ok = true;
  auto probe = [&](const std::string& name, auto tweak) {
    plant::ServoConfig c = learned_servo();
    tweak(c);
    const int n = converged_count(servo_runs(c, name));
    ok = ok && n >= nominal - 1;
    detail += fmt(" %s %d/10", name.c_str(), n);
  };
  for (double g : {0.6, 1.0, 1.4}) probe(fmt("gain_%.1f", g), [g](plant::ServoConfig& c) { c.lighting_gain = g; });
  for (double r : {0.05, 0.10}) probe(fmt("occluder_%.2f", r), [r](plant::ServoConfig& c) {
    c.occluder_radius_frac = r;
  });
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance <cli> <work_dir> [criterion ...]\n");
    return 2;
  }
  g_cli = argv[1];
  g_work = argv[2];
  std::set<int> only;
  for (int i = 3; i < argc; ++i) only.insert(std::atoi(argv[i]));
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"ablation ordering", ablation_ordering},
      {"controller contraction", controller_contraction},
      {"learned servo on held-out texture", learned_servo_accuracy},
      {"impedance analytics", impedance_analytics},
      {"force and tension regulation", force_regulation},
      {"determinism", determinism},
      {"robustness probes", robustness},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("criterion %d %s: %s  [%s] (%.0f s)\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
