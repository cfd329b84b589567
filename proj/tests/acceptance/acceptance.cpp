// Acceptance suite: one line per criterion, "criterion N: PASS|FAIL ...".
// Usage: acceptance [N ...] [--work DIR]. Without numbers every criterion
// runs. Exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pdseg/clickenc.hpp"
#include "pdseg/dataset.hpp"
#include "pdseg/errors.hpp"
#include "pdseg/harness.hpp"
#include "pdseg/io.hpp"
#include "pdseg/models.hpp"
#include "pdseg/objectives.hpp"
#include "pdseg/photometric.hpp"
#include "pdseg/synthworld.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/reprojection.hpp"

using namespace pdseg;
using nlohmann::json;
namespace fs = std::filesystem;
using testing::gradcheck;
using testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = fs::temp_directory_path() / "pdseg_acceptance";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1: Delta% golden rows -------------------------------------------------

Outcome criterion_1() {
  std::ifstream in(PDSEG_TEST_DATA_DIR "/reference_deltas.csv");
  if (!in) return {false, "reference_deltas.csv not found"};
  std::string line;
  int rows = 0, bad = 0;
  double worst = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    const double err = std::fabs(objectives::delta_percent(std::stod(f[3]), std::stod(f[4])) -
                                 std::stod(f[5]));
    worst = std::max(worst, err);
    if (err > 0.01) ++bad;
    ++rows;
  }
  return {bad == 0 && rows > 0, std::to_string(rows) + " printed (seen, unseen, delta) triples, max |error| " +
                                    fmt("%.4f", worst) + " (tolerance 0.01)"};
}

// ---- 2: gradient audit -----------------------------------------------------

struct Audit {
  std::string name;
  std::function<double()> run;
  double tol;
};

// Random fixed projection to a scalar, so every output element matters.
Tensor weighted(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(t, random_tensor(t.shape(), rng, -1, 1, false)));
}

std::vector<Audit> gradient_audits() {
  using F = testing::ScalarFn;
  std::vector<Audit> a;
  const auto op = [&](std::string name, Shape s1, Shape s2, std::function<Tensor(const Tensor&, const Tensor&)> f,
                      double lo = -1, double hi = 1) {
    a.push_back({name,
                 [=] {
                   std::mt19937_64 rng(std::hash<std::string>{}(name));
                   std::vector<Tensor> in{random_tensor(s1, rng, lo, hi)};
                   if (!s2.empty()) in.push_back(random_tensor(s2, rng, lo, hi));
                   const F fn = [&](const std::vector<Tensor>& x) {
                     return weighted(f(x[0], x.size() > 1 ? x[1] : Tensor()), 7);
                   };
                   return gradcheck(fn, in);
                 },
                 1e-4});
  };
  op("add (broadcast)", {2, 3, 4}, {3, 1}, [](auto& x, auto& y) { return add(x, y); });
  op("sub (broadcast)", {2, 3, 4}, {4}, [](auto& x, auto& y) { return sub(x, y); });
  op("mul (broadcast)", {3, 4}, {2, 1, 4}, [](auto& x, auto& y) { return mul(x, y); });
  op("div", {3, 4}, {3, 4}, [](auto& x, auto& y) { return div(x, y); }, 0.5, 2.0);
  op("log", {3, 4}, {}, [](auto& x, auto&) { return log(x); }, 0.2, 3.0);
  op("exp", {3, 4}, {}, [](auto& x, auto&) { return exp(x); });
  op("abs", {3, 4}, {}, [](auto& x, auto&) { return abs(add(x, 3.0)); });
  op("pow", {3, 4}, {}, [](auto& x, auto&) { return pow(x, 2.5); }, 0.2, 2.0);
  op("sigmoid", {3, 4}, {}, [](auto& x, auto&) { return sigmoid(mul(x, 3.0)); });
  op("relu", {3, 4}, {}, [](auto& x, auto&) { return relu(add(x, 2.0)) + relu(add(x, -2.0)); });
  op("clamp", {3, 4}, {}, [](auto& x, auto&) { return clamp(x, -2.0, 2.0); });
  op("sum over axes", {2, 3, 4}, {}, [](auto& x, auto&) { return sum(x, {0, 2}, true); });
  op("mean over axes", {2, 3, 4}, {}, [](auto& x, auto&) { return mean(x, {1}); });
  op("reshape", {2, 3, 4}, {}, [](auto& x, auto&) { return reshape(x, Shape{6, 4}); });
  op("slice", {2, 5, 3}, {}, [](auto& x, auto&) { return slice(x, 1, 1, 4); });
  op("concat", {2, 3}, {2, 2}, [](auto& x, auto& y) { return concat({x, y}, 1); });
  op("conv2d 3x3 pad 1", {2, 3, 6, 5}, {4, 3, 3, 3}, [](auto& x, auto& w) {
    std::mt19937_64 rng(3);
    return conv2d(x, w, random_tensor({4}, rng, -1, 1, false), 1, 1);
  });
  op("conv2d stride 2", {1, 2, 7, 7}, {3, 2, 3, 3}, [](auto& x, auto& w) { return conv2d(x, w, Tensor(), 2, 0); });
  op("conv2d bias", {3}, {}, [](auto& b, auto&) {
    std::mt19937_64 rng(4);
    return conv2d(random_tensor({1, 2, 4, 4}, rng, -1, 1, false), random_tensor({3, 2, 1, 1}, rng, -1, 1, false), b);
  });
  op("avg_pool2d", {2, 2, 6, 6}, {}, [](auto& x, auto&) { return avg_pool2d(x, 3, 2, 1); });
  op("upsample_bilinear", {1, 2, 3, 4}, {}, [](auto& x, auto&) { return upsample_bilinear(x, 2); });
  op("grid_sample", {1, 2, 5, 6}, {1, 3, 4, 2}, [](auto& src, auto& c) {
    // Keep coordinates inside the source and off the integer lattice.
    return grid_sample(src, add(mul(c, 1.7), 2.2)).output;
  });

  const auto loss = [&a](std::string name, std::function<double()> run) { a.push_back({name, run, 1e-4}); };
  loss("balanced BCE (probabilities)", [] {
    std::mt19937_64 rng(5);
    Tensor gt({2, 1, 4, 5}, 0.0);
    for (std::size_t i = 0; i < 40; i += 3) gt.data_mut()[i] = 1.0;
    return gradcheck([&](const std::vector<Tensor>& x) { return objectives::balanced_bce(x[0], gt); },
                     {random_tensor({2, 1, 4, 5}, rng, 0.05, 0.95)});
  });
  loss("balanced BCE (logits)", [] {
    std::mt19937_64 rng(6);
    Tensor gt({2, 1, 4, 5}, 0.0);
    for (std::size_t i = 1; i < 40; i += 4) gt.data_mut()[i] = 1.0;
    return gradcheck(
        [&](const std::vector<Tensor>& x) { return objectives::balanced_bce_with_logits(x[0], gt); },
        {random_tensor({2, 1, 4, 5}, rng, -3, 3)});
  });
  loss("SSIM", [] {
    std::mt19937_64 rng(7);
    return gradcheck(
        [&](const std::vector<Tensor>& x) { return weighted(photo::ssim(x[0], x[1]), 8); },
        {random_tensor({1, 3, 6, 6}, rng, 0, 1), random_tensor({1, 3, 6, 6}, rng, 0, 1)});
  });
  loss("photometric", [] {
    std::mt19937_64 rng(8);
    Tensor valid({1, 6, 6}, 1.0);
    valid.data_mut()[5] = 0.0;
    return gradcheck(
        [&](const std::vector<Tensor>& x) { return photo::photometric_loss(x[0], x[1], valid); },
        {random_tensor({1, 3, 6, 6}, rng, 0, 1), random_tensor({1, 3, 6, 6}, rng, 0, 1)});
  });
  loss("smoothness", [] {
    std::mt19937_64 rng(9);
    return gradcheck(
        [&](const std::vector<Tensor>& x) { return photo::smoothness_loss(x[0], x[1]); },
        {random_tensor({2, 5, 6}, rng, 0.5, 2.0), random_tensor({2, 3, 5, 6}, rng, 0, 1)});
  });

  // End to end through projection, warp and the photometric loss.
  a.push_back({"warp + photometric (depth, pose, source)",
               [] {
                 std::mt19937_64 rng(10);
                 const photo::CameraIntrinsics K;
                 Tensor pose({1, 6}, {0.02, -0.01, 0.015, 0.05, -0.03, 0.04}, true);
                 const Tensor target = random_tensor({1, 3, 8, 8}, rng, 0, 1, false);
                 return gradcheck(
                     [&](const std::vector<Tensor>& x) {
                       const auto w = photo::warp(x[2], x[0], x[1], K);
                       return photo::photometric_loss(target, w.image, w.valid);
                     },
                     {random_tensor({1, 8, 8}, rng, 2.0, 4.0), pose, random_tensor({1, 3, 8, 8}, rng, 0, 1)},
                     1e-6);
               },
               1e-3});
  a.push_back({"depth + pose networks end to end (16x16)",
               [] {
                 models::DepthNetConfig dc;
                 dc.widths = {2, 2, 2, 2};
                 dc.decoder_width = 2;
                 models::PoseNetConfig pc;
                 pc.widths = {2, 2, 2, 2};
                 models::DepthNet dn(dc, 11);
                 models::PoseNet pn(pc, 12);
                 std::mt19937_64 rng(13);
                 for (auto* p : {&dn.params(), &pn.params()})
                   for (std::size_t i = 0; i < p->names().size(); ++i)
                     if (p->names()[i].ends_with(".b"))
                       for (double& v : p->tensors()[i].data_mut()) v = std::uniform_real_distribution<double>(0.05, 0.2)(rng);
                 const Tensor tgt = random_tensor({1, 3, 16, 16}, rng, 0, 1, false);
                 const Tensor src = random_tensor({1, 3, 16, 16}, rng, 0, 1, false);
                 const photo::CameraIntrinsics K;
                 std::vector<Tensor> params = dn.params().tensors();
                 for (const Tensor& t : pn.params().tensors()) params.push_back(t);
                 const std::size_t nd = dn.params().names().size();
                 const testing::ScalarFn f = [&](const std::vector<Tensor>& x) {
                   models::ParamStore dp, pp;
                   for (std::size_t i = 0; i < nd; ++i) dp.add(dn.params().names()[i], x[i]);
                   for (std::size_t i = nd; i < x.size(); ++i) pp.add(pn.params().names()[i - nd], x[i]);
                   const models::DepthNet d(dc, std::move(dp));
                   const models::PoseNet p(pc, std::move(pp));
                   const Tensor disp = d.disparity(tgt);
                   const Tensor depth = div(Tensor::ones(disp.shape()), disp);
                   const auto w = photo::warp(src, depth, p.forward(tgt, src), K);
                   return photo::photometric_loss(tgt, w.image, w.valid) + photo::smoothness_loss(disp, tgt) * 1e-3;
                 };
                 // Error against the global gradient scale: tiny per-parameter
                 // gradients sit at the finite-difference noise floor.
                 const Tensor loss = f(params);
                 backward(loss);
                 double scale = 1e-12, err = 0;
                 for (std::size_t k = 0; k < params.size(); ++k) {
                   const auto num = testing::numeric_grad(f, params, k, 1e-6);
                   const auto ana = params[k].grad();
                   for (std::size_t i = 0; i < num.size(); ++i) {
                     scale = std::max(scale, std::fabs(num[i]));
                     err = std::max(err, std::fabs(num[i] - ana[i]));
                   }
                 }
                 return err / scale;
               },
               1e-3});
  return a;
}

Outcome criterion_2() {
  bool ok = true;
  double worst_op = 0, worst_e2e = 0;
  std::string failures;
  for (const Audit& a : gradient_audits()) {
    const double err = a.run();
    const bool pass = err < a.tol;
    std::printf("  %-44s rel. error %.2e (< %.0e) %s\n", a.name.c_str(), err, a.tol, pass ? "ok" : "FAIL");
    (a.tol < 1e-3 ? worst_op : worst_e2e) = std::max(a.tol < 1e-3 ? worst_op : worst_e2e, err);
    if (!pass) failures += " " + a.name;
    ok = ok && pass;
  }
  return {ok, "ops/losses max " + fmt("%.2e", worst_op) + " (< 1e-4), end to end max " + fmt("%.2e", worst_e2e) +
                  " (< 1e-3)" + (failures.empty() ? "" : ", failed:" + failures)};
}

// ---- 3: distance transforms -------------------------------------------------

Outcome criterion_3() {
  std::mt19937_64 rng(2024);
  int edt_bad = 0, click_bad = 0;
  for (int t = 0; t < 100; ++t) {
    const Tensor mask = testing::random_mask(32, 32, rng, 0.2 + 0.006 * t);
    const Tensor fast = click::edt_binary(mask), slow = testing::brute_force_edt(mask);
    for (std::size_t i = 0; i < fast.numel(); ++i)
      if (fast.data()[i] != slow.data()[i]) {
        ++edt_bad;
        break;
      }
    const click::Click p{rng() % 32, rng() % 32};
    const Tensor cm = click::click_distance_map(p, 32, 32, click::ClickNorm::raw);
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) {
        const double di = double(i) - double(p.row), dj = double(j) - double(p.col);
        if (cm.data()[i * 32 + j] != std::sqrt(di * di + dj * dj)) {
          ++click_bad;
          i = 32;
          break;
        }
      }
  }
  return {edt_bad == 0 && click_bad == 0, "100 random 32x32 instances: edt mismatches " + std::to_string(edt_bad) +
                                              ", click map mismatches " + std::to_string(click_bad)};
}

// ---- 4: geometry -----------------------------------------------------------

Outcome criterion_4() {
  const photo::CameraIntrinsics K;
  std::mt19937_64 rng(4);
  const Tensor depth = random_tensor({2, 64, 64}, rng, 0.5, 20.0, false);
  const auto proj = photo::project_points(depth, Tensor({2, 6}, 0.0), K);
  const Tensor grid = photo::pixel_grid(64, 64);
  double id_err = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < grid.numel(); ++k)
      id_err = std::max(id_err, std::fabs(proj.coords.data()[n * grid.numel() + k] - grid.data()[k]));

  double worst = 0, mean = 0;
  std::size_t pairs = 0;
  for (std::uint64_t s = 0; s < 6; ++s) {
    synth::SequenceSpec spec;
    spec.scene = synth::random_scene({}, synth::derive_seed(77, s));
    spec.seed = synth::derive_seed(78, s);
    const synth::Sequence seq = synth::render_sequence(spec, 64, 64);
    for (std::size_t t = 0; t + 1 < seq.frames.size(); ++t)
      for (auto [a, b] : {std::pair{t, t + 1}, std::pair{t + 1, t}}) {
        const auto st = testing::reprojection_error(seq, a, b);
        worst = std::max(worst, st.mae);
        mean += st.mae;
        ++pairs;
      }
  }
  mean /= static_cast<double>(pairs);
  return {id_err <= 1e-12 && worst < 0.02,
          "identity projection max error " + fmt("%.1e", id_err) + " (<= 1e-12); GT warp MAE over " +
              std::to_string(pairs) + " rendered 64x64 pairs: mean " + fmt("%.4f", mean) + ", worst " +
              fmt("%.4f", worst) + " (< 0.02)"};
}

// ---- 5: balanced loss ------------------------------------------------------

Outcome criterion_5() {
  double chance_err = 0;
  std::mt19937_64 rng(5);
  for (std::size_t fg = 1; fg < 64; fg += 5) {
    Tensor gt({8, 8}, 0.0);
    for (std::size_t i = 0; i < fg; ++i) gt.data_mut()[i] = 1.0;
    const double l = objectives::balanced_bce(Tensor({8, 8}, 0.5), gt).item();
    chance_err = std::max(chance_err, std::fabs(l - 2 * std::log(2.0)));
  }
  // Duplicating every background pixel (prediction and label) leaves the
  // loss unchanged.
  double dup_err = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 30;
    const Tensor p = random_tensor({1, n}, rng, 0.05, 0.95, false);
    Tensor gt({1, n}, 0.0);
    for (std::size_t i = 0; i < n; i += 4) gt.data_mut()[i] = 1.0;
    std::vector<double> pv(p.data().begin(), p.data().end()), gv(gt.data().begin(), gt.data().end());
    for (std::size_t i = 0; i < n; ++i)
      if (gt.data()[i] == 0.0) {
        pv.push_back(p.data()[i]);
        gv.push_back(0.0);
      }
    const std::size_t m = pv.size();
    const double a = objectives::balanced_bce(p, gt).item();
    const double b = objectives::balanced_bce(Tensor({1, m}, pv), Tensor({1, m}, gv)).item();
    dup_err = std::max(dup_err, std::fabs(a - b) / std::fabs(a));
  }
  return {chance_err <= 1e-9 && dup_err <= 1e-14,
          "constant 0.5: max |loss - 2 ln 2| " + fmt("%.1e", chance_err) +
              " over 13 foreground fractions (<= 1e-9); background duplication: max rel. change " +
              fmt("%.1e", dup_err) + " (float64 summation order only)"};
}

// ---- 6: self-supervised depth --------------------------------------------

Outcome criterion_6() {
  const harness::MonodepthConfig cfg;  // the reference corpus and training setup
  const auto train = harness::make_sequence_corpus(cfg, cfg.seed, cfg.sequences);
  const harness::MonodepthResult r = harness::train_monodepth(cfg, train);
  const double first = harness::smoothed_loss(r.photometric_loss, 10);
  const double last = harness::smoothed_loss(r.photometric_loss, r.photometric_loss.size());
  const double reduction = 1.0 - last / first;

  const auto held = harness::make_sequence_corpus(cfg, synth::derive_seed(cfg.seed, 0x4e1d), 8);
  const models::DepthNet net = harness::depth_net_from(r.checkpoint);
  double rho = 0;
  std::size_t frames = 0;
  for (const synth::Sequence& s : held)
    for (const synth::Sample& f : s.frames) {
      const Tensor d = net.depth(reshape(f.rgb, Shape{1, 3, cfg.height, cfg.width}));
      rho += harness::spearman(d.data(), f.depth.data());
      ++frames;
    }
  rho /= static_cast<double>(frames);
  return {reduction >= 0.5 && rho > 0.8,
          std::to_string(cfg.steps) + " steps: smoothed photometric loss " + fmt("%.4f", first) + " -> " +
              fmt("%.4f", last) + " (reduction " + fmt("%.1f", 100 * reduction) + "%, need >= 50%); Spearman " +
              fmt("%.3f", rho) + " mean over " + std::to_string(frames) + " held-out frames (need > 0.8)"};
}

// ---- 7 and 8: experiment matrix --------------------------------------------

const data::DatasetManifest& benchmark(fs::path& root) {
  root = g_work / "benchmark";
  static std::optional<data::DatasetManifest> m;
  if (!m) {
    const data::DatasetConfig c;  // 200 train / 60 val at 64x64, master seed 1
    m = data::build_dataset(c, root);
    m->validate(root);
  }
  return *m;
}

std::vector<harness::ExperimentConfig> core_matrix(std::size_t iterations, std::vector<std::uint64_t> seeds) {
  std::vector<harness::ExperimentConfig> rows;
  for (auto [name, s] : {std::pair{"rgb", harness::Scenario::rgb_only}, std::pair{"depth", harness::Scenario::depth_only},
                         std::pair{"rgbd", harness::Scenario::rgb_d},
                         std::pair{"rgb+rgb", harness::Scenario::rgb_rgb_control}}) {
    harness::ExperimentConfig e;
    e.name = name;
    e.scenario = s;
    e.split_k = 4;
    e.optim.iterations = iterations;
    e.seeds = seeds;
    rows.push_back(e);
  }
  return rows;
}

constexpr std::size_t kCriterion7Iterations = 2500;

Outcome criterion_7() {
  fs::path root;
  const data::DatasetManifest& m = benchmark(root);
  harness::MatrixOptions opt;
  opt.note = [](const std::string& s) { std::printf("  %s\n", s.c_str()); std::fflush(stdout); };
  const json report = harness::run_matrix(core_matrix(kCriterion7Iterations, {1, 2, 3}), m, root, opt);
  io::write_file_atomic(g_work / "criterion7_report.json", report.dump(2) + "\n");
  const std::string table = harness::render_table(report);
  std::printf("%s", table.c_str());
  const auto delta = [&](std::size_t i) -> std::optional<double> {
    const json& v = report["rows"][i]["delta_percent"];
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  const auto rgb = delta(0), depth = delta(1), rgbd = delta(2), control = delta(3);
  if (!rgb || !depth || !rgbd || !control) return {false, "a row failed or has no Delta%"};
  const bool a = *depth < *rgb, b = *rgbd < *control;
  return {a && b, "k=4, 3 seeds, " + std::to_string(kCriterion7Iterations) + " steps: (a) Delta% depth " +
                      fmt("%.2f", *depth) + " vs rgb " + fmt("%.2f", *rgb) + (a ? " holds" : " FAILS") +
                      "; (b) Delta% rgbd " + fmt("%.2f", *rgbd) + " vs rgb+rgb " + fmt("%.2f", *control) +
                      (b ? " holds" : " FAILS")};
}

Outcome criterion_8() {
  data::DatasetConfig c;
  c.train = 24;
  c.val = 8;
  c.master_seed = 8;
  const fs::path root = g_work / "repro";
  const data::DatasetManifest m = data::build_dataset(c, root);
  auto rows = core_matrix(40, {5});
  rows.resize(3);
  const std::string a = harness::run_matrix(rows, m, root).dump(2);
  const std::string b = harness::run_matrix(rows, m, root).dump(2);
  const std::string ta = harness::render_table(json::parse(a)), tb = harness::render_table(json::parse(b));
  return {a == b && ta == tb, "3-row matrix run twice: report.json " + std::string(a == b ? "identical" : "DIFFERS") +
                                  " (" + std::to_string(a.size()) + " bytes), table " +
                                  (ta == tb ? "identical" : "DIFFERS")};
}

struct Criterion {
  int id;
  double budget_s;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{{1, 1, criterion_1},   {2, 120, criterion_2},   {3, 10, criterion_3},
                                   {4, 30, criterion_4},  {5, 5, criterion_5},     {6, 1200, criterion_6},
                                   {7, 3600, criterion_7}, {8, 3600, criterion_8}};
  std::vector<int> chosen;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      chosen.push_back(std::atoi(argv[i]));
    }
  }
  fs::create_directories(g_work);
  int failed = 0;
  for (const Criterion& c : all) {
    if (!chosen.empty() && std::find(chosen.begin(), chosen.end(), c.id) == chosen.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    std::printf("criterion %d: %s  %s  [%.1f s of %.0f s budget%s]\n", c.id, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", OVER BUDGET");
    std::fflush(stdout);
    failed += pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
