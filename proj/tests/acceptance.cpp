// Acceptance runner: one PASS/FAIL line per criterion. Tolerances are pinned
// here; exit status is nonzero if any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "vesselforge/evalkit.hpp"
#include "vesselforge/pipeline.hpp"

using namespace vesselforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig tiny_model(Variant v = Variant::full) {
  ModelConfig c;
  c.depth = 2;
  c.widths = {2, 4, 8};
  c.patch_size = 8;
  c.cls_hidden = 6;
  c.variant = v;
  return c;
}

Volume3D field(Index3 d, double sp, const std::function<double(double, double, double)>& f) {
  Volume3D v(Grid{d, {sp, sp, sp}, {0, 0, 0}});
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) v.at(x, y, z) = static_cast<float>(f(x * sp, y * sp, z * sp));
  return v;
}

Volume3D rot_z(const Volume3D& v) {
  const auto& d = v.grid.dims;
  Volume3D out(Grid{{d[1], d[0], d[2]}, v.grid.spacing, v.grid.origin});
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) out.at(d[1] - 1 - y, x, z) = v.at(x, y, z);
  return out;
}

Volume3D rot_x(const Volume3D& v) {
  const auto& d = v.grid.dims;
  Volume3D out(Grid{{d[0], d[2], d[1]}, v.grid.spacing, v.grid.origin});
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) out.at(x, d[2] - 1 - z, y) = v.at(x, y, z);
  return out;
}

// ---------------------------------------------------------------------------

Outcome c1_autodiff() {
  const auto t0 = Clock::now();
  const auto cfg = tiny_model();
  auto ps = net::make_initialized<double>(cfg, 21);
  Rng rng(22);
  const int n = 2, s = 8;
  ad::Tensor<double> image({n, 1, s, s, s}), vessel({n, 1, s, s, s});
  for (auto& v : image.data) v = rng.normal();
  for (auto& v : vessel.data) v = rng.uniform();
  std::vector<std::uint8_t> labels(image.numel());
  for (int z = 3; z <= 5; ++z)
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x) labels[cube::volume(s) + cube::index(x, y, z, s)] = 1;
  const std::vector<int> cls{0, 1};
  LossConfig lc;
  lc.phi = 0.3;
  lc.beta = 0.5;

  const auto loss_of = [&](bool backward) {
    ad::Graph<double> g;
    Rng drop(77);
    auto out = net::forward(g, ps, g.constant(image), g.constant(vessel), cfg, true, &drop);
    auto tot = loss::total_loss(g, out.cls, cls, out.seg, labels, lc);
    if (backward) g.backward(tot.var);
    return tot.terms.total;
  };
  ps.zero_grad();
  loss_of(true);
  const auto rep = oracle::check_store(ps, [&] { return loss_of(false); }, 1e-4, 1e-6);
  const double secs = seconds_since(t0);
  return {rep.max_rel <= 1e-4 && secs <= 120.0,
          fmt("%zu parameters, max rel err %.2e (<= 1e-4) at %s, %.1f s (<= 120 s)", rep.checked, rep.max_rel,
              rep.worst.c_str(), secs)};
}

Outcome c2_losses() {
  std::vector<std::string> bad;
  const double focal = loss::focal_loss(0.0, 1, 0.25, 2.0);
  if (std::abs(focal - 0.25 * 0.25 * std::log(2.0)) > 1e-9) bad.push_back(fmt("focal %.12f", focal));

  Rng rng(5);
  const int s = 4;
  ad::Tensor<double> logits({2, 2, s, s, s});
  std::vector<std::uint8_t> lab(2 * cube::volume(s));
  for (auto& l : lab) l = rng.uniform() < 0.3;
  const std::size_t per = cube::volume(s);
  for (int b = 0; b < 2; ++b)
    for (std::size_t v = 0; v < per; ++v) {
      const bool fg = lab[b * per + v];
      logits.data[(b * 2 + 0) * per + v] = fg ? -20 : 20;
      logits.data[(b * 2 + 1) * per + v] = fg ? 20 : -20;
    }
  double gd = 0;
  {
    ad::Graph<double> g;
    gd = g.value(loss::generalized_dice_loss(g, g.leaf(logits), lab, LossConfig{})).data[0];
  }
  if (gd > 1e-4) bad.push_back(fmt("GD on perfect prediction %.3e", gd));

  std::fill(logits.data.begin(), logits.data.end(), 0.7);
  double ce = 0;
  {
    ad::Graph<double> g;
    ce = g.value(loss::cross_entropy_loss(g, g.leaf(logits), lab, LossConfig{})).data[0];
  }
  if (std::abs(ce - std::log(2.0)) > 1e-9) bad.push_back(fmt("CE uniform %.12f", ce));

  for (auto& v : logits.data) v = 1.5 * rng.normal();
  ad::Tensor<double> clsz({2, 1});
  clsz.data = {rng.normal(), rng.normal()};
  const auto run = [&](double phi, double beta) {
    LossConfig c;
    c.phi = phi;
    c.beta = beta;
    ad::Graph<double> g;
    return loss::total_loss(g, g.leaf(clsz), {0, 1}, g.leaf(logits), lab, c).terms;
  };
  for (double beta : {0.0, 1.0}) {
    const auto t = run(1.0, beta);
    if (t.total != t.focal) bad.push_back("phi=1 total != focal");
  }
  for (double phi : {0.0, 1.0})
    for (double beta : {0.0, 1.0}) {
      const auto t = run(phi, beta);
      const double expect = phi == 1.0 ? t.focal : (beta == 1.0 ? t.gdice : t.ce);
      if (t.total != expect) bad.push_back(fmt("boundary phi=%g beta=%g", phi, beta));
    }
  std::string detail = fmt("focal %.10f, GD(perfect) %.1e, CE(uniform) %.10f, boundary identities exact", focal, gd, ce);
  for (const auto& b : bad) detail += "; " + b;
  return {bad.empty(), detail};
}

Outcome c3_vesselness() {
  std::vector<std::string> bad;
  const VesselnessParams def;
  if (def.sigma != 1.0 || def.alpha1 != 0.5 || def.alpha2 != 2.0) bad.push_back("defaults");

  double worst_const = 0;
  for (auto m : {VesselnessMeasure::sato, VesselnessMeasure::frangi}) {
    VesselnessParams p;
    p.measure = m;
    for (float x : vesselness_map(Volume3D(Grid{{16, 16, 16}, {0.5, 0.5, 0.5}, {0, 0, 0}}, 3.0f), p).data)
      worst_const = std::max(worst_const, std::abs(double(x)));
  }
  if (worst_const > 1e-12) bad.push_back(fmt("constant map %.2e", worst_const));

  Rng rng(2);
  double worst_recon = 0;
  for (int trial = 0; trial < 100000; ++trial) {
    SymMat3 m{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
              rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    if (trial % 10 == 0) m.yy = m.xx;
    const std::array<std::array<double, 3>, 3> a{{{m.xx, m.xy, m.xz}, {m.xy, m.yy, m.yz}, {m.xz, m.yz, m.zz}}};
    const auto got = eigvals_sym3(m);
    // Eigenvectors from cyclic Jacobi with accumulated rotations.
    auto w = a;
    std::array<std::array<double, 3>, 3> q{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    for (int sweep = 0; sweep < 100; ++sweep) {
      if (w[0][1] * w[0][1] + w[0][2] * w[0][2] + w[1][2] * w[1][2] < 1e-32) break;
      for (int p = 0; p < 2; ++p)
        for (int r = p + 1; r < 3; ++r) {
          if (w[p][r] == 0) continue;
          const double th = (w[r][r] - w[p][p]) / (2 * w[p][r]);
          const double t = (th >= 0 ? 1.0 : -1.0) / (std::abs(th) + std::sqrt(th * th + 1));
          const double c = 1 / std::sqrt(t * t + 1), sn = t * c;
          for (int k = 0; k < 3; ++k) {
            const double kp = w[k][p], kr = w[k][r];
            w[k][p] = c * kp - sn * kr;
            w[k][r] = sn * kp + c * kr;
          }
          for (int k = 0; k < 3; ++k) {
            const double pk = w[p][k], rk = w[r][k];
            w[p][k] = c * pk - sn * rk;
            w[r][k] = sn * pk + c * rk;
          }
          for (int k = 0; k < 3; ++k) {
            const double kp = q[k][p], kr = q[k][r];
            q[k][p] = c * kp - sn * kr;
            q[k][r] = sn * kp + c * kr;
          }
        }
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int i, int j) { return w[i][i] > w[j][j]; });
    double norm = 0, resid = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double r = 0;
        for (int k = 0; k < 3; ++k) r += q[i][order[k]] * got[k] * q[j][order[k]];
        resid += (a[i][j] - r) * (a[i][j] - r);
        norm += a[i][j] * a[i][j];
      }
    worst_recon = std::max(worst_recon, std::sqrt(resid / norm));
  }
  if (worst_recon > 1e-6) bad.push_back(fmt("eigen reconstruction %.2e", worst_recon));

  // Gaussian cross-section of 1 mm, sigma 1 mm, grid 0.5 mm.
  const double w = 1.0, c = 8.0;
  const auto tube = field({33, 33, 33}, 0.5, [&](double x, double y, double) {
    return std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2 * w * w));
  });
  const auto sphere = field({33, 33, 33}, 0.5, [&](double x, double y, double z) {
    return std::exp(-((x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c)) / (2 * w * w));
  });
  VesselnessParams raw;
  raw.normalize = false;
  const auto idx = tube.grid.index(16, 16, 16);
  const double vt = vesselness_map(tube, raw).data[idx], vs = vesselness_map(sphere, raw).data[idx];
  if (!(vt > 3 * vs)) bad.push_back(fmt("tube %.4f vs sphere %.4f", vt, vs));

  Volume3D blobs(Grid{{14, 12, 10}, {1, 1, 1}, {0, 0, 0}}, 0.0f);
  for (int k = 0; k < 6; ++k) {
    const Vec3 q{rng.uniform(0, 14), rng.uniform(0, 12), rng.uniform(0, 10)};
    const double r = rng.uniform(1, 3);
    for (int z = 0; z < 10; ++z)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 14; ++x)
          blobs.at(x, y, z) += static_cast<float>(
              std::exp(-((x - q[0]) * (x - q[0]) + (y - q[1]) * (y - q[1]) + (z - q[2]) * (z - q[2])) / (2 * r * r)));
  }
  const auto base = vesselness_map(blobs, def);
  const auto argmax = [](const Volume3D& v) { return std::max_element(v.data.begin(), v.data.end()) - v.data.begin(); };
  for (float k : {0.5f, 3.0f, 40.0f}) {
    Volume3D sc = blobs;
    for (auto& x : sc.data) x *= k;
    if (argmax(vesselness_map(sc, def)) != argmax(base)) bad.push_back(fmt("argmax moved at k=%g", k));
  }
  double worst_rot = 0;
  for (const auto& rot : {rot_z, rot_x}) {
    const auto a = vesselness_map(rot(blobs), def), b = rot(base);
    for (std::size_t i = 0; i < a.size(); ++i) worst_rot = std::max(worst_rot, std::abs(double(a.data[i]) - b.data[i]));
  }
  if (worst_rot > 1e-5) bad.push_back(fmt("rotation %.2e", worst_rot));

  std::string detail = fmt("constant %.1e, eigen recon %.1e over 1e5, tube/sphere %.2f, rotation err %.1e, argmax scale-invariant",
                           worst_const, worst_recon, vs > 0 ? vt / vs : INFINITY, worst_rot);
  for (const auto& b : bad) detail += "; " + b;
  return {bad.empty(), detail};
}

Outcome c4_metrics() {
  Rng rng(4);
  int mismatches = 0;
  double worst_hd = 0, worst_identity = 0;
  for (int t = 0; t < 200; ++t) {
    const Index3 d{static_cast<int>(rng.uniform_int(2, 16)), static_cast<int>(rng.uniform_int(2, 16)),
                   static_cast<int>(rng.uniform_int(2, 16))};
    const auto a = oracle::random_blobs(d, 5, rng), b = oracle::random_blobs(d, 5, rng);
    const auto m = eval::match_detections(a, b);
    const auto bm = oracle::match_brute(a, b);
    if (m.tp != bm.tp || m.fp != bm.fp || m.fn != bm.fn) ++mismatches;

    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inter += a.data[i] && b.data[i];
      na += a.data[i] != 0;
      nb += b.data[i] != 0;
    }
    const double dice_ref = na + nb ? 2.0 * inter / double(na + nb) : 1.0;
    const double iou_ref = na + nb - inter ? double(inter) / double(na + nb - inter) : 1.0;
    const double dc = eval::dice(a, b), ji = eval::iou(a, b);
    if (dc != dice_ref || ji != iou_ref) ++mismatches;
    worst_identity = std::max(worst_identity, std::abs(dc - 2 * ji / (1 + ji)));
    if (na && nb) {
      const Vec3 sp{rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0)};
      worst_hd = std::max(worst_hd, std::abs(eval::hd95(a, b, sp) - oracle::hd95_brute(a, b, sp)));
    }
  }
  return {mismatches == 0 && worst_hd <= 1e-9 && worst_identity <= 1e-12,
          fmt("200 pairs: %d count/Dice/IoU mismatches, HD95 max err %.1e (<= 1e-9), identity err %.1e", mismatches,
              worst_hd, worst_identity)};
}

Outcome c5_postprocessing() {
  Rng rng(5);
  int violations = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = t % 2 ? oracle::random_blobs({14, 14, 14}, 30, rng) : oracle::random_mask({12, 12, 12}, 0.35, rng);
    const auto r = remove_small_components(m, 5);
    int count = 0;
    const auto lab = oracle::flood_labels(r, 1, 26, &count);
    const auto sizes = oracle::component_sizes(lab, count);
    for (int l = 1; l <= count; ++l) violations += sizes[l] < 5;
    violations += !(remove_small_components(r, 5) == r);
    const auto f = fill_holes(m);
    violations += !oracle::no_enclosed_background(f);
    violations += !(fill_holes(f) == f);
  }
  return {violations == 0, fmt("100 random masks, %d violations", violations)};
}

Outcome c6_tta() {
  std::vector<std::string> bad;
  Rng rng(6);
  for (int s : {7, 8}) {
    std::vector<float> c(cube::volume(s));
    for (auto& v : c) v = static_cast<float>(rng.normal());
    for (auto t : cube::default_transforms()) {
      auto d = c;
      cube::apply(std::span(d), s, t);
      cube::apply(std::span(d), s, t, true);
      if (d != c) bad.push_back("inverse of " + cube::to_string(t));
    }
  }
  if (cube::default_transforms().size() != 7) bad.push_back("expected 7 default transforms");

  const auto cfg = tiny_model();
  auto ps = net::make_initialized<float>(cfg, 3);
  std::vector<float> im(cube::volume(8)), ve(cube::volume(8));
  for (auto& v : im) v = static_cast<float>(rng.normal());
  for (auto& v : ve) v = static_cast<float>(rng.uniform());
  auto order = cube::default_transforms();
  std::vector<double> ref, other;
  predict_cube(ps, cfg, order, im, ve, ref);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    shuffle(order.begin(), order.end(), rng);
    predict_cube(ps, cfg, order, im, ve, other);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - other[i]));
  }
  if (worst > 1e-6) bad.push_back(fmt("order dependence %.2e", worst));

  Volume3D image(Grid{{16, 16, 16}, {1, 1, 1}, {0, 0, 0}}), vessel(image.grid, 0.0f);
  for (auto& v : image.data) v = static_cast<float>(rng.normal());
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        vessel.at(x, y, z) = static_cast<float>(std::exp(-((x - 5.0) * (x - 5) + (y - 9.0) * (y - 9)) / 6) *
                                                (1 + 0.1 * std::sin(z)));
  InferenceConfig a;
  a.n_patches = 6;
  a.tta.enabled = false;
  InferenceConfig b = a;
  b.tta.enabled = true;
  b.tta.transforms = {cube::Transform::identity};
  const auto ra = infer_with_vessel(image, vessel, ps, cfg, a), rb = infer_with_vessel(image, vessel, ps, cfg, b);
  if (ra.prob.data != rb.prob.data || ra.mask.data != rb.mask.data) bad.push_back("singleton TTA differs from no TTA");

  std::string detail = fmt("7 inverses exact, order err %.1e (<= 1e-6), singleton bit-identical", worst);
  for (const auto& x : bad) detail += "; " + x;
  return {bad.empty(), detail};
}

Outcome c7_determinism(const fs::path& work) {
  std::vector<std::string> bad;
  const PhantomSpec spec;
  const auto p1 = generate_phantom(spec), p2 = generate_phantom(spec);
  if (!(p1.image == p2.image && p1.precise == p2.precise && p1.weak == p2.weak && p1.sites == p2.sites))
    bad.push_back("phantom");

  PhantomSpec small;
  small.dims = {32, 32, 32};
  small.seed = 7;
  DatasetOptions opts;
  opts.test_fraction = 0.34;
  opts.val_fraction = 0.25;
  const auto m = make_dataset(6, small, work / "c7_data", opts);
  ExperimentConfig e;
  e.model = tiny_model();
  e.train.max_epochs = 5;
  e.train.steps_per_epoch = 3;
  e.train.batch_size = 2;
  e.data.positives_per_site = 2;
  e.data.max_offset = 2;
  e.data.negatives_per_subject = 3;
  e.infer.n_patches = 6;
  const auto d1 = prepare_data(m, e), d2 = prepare_data(m, e);
  const auto t1 = train(d1.train_patches, d1.val_patches, e.model, e.loss, e.train, e.data);
  const auto t2 = train(d2.train_patches, d2.val_patches, e.model, e.loss, e.train, e.data);
  const auto h1 = params_hash(t1.params), h2 = params_hash(t2.params);
  if (h1 != h2) bad.push_back("training");

  auto q1 = t1.params, q2 = t2.params;
  const auto& subj = d1.test.front();
  const auto i1 = infer_with_vessel(subj.image, subj.vessel, q1, e.model, e.infer);
  const auto i2 = infer_with_vessel(subj.image, subj.vessel, q2, e.model, e.infer);
  if (i1.prob.data != i2.prob.data || i1.mask.data != i2.mask.data) bad.push_back("inference");

  std::string detail = "phantom, 5-epoch training (" + hex64(h1) + ") and inference reproduce bit-identically";
  if (!bad.empty()) {
    detail = "differs:";
    for (const auto& b : bad) detail += " " + b;
  }
  return {bad.empty(), detail};
}

// Desk configuration for the end-to-end gate, fixed at calibration.
ExperimentConfig desk_config() {
  ExperimentConfig e;
  e.model.depth = 2;
  e.model.widths = {4, 8, 16};
  e.model.patch_size = 16;
  e.model.cls_hidden = 16;
  e.train.batch_size = 4;
  e.train.steps_per_epoch = 40;
  e.train.max_epochs = 30;
  e.train.lr0 = 3e-3;
  e.train.lr_period = 10;
  e.train.seed = 1;
  e.data.positives_per_site = 8;
  e.data.max_offset = 4;
  e.data.negatives_per_subject = 20;
  e.infer.n_patches = 24;
  return e;
}

struct EndToEnd {
  bool ran = false;
  std::string error;
  double train_seconds = 0;
  std::string hash;
  eval::CohortReport with_tta, without_tta;
};

EndToEnd run_end_to_end(const fs::path& work) {
  EndToEnd r;
  try {
    PhantomSpec spec;  // 48^3
    spec.seed = 2024;
    DatasetOptions opts;  // 20% controls, 1-2 aneurysms
    opts.test_fraction = 1.0 / 3.0;
    const auto m = make_dataset(30, spec, work / "c8_data", opts);
    const auto e = desk_config();
    const auto d = prepare_data(m, e);
    if (d.test.size() != 10) throw ConfigError("expected 10 held-out phantoms, got " + std::to_string(d.test.size()));
    TrainOutputs outs;
    outs.log_csv = work / "c8_train.csv";
    outs.log_steps = false;
    const auto t0 = Clock::now();
    auto tr = train(d.train_patches, d.val_patches, e.model, e.loss, e.train, e.data, outs);
    r.train_seconds = seconds_since(t0);
    r.hash = hex64(params_hash(tr.params));
    auto icfg = e.infer;
    icfg.tta.enabled = true;
    r.with_tta = evaluate_subjects(d.test, tr.params, e.model, icfg).report;
    icfg.tta.enabled = false;
    r.without_tta = evaluate_subjects(d.test, tr.params, e.model, icfg).report;
    r.ran = true;
  } catch (const std::exception& ex) {
    r.error = ex.what();
  }
  return r;
}

Outcome c8_end_to_end(const EndToEnd& r) {
  if (!r.ran) return {false, "run failed: " + r.error};
  const auto& t = r.with_tta;
  const bool pass = r.train_seconds <= 900.0 && t.sensitivity.n > 0 && t.sensitivity.mean >= 0.8 && t.dice.n > 0 &&
                    t.dice.mean >= 0.5;
  return {pass, fmt("train %.0f s (<= 900), sensitivity %.3f (>= 0.8), mean TP Dice %.3f (>= 0.5), FP/subject %.2f, "
                    "HD95 %.2f mm",
                    r.train_seconds, t.sensitivity.mean, t.dice.mean, t.fp_rate.mean, t.hd95_mm.mean)};
}

Outcome c9_tta_trend(const EndToEnd& r) {
  if (!r.ran) return {false, "run failed: " + r.error};
  const auto &a = r.with_tta, &b = r.without_tta;
  return {a.fp_rate.mean <= b.fp_rate.mean && a.dice.mean >= b.dice.mean,
          fmt("FP rate %.3f with TTA vs %.3f without; Dice %.3f with vs %.3f without (checkpoint %s)", a.fp_rate.mean,
              b.fp_rate.mean, a.dice.mean, b.dice.mean, r.hash.c_str())};
}

Outcome c10_nifti(const fs::path& work) {
  Rng rng(10);
  const nifti::DataType types[] = {nifti::DataType::uint8,   nifti::DataType::int16,   nifti::DataType::int32,
                                   nifti::DataType::float32, nifti::DataType::float64, nifti::DataType::uint32};
  int failures = 0, total = 0;
  const auto path = work / "c10.nii";
  for (int trial = 0; trial < 50; ++trial)
    for (auto t : types) {
      nifti::Image img;
      // Header geometry is single precision. volatile keeps g++ 11 -O3 from
      // vectorizing the float rounding away.
      std::array<volatile float, 6> geo{};
      for (int a = 0; a < 3; ++a) {
        img.grid.dims[a] = static_cast<int>(rng.uniform_int(1, 16));
        geo[a] = static_cast<float>(rng.uniform(0.1, 3.0));
        geo[3 + a] = static_cast<float>(rng.uniform(-50, 50));
      }
      for (int a = 0; a < 3; ++a) {
        img.grid.spacing[a] = geo[a];
        img.grid.origin[a] = geo[3 + a];
      }
      img.datatype = t;
      img.payload.resize(img.grid.size() * nifti::bytes_per_voxel(t));
      for (auto& b : img.payload) b = static_cast<std::byte>(rng.uniform_int(0, 255));
      nifti::write(img, path);
      const auto back = nifti::read(path);
      ++total;
      failures += !(back.grid == img.grid && back.datatype == t && back.payload == img.payload);
    }
  return {failures == 0, fmt("%d/%d volumes bit-exact across 6 datatype codes", total - failures, total)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::string work = "acceptance_work";
  std::set<int> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const auto want = [&](int k) { return only.empty() || only.count(k); };
  EndToEnd e2e;
  bool e2e_done = false;
  const auto end_to_end = [&]() -> const EndToEnd& {
    if (!e2e_done) e2e = run_end_to_end(work);
    e2e_done = true;
    return e2e;
  };

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, c1_autodiff},
      {2, c2_losses},
      {3, c3_vesselness},
      {4, c4_metrics},
      {5, c5_postprocessing},
      {6, c6_tta},
      {7, [&] { return c7_determinism(work); }},
      {8, [&] { return c8_end_to_end(end_to_end()); }},
      {9, [&] { return c9_tta_trend(end_to_end()); }},
      {10, [&] { return c10_nifti(work); }},
  };
  int failed = 0;
  for (const auto& [k, run] : criteria) {
    if (!want(k)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << k << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
