#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cube.hpp"
#include "evalkit.hpp"
#include "network.hpp"
#include "nifti.hpp"
#include "objective.hpp"
#include "patching.hpp"
#include "phantom.hpp"
#include "vesselness.hpp"

namespace vesselforge {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 4;
  double lr0 = 1e-3;
  double lr_decay = 0.8;
  int lr_period = 5;
  bool decay_per_step = false;  // decay every lr_period optimizer steps instead of epochs
  int max_epochs = 100;
  int steps_per_epoch = 0;      // 0: ceil(train patches / batch)
  double early_stop_delta = 1e-3;
  int early_stop_patience = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;

  void validate() const {
    std::vector<std::string> bad;
    if (batch_size < 1) bad.push_back("train.batch_size must be >= 1");
    if (!(lr0 > 0.0)) bad.push_back("train.lr0 must be > 0");
    if (!(lr_decay > 0.0 && lr_decay < 1.0)) bad.push_back("train.lr_decay must be in (0,1)");
    if (lr_period < 1) bad.push_back("train.lr_period must be >= 1");
    if (max_epochs < 1) bad.push_back("train.max_epochs must be >= 1");
    if (steps_per_epoch < 0) bad.push_back("train.steps_per_epoch must be >= 0");
    if (!(early_stop_delta >= 0.0)) bad.push_back("train.early_stop_delta must be >= 0");
    if (early_stop_patience < 1) bad.push_back("train.early_stop_patience must be >= 1");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) bad.push_back("train.beta1/beta2 must be in (0,1)");
    if (!(eps > 0.0)) bad.push_back("train.eps must be > 0");
    if (!(weight_decay >= 0.0)) bad.push_back("train.weight_decay must be >= 0");
    if (!bad.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ConfigError(msg);
    }
  }
};

struct DataConfig {
  int positives_per_site = 8;
  int max_offset = 16;
  int negatives_per_subject = 50;
  NegativeMix negative_mix;
  bool augment = true;
  AugmentOptions augment_options;
  double resample_mm = 0.0;  // isotropic target spacing; 0 keeps the native grid
  VesselnessParams vesselness;

  void validate() const {
    std::vector<std::string> bad;
    if (positives_per_site < 1) bad.push_back("data.positives_per_site must be >= 1");
    if (max_offset < 0) bad.push_back("data.max_offset must be >= 0");
    if (negatives_per_subject < 0) bad.push_back("data.negatives_per_subject must be >= 0");
    if (resample_mm < 0.0) bad.push_back("data.resample_mm must be >= 0");
    if (!bad.empty()) {
      std::string msg = "invalid data config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ConfigError(msg);
    }
    vesselness.validate();
  }
};

struct TTAConfig {
  bool enabled = true;
  std::vector<cube::Transform> transforms = cube::default_transforms();

  void validate() const {
    if (!enabled) return;
    if (std::find(transforms.begin(), transforms.end(), cube::Transform::identity) == transforms.end())
      throw ConfigError("tta.transforms must include identity");
  }
  // Transforms actually run: identity alone when disabled.
  std::vector<cube::Transform> active() const {
    return enabled ? transforms : std::vector<cube::Transform>{cube::Transform::identity};
  }
};

struct InferenceConfig {
  int n_patches = 16;
  double nms_radius = 0.0;  // voxels; 0 means patch_size / 4
  double threshold = 0.5;
  int min_component = 5;
  bool cls_gate = false;  // drop patches whose classification probability is below cls_gate_threshold
  double cls_gate_threshold = 0.5;
  TTAConfig tta;

  void validate() const {
    std::vector<std::string> bad;
    if (n_patches < 0) bad.push_back("infer.n_patches must be >= 0");
    if (nms_radius < 0.0) bad.push_back("infer.nms_radius must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) bad.push_back("infer.threshold must be in (0,1)");
    if (min_component < 1) bad.push_back("infer.min_component must be >= 1");
    if (!(cls_gate_threshold > 0.0 && cls_gate_threshold < 1.0)) bad.push_back("infer.cls_gate_threshold must be in (0,1)");
    if (!bad.empty()) {
      std::string msg = "invalid inference config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ConfigError(msg);
    }
    tta.validate();
  }
};

struct ExperimentConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
  InferenceConfig infer;

  void validate() const {
    model.validate();
    loss.validate();
    train.validate();
    data.validate();
    infer.validate();
  }
};

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

// lr0 * decay^floor(index / period), index being the epoch (or step when
// decay_per_step is set).
inline double lr_schedule(int index, const TrainConfig& cfg) {
  if (index < 0) throw ConfigError("lr_schedule: negative epoch");
  return cfg.lr0 * std::pow(cfg.lr_decay, index / cfg.lr_period);
}

// Decoupled-weight-decay Adam on every parameter's accumulated gradient.
// Step t counts from 1. Nothing is modified when a gradient is non-finite.
template <typename T>
void adamw_step(ad::ParamStore<T>& params, int t, const TrainConfig& cfg, double lr) {
  if (t < 1) throw ConfigError("adamw_step: step index must be >= 1");
  for (const auto& p : params)
    for (T g : p.grad)
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  for (auto& p : params) {
    auto& w = p.value.data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = p.grad[i];
      const double m = b1 * p.m[i] + (1.0 - b1) * g;
      const double v = b2 * p.v[i] + (1.0 - b2) * g * g;
      p.m[i] = static_cast<T>(m);
      p.v[i] = static_cast<T>(v);
      const double mh = m / c1, vh = v / c2;
      const double theta = w[i];
      w[i] = static_cast<T>(theta - lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * theta));
    }
  }
}

// ---------------------------------------------------------------------------
// Subjects and patches
// ---------------------------------------------------------------------------

struct SubjectData {
  std::string id;
  Volume3D image;
  Volume3D vessel;
  Mask weak;
  Mask precise;
  std::vector<AneurysmSite> sites;
};

// Reads one subject, optionally resamples, and computes its vesselness map.
inline SubjectData load_subject(const Manifest& m, const SubjectEntry& e, const DataConfig& cfg) {
  SubjectData s;
  s.id = e.id;
  s.image = nifti::read_volume(m.path_of(e.image_file));
  s.weak = nifti::read_mask(m.path_of(e.weak_file));
  s.precise = nifti::read_mask(m.path_of(e.precise_file));
  s.sites = e.sites;
  if (cfg.resample_mm > 0.0) {
    const Vec3 old_sp = s.image.grid.spacing;
    s.image = resample_trilinear(s.image, {cfg.resample_mm, cfg.resample_mm, cfg.resample_mm});
    s.weak = resample_nearest(s.weak, s.image.grid);
    s.precise = resample_nearest(s.precise, s.image.grid);
    for (auto& site : s.sites) {
      for (int a = 0; a < 3; ++a) site.center[a] *= old_sp[a] / cfg.resample_mm;
      site.radius *= old_sp[0] / cfg.resample_mm;
    }
  }
  s.vessel = vesselness_map(s.image, cfg.vesselness);
  return s;
}

inline std::vector<SubjectData> load_split(const Manifest& m, const std::string& split, const DataConfig& cfg) {
  const auto entries = m.split(split);
  std::vector<SubjectData> out(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) out[i] = load_subject(m, *entries[i], cfg);
  return out;
}

// Positive cubes around each aneurysm and mixed negatives, labelled with the
// weak masks. Each subject draws from its own seeded stream.
inline std::vector<Patch> build_patches(const std::vector<SubjectData>& subjects, int patch_size, const DataConfig& cfg,
                                        std::uint64_t seed, std::size_t* skipped = nullptr) {
  std::vector<Patch> out;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    Rng rng(mix_seed(seed, 0x9A7C0000ULL + i));
    PositivePatchOptions po{cfg.positives_per_site, patch_size, cfg.max_offset};
    auto pos = extract_positive_patches(s.image, s.vessel, s.weak, s.sites, po, rng, s.id);
    NegativePatchOptions no;
    no.count = cfg.negatives_per_subject;
    no.patch_size = patch_size;
    no.mix = cfg.negative_mix;
    auto neg = extract_negative_patches(s.image, s.vessel, s.weak, no, rng, s.id);
    skip += pos.skipped + neg.skipped;
    for (auto* set : {&pos.patches, &neg.patches})
      for (auto& p : *set) out.push_back(std::move(p));
  }
  if (skipped) *skipped = skip;
  return out;
}

template <typename T>
struct Batch {
  ad::Tensor<T> image, vessel;
  std::vector<std::uint8_t> labels;
  std::vector<int> cls;
};

template <typename T>
Batch<T> make_batch(const std::vector<const Patch*>& patches) {
  if (patches.empty()) throw ConfigError("make_batch: empty batch");
  const int s = patches.front()->size;
  const int n = static_cast<int>(patches.size());
  Batch<T> b{ad::Tensor<T>({n, 1, s, s, s}), ad::Tensor<T>({n, 1, s, s, s}), {}, {}};
  const std::size_t v = cube::volume(s);
  b.labels.reserve(v * patches.size());
  for (int i = 0; i < n; ++i) {
    const Patch& p = *patches[i];
    if (p.size != s) throw ShapeError("make_batch: mixed patch sizes");
    std::copy(p.image.begin(), p.image.end(), b.image.data.begin() + static_cast<std::ptrdiff_t>(i * v));
    std::copy(p.vessel.begin(), p.vessel.end(), b.vessel.data.begin() + static_cast<std::ptrdiff_t>(i * v));
    b.labels.insert(b.labels.end(), p.label.begin(), p.label.end());
    b.cls.push_back(p.is_positive ? 1 : 0);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LogRow {
  int epoch = 0;
  long step = 0;
  loss::Breakdown terms;
  double lr = 0.0;
  std::optional<double> val_total;  // set on the end-of-epoch row only
};

inline std::string log_header() { return "epoch,step,L_F,L_GD,L_CE,total,lr,val_total\n"; }

inline std::string log_line(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%ld,%.8g,%.8g,%.8g,%.8g,%.8g,", r.epoch, r.step, r.terms.focal, r.terms.gdice,
                r.terms.ce, r.terms.total, r.lr);
  std::string s = buf;
  if (r.val_total) {
    std::snprintf(buf, sizeof buf, "%.8g", *r.val_total);
    s += buf;
  }
  return s + "\n";
}

struct TrainResult {
  ad::ParamStore<float> params;  // best-validation parameters
  std::string stop_reason;       // "early_stop", "max_epochs" or "non_finite"
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<LogRow> log;
  std::vector<double> epoch_train_total;
  std::vector<double> epoch_val_total;
  std::string diagnostic;
};

struct TrainOutputs {
  std::filesystem::path log_csv;      // empty: no file
  std::filesystem::path checkpoint;   // prefix for the best checkpoint; empty: no file
  bool log_steps = true;
  std::function<void(const LogRow&)> on_epoch;  // progress callback
};

// Mean total loss over patches in eval mode.
inline loss::Breakdown evaluate_loss(ad::ParamStore<float>& params, const std::vector<Patch>& patches,
                                     const ModelConfig& mcfg, const LossConfig& lcfg, int batch_size) {
  loss::Breakdown acc;
  for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<const Patch*> chunk;
    for (std::size_t i = start; i < std::min(patches.size(), start + batch_size); ++i) chunk.push_back(&patches[i]);
    auto b = make_batch<float>(chunk);
    ad::Graph<float> g;
    auto out = net::forward(g, params, g.constant(b.image), g.constant(b.vessel), mcfg, false, nullptr);
    const auto t = loss::total_loss(g, out.cls, b.cls, out.seg, b.labels, lcfg).terms;
    const double w = static_cast<double>(chunk.size());
    acc.focal += w * t.focal;
    acc.gdice += w * t.gdice;
    acc.ce += w * t.ce;
    acc.total += w * t.total;
  }
  const double n = static_cast<double>(patches.size());
  acc.focal /= n;
  acc.gdice /= n;
  acc.ce /= n;
  acc.total /= n;
  return acc;
}

inline TrainResult train(const std::vector<Patch>& train_set, const std::vector<Patch>& val_set,
                         const ModelConfig& mcfg, const LossConfig& lcfg, const TrainConfig& tcfg,
                         const DataConfig& dcfg = {}, const TrainOutputs& outputs = {}) {
  mcfg.validate();
  lcfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training split");
  if (val_set.empty()) throw ConfigError("train: empty validation split");
  for (const auto* set : {&train_set, &val_set})
    for (const auto& p : *set)
      if (p.size != mcfg.patch_size) throw ConfigError("train: patch size differs from model.patch_size");

  TrainResult res;
  auto params = net::make_initialized<float>(mcfg, tcfg.seed);
  res.params = params;
  WeightedSampler sampler(default_sampler_weights(train_set), mix_seed(tcfg.seed, 0x5A4D));
  Rng aug_rng(mix_seed(tcfg.seed, 0xA06));
  Rng drop_rng(mix_seed(tcfg.seed, 0xD12));
  const int steps = tcfg.steps_per_epoch > 0
                        ? tcfg.steps_per_epoch
                        : static_cast<int>((train_set.size() + tcfg.batch_size - 1) / tcfg.batch_size);

  std::ofstream log;
  if (!outputs.log_csv.empty()) {
    if (outputs.log_csv.has_parent_path()) std::filesystem::create_directories(outputs.log_csv.parent_path());
    log.open(outputs.log_csv);
    if (!log) throw IoError("cannot write " + outputs.log_csv.string());
    log << log_header();
  }
  const auto emit = [&](const LogRow& r) {
    res.log.push_back(r);
    if (log.is_open()) log << log_line(r) << std::flush;
  };

  long global_step = 0;
  int wait = 0;
  res.stop_reason = "max_epochs";
  for (int epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
    loss::Breakdown sum;
    bool failed = false;
    double lr = lr_schedule(epoch, tcfg);
    for (int s = 0; s < steps && !failed; ++s) {
      if (tcfg.decay_per_step) lr = lr_schedule(static_cast<int>(global_step), tcfg);
      std::vector<Patch> drawn;
      drawn.reserve(static_cast<std::size_t>(tcfg.batch_size));
      for (int i = 0; i < tcfg.batch_size; ++i) {
        const Patch& src = train_set[sampler.next()];
        drawn.push_back(dcfg.augment ? augment_patch(src, aug_rng, dcfg.augment_options) : src);
      }
      std::vector<const Patch*> ptrs;
      for (const auto& p : drawn) ptrs.push_back(&p);
      auto b = make_batch<float>(ptrs);

      params.zero_grad();
      ad::Graph<float> g;
      auto out = net::forward(g, params, g.constant(b.image), g.constant(b.vessel), mcfg, true, &drop_rng);
      auto tot = loss::total_loss(g, out.cls, b.cls, out.seg, b.labels, lcfg);
      ++global_step;
      if (!std::isfinite(tot.terms.total)) {
        res.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(global_step);
        failed = true;
        break;
      }
      g.backward(tot.var);
      try {
        adamw_step(params, static_cast<int>(global_step), tcfg, lr);
      } catch (const NumericError& e) {
        res.diagnostic = e.what();
        failed = true;
        break;
      }
      sum.focal += tot.terms.focal;
      sum.gdice += tot.terms.gdice;
      sum.ce += tot.terms.ce;
      sum.total += tot.terms.total;
      if (outputs.log_steps) emit({epoch, global_step, tot.terms, lr, std::nullopt});
    }
    if (failed) {
      res.stop_reason = "non_finite";
      res.epochs_run = epoch + 1;
      break;
    }
    for (double* v : {&sum.focal, &sum.gdice, &sum.ce, &sum.total}) *v /= steps;
    const double val = evaluate_loss(params, val_set, mcfg, lcfg, tcfg.batch_size).total;
    res.epoch_train_total.push_back(sum.total);
    res.epoch_val_total.push_back(val);
    const LogRow row{epoch, global_step, sum, lr, val};
    emit(row);
    if (outputs.on_epoch) outputs.on_epoch(row);
    res.epochs_run = epoch + 1;

    if (!std::isfinite(val)) {
      res.stop_reason = "non_finite";
      res.diagnostic = "non-finite validation loss at epoch " + std::to_string(epoch);
      break;
    }
    if (val < res.best_val - tcfg.early_stop_delta || res.best_epoch < 0) {
      res.best_val = val;
      res.best_epoch = epoch;
      res.params = params;
      wait = 0;
      if (!outputs.checkpoint.empty())
        net::save_checkpoint(outputs.checkpoint, res.params, mcfg,
                             {{"epoch", epoch}, {"val_total", val}, {"seed", tcfg.seed}});
    } else if (++wait >= tcfg.early_stop_patience) {
      res.stop_reason = "early_stop";
      break;
    }
  }
  for (auto& p : res.params) {
    std::fill(p.grad.begin(), p.grad.end(), 0.0f);
    std::fill(p.m.begin(), p.m.end(), 0.0f);
    std::fill(p.v.begin(), p.v.end(), 0.0f);
  }
  return res;
}

// FNV-1a over parameter names, shapes and values.
template <typename T>
std::uint64_t params_hash(const ad::ParamStore<T>& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (const auto& p : ps) {
    mix(p.name.data(), p.name.size());
    mix(p.value.shape.data(), p.value.shape.size() * sizeof(int));
    for (T v : p.value.data) {
      const float f = static_cast<float>(v);
      mix(&f, sizeof f);
    }
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct Detection {
  std::uint32_t label = 0;
  std::size_t voxels = 0;
  Vec3 centroid{};  // voxel coordinates
};

struct PatchLog {
  Index3 center{};
  double cls_prob = 0.0;
  bool used = true;
};

struct InferenceResult {
  Mask mask;          // post-processed prediction
  Mask thresholded;   // canvas > threshold, before post-processing
  Volume3D prob;      // fused foreground probability
  std::vector<Detection> detections;
  std::vector<PatchLog> patches;
  std::vector<std::string> warnings;
};

// TTA-averaged foreground probability for one cube; cube_image is already
// z-normalised. Returns the classification probability averaged likewise.
inline double predict_cube(ad::ParamStore<float>& params, const ModelConfig& mcfg,
                           const std::vector<cube::Transform>& transforms, const std::vector<float>& cube_image,
                           const std::vector<float>& cube_vessel, std::vector<double>& prob_out) {
  const int s = mcfg.patch_size;
  const std::size_t v = cube::volume(s);
  const int n = static_cast<int>(transforms.size());
  ad::Tensor<float> im({n, 1, s, s, s}), ve({n, 1, s, s, s});
  for (int t = 0; t < n; ++t) {
    std::span<float> a(im.data.data() + t * v, v), b(ve.data.data() + t * v, v);
    std::copy(cube_image.begin(), cube_image.end(), a.begin());
    std::copy(cube_vessel.begin(), cube_vessel.end(), b.begin());
    cube::apply(a, s, transforms[t]);
    cube::apply(b, s, transforms[t]);
  }
  ad::Graph<float> g;
  auto out = net::forward(g, params, g.constant(im), g.constant(ve), mcfg, false, nullptr);
  const auto p1 = loss::foreground_prob(g.value(out.seg));
  prob_out.assign(v, 0.0);
  double cls = 0.0;
  std::vector<double> tmp(v);
  for (int t = 0; t < n; ++t) {
    std::copy(p1.begin() + static_cast<std::ptrdiff_t>(t * v), p1.begin() + static_cast<std::ptrdiff_t>((t + 1) * v),
              tmp.begin());
    cube::apply(std::span(tmp), s, transforms[t], true);
    for (std::size_t i = 0; i < v; ++i) prob_out[i] += tmp[i];
    cls += 1.0 / (1.0 + std::exp(-static_cast<double>(g.value(out.cls).data[t])));
  }
  for (auto& p : prob_out) p /= n;
  return cls / n;
}

inline InferenceResult infer_with_vessel(const Volume3D& image, const Volume3D& vessel, ad::ParamStore<float>& params,
                                         const ModelConfig& mcfg, const InferenceConfig& icfg,
                                         const std::string& subject_id = "") {
  mcfg.validate();
  icfg.validate();
  const int s = mcfg.patch_size;
  check_patch_fits(image.grid, s);
  InferenceResult res;
  res.prob = Volume3D(image.grid, 0.0f);
  res.mask = Mask(image.grid, 0);
  res.thresholded = Mask(image.grid, 0);

  const double radius = icfg.nms_radius > 0.0 ? icfg.nms_radius : s / 4.0;
  const auto centers = select_inference_centers(vessel, icfg.n_patches, s, radius);
  if (centers.empty()) {
    res.warnings.push_back("no inference patch centres found" + (subject_id.empty() ? "" : " for " + subject_id));
    return res;
  }
  const auto transforms = icfg.tta.active();
  std::vector<double> sum(image.size(), 0.0);
  std::vector<std::uint32_t> count(image.size(), 0);
  std::vector<double> cube_prob;
  for (const auto& c : centers) {
    const Patch p = make_patch(image, vessel, nullptr, c, s, subject_id);
    const double cls = predict_cube(params, mcfg, transforms, p.image, p.vessel, cube_prob);
    const bool use = !icfg.cls_gate || cls >= icfg.cls_gate_threshold;
    res.patches.push_back({p.center, cls, use});
    if (!use) continue;
    const Index3 o = cube_origin(c, s, image.grid.dims);
    for (int z = 0; z < s; ++z)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const auto i = image.grid.index(o[0] + x, o[1] + y, o[2] + z);
          sum[i] += cube_prob[cube::index(x, y, z, s)];
          ++count[i];
        }
  }
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (!count[i]) continue;
    const double p = sum[i] / count[i];
    res.prob.data[i] = static_cast<float>(p);
    res.thresholded.data[i] = p > icfg.threshold;
  }
  res.mask = fill_holes(remove_small_components(res.thresholded, static_cast<std::size_t>(icfg.min_component)));
  const auto cc = connected_components(res.mask);
  res.detections.resize(cc.count());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto l = cc.labels.data[i];
    if (!l) continue;
    auto& d = res.detections[l - 1];
    const auto p = image.grid.coords(i);
    for (int a = 0; a < 3; ++a) d.centroid[a] += p[a];
  }
  for (std::size_t k = 0; k < cc.count(); ++k) {
    auto& d = res.detections[k];
    d.label = static_cast<std::uint32_t>(k + 1);
    d.voxels = cc.sizes[k];
    for (int a = 0; a < 3; ++a) d.centroid[a] /= static_cast<double>(d.voxels);
  }
  return res;
}

inline InferenceResult infer_subject(const Volume3D& image, ad::ParamStore<float>& params, const ModelConfig& mcfg,
                                     const InferenceConfig& icfg, const VesselnessParams& vp,
                                     const std::string& subject_id = "") {
  return infer_with_vessel(image, vesselness_map(image, vp), params, mcfg, icfg, subject_id);
}

// ---------------------------------------------------------------------------
// Cohort evaluation and ablation
// ---------------------------------------------------------------------------

struct CohortRun {
  std::vector<InferenceResult> predictions;
  eval::CohortReport report;
};

inline CohortRun evaluate_subjects(const std::vector<SubjectData>& subjects, ad::ParamStore<float>& params,
                                   const ModelConfig& mcfg, const InferenceConfig& icfg) {
  if (subjects.empty()) throw ConfigError("evaluate: no subjects in split");
  CohortRun run;
  for (const auto& s : subjects) run.predictions.push_back(infer_with_vessel(s.image, s.vessel, params, mcfg, icfg, s.id));
  std::vector<eval::CohortEntry> cohort;
  for (std::size_t i = 0; i < subjects.size(); ++i)
    cohort.push_back({&run.predictions[i].mask, &subjects[i].precise, subjects[i].id});
  run.report = eval::evaluate_cohort(cohort);
  return run;
}

struct AblationSpec {
  std::string name;
  Variant model;
  bool tta;
};

inline const std::vector<AblationSpec>& ablation_specs() {
  static const std::vector<AblationSpec> all{{"vessel_encoder_only", Variant::vessel_encoder_only, true},
                                             {"vessel_attblock_only", Variant::vessel_attblock_only, true},
                                             {"no_tta", Variant::full, false},
                                             {"full", Variant::full, true}};
  return all;
}

inline const AblationSpec& ablation_spec(const std::string& name) {
  for (const auto& s : ablation_specs())
    if (s.name == name) return s;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

struct AblationRow {
  std::string variant;
  std::string checkpoint_hash;
  eval::CohortReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::string out = "variant,checkpoint,fp_rate,sensitivity,dice,iou,hd95_mm\n";
    for (const auto& r : rows)
      out += r.variant + "," + r.checkpoint_hash + "," + eval::format_pm(r.report.fp_rate) + "," +
             eval::format_pm(r.report.sensitivity) + "," + eval::format_pm(r.report.dice) + "," +
             eval::format_pm(r.report.iou) + "," + eval::format_pm(r.report.hd95_mm) + "\n";
    return out;
  }

  // Column-aligned plain text; widths count code points so ± lines up.
  std::string to_text() const {
    const std::vector<std::string> head{"variant", "FP rate", "sensitivity", "Dice", "IoU", "HD95 (mm)"};
    std::vector<std::vector<std::string>> cells{head};
    for (const auto& r : rows)
      cells.push_back({r.variant, eval::format_pm(r.report.fp_rate), eval::format_pm(r.report.sensitivity),
                       eval::format_pm(r.report.dice), eval::format_pm(r.report.iou),
                       eval::format_pm(r.report.hd95_mm)});
    const auto width = [](const std::string& s) {
      std::size_t n = 0;
      for (unsigned char c : s) n += (c & 0xC0) != 0x80;
      return n;
    };
    std::vector<std::size_t> w(head.size(), 0);
    for (const auto& row : cells)
      for (std::size_t c = 0; c < row.size(); ++c) w[c] = std::max(w[c], width(row[c]));
    std::string out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
      for (std::size_t c = 0; c < cells[r].size(); ++c) {
        out += cells[r][c] + std::string(w[c] - width(cells[r][c]) + (c + 1 < cells[r].size() ? 2 : 0), ' ');
      }
      while (!out.empty() && out.back() == ' ') out.pop_back();
      out += "\n";
      if (r == 0) {
        std::size_t total = 0;
        for (auto x : w) total += x + 2;
        out += std::string(total - 2, '-') + "\n";
      }
    }
    return out;
  }
};

struct PreparedData {
  std::vector<SubjectData> train, val, test;
  std::vector<Patch> train_patches, val_patches;
};

inline PreparedData prepare_data(const Manifest& m, const ExperimentConfig& cfg) {
  PreparedData d;
  d.train = load_split(m, "train", cfg.data);
  d.val = load_split(m, "val", cfg.data);
  d.test = load_split(m, "test", cfg.data);
  if (d.train.empty() || d.val.empty()) throw ConfigError("manifest needs nonempty train and val splits");
  d.train_patches = build_patches(d.train, cfg.model.patch_size, cfg.data, mix_seed(cfg.train.seed, 1));
  d.val_patches = build_patches(d.val, cfg.model.patch_size, cfg.data, mix_seed(cfg.train.seed, 2));
  return d;
}

// Trains each distinct model once and evaluates every requested variant on
// the test split against precise labels. no_tta reuses the full checkpoint.
inline AblationTable run_ablation(const PreparedData& data, const std::vector<std::string>& variants,
                                  const ExperimentConfig& cfg, const std::filesystem::path& out_dir = {},
                                  const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  for (const auto& v : variants) ablation_spec(v);
  if (data.test.empty()) throw ConfigError("ablation needs a nonempty test split");
  std::map<Variant, ad::ParamStore<float>> trained;
  AblationTable table;
  for (const auto& name : variants) {
    const auto& spec = ablation_spec(name);
    ExperimentConfig c = cfg;
    c.model.variant = spec.model;
    c.infer.tta.enabled = spec.tta && cfg.infer.tta.enabled;
    if (!trained.count(spec.model)) {
      if (progress) progress("training " + to_string(spec.model));
      TrainOutputs outs;
      if (!out_dir.empty()) {
        outs.log_csv = out_dir / "logs" / ("train_" + to_string(spec.model) + ".csv");
        outs.checkpoint = out_dir / "checkpoints" / to_string(spec.model);
      }
      trained.emplace(spec.model,
                      train(data.train_patches, data.val_patches, c.model, c.loss, c.train, c.data, outs).params);
    }
    if (progress) progress("evaluating " + name);
    auto& params = trained.at(spec.model);
    auto run = evaluate_subjects(data.test, params, c.model, c.infer);
    table.rows.push_back({name, hex64(params_hash(params)), std::move(run.report)});
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir / "reports");
    std::ofstream(out_dir / "reports" / "ablation.csv") << table.to_csv();
    std::ofstream(out_dir / "reports" / "ablation.txt") << table.to_text();
  }
  return table;
}

inline AblationTable run_ablation(const Manifest& m, const std::vector<std::string>& variants,
                                  const ExperimentConfig& cfg, const std::filesystem::path& out_dir = {}) {
  return run_ablation(prepare_data(m, cfg), variants, cfg, out_dir);
}

}  // namespace vesselforge
