#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pipeline.hpp"

namespace vesselforge::cli {

// Everything a run can be configured with. Keys are "section.field".
struct RunConfig {
  ExperimentConfig exp;
  PhantomSpec phantom;
  DatasetOptions dataset;
  int subjects = 30;
};

// ---------------------------------------------------------------------------
// Value parsing and formatting
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

struct BadValue {
  std::string expected;
};

template <typename N>
N parse_number(const std::string& raw, const char* what) {
  const std::string s = trim(raw);
  N v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) throw BadValue{what};
  return v;
}

inline void parse(const std::string& s, int& v) { v = parse_number<int>(s, "integer"); }
inline void parse(const std::string& s, std::uint64_t& v) { v = parse_number<std::uint64_t>(s, "unsigned integer"); }
inline void parse(const std::string& s, double& v) {
  v = parse_number<double>(s, "number");
  if (!std::isfinite(v)) throw BadValue{"finite number"};
}
inline void parse(const std::string& raw, bool& v) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") v = true;
  else if (s == "false" || s == "0" || s == "no" || s == "off") v = false;
  else throw BadValue{"boolean"};
}
template <typename E>
std::vector<E> parse_list(const std::string& s) {
  std::vector<E> out;
  for (const auto& item : split_list(s)) {
    E e{};
    parse(item, e);
    out.push_back(e);
  }
  return out;
}
inline void parse(const std::string& s, std::vector<int>& v) { v = parse_list<int>(s); }
inline void parse(const std::string& s, std::vector<double>& v) { v = parse_list<double>(s); }
template <typename E, std::size_t K>
void parse(const std::string& s, std::array<E, K>& v) {
  const auto l = parse_list<E>(s);
  if (l.size() != K) throw BadValue{"list of " + std::to_string(K) + " values"};
  std::copy(l.begin(), l.end(), v.begin());
}
inline void parse(const std::string& s, Variant& v) {
  try {
    v = variant_from_string(trim(s));
  } catch (const ConfigError&) {
    throw BadValue{"one of full, vessel_encoder_only, vessel_attblock_only"};
  }
}
inline void parse(const std::string& s, VesselnessMeasure& v) {
  try {
    v = measure_from_string(trim(s));
  } catch (const ConfigError&) {
    throw BadValue{"one of sato, frangi"};
  }
}
inline void parse(const std::string& s, std::vector<cube::Transform>& v) {
  v.clear();
  try {
    for (const auto& item : split_list(s)) v.push_back(cube::transform_from_string(item));
  } catch (const ConfigError&) {
    throw BadValue{"list of identity, flip_x, flip_y, flip_z, rot90_xy, rot90_yz, rot90_xz"};
  }
}

// Shortest text that parses back to the same double.
inline std::string format(double v) {
  char buf[32];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}
inline std::string format(int v) { return std::to_string(v); }
inline std::string format(std::uint64_t v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(Variant v) { return to_string(v); }
inline std::string format(VesselnessMeasure v) { return to_string(v); }
template <typename Seq>
std::string format_seq(const Seq& s) {
  std::string out;
  for (const auto& e : s) out += (out.empty() ? "" : ",") + format(e);
  return out;
}
inline std::string format(const std::vector<int>& v) { return format_seq(v); }
inline std::string format(const std::vector<double>& v) { return format_seq(v); }
template <typename E, std::size_t K>
std::string format(const std::array<E, K>& v) {
  return format_seq(v);
}
inline std::string format(const std::vector<cube::Transform>& v) {
  std::string out;
  for (auto t : v) out += (out.empty() ? "" : ",") + cube::to_string(t);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Key registry
// ---------------------------------------------------------------------------

struct Key {
  std::string name;   // "section.field"
  std::string help;
  std::string reference;  // reference default, if any
  std::vector<std::string> aliases;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string section() const { return name.substr(0, name.find('.')); }
};

namespace detail {

template <typename T, typename Ref>
Key field(std::string name, std::string help, std::string reference, std::vector<std::string> aliases, Ref ref) {
  Key k{std::move(name), std::move(help), std::move(reference), std::move(aliases), {}, {}};
  k.set = [ref](RunConfig& c, const std::string& s) {
    T v{};
    parse(s, v);
    ref(c) = v;
  };
  k.get = [ref](const RunConfig& c) { return format(ref(const_cast<RunConfig&>(c))); };
  return k;
}

}  // namespace detail

#define VF_KEY(T, NAME, HELP, REFERENCE, ALIASES, EXPR) \
  detail::field<T>(NAME, HELP, REFERENCE, ALIASES, [](RunConfig& c) -> T& { return EXPR; })

inline const std::vector<Key>& registry() {
  using V = std::vector<std::string>;
  using A2 = std::array<double, 2>;
  static const std::vector<Key> keys{
      // model
      VF_KEY(int, "model.depth", "encoder levels", "4", V{}, c.exp.model.depth),
      VF_KEY(std::vector<int>, "model.widths", "channels per level, depth+1 values", "", V{}, c.exp.model.widths),
      VF_KEY(int, "model.patch_size", "cube side in voxels, divisible by 2^depth", "64", V{"patch-size"}, c.exp.model.patch_size),
      VF_KEY(double, "model.leaky_slope", "LeakyReLU negative slope", "", V{}, c.exp.model.leaky_slope),
      VF_KEY(double, "model.dropout_rate", "dropout before the classification head", "0.2", V{}, c.exp.model.dropout_rate),
      VF_KEY(double, "model.norm_epsilon", "instance-norm epsilon", "", V{}, c.exp.model.norm_epsilon),
      VF_KEY(int, "model.cls_hidden", "hidden units of the classification head", "", V{}, c.exp.model.cls_hidden),
      VF_KEY(int, "model.attention_channels", "attention gate channels; 0 means widths[0]/2", "", V{}, c.exp.model.attention_channels),
      VF_KEY(Variant, "model.variant", "full | vessel_encoder_only | vessel_attblock_only", "", V{}, c.exp.model.variant),
      // loss
      VF_KEY(double, "loss.phi", "task trade-off between focal and segmentation losses", "0.3", V{"phi"}, c.exp.loss.phi),
      VF_KEY(double, "loss.beta", "generalized Dice share of the segmentation loss", "0.5", V{"beta"}, c.exp.loss.beta),
      VF_KEY(double, "loss.alpha", "focal class balance", "0.25", V{}, c.exp.loss.alpha),
      VF_KEY(double, "loss.gamma", "focal modulating exponent", "2", V{}, c.exp.loss.gamma),
      VF_KEY(double, "loss.prob_clamp", "probability clamp for log terms", "", V{}, c.exp.loss.prob_clamp),
      VF_KEY(double, "loss.dice_smooth", "smoothing added to Dice numerator and denominator", "", V{}, c.exp.loss.dice_smooth),
      // train
      VF_KEY(int, "train.batch_size", "patches per optimizer step", "24", V{"batch-size"}, c.exp.train.batch_size),
      VF_KEY(double, "train.lr0", "initial learning rate", "0.001", V{"lr0"}, c.exp.train.lr0),
      VF_KEY(double, "train.lr_decay", "multiplicative decay per period", "0.8", V{}, c.exp.train.lr_decay),
      VF_KEY(int, "train.lr_period", "decay period", "5", V{}, c.exp.train.lr_period),
      VF_KEY(bool, "train.decay_per_step", "count the decay period in steps instead of epochs", "", V{}, c.exp.train.decay_per_step),
      VF_KEY(int, "train.max_epochs", "epoch cap", "100", V{"epochs"}, c.exp.train.max_epochs),
      VF_KEY(int, "train.steps_per_epoch", "steps per epoch; 0 means one pass over the patches", "", V{}, c.exp.train.steps_per_epoch),
      VF_KEY(double, "train.early_stop_delta", "minimum validation improvement", "0.001", V{}, c.exp.train.early_stop_delta),
      VF_KEY(int, "train.early_stop_patience", "epochs without improvement before stopping", "10", V{}, c.exp.train.early_stop_patience),
      VF_KEY(double, "train.beta1", "AdamW first-moment decay", "", V{}, c.exp.train.beta1),
      VF_KEY(double, "train.beta2", "AdamW second-moment decay", "", V{}, c.exp.train.beta2),
      VF_KEY(double, "train.eps", "AdamW epsilon", "", V{}, c.exp.train.eps),
      VF_KEY(double, "train.weight_decay", "AdamW decoupled weight decay", "", V{}, c.exp.train.weight_decay),
      VF_KEY(std::uint64_t, "train.seed", "seed for init, sampling, augmentation and dropout", "", V{"seed"}, c.exp.train.seed),
      // data
      VF_KEY(int, "data.positives_per_site", "positive cubes per aneurysm", "", V{}, c.exp.data.positives_per_site),
      VF_KEY(int, "data.max_offset", "max random shift of positive cubes, voxels", "", V{}, c.exp.data.max_offset),
      VF_KEY(int, "data.negatives_per_subject", "negative cubes per subject", "", V{}, c.exp.data.negatives_per_subject),
      VF_KEY(double, "data.neg_vessel_like", "share of vessel-centred negatives", "", V{}, c.exp.data.negative_mix.vessel_like),
      VF_KEY(double, "data.neg_landmark", "share of landmark negatives", "", V{}, c.exp.data.negative_mix.landmark),
      VF_KEY(double, "data.neg_random", "share of random negatives", "", V{}, c.exp.data.negative_mix.random),
      VF_KEY(bool, "data.augment", "augment training patches", "", V{}, c.exp.data.augment),
      VF_KEY(int, "data.augment_min_ops", "fewest augmentations per patch", "", V{}, c.exp.data.augment_options.min_ops),
      VF_KEY(int, "data.augment_max_ops", "most augmentations per patch", "", V{}, c.exp.data.augment_options.max_ops),
      VF_KEY(A2, "data.augment_noise_std", "noise std range, fraction of patch std", "", V{}, c.exp.data.augment_options.noise_std),
      VF_KEY(A2, "data.augment_gamma", "contrast gamma range", "", V{}, c.exp.data.augment_options.gamma),
      VF_KEY(A2, "data.augment_shift", "intensity shift range, fraction of range", "", V{}, c.exp.data.augment_options.shift),
      VF_KEY(A2, "data.augment_zoom", "zoom factor range", "", V{}, c.exp.data.augment_options.zoom),
      VF_KEY(double, "data.resample_mm", "isotropic resampling spacing; 0 keeps native", "", V{}, c.exp.data.resample_mm),
      // vesselness
      VF_KEY(double, "vesselness.sigma", "Gaussian scale in mm", "1.0", V{"sigma"}, c.exp.data.vesselness.sigma),
      VF_KEY(double, "vesselness.alpha1", "tube sensitivity for bright-centre eigenvalue", "0.5", V{"alpha1"}, c.exp.data.vesselness.alpha1),
      VF_KEY(double, "vesselness.alpha2", "tube sensitivity for dark-centre eigenvalue", "2.0", V{"alpha2"}, c.exp.data.vesselness.alpha2),
      VF_KEY(VesselnessMeasure, "vesselness.measure", "sato | frangi", "", V{"measure"}, c.exp.data.vesselness.measure),
      VF_KEY(double, "vesselness.frangi_a", "Frangi plate/line weight", "", V{}, c.exp.data.vesselness.frangi_a),
      VF_KEY(double, "vesselness.frangi_b", "Frangi blob weight", "", V{}, c.exp.data.vesselness.frangi_b),
      VF_KEY(double, "vesselness.frangi_c", "Frangi structure weight, fraction of max norm", "", V{}, c.exp.data.vesselness.frangi_c),
      VF_KEY(bool, "vesselness.normalize", "rescale the map to [0,1]", "", V{}, c.exp.data.vesselness.normalize),
      VF_KEY(std::vector<double>, "vesselness.extra_sigmas", "additional scales for max-over-scale", "", V{}, c.exp.data.vesselness.extra_sigmas),
      // inference
      VF_KEY(int, "infer.n_patches", "patch centres per subject", "", V{"n-patches"}, c.exp.infer.n_patches),
      VF_KEY(double, "infer.nms_radius", "centre suppression radius in voxels; 0 means patch/4", "", V{}, c.exp.infer.nms_radius),
      VF_KEY(double, "infer.threshold", "foreground probability threshold", "", V{"threshold"}, c.exp.infer.threshold),
      VF_KEY(int, "infer.min_component", "smallest kept component, voxels", "5", V{}, c.exp.infer.min_component),
      VF_KEY(bool, "infer.cls_gate", "drop patches the classifier calls negative", "", V{}, c.exp.infer.cls_gate),
      VF_KEY(double, "infer.cls_gate_threshold", "classifier probability cut for cls_gate", "", V{}, c.exp.infer.cls_gate_threshold),
      VF_KEY(bool, "infer.tta", "test-time augmentation", "true", V{"tta"}, c.exp.infer.tta.enabled),
      VF_KEY(std::vector<cube::Transform>, "infer.tta_transforms", "transforms averaged under TTA", "", V{},
             c.exp.infer.tta.transforms),
      // phantom
      VF_KEY(Index3, "phantom.dims", "volume size in voxels", "", V{}, c.phantom.dims),
      VF_KEY(Vec3, "phantom.spacing", "voxel spacing in mm", "", V{}, c.phantom.spacing),
      VF_KEY(int, "phantom.n_vessels", "tubes per volume", "", V{}, c.phantom.n_vessels),
      VF_KEY(A2, "phantom.vessel_radius", "tube radius range, voxels", "", V{}, c.phantom.vessel_radius_range),
      VF_KEY(A2, "phantom.aneurysm_radius", "aneurysm radius range, voxels", "", V{}, c.phantom.aneurysm_radius_range),
      VF_KEY(double, "phantom.intensity_vessel", "tube intensity", "", V{}, c.phantom.intensity_vessel),
      VF_KEY(double, "phantom.intensity_background", "background intensity", "", V{}, c.phantom.intensity_background),
      VF_KEY(double, "phantom.noise_std", "additive Gaussian noise", "", V{}, c.phantom.noise_std),
      VF_KEY(double, "phantom.psf_sigma", "blur in voxels", "", V{}, c.phantom.psf_sigma),
      VF_KEY(std::uint64_t, "phantom.seed", "dataset seed", "", V{"seed"}, c.phantom.seed),
      // dataset
      VF_KEY(int, "dataset.subjects", "number of phantoms", "", V{"subjects"}, c.subjects),
      VF_KEY(double, "dataset.control_fraction", "share of aneurysm-free subjects", "", V{}, c.dataset.control_fraction),
      VF_KEY(int, "dataset.min_aneurysms", "fewest aneurysms in a non-control subject", "", V{}, c.dataset.min_aneurysms),
      VF_KEY(int, "dataset.max_aneurysms", "most aneurysms in a non-control subject", "", V{}, c.dataset.max_aneurysms),
      VF_KEY(double, "dataset.test_fraction", "share of subjects held out for testing", "", V{}, c.dataset.test_fraction),
      VF_KEY(double, "dataset.val_fraction", "share of the remainder used for validation", "", V{}, c.dataset.val_fraction),
  };
  return keys;
}

#undef VF_KEY

inline const Key* find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return &k;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

struct Entry {
  std::string key, value, where;
};

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<Entry>& out, const std::string& src) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out, src);
    return;
  }
  std::string value;
  if (j.is_array()) {
    for (const auto& e : j) value += (value.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
  } else if (j.is_string()) {
    value = j.get<std::string>();
  } else {
    value = j.dump();
  }
  out.push_back({prefix, value, src});
}

}  // namespace detail

// key = value lines, '#' comments, optional [section] headers; a document
// starting with '{' is read as JSON with nested sections.
inline std::vector<Entry> parse_document(const std::string& text, const std::string& source = "<config>") {
  std::vector<Entry> out;
  const std::string t = detail::trim(text);
  if (!t.empty() && t.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(t);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(source + ": invalid JSON: " + e.what());
    }
    detail::flatten(j, "", out, source);
    return out;
  }
  std::istringstream in(text);
  std::string line, section;
  std::vector<std::string> bad;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(n);
    if (line.front() == '[' && line.back() == ']') {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bad.push_back(where + ": expected key = value");
      continue;
    }
    std::string key = detail::trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    out.push_back({key, detail::trim(line.substr(eq + 1)), where});
  }
  if (!bad.empty()) {
    std::string msg = "malformed config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open config " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Applies entries in order, collecting unknown keys and type mismatches.
inline void apply(RunConfig& c, const std::vector<Entry>& entries, std::vector<std::string>& errors) {
  for (const auto& e : entries) {
    const Key* k = find_key(e.key);
    if (!k) {
      errors.push_back(e.where + ": unknown key '" + e.key + "'");
      continue;
    }
    try {
      k->set(c, e.value);
    } catch (const detail::BadValue& b) {
      errors.push_back(e.where + ": " + e.key + " expects " + b.expected + ", got '" + e.value + "'");
    }
  }
}

inline std::vector<std::string> range_errors(const RunConfig& c) {
  std::vector<std::string> errors;
  const auto check = [&](const std::function<void()>& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  };
  check([&] { c.exp.model.validate(); });
  check([&] { c.exp.loss.validate(); });
  check([&] { c.exp.train.validate(); });
  check([&] { c.exp.data.validate(); });
  check([&] { c.exp.infer.validate(); });
  check([&] { c.phantom.validate(); });
  check([&] { c.dataset.validate(); });
  if (c.subjects < 1) errors.push_back("dataset.subjects must be >= 1");
  return errors;
}

inline void throw_if(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                    (errors.size() > 1 ? "s" : "") + "):";
  for (const auto& e : errors) msg += " " + e + ";";
  throw ConfigError(msg);
}

// Layers defaults <- file <- overrides, then validates everything at once.
inline RunConfig build_config(const std::optional<std::filesystem::path>& file, const std::vector<Entry>& overrides) {
  RunConfig c;
  std::vector<std::string> errors;
  if (file) apply(c, parse_document(read_text(*file), file->string()), errors);
  apply(c, overrides, errors);
  for (auto& e : range_errors(c)) errors.push_back(std::move(e));
  throw_if(errors);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) { return build_config(path, {}); }

inline RunConfig config_from_text(const std::string& text) {
  RunConfig c;
  std::vector<std::string> errors;
  apply(c, parse_document(text), errors);
  for (auto& e : range_errors(c)) errors.push_back(std::move(e));
  throw_if(errors);
  return c;
}

// Every key with its effective value, loadable by load_config.
inline std::string snapshot(const RunConfig& c, const std::string& command = "") {
  std::string out = "# vesselforge effective configuration\n";
  if (!command.empty()) out += "# command: " + command + "\n";
  std::string section;
  for (const auto& k : registry()) {
    if (k.section() != section) {
      section = k.section();
      out += "\n[" + section + "]\n";
    }
    out += k.name.substr(section.size() + 1) + " = " + k.get(c) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace detail {

struct OutDir {
  std::filesystem::path root;
  std::filesystem::path logs() const { return root / "logs"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

inline OutDir prepare_out(const std::filesystem::path& root, const RunConfig& c, const std::string& command) {
  OutDir d{root};
  for (const auto& p : {d.root, d.logs(), d.checkpoints(), d.reports()}) std::filesystem::create_directories(p);
  std::ofstream(d.root / "config.snapshot") << snapshot(c, command);
  return d;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

inline Manifest open_manifest(const std::filesystem::path& p) {
  return load_manifest(std::filesystem::is_directory(p) ? p / "manifest.json" : p);
}

inline std::string join_args(const std::vector<std::string>& args) {
  std::string s = "vesselforge";
  for (const auto& a : args) s += " " + a;
  return s;
}

}  // namespace detail

// Sections whose keys each subcommand exposes as flags.
inline std::vector<std::string> sections_for(const std::string& cmd) {
  if (cmd == "phantom") return {"phantom", "dataset"};
  if (cmd == "vesselness") return {"vesselness"};
  if (cmd == "patches") return {"model", "data", "vesselness", "train"};
  if (cmd == "infer") return {"infer", "vesselness"};
  if (cmd == "evaluate") return {"infer", "data", "vesselness"};
  return {"model", "loss", "train", "data", "vesselness", "infer"};  // train, ablate
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline std::string error_line(const std::string& kind, const std::string& message, int code) {
  return nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump();
}

// Runs one command line (without the program name). Returns the exit code:
// 0 success, 1 usage or validation error, 2 runtime failure.
inline int dispatch(const std::vector<std::string>& args, Streams io = {std::cout, std::cerr}) {
  CLI::App app{"Vesselness-guided aneurysm detection and segmentation toolkit", "vesselforge"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  struct Common {
    std::optional<std::string> config;
    std::vector<std::string> sets;
    int threads = 0;
    std::map<std::string, std::string> flags;  // key -> raw value
    std::map<std::string, CLI::Option*> opts;
  };
  std::map<std::string, Common> common;
  std::map<std::string, std::string> paths;  // "<cmd>.<flag>" -> value

  const auto add_common = [&](CLI::App* sub) {
    auto& c = common[sub->get_name()];
    sub->add_option("--config", c.config, "key=value or JSON config file");
    sub->add_option("--set", c.sets, "override one key, e.g. --set loss.phi=0.3 (repeatable)");
    sub->add_option("--threads", c.threads, "worker threads; falls back to VESSELFORGE_THREADS")
        ->check(CLI::NonNegativeNumber);
    const RunConfig defaults;
    for (const auto& section : sections_for(sub->get_name()))
      for (const auto& k : registry()) {
        if (k.section() != section) continue;
        std::string names = "--" + k.name;
        for (const auto& a : k.aliases) names += ",--" + a;
        std::string desc = k.help + " [default: " + k.get(defaults) + "]";
        if (!k.reference.empty()) desc += " [reference: " + k.reference + "]";
        c.opts[k.name] = sub->add_option(names, c.flags[k.name], desc);
      }
  };
  const auto path_opt = [&](CLI::App* sub, const std::string& flag, const std::string& desc, bool required) {
    auto* o = sub->add_option("--" + flag, paths[sub->get_name() + "." + flag], desc);
    if (required) o->required();
    return o;
  };

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset with manifest");
  add_common(phantom);
  path_opt(phantom, "out", "output directory", true);

  auto* vessel = app.add_subcommand("vesselness", "compute the vesselness map of a NIfTI volume");
  add_common(vessel);
  path_opt(vessel, "in", "input NIfTI image", true);
  path_opt(vessel, "out", "output NIfTI map", true);

  auto* patches = app.add_subcommand("patches", "extract training patches from a manifest split");
  add_common(patches);
  path_opt(patches, "manifest", "manifest.json or its directory", true);
  path_opt(patches, "out", "output directory", true);
  paths["patches.split"] = "train";
  path_opt(patches, "split", "train | val | test", false)->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest");
  add_common(train_cmd);
  path_opt(train_cmd, "manifest", "manifest.json or its directory", true);
  path_opt(train_cmd, "out", "output directory", true);

  auto* infer = app.add_subcommand("infer", "segment one volume with a trained checkpoint");
  add_common(infer);
  path_opt(infer, "checkpoint", "checkpoint prefix (without .json/.bin)", true);
  path_opt(infer, "in", "input NIfTI image", true);
  path_opt(infer, "out", "output directory", true);
  path_opt(infer, "id", "subject id used in output names", false);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a manifest split");
  add_common(evaluate);
  path_opt(evaluate, "checkpoint", "checkpoint prefix", true);
  path_opt(evaluate, "manifest", "manifest.json or its directory", true);
  path_opt(evaluate, "out", "output directory", true);
  paths["evaluate.split"] = "test";
  path_opt(evaluate, "split", "train | val | test", false)->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "train and compare model variants");
  add_common(ablate);
  path_opt(ablate, "manifest", "manifest.json or its directory", true);
  path_opt(ablate, "out", "output directory", true);
  paths["ablate.variants"] = "vessel_encoder_only,vessel_attblock_only,no_tta,full";
  path_opt(ablate, "variants", "comma-separated variant names", false)->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    io.out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    io.err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    io.err << error_line("usage", e.what(), 1) << "\n";
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  auto& com = common[cmd];
  const auto path = [&](const std::string& flag) { return paths[cmd + "." + flag]; };

  try {
    std::vector<Entry> overrides;
    for (const auto& s : com.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides.push_back({detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)), "--set"});
    }
    for (const auto& [key, opt] : com.opts)
      if (opt->count()) overrides.push_back({key, com.flags[key], "--" + key});
    std::optional<std::filesystem::path> file;
    if (com.config) file = *com.config;
    const RunConfig cfg = build_config(file, overrides);

    int threads = com.threads;
    if (threads == 0)
      if (const char* env = std::getenv("VESSELFORGE_THREADS")) {
        try {
          threads = detail::parse_number<int>(env, "integer");
        } catch (const detail::BadValue&) {
          throw ConfigError("VESSELFORGE_THREADS must be an integer, got '" + std::string(env) + "'");
        }
      }
    if (threads > 0) set_num_threads(threads);
    const std::string command = detail::join_args(args);

    if (cmd == "phantom") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      const auto m = make_dataset(cfg.subjects, cfg.phantom, out.root, cfg.dataset);
      io.out << "wrote " << m.subjects.size() << " subjects to " << out.root.string() << "\n";
    } else if (cmd == "vesselness") {
      const std::filesystem::path out = path("out");
      if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
      const auto image = nifti::read_volume(path("in"));
      nifti::write_volume(vesselness_map(image, cfg.exp.data.vesselness), out);
      detail::write_text(out.parent_path() / "config.snapshot", snapshot(cfg, command));
      io.out << "wrote " << out.string() << "\n";
    } else if (cmd == "patches") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      const auto m = detail::open_manifest(path("manifest"));
      const auto subjects = load_split(m, path("split"), cfg.exp.data);
      if (subjects.empty()) throw ConfigError("split '" + path("split") + "' is empty");
      std::size_t skipped = 0;
      const auto set = build_patches(subjects, cfg.exp.model.patch_size, cfg.exp.data, cfg.exp.train.seed, &skipped);
      std::filesystem::create_directories(out.root / "patches");
      nlohmann::json index = nlohmann::json::array();
      std::size_t positives = 0;
      for (std::size_t i = 0; i < set.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "patch_%05zu.vfp", i);
        write_patch_blob(set[i], out.root / "patches" / name);
        positives += set[i].is_positive;
        index.push_back({{"file", std::string("patches/") + name},
                         {"subject", set[i].subject_id},
                         {"positive", set[i].is_positive},
                         {"center", set[i].center}});
      }
      save_json(index, out.root / "patches" / "index.json");
      save_json({{"patches", set.size()}, {"positive", positives}, {"skipped", skipped}},
                out.reports() / "patches.json");
      if (skipped) io.err << error_line("warning", std::to_string(skipped) + " requested patches skipped", 0) << "\n";
      io.out << "wrote " << set.size() << " patches (" << positives << " positive)\n";
    } else if (cmd == "train") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      const auto data = prepare_data(detail::open_manifest(path("manifest")), cfg.exp);
      TrainOutputs outs;
      outs.log_csv = out.logs() / "train.csv";
      outs.checkpoint = out.checkpoints() / "best";
      outs.on_epoch = [&](const LogRow& r) {
        io.out << "epoch " << r.epoch << " train " << r.terms.total << " val " << r.val_total.value_or(0) << " lr "
               << r.lr << "\n";
      };
      const auto res = train(data.train_patches, data.val_patches, cfg.exp.model, cfg.exp.loss, cfg.exp.train,
                             cfg.exp.data, outs);
      save_json({{"stop_reason", res.stop_reason},
                 {"epochs_run", res.epochs_run},
                 {"best_epoch", res.best_epoch},
                 {"best_val", res.best_val},
                 {"checkpoint_hash", hex64(params_hash(res.params))},
                 {"diagnostic", res.diagnostic},
                 {"train_patches", data.train_patches.size()},
                 {"val_patches", data.val_patches.size()}},
                out.reports() / "train_summary.json");
      io.out << "stopped: " << res.stop_reason << " after " << res.epochs_run << " epochs\n";
      if (res.stop_reason == "non_finite") {
        io.err << error_line("numeric", res.diagnostic, 2) << "\n";
        return 2;
      }
    } else if (cmd == "infer") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      auto ck = net::load_checkpoint(path("checkpoint"));
      const auto image = nifti::read_volume(path("in"));
      const std::string id = path("id").empty() ? std::filesystem::path(path("in")).stem().string() : path("id");
      const auto r = infer_subject(image, ck.params, ck.config, cfg.exp.infer, cfg.exp.data.vesselness, id);
      nifti::write_volume(r.mask, out.reports() / (id + "_mask.nii"));
      nifti::write_volume(r.prob, out.reports() / (id + "_prob.nii"));
      nlohmann::json dets = nlohmann::json::array(), logs = nlohmann::json::array();
      for (const auto& d : r.detections)
        dets.push_back({{"label", d.label}, {"voxels", d.voxels}, {"centroid", d.centroid}});
      for (const auto& p : r.patches) logs.push_back({{"center", p.center}, {"cls_prob", p.cls_prob}, {"used", p.used}});
      save_json({{"subject", id}, {"detections", dets}, {"patches", logs}, {"warnings", r.warnings}},
                out.reports() / (id + "_detections.json"));
      for (const auto& w : r.warnings) io.err << error_line("warning", w, 0) << "\n";
      io.out << id << ": " << r.detections.size() << " detections\n";
    } else if (cmd == "evaluate") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      auto ck = net::load_checkpoint(path("checkpoint"));
      const auto subjects = load_split(detail::open_manifest(path("manifest")), path("split"), cfg.exp.data);
      const auto run = evaluate_subjects(subjects, ck.params, ck.config, cfg.exp.infer);
      detail::write_text(out.reports() / "evaluation.csv", eval::to_csv(run.report));
      save_json(eval::to_json(run.report), out.reports() / "evaluation.json");
      for (std::size_t i = 0; i < subjects.size(); ++i) {
        nifti::write_volume(run.predictions[i].mask, out.reports() / (subjects[i].id + "_mask.nii"));
        for (const auto& w : run.predictions[i].warnings) io.err << error_line("warning", w, 0) << "\n";
      }
      const auto& rep = run.report;
      io.out << "FP rate " << eval::format_pm(rep.fp_rate) << "  sensitivity " << eval::format_pm(rep.sensitivity)
             << "  Dice " << eval::format_pm(rep.dice) << "  IoU " << eval::format_pm(rep.iou) << "  HD95 "
             << eval::format_pm(rep.hd95_mm) << " mm\n";
    } else if (cmd == "ablate") {
      const auto out = detail::prepare_out(path("out"), cfg, command);
      const auto variants = detail::split_list(path("variants"));
      for (const auto& v : variants) ablation_spec(v);
      const auto data = prepare_data(detail::open_manifest(path("manifest")), cfg.exp);
      const auto table =
          run_ablation(data, variants, cfg.exp, out.root, [&](const std::string& s) { io.out << s << "\n"; });
      io.out << table.to_text();
    }
    return 0;
  } catch (const ConfigError& e) {
    io.err << error_line(e.kind(), e.what(), 1) << "\n";
    return 1;
  } catch (const Error& e) {
    io.err << error_line(e.kind(), e.what(), 2) << "\n";
    return 2;
  } catch (const std::exception& e) {
    io.err << error_line("runtime", e.what(), 2) << "\n";
    return 2;
  }
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args);
}

}  // namespace vesselforge::cli
