#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodiff.hpp"
#include "core.hpp"

namespace vesselforge {

// Where the vesselness stream enters the model.
enum class Variant {
  full,                  // shared encoder on both streams + top-level attention gate
  vessel_encoder_only,   // shared encoder, plain top skip (no gate)
  vessel_attblock_only,  // vesselness only feeds the gate through a single conv stem
};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::vessel_encoder_only: return "vessel_encoder_only";
    case Variant::vessel_attblock_only: return "vessel_attblock_only";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::full, Variant::vessel_encoder_only, Variant::vessel_attblock_only})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  int depth = 4;
  std::vector<int> widths{16, 32, 64, 128, 256};
  int patch_size = 64;
  double leaky_slope = 0.01;
  double dropout_rate = 0.2;
  int seg_classes = 2;
  double norm_epsilon = 1e-5;
  int cls_hidden = 64;
  int attention_channels = 0;  // 0: half the top decoder width
  Variant variant = Variant::full;

  int att_channels() const { return attention_channels > 0 ? attention_channels : std::max(1, widths.at(0) / 2); }

  void validate() const {
    std::vector<std::string> bad;
    if (depth < 1) bad.push_back("depth must be >= 1");
    if (static_cast<int>(widths.size()) != depth + 1) bad.push_back("widths must have depth+1 entries");
    for (int w : widths)
      if (w < 1) bad.push_back("widths must be positive");
    if (patch_size < 1 || depth < 1 || depth > 30 || patch_size % (1 << std::min(depth, 30)) != 0)
      bad.push_back("patch_size must be divisible by 2^depth");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) bad.push_back("leaky_slope must be in [0,1)");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) bad.push_back("dropout_rate must be in [0,1)");
    if (seg_classes != 2) bad.push_back("seg_classes must be 2");
    if (!(norm_epsilon > 0.0)) bad.push_back("norm_epsilon must be > 0");
    if (cls_hidden < 1) bad.push_back("cls_hidden must be >= 1");
    if (attention_channels < 0) bad.push_back("attention_channels must be >= 0");
    if (!bad.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ConfigError(msg);
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"depth", c.depth},
          {"widths", c.widths},
          {"patch_size", c.patch_size},
          {"leaky_slope", c.leaky_slope},
          {"dropout_rate", c.dropout_rate},
          {"seg_classes", c.seg_classes},
          {"norm_epsilon", c.norm_epsilon},
          {"cls_hidden", c.cls_hidden},
          {"attention_channels", c.attention_channels},
          {"variant", to_string(c.variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.depth = j.at("depth").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.patch_size = j.at("patch_size").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.seg_classes = j.at("seg_classes").get<int>();
  c.norm_epsilon = j.at("norm_epsilon").get<double>();
  c.cls_hidden = j.at("cls_hidden").get<int>();
  c.attention_channels = j.at("attention_channels").get<int>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.validate();
  return c;
}

namespace net {

using ad::Graph;
using ad::ParamStore;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace detail {

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, int co, int ci, int k, bool bias) {
  ps.add(name + ".w", {co, ci, k, k, k});
  if (bias) ps.add(name + ".b", {co});
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, int c) {
  ps.add(name + ".g", {c});
  ps.add(name + ".b", {c});
}

template <typename T>
void add_block(ParamStore<T>& ps, const std::string& name, int ci, int co) {
  add_conv(ps, name + ".conv1", co, ci, 3, false);
  add_norm(ps, name + ".norm1", co);
  add_conv(ps, name + ".conv2", co, co, 3, false);
  add_norm(ps, name + ".norm2", co);
}

}  // namespace detail

// Builds the parameter set for cfg. Convolutions followed by instance norm
// carry no bias (the norm would cancel it).
template <typename T>
ParamStore<T> make_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore<T> ps;
  const auto& w = cfg.widths;
  const int d = cfg.depth;
  for (int l = 0; l < d; ++l) detail::add_block(ps, "enc" + std::to_string(l), l == 0 ? 1 : w[l - 1], w[l]);
  detail::add_block(ps, "bottleneck", w[d - 1], w[d]);
  for (int l = d - 1; l >= 0; --l) {
    const std::string n = "dec" + std::to_string(l);
    ps.add(n + ".up.w", {w[l + 1], w[l], 2, 2, 2});
    ps.add(n + ".up.b", {w[l]});
    detail::add_block(ps, n, 2 * w[l], w[l]);
  }
  if (cfg.variant == Variant::vessel_attblock_only) {
    detail::add_conv(ps, "vstem.conv", w[0], 1, 3, false);
    detail::add_norm(ps, "vstem.norm", w[0]);
  }
  if (cfg.variant != Variant::vessel_encoder_only) {
    const int a = cfg.att_channels();
    for (const char* path : {"img", "ves", "gate"}) {
      detail::add_conv(ps, std::string("att.") + path, a, w[0], 1, false);
      detail::add_norm(ps, std::string("att.") + path + "_norm", a);
    }
    detail::add_conv(ps, "att.psi", 1, a, 1, false);
    detail::add_norm(ps, "att.psi_norm", 1);
  }
  detail::add_conv(ps, "seg", cfg.seg_classes, w[0], 3, true);
  ps.add("cls.fc1.w", {cfg.cls_hidden, w[d] + w[0]});
  ps.add("cls.fc1.b", {cfg.cls_hidden});
  ps.add("cls.fc2.w", {1, cfg.cls_hidden});
  ps.add("cls.fc2.b", {1});
  return ps;
}

// Kaiming-uniform (fan-in, leaky gain) weights, U(+-1/sqrt(fan_in)) biases,
// unit scale and zero shift for norms.
template <typename T>
void init_params(ParamStore<T>& ps, const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x1417));
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  std::map<std::string, int> fan_in;
  for (auto& p : ps) {
    const auto& s = p.value.shape;
    const auto ends_with = [&](const char* suf) {
      const std::string x(suf);
      return p.name.size() >= x.size() && p.name.compare(p.name.size() - x.size(), x.size(), x) == 0;
    };
    const bool is_norm = p.name.find("norm") != std::string::npos;
    if (is_norm) {
      std::fill(p.value.data.begin(), p.value.data.end(), ends_with(".g") ? T(1) : T(0));
      continue;
    }
    const std::string stem = p.name.substr(0, p.name.rfind('.'));
    if (ends_with(".w")) {
      // Transposed kernels are [Ci, Co, 2, 2, 2]; each output voxel sees Ci inputs.
      int fi = 1;
      if (p.name.find(".up.") != std::string::npos)
        fi = s[0];
      else
        for (std::size_t i = 1; i < s.size(); ++i) fi *= s[i];
      fan_in[stem] = fi;
      const double bound = gain * std::sqrt(3.0 / fi);
      for (auto& v : p.value.data) v = static_cast<T>(rng.uniform(-bound, bound));
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in.count(stem) ? fan_in[stem] : 1));
      for (auto& v : p.value.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  }
}

template <typename T>
ParamStore<T> make_initialized(const ModelConfig& cfg, std::uint64_t seed) {
  auto ps = make_params<T>(cfg);
  init_params(ps, cfg, seed);
  return ps;
}

// Binds each parameter into the graph at most once, so both encoder passes
// read the same node and their gradients sum.
template <typename T>
class Binder {
 public:
  Binder(Graph<T>& g, ParamStore<T>& ps) : g_(g), ps_(ps) {}
  Var operator()(const std::string& name) {
    const auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = g_.parameter(ps_.at(name));
    vars_.emplace(name, v);
    return v;
  }
  Graph<T>& graph() { return g_; }

 private:
  Graph<T>& g_;
  ParamStore<T>& ps_;
  std::map<std::string, Var> vars_;
};

template <typename T>
Var conv_norm(Binder<T>& b, Var x, const std::string& conv, const std::string& norm, int pad, double eps) {
  auto& g = b.graph();
  Var y = ad::conv3d(g, x, b(conv + ".w"), Var{}, pad, conv);
  return ad::instance_norm(g, y, b(norm + ".g"), b(norm + ".b"), eps);
}

template <typename T>
Var conv_block(Binder<T>& b, Var x, const std::string& name, const ModelConfig& cfg) {
  auto& g = b.graph();
  Var y = ad::leaky_relu(g, conv_norm(b, x, name + ".conv1", name + ".norm1", 1, cfg.norm_epsilon), cfg.leaky_slope);
  return ad::leaky_relu(g, conv_norm(b, y, name + ".conv2", name + ".norm2", 1, cfg.norm_epsilon), cfg.leaky_slope);
}

struct Pyramid {
  std::vector<Var> skips;  // one per level, finest first
  Var bottleneck;
};

template <typename T>
Pyramid encode(Binder<T>& b, Var x, const ModelConfig& cfg) {
  Pyramid p;
  for (int l = 0; l < cfg.depth; ++l) {
    x = conv_block(b, x, "enc" + std::to_string(l), cfg);
    p.skips.push_back(x);
    x = ad::max_pool2(b.graph(), x);
  }
  p.bottleneck = conv_block(b, x, "bottleneck", cfg);
  return p;
}

struct GateOut {
  Var gated;
  Var att_map;
};

// Three 1x1x1 conv+norm paths summed, then 1x1x1 conv+norm+sigmoid to a
// single-channel map that scales enc_img.
template <typename T>
GateOut attention_gate(Binder<T>& b, Var enc_img, Var enc_ves, Var gating, const ModelConfig& cfg) {
  auto& g = b.graph();
  const Shape si = g.shape(enc_img), sv = g.shape(enc_ves), sg = g.shape(gating);
  const bool ok = si.size() == 5 && sv.size() == 5 && sg.size() == 5 && std::equal(si.begin() + 2, si.end(), sv.begin() + 2) &&
                  std::equal(si.begin() + 2, si.end(), sg.begin() + 2) && si[0] == sv[0] && si[0] == sg[0];
  if (!ok)
    throw ShapeError("attention_gate: spatial mismatch " + ad::shape_str(si) + ", " + ad::shape_str(sv) + ", " +
                     ad::shape_str(sg));
  const double eps = cfg.norm_epsilon;
  Var s = ad::add(g, conv_norm(b, enc_img, "att.img", "att.img_norm", 0, eps),
                  conv_norm(b, enc_ves, "att.ves", "att.ves_norm", 0, eps));
  s = ad::add(g, s, conv_norm(b, gating, "att.gate", "att.gate_norm", 0, eps));
  Var att = ad::sigmoid(g, conv_norm(b, s, "att.psi", "att.psi_norm", 0, eps));
  return {ad::mul_channels(g, enc_img, att), att};
}

struct Outputs {
  Var seg;  // [N, 2, S, S, S] logits
  Var cls;  // [N, 1] logit
  Var att;  // [N, 1, S, S, S] or invalid when the variant has no gate
};

// image, vessel: [N, 1, S, S, S]. `rng` drives dropout and is only read when
// train is true.
template <typename T>
Outputs forward(Graph<T>& g, ParamStore<T>& ps, Var image, Var vessel, const ModelConfig& cfg, bool train, Rng* rng) {
  const Shape si = g.shape(image);
  const int S = cfg.patch_size;
  if (si.size() != 5 || si[1] != 1 || si[2] != S || si[3] != S || si[4] != S || g.shape(vessel) != si)
    throw ShapeError("forward: expected image and vessel [N,1," + std::to_string(S) + "," + std::to_string(S) + "," +
                     std::to_string(S) + "], got " + ad::shape_str(si) + " and " + ad::shape_str(g.shape(vessel)));
  if (train && cfg.dropout_rate > 0.0 && rng == nullptr) throw ConfigError("forward: training dropout needs an rng");
  Binder<T> b(g, ps);
  Pyramid img = encode(b, image, cfg);

  Var ves_top, ves_global;
  if (cfg.variant == Variant::vessel_attblock_only) {
    ves_top = ad::leaky_relu(g, conv_norm(b, vessel, "vstem.conv", "vstem.norm", 1, cfg.norm_epsilon), cfg.leaky_slope);
    ves_global = img.bottleneck;
  } else {
    Pyramid ves = encode(b, vessel, cfg);
    ves_top = ves.skips[0];
    ves_global = ves.bottleneck;
  }

  Outputs out;
  Var x = img.bottleneck;
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string n = "dec" + std::to_string(l);
    Var up = ad::conv_transpose3d(g, x, b(n + ".up.w"), b(n + ".up.b"), n + ".up");
    Var skip = img.skips[l];
    if (l == 0 && cfg.variant != Variant::vessel_encoder_only) {
      auto gate = attention_gate(b, skip, ves_top, up, cfg);
      skip = gate.gated;
      out.att = gate.att_map;
    }
    x = conv_block(b, ad::concat(g, skip, up), n, cfg);
  }
  out.seg = ad::conv3d(g, x, b("seg.w"), b("seg.b"), 1, "seg");

  Var feat = ad::concat(g, ad::global_avg_pool(g, ves_global), ad::global_avg_pool(g, x));
  Rng dummy(0);
  feat = ad::dropout(g, feat, cfg.dropout_rate, train, rng ? *rng : dummy);
  Var h = ad::relu(g, ad::linear(g, feat, b("cls.fc1.w"), b("cls.fc1.b"), "cls.fc1"));
  out.cls = ad::linear(g, h, b("cls.fc2.w"), b("cls.fc2.b"), "cls.fc2");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.json manifest + <prefix>.bin little-endian float32.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& prefix, const ParamStore<T>& ps, const ModelConfig& cfg,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  nlohmann::json man{{"format_version", kCheckpointVersion}, {"dtype", "float32"}, {"config", to_json(cfg)}};
  if (!extra.empty()) man["extra"] = extra;
  nlohmann::json entries = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto& p : ps) {
    entries.push_back({{"name", p.name},
                       {"shape", p.value.shape},
                       {"offset", blob.size() * sizeof(float)},
                       {"count", p.value.numel()}});
    for (T v : p.value.data) blob.push_back(static_cast<float>(v));
  }
  man["params"] = entries;
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  const auto json_path = std::filesystem::path(prefix.string() + ".json");
  const auto bin_path = std::filesystem::path(prefix.string() + ".bin");
  std::ofstream(json_path) << man.dump(2) << "\n";
  std::ofstream bin(bin_path, std::ios::binary);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!bin) throw IoError("failed writing " + bin_path.string());
}

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
  nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& prefix) {
  const auto json_path = std::filesystem::path(prefix.string() + ".json");
  const auto bin_path = std::filesystem::path(prefix.string() + ".bin");
  std::ifstream jf(json_path);
  if (!jf) throw IoError("cannot open " + json_path.string());
  nlohmann::json man;
  try {
    jf >> man;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what(), 0);
  }
  if (man.value("format_version", 0) != kCheckpointVersion || man.value("dtype", "") != "float32")
    throw FormatError(json_path.string() + ": unsupported checkpoint version or dtype", 0);
  Checkpoint ck{model_config_from_json(man.at("config")), {}, man.value("extra", nlohmann::json::object())};
  ck.params = make_params<float>(ck.config);

  std::ifstream bf(bin_path, std::ios::binary);
  if (!bf) throw IoError("cannot open " + bin_path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::size_t seen = 0;
  for (const auto& e : man.at("params")) {
    const auto name = e.at("name").get<std::string>();
    if (!ck.params.contains(name)) throw ShapeError("checkpoint parameter '" + name + "' is not part of the model");
    auto& p = ck.params.at(name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != p.value.shape)
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + ad::shape_str(shape) + ", model expects " +
                       ad::shape_str(p.value.shape));
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (count != p.value.numel() || offset + count * sizeof(float) > raw.size())
      throw SizeMismatchError("checkpoint blob too short for '" + name + "'");
    std::memcpy(p.value.data.data(), raw.data() + offset, count * sizeof(float));
    ++seen;
  }
  if (seen != ck.params.size()) throw ShapeError("checkpoint is missing parameters");
  return ck;
}

}  // namespace net
}  // namespace vesselforge
